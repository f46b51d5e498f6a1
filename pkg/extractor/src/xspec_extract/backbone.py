"""Truncated VGG16 backbone producing 256-channel feature maps.

The network is cut after the third convolution of the third block (index 15
of torchvision's feature stack, the ReLU following that conv); with
pool_after=True the block's max-pool is kept as well, so the spatial grid is
input/8 instead of input/4. Channels are 256 at this depth either way.

Weights come from a user-supplied state-dict file. Without one the filters
fall back to a seeded, numpy-driven random initialization: deterministic
across runs and library versions, which keeps extraction reproducible even
where pretrained weights cannot be fetched.
"""

import numpy as np
import torch
from torch import nn
from torchvision.models import vgg16

from .errors import WeightsMissing

CONV3_3_RELU_END = 16  # features[:16] ends with the ReLU after block3-conv3
BLOCK3_POOL_END = 17  # features[:17] appends the block3 max-pool (spatial /8)
OUT_CHANNELS = 256


def _seeded_init(model: nn.Sequential, seed: int) -> None:
    """He-style normal init with a numpy generator, identical on every run."""
    rng = np.random.default_rng(seed)
    for layer in model:
        if not isinstance(layer, nn.Conv2d):
            continue
        fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
        std = float(np.sqrt(2.0 / fan_in))
        w = rng.standard_normal(tuple(layer.weight.shape)) * std
        layer.weight.data = torch.from_numpy(w.astype(np.float32))
        layer.bias.data = torch.zeros(layer.out_channels, dtype=torch.float32)


def _load_weights(model: nn.Sequential, path) -> None:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsMissing(f"cannot load weights from {path}: {exc}") from exc
    if not isinstance(state, dict):
        raise WeightsMissing(f"{path}: expected a state dict, got {type(state).__name__}")
    # accept either a full-network dict ("features.0.weight") or one saved
    # from the truncated stack itself ("0.weight")
    cleaned = {}
    for key, value in state.items():
        cleaned[key.removeprefix("features.")] = value
    expected = set(model.state_dict().keys())
    missing = expected - set(cleaned.keys())
    if missing:
        raise WeightsMissing(f"{path}: missing parameters {sorted(missing)[:4]}...")
    try:
        model.load_state_dict({k: cleaned[k] for k in expected}, strict=True)
    except Exception as exc:
        raise WeightsMissing(f"{path}: shape mismatch: {exc}") from exc


def build_backbone(pool_after: bool = True, weights=None, seed: int = 0) -> nn.Sequential:
    """Frozen eval-mode feature stack; forward maps (B,3,H,W) -> (B,256,H',W')."""
    end = BLOCK3_POOL_END if pool_after else CONV3_3_RELU_END
    model = vgg16(weights=None).features[:end]
    if weights is not None:
        _load_weights(model, weights)
    else:
        _seeded_init(model, seed)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def grid_shape(resize_hw: tuple, pool_after: bool) -> tuple:
    """Spatial output grid for an input of (H, W); floor division per pool."""
    h, w = resize_hw
    div = 8 if pool_after else 4
    return h // div, w // div
