"""Image discovery, pre-processing, and batched feature extraction.

Input layout: either a flat directory of images (samples carry no identity,
true_label=-1) or one numeric subdirectory per identity, whose name becomes
the label of every image inside. Images are decoded with Pillow, converted
to RGB (single-channel inputs are replicated across the three channels),
bilinearly resized, scaled to [0,1], and standardized with the usual
ImageNet statistics for both spectra.

Output is an XSFT dataset directory in the primary package's format; when
the output already holds a dataset, freshly extracted samples are appended
with new sample ids and the manifest is rewritten.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from xspec.feature_store import Dataset, Domain, FeatureMap, load_dataset, write_dataset

from .backbone import OUT_CHANNELS, build_backbone, grid_shape
from .errors import InvalidConfigError, NoImagesFound, UnreadableImage

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ExtractConfig:
    input_dir: str
    domain: Domain
    out_dir: str
    resize: tuple = (128, 64)  # (H, W)
    pool_after: bool = True
    weights: str | None = None
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        h, w = self.resize
        if h < 1 or w < 1:
            raise InvalidConfigError(f"resize must be positive, got {self.resize}")
        gh, gw = grid_shape(self.resize, self.pool_after)
        if gh < 1 or gw < 1:
            raise InvalidConfigError(
                f"resize {h}x{w} collapses to an empty grid after pooling"
            )
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be positive")


def discover_images(input_dir) -> list:
    """Sorted (path, label) pairs; numeric subdirectory names become labels."""
    root = Path(input_dir)
    if not root.is_dir():
        raise NoImagesFound(f"{root} is not a directory")
    found = []
    for path in sorted(root.rglob("*")):
        if not (path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES):
            continue
        rel = path.relative_to(root)
        label = -1
        if len(rel.parts) > 1 and rel.parts[0].isdigit():
            label = int(rel.parts[0])
        found.append((path, label))
    if not found:
        raise NoImagesFound(f"no image files under {root}")
    return found


def load_image(path, resize_hw: tuple) -> np.ndarray:
    """Decode, resize, normalize; returns float32 CHW."""
    h, w = resize_hw
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((w, h), Image.BILINEAR)
    except Exception as exc:
        raise UnreadableImage(f"cannot decode {path}: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _forward_batch(model, chw_stack: np.ndarray) -> np.ndarray:
    """(B,3,H,W) -> (B,P,C) with patches in row-major grid order."""
    with torch.no_grad():
        out = model(torch.from_numpy(chw_stack))
    b, c, gh, gw = out.shape
    return out.permute(0, 2, 3, 1).reshape(b, gh * gw, c).numpy().astype(np.float32)


def extract(cfg: ExtractConfig) -> Path:
    """Run the backbone over every discovered image; returns the manifest path."""
    images = discover_images(cfg.input_dir)
    model = build_backbone(cfg.pool_after, cfg.weights, cfg.seed)

    out = Path(cfg.out_dir)
    existing = None
    if (out / "manifest.json").exists():
        existing = load_dataset(out)
    next_id = 0
    if existing is not None and (existing.rgb or existing.ir):
        next_id = max(fm.sample_id for fm in existing.all_samples()) + 1

    new_maps = []
    for start in range(0, len(images), cfg.batch_size):
        chunk = images[start : start + cfg.batch_size]
        stack = np.stack([load_image(p, cfg.resize) for p, _ in chunk])
        feats = _forward_batch(model, stack)
        for offset, (_, label) in enumerate(chunk):
            new_maps.append(
                FeatureMap(
                    sample_id=next_id + start + offset,
                    domain=cfg.domain,
                    data=feats[offset],
                    true_label=label,
                )
            )

    rgb = list(existing.rgb) if existing else []
    ir = list(existing.ir) if existing else []
    (rgb if cfg.domain is Domain.RGB else ir).extend(new_maps)
    metadata = dict(existing.metadata) if existing else {}
    metadata["extractor"] = {
        "resize": list(cfg.resize),
        "pool_after": cfg.pool_after,
        "channels": OUT_CHANNELS,
        "weights": "file" if cfg.weights else f"seeded-random-{cfg.seed}",
    }
    return write_dataset(Dataset(rgb=rgb, ir=ir, metadata=metadata), out)
