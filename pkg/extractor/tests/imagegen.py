"""Deterministic image fixtures for the extractor tests."""

import numpy as np
from PIL import Image


def make_image(path, size_wh=(64, 128), seed=0, mode="RGB"):
    """Deterministic noise image; size is (W, H) in PIL convention."""
    rng = np.random.default_rng(seed)
    w, h = size_wh
    channels = 3 if mode == "RGB" else 1
    arr = rng.integers(0, 256, size=(h, w, channels), dtype=np.uint8)
    img = Image.fromarray(arr.squeeze(), mode=mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def flat_images(tmp_path, n=5):
    """n unlabeled 64x128 images in a flat directory."""
    d = tmp_path / "imgs"
    for i in range(n):
        make_image(d / f"img_{i}.png", seed=i)
    return d


def labeled_images(tmp_path):
    """Two identities (3 and 7) with two images each."""
    d = tmp_path / "byid"
    make_image(d / "3" / "a.png", seed=10)
    make_image(d / "3" / "b.png", seed=11)
    make_image(d / "7" / "a.png", seed=12)
    make_image(d / "7" / "b.png", seed=13)
    return d
