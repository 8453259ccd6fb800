"""Desk-scale image folders cut from the photographs bundled with scikit-image.

Used by the test suite and the quick-start in the README; any folder of
RGB images works with the training and evaluation commands.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# colour photographs shipped inside the scikit-image wheel (no download needed)
TRAIN_SOURCES = ("astronaut", "coffee", "chelsea", "rocket")
HELDOUT_SOURCES = ("immunohistochemistry", "hubble_deep_field", "colorwheel", "motorcycle")


def _load(name: str) -> np.ndarray:
    from skimage import data

    if name == "motorcycle":
        return data.stereo_motorcycle()[0]
    img = getattr(data, name)()
    return img[..., :3]


def source_images(names=TRAIN_SOURCES) -> list[np.ndarray]:
    return [_load(n) for n in names]


def write_patches(
    out_dir: str | Path, n: int, size: int, seed: int = 0, sources=TRAIN_SOURCES, prefix: str = "patch"
) -> list[Path]:
    """Write ``n`` random ``size x size`` crops, spread round-robin over ``sources``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images = source_images(sources)
    paths = []
    for i in range(n):
        img = images[i % len(images)]
        h, w = img.shape[:2]
        top, left = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        path = out / f"{prefix}{i:03d}.png"
        Image.fromarray(np.ascontiguousarray(img[top : top + size, left : left + size])).save(path)
        paths.append(path)
    return paths


def write_sources(out_dir: str | Path, sources=TRAIN_SOURCES) -> list[Path]:
    """Write the full source photographs (for random-crop training)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in zip(sources, source_images(sources)):
        path = out / f"{name}.png"
        Image.fromarray(np.ascontiguousarray(img)).save(path)
        paths.append(path)
    return paths


def write_split(
    train_dir: str | Path,
    heldout_dir: str | Path,
    n_heldout: int,
    size: int,
    seed: int = 0,
    sources=TRAIN_SOURCES,
    train_fraction: float = 0.75,
) -> tuple[list[Path], list[Path]]:
    """Split every photograph by columns: the left part for training, crops of the right part held out.

    The held-out crops never overlap any pixel a training crop can reach.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    train_out, held_out = Path(train_dir), Path(heldout_dir)
    train_out.mkdir(parents=True, exist_ok=True)
    held_out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    images = source_images(sources)
    train_paths, held_paths, strips = [], [], []
    for name, img in zip(sources, images):
        cut = int(img.shape[1] * train_fraction)
        path = train_out / f"{name}.png"
        Image.fromarray(np.ascontiguousarray(img[:, :cut])).save(path)
        train_paths.append(path)
        strips.append((name, img[:, cut:]))
    for i in range(n_heldout):
        name, strip = strips[i % len(strips)]
        h, w = strip.shape[:2]
        if min(h, w) < size:
            raise ValueError(f"{name}: held-out strip {h}x{w} is smaller than {size}")
        top, left = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
        path = held_out / f"heldout{i:03d}.png"
        Image.fromarray(np.ascontiguousarray(strip[top : top + size, left : left + size])).save(path)
        held_paths.append(path)
    return train_paths, held_paths
