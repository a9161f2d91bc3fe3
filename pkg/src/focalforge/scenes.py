"""Procedural (image, depth) pairs for training and benchmarking.

Scenes follow a dead-leaves layout: a tilted, textured ground plane and a
handful of occluding shapes at constant depth, painted far to near. Every
region carries an oriented sinusoidal grating so that focus is observable
everywhere.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io as ffio


def _grating(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    period = rng.uniform(5.0, 12.0)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    amp = rng.uniform(0.12, 0.25)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    return amp * np.sin(2 * np.pi * u / period + phase)


def _texture(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    tint = rng.uniform(0.6, 1.0, size=3)
    g = _grating(rng, yy, xx)
    return base[None, None, :] + g[..., None] * tint[None, None, :]


def _shape_mask(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, size: int) -> np.ndarray:
    cy, cx = rng.uniform(0.1, 0.9, size=2) * size
    kind = rng.integers(3)
    if kind == 0:
        r = rng.uniform(0.12, 0.3) * size
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:
        hy, hx = rng.uniform(0.1, 0.28, size=2) * size
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    ay, ax = rng.uniform(0.1, 0.3, size=2) * size
    t = rng.uniform(0.0, np.pi)
    u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
    v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def make_scene(rng: np.random.Generator, size: int = 64, n_objects: tuple[int, int] = (3, 6)):
    """Return ``(image, depth)``: H x W x 3 and H x W, both float64 in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # ground plane: depth ramps linearly along a random direction
    t = rng.uniform(0.0, 2 * np.pi)
    ramp = (xx * np.cos(t) + yy * np.sin(t)) / size
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    lo, hi = np.sort(rng.uniform(0.0, 1.0, size=2))
    if hi - lo < 0.3:
        lo, hi = max(0.0, lo - 0.15), min(1.0, hi + 0.15)
    depth = lo + (hi - lo) * ramp
    image = _texture(rng, yy, xx)

    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    depths = np.sort(rng.uniform(0.0, 1.0, size=n))[::-1]
    for d in depths:
        mask = _shape_mask(rng, yy, xx, size)
        image[mask] = _texture(rng, yy, xx)[mask]
        depth[mask] = d
    return np.clip(image, 0.0, 1.0), np.clip(depth, 0.0, 1.0)


def make_dataset(n: int, seed: int, size: int = 64) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, size) for _ in range(n)]


def write_dataset(out_dir: str | Path, pairs) -> Path:
    """Write ``images/NNNN.png`` and ``depths/NNNN.ffd``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)
    for i, (img, depth) in enumerate(pairs):
        ffio.write_png(out / "images" / f"{i:04d}.png", img)
        ffio.write_grid(out / "depths" / f"{i:04d}.ffd", depth)
    return out


def read_dataset(images_dir: str | Path, depths_dir: str | Path | None = None):
    """Pair every ``*.png`` in ``images_dir`` with the same-stem ``.ffd`` depth grid."""
    images_dir = Path(images_dir)
    depths_dir = Path(depths_dir) if depths_dir is not None else images_dir.parent / "depths"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {images_dir}")
    if not depths_dir.is_dir():
        raise FileNotFoundError(f"depth directory not found: {depths_dir}")
    pairs, names = [], []
    for img_path in sorted(images_dir.glob("*.png")):
        depth_path = depths_dir / f"{img_path.stem}.ffd"
        if not depth_path.is_file():
            raise FileNotFoundError(f"missing depth grid for {img_path.name}: {depth_path}")
        pairs.append((ffio.read_png(img_path), np.clip(ffio.read_grid(depth_path), 0.0, 1.0)))
        names.append(img_path.stem)
    if not pairs:
        raise ValueError(f"no images found in {images_dir}")
    return pairs, names
