"""Focal-stack synthesis from (image, depth) pairs.

Depth is quantized into L equal-width bins; layer ``l`` of the stack shows
every pixel of bin ``b`` blurred with a Gaussian of standard deviation
``blur_gain * |b - l|``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as ffio

DEFAULT_BLUR_GAIN = 1.5
DEFAULT_LAYERS = 5


@dataclass(frozen=True)
class DoFInterval:
    near: float
    far: float

    def __post_init__(self):
        if not (0.0 <= self.near < self.far <= 1.0):
            raise ValueError(f"invalid DoF interval [{self.near}, {self.far}]")


@dataclass
class FocalStack:
    """``layers`` is L x H x W x C in [0, 1]; ``layer_meta[i]`` is the focus bin of layer i."""

    layers: np.ndarray
    layer_meta: list[Optional[int]]
    dropped: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        if self.layers.ndim != 4:
            raise ValueError(f"stack must be L x H x W x C, got shape {self.layers.shape}")
        if self.layers.shape[0] < 1:
            raise ValueError("stack needs at least one layer")
        if len(self.layer_meta) != self.layers.shape[0]:
            raise ValueError("layer_meta length must equal the number of layers")

    @property
    def L(self) -> int:
        return self.layers.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.layers.shape[1:]

    def permute(self, order: Sequence[int]) -> "FocalStack":
        order = list(order)
        return FocalStack(self.layers[order], [self.layer_meta[i] for i in order], self.dropped)


def validate_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth must be H x W, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth contains non-finite values")
    if depth.min() < 0.0 or depth.max() > 1.0:
        raise ValueError("depth values must lie in [0, 1]")
    return depth


def stratify_depth(depth: np.ndarray, L: int) -> np.ndarray:
    """Per-pixel layer index ``min(floor(depth * L), L - 1)``."""
    if L < 1:
        raise ValueError(f"layer count must be >= 1, got {L}")
    depth = validate_depth(depth)
    return np.minimum(np.floor(depth * L).astype(np.int64), L - 1)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the first two axes, mirror padding (edge excluded)."""
    image = np.asarray(image, dtype=np.float64)
    if sigma <= 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = image
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def synthesize_stack(image: np.ndarray, depth: np.ndarray, L: int = DEFAULT_LAYERS,
                     blur_gain: float = DEFAULT_BLUR_GAIN) -> FocalStack:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    depth = validate_depth(depth)
    if image.shape[:2] != depth.shape:
        raise ValueError(f"image {image.shape[:2]} and depth {depth.shape} differ in size")
    if blur_gain < 0:
        raise ValueError("blur_gain must be >= 0")
    bins = stratify_depth(depth, L)
    present = np.unique(bins)
    # one whole-image blur per bin distance, composited by bin mask
    blurred = {}
    layers = np.empty((L,) + image.shape, dtype=np.float64)
    for l in range(L):
        layer = np.empty_like(image)
        for b in present:
            d = abs(int(b) - l)
            if d not in blurred:
                blurred[d] = gaussian_blur(image, blur_gain * d)
            mask = bins == b
            layer[mask] = blurred[d][mask]
        layers[l] = layer
    return FocalStack(np.clip(layers, 0.0, 1.0), list(range(L)))


def _check_intervals(intervals: Sequence[DoFInterval]) -> list[DoFInterval]:
    intervals = list(intervals)
    if not intervals:
        raise ValueError("interval list must be non-empty")
    return sorted(intervals, key=lambda iv: (iv.near, iv.far))


def check_completeness(intervals: Sequence[DoFInterval], target: DoFInterval) -> bool:
    """True iff the closed-interval union of ``intervals`` covers ``target``."""
    reach = target.near
    for iv in _check_intervals(intervals):
        if iv.near > reach:
            return False
        reach = max(reach, iv.far)
        if reach >= target.far:
            return True
    return reach >= target.far


def check_efficiency(intervals: Sequence[DoFInterval]) -> bool:
    """True iff no two intervals share interior points (touching endpoints allowed)."""
    ordered = _check_intervals(intervals)
    reach = ordered[0].far
    for iv in ordered[1:]:
        if iv.near < reach:
            return False
        reach = max(reach, iv.far)
    return True


def n_dropped(L: int, drop_fraction: float) -> int:
    # guard floor() against 0.3 * 10 = 2.9999999999999996 style error
    return int(math.floor(drop_fraction * L + 1e-9))


def drop_layers(stack: FocalStack, drop_fraction: float, rng: np.random.Generator) -> FocalStack:
    if not 0.0 <= drop_fraction <= 0.5:
        raise ValueError(f"drop_fraction must be in [0, 0.5], got {drop_fraction}")
    k = min(n_dropped(stack.L, drop_fraction), stack.L - 1)
    if k == 0:
        return FocalStack(stack.layers.copy(), list(stack.layer_meta), stack.dropped)
    gone = set(int(i) for i in rng.choice(stack.L, size=k, replace=False))
    keep = [i for i in range(stack.L) if i not in gone]
    dropped = tuple(sorted(set(stack.dropped) | {stack.layer_meta[i] for i in gone if stack.layer_meta[i] is not None}))
    return FocalStack(stack.layers[keep].copy(), [stack.layer_meta[i] for i in keep], dropped)


def save_stack(out_dir: str | Path, stack: FocalStack, depth: Optional[np.ndarray] = None, **manifest) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, layer in enumerate(stack.layers):
        ffio.write_png(out / f"layer_{i:03d}.png", layer)
    if depth is not None:
        ffio.write_grid(out / "depth.ffd", depth)
    record = {"L": stack.L, "layer_meta": stack.layer_meta, "dropped": list(stack.dropped)}
    record.update(manifest)
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out


def load_stack(stack_dir: str | Path) -> FocalStack:
    d = Path(stack_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"stack directory not found: {d}")
    files = sorted(d.glob("layer_*.png"))
    if not files:
        raise FileNotFoundError(f"no layer_*.png files in {d}")
    layers = np.stack([ffio.read_png(f) for f in files])
    meta: list[Optional[int]] = [None] * len(files)
    dropped: tuple[int, ...] = ()
    manifest = d / "manifest.json"
    if manifest.is_file():
        info = json.loads(manifest.read_text())
        if len(info.get("layer_meta", [])) == len(files):
            meta = info["layer_meta"]
        dropped = tuple(info.get("dropped", []))
    return FocalStack(layers, meta, dropped)
