"""Non-learned fusion rules used as oracles and benchmark floors."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .metrics import LAPLACIAN_3x3, to_luma
from .stack_synth import FocalStack

DEFAULT_WINDOW = 9


def _layers(stack) -> np.ndarray:
    layers = stack.layers if isinstance(stack, FocalStack) else np.asarray(stack)
    if layers.ndim != 4 or layers.shape[0] < 1:
        raise ValueError(f"expected an L x H x W x C stack, got shape {layers.shape}")
    return np.asarray(layers, dtype=np.float64)


def focus_activity(stack, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Windowed sum of squared Laplacian response, L x H x W."""
    layers = _layers(stack)
    act = np.empty(layers.shape[:3])
    for i, layer in enumerate(layers):
        lap = ndimage.convolve(to_luma(layer), LAPLACIAN_3x3, mode="reflect")
        act[i] = ndimage.uniform_filter(lap * lap, size=window, mode="reflect") * window * window
    return act


def select(layers: np.ndarray, index: np.ndarray) -> np.ndarray:
    return np.take_along_axis(layers, index[None, :, :, None], axis=0)[0]


def laplacian_argmax_fuse(stack, window: int = DEFAULT_WINDOW):
    """Return ``(fused, decision)``; ``decision`` is the H x W chosen-layer index map.

    Ties go to the lowest layer index.
    """
    layers = _layers(stack)
    decision = np.argmax(focus_activity(layers, window), axis=0)
    return select(layers, decision), decision


def average_fuse(stack) -> np.ndarray:
    return _layers(stack).mean(axis=0)
