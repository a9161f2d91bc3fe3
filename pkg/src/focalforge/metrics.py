"""Reference (SSIM, PSNR) and no-reference (sharpness) image quality metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as ffio

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ValueError(f"expected H x W or H x W x 3 image, got shape {img.shape}")


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a, b = _same_shape(a, b)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_val * max_val / mse))


def _gauss_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         K1: float = 0.01, K2: float = 0.03, max_val: float = 1.0) -> float:
    """Mean single-scale SSIM over all fully-contained Gaussian windows.

    Colour inputs are compared on ITU-R 601 luma.
    """
    a, b = _same_shape(a, b)
    x, y = to_luma(a), to_luma(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    g = _gauss_window(window, sigma)
    c1 = (K1 * max_val) ** 2
    c2 = (K2 * max_val) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


LAPLACIAN_3x3 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def laplacian_valid(gray: np.ndarray) -> np.ndarray:
    g = np.asarray(gray, dtype=np.float64)
    return (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1])


def sharpness(img: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Variance of the 3x3 Laplacian response, optionally restricted to ``mask``."""
    lap = laplacian_valid(to_luma(img))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[1:-1, 1:-1]
        if not m.any():
            return 0.0
        lap = lap[m]
    return float(np.var(lap))


@dataclass
class CaseMetrics:
    case: str
    ssim: float = float("nan")
    psnr: float = float("nan")
    sharpness: float = float("nan")
    error: str = ""


@dataclass
class MetricReport:
    cases: list[CaseMetrics] = field(default_factory=list)

    @property
    def ok(self) -> list[CaseMetrics]:
        return [c for c in self.cases if not c.error]

    def mean(self, name: str) -> float:
        vals = [getattr(c, name) for c in self.ok]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "ssim", "psnr", "sharpness", "error"])
            for c in self.cases:
                if c.error:
                    w.writerow([c.case, "", "", "", c.error])
                else:
                    w.writerow([c.case, f"{c.ssim:.6f}", f"{c.psnr:.4f}", f"{c.sharpness:.8f}", ""])
            w.writerow(["MEAN", f"{self.mean('ssim'):.6f}", f"{self.mean('psnr'):.4f}",
                        f"{self.mean('sharpness'):.8f}", ""])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["case"] == "MEAN":
                    continue
                if row["error"]:
                    rep.cases.append(CaseMetrics(row["case"], error=row["error"]))
                else:
                    rep.cases.append(CaseMetrics(row["case"], float(row["ssim"]), float(row["psnr"]),
                                                 float(row["sharpness"])))
        return rep


def evaluate(pred_dir: str | Path, gt_dir: str | Path) -> MetricReport:
    """Score every PNG in ``pred_dir`` against the same-named PNG in ``gt_dir``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory not found: {d}")
    report = MetricReport()
    for p in sorted(pred_dir.glob("*.png")):
        g = gt_dir / p.name
        if not g.is_file():
            report.cases.append(CaseMetrics(p.stem, error=f"missing ground truth {g.name}"))
            continue
        try:
            a, b = ffio.read_png(p), ffio.read_png(g)
            report.cases.append(CaseMetrics(p.stem, ssim(a, b), psnr(a, b), sharpness(a)))
        except ValueError as exc:
            report.cases.append(CaseMetrics(p.stem, error=str(exc)))
    return report
