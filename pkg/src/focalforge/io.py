"""File formats shared by every subcommand.

Grid files (``.ffd``) hold a single real-valued H x W grid::

    offset 0   4 bytes   ASCII magic "FFD1"
    offset 4   u32 LE    H
    offset 8   u32 LE    W
    offset 12  f32 LE    H*W values, row-major

Checkpoints are ``torch.save`` dictionaries with the keys ``format``
(always ``"focalforge-ckpt"``), ``version``, ``kind`` (``fusion``, ``vae``,
``denoiser`` or ``control``), ``config`` (plain dict echo of the model and
training config), ``state`` (parameter tensors), ``step`` (optimizer steps
taken) and ``rng`` (torch and numpy generator state at save time).

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment.
"""

from __future__ import annotations

import dataclasses
import struct
import typing
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

GRID_MAGIC = b"FFD1"
CKPT_FORMAT = "focalforge-ckpt"
CKPT_VERSION = 1


def read_png(path: str | Path) -> np.ndarray:
    """Load an 8-bit image as float64 H x W x 3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    Image.fromarray(arr, mode="RGB").save(path)


def write_grid(path: str | Path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_grid(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not an FFD1 grid file")
    h, w = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value: str, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is tuple:
        parts = [p.strip() for p in value.strip("()[] ").split(",") if p.strip()]
        inner = args[0] if args else float
        return tuple(_coerce(p, inner) for p in parts)
    if origin is typing.Union or (origin is not None and type(None) in args):
        non_none = [a for a in args if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return _coerce(value, non_none[0])
    if hint is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if hint is int:
        return int(value)
    if hint is float:
        return float(value)
    return value


def load_config(cls: type, path: str | Path | None = None, **overrides: Any):
    """Build dataclass ``cls`` from a key-value file plus keyword overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        raw = parse_kv(Path(path).read_text())
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {unknown}")
        values = {k: _coerce(v, hints[k]) for k, v in raw.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def dump_config(cfg: Any) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def save_checkpoint(path: str | Path, kind: str, config: dict, state: dict, step: int = 0, **extra: Any) -> None:
    import torch

    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "kind": kind,
        "config": dict(config),
        "state": {k: v.detach().cpu().clone() for k, v in state.items()},
        "step": int(step),
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
    }
    payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    import torch

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a focalforge checkpoint")
    if kind is not None and payload["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {payload['kind']!r}")
    return payload
