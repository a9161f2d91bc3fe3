"""Stack fusion network: per-layer focus encoder, spatial-aggregation
cross-layer attention (SACA), iterative refinement and softmax focus maps.

Tensors follow ``(B, L, C, H, W)`` for stacks and ``(B, L, D, H', W')`` for
focus volumes. Nothing in the network depends on layer position, so the
whole forward pass is equivariant to layer permutations.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .stack_synth import FocalStack

SACA_POOLS = (1, 2, 4, 8, 16)


@dataclass
class FusionModelConfig:
    widths: tuple[int, ...] = (16, 24, 40, 64)
    feat_dim: int = 32
    saca_pool: int = 4  # spatial downsampling ratio is 1 / saca_pool; 1 gives pixel-wise attention
    heads: int = 2
    ff_mult: int = 2
    loops: int = 1
    fuse_mode: str = "soft"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.saca_pool not in SACA_POOLS:
            raise ValueError(f"saca_pool must be one of {SACA_POOLS}, got {self.saca_pool}")
        if self.loops < 0:
            raise ValueError("loops must be >= 0")
        if self.fuse_mode not in ("soft", "hard"):
            raise ValueError(f"fuse_mode must be 'soft' or 'hard', got {self.fuse_mode!r}")
        if self.feat_dim % self.heads:
            raise ValueError("feat_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, c), c)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride, 1), _norm(cout), nn.GELU(),
            nn.Conv2d(cout, cout, 3, 1, 1), _norm(cout), nn.GELU(),
        )


class FocusEncoder(nn.Module):
    """Strided conv encoder (stride 2..16) with a top-down decoder back to stride 4."""

    def __init__(self, widths=(16, 24, 40, 64), feat_dim: int = 32, in_ch: int = 3):
        super().__init__()
        chans = [in_ch] + list(widths)
        self.stages = nn.ModuleList(ConvBlock(chans[i], chans[i + 1], 2) for i in range(len(widths)))
        # stage 0 sits at stride 2 and is brought to stride 4 by a strided lateral
        self.lateral = nn.ModuleList(
            [nn.Conv2d(widths[0], feat_dim, 3, 2, 1)] + [nn.Conv2d(w, feat_dim, 1) for w in widths[1:]]
        )
        self.smooth = nn.Sequential(nn.Conv2d(feat_dim, feat_dim, 3, 1, 1), _norm(feat_dim), nn.GELU())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = []
        x = x - 0.5
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        top = self.lateral[-1](feats[-1])
        for i in range(len(feats) - 2, -1, -1):
            lat = self.lateral[i](feats[i])
            top = lat + F.interpolate(top, size=lat.shape[-2:], mode="bilinear", align_corners=False)
        return self.smooth(top)


class TransformerBlock(nn.Module):
    """Pre-norm attention + feed-forward over a (N, L, D) token batch; no positional encoding."""

    def __init__(self, dim: int, heads: int = 2, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * ff_mult), nn.GELU(), nn.Linear(dim * ff_mult, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class SACA(nn.Module):
    def __init__(self, dim: int, pool: int = 4, heads: int = 2, ff_mult: int = 2):
        super().__init__()
        if pool not in SACA_POOLS:
            raise ValueError(f"pool must be one of {SACA_POOLS}")
        self.pool = pool
        self.block = TransformerBlock(dim, heads, ff_mult)
        self.last_tokens: tuple[int, int] | None = None

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        B, L, D, H, W = volume.shape
        k = self.pool
        ph, pw = (-H) % k, (-W) % k
        x = volume.reshape(B * L, D, H, W)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        if k > 1:
            x = F.avg_pool2d(x, k)
        h, w = x.shape[-2:]
        self.last_tokens = (h, w)
        tokens = x.reshape(B, L, D, h, w).permute(0, 3, 4, 1, 2).reshape(B * h * w, L, D)
        delta = self.block(tokens) - tokens
        delta = delta.reshape(B, h, w, L, D).permute(0, 3, 4, 1, 2).reshape(B * L, D, h, w)
        if k > 1:
            delta = F.interpolate(delta, size=(H + ph, W + pw), mode="bilinear", align_corners=False)
        delta = delta[..., :H, :W]
        return volume + delta.reshape(B, L, D, H, W)


class RefineBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            _norm(dim), nn.GELU(), nn.Conv2d(dim, dim, 3, 1, 1),
            _norm(dim), nn.GELU(), nn.Conv2d(dim, dim, 3, 1, 1),
        )

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        B, L, D, H, W = volume.shape
        x = volume.reshape(B * L, D, H, W)
        return (x + self.body(x)).reshape(B, L, D, H, W)


class FusionOutput(NamedTuple):
    logits: torch.Tensor  # (B, L, H, W)
    probs: torch.Tensor  # (B, L, H, W)
    fused: torch.Tensor  # (B, C, H, W)


def fuse(layers: torch.Tensor, probs: torch.Tensor, mode: str = "soft") -> torch.Tensor:
    """Combine ``layers`` (B, L, C, H, W) with a focus map (B, L, H, W)."""
    if layers.dim() != 5 or probs.dim() != 4:
        raise ValueError("expected layers (B, L, C, H, W) and probs (B, L, H, W)")
    if layers.shape[:2] != probs.shape[:2] or layers.shape[-2:] != probs.shape[-2:]:
        raise ValueError(f"stack {tuple(layers.shape)} and map {tuple(probs.shape)} disagree")
    if mode == "soft":
        out = (layers * probs.unsqueeze(2)).sum(dim=1)
    elif mode == "hard":
        idx = probs.argmax(dim=1)  # first maximum wins ties
        gather = idx[:, None, None].expand(-1, 1, layers.shape[2], -1, -1)
        out = layers.gather(1, gather)[:, 0]
    else:
        raise ValueError(f"unknown fuse mode {mode!r}")
    return out.clamp(0.0, 1.0)


class FusionNet(nn.Module):
    def __init__(self, config: FusionModelConfig | None = None):
        super().__init__()
        self.config = config or FusionModelConfig()
        c = self.config
        self.encoder = FocusEncoder(c.widths, c.feat_dim)
        self.saca = SACA(c.feat_dim, c.saca_pool, c.heads, c.ff_mult)
        self.refine = nn.ModuleList(RefineBlock(c.feat_dim) for _ in range(c.loops))
        self.refine_saca = nn.ModuleList(SACA(c.feat_dim, c.saca_pool, c.heads, c.ff_mult) for _ in range(c.loops))
        self.head = nn.Conv2d(c.feat_dim, 1, 1)

    def intra_layer_focus(self, stack: torch.Tensor) -> torch.Tensor:
        B, L, C, H, W = stack.shape
        feats = self.encoder(stack.reshape(B * L, C, H, W))
        return feats.reshape(B, L, *feats.shape[1:])

    def refine_loop(self, volume: torch.Tensor, n_loops: int | None = None) -> torch.Tensor:
        n = len(self.refine) if n_loops is None else n_loops
        if n > len(self.refine):
            raise ValueError(f"model was built with {len(self.refine)} refinement loops, asked for {n}")
        for block, attn in zip(list(self.refine)[:n], list(self.refine_saca)[:n]):
            volume = attn(block(volume))
        return volume

    def focus_logits(self, volume: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        B, L, D, h, w = volume.shape
        logits = self.head(volume.reshape(B * L, D, h, w))
        logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
        return logits.reshape(B, L, *size)

    def forward(self, stack: torch.Tensor, mode: str | None = None) -> FusionOutput:
        if stack.dim() == 4:
            stack = stack.unsqueeze(0)
        if stack.dim() != 5 or stack.shape[1] < 1:
            raise ValueError(f"expected a (B, L, C, H, W) stack, got {tuple(stack.shape)}")
        volume = self.intra_layer_focus(stack)
        volume = self.saca(volume)
        volume = self.refine_loop(volume)
        logits = self.focus_logits(volume, stack.shape[-2:])
        probs = torch.softmax(logits, dim=1)
        return FusionOutput(logits, probs, fuse(stack, probs, mode or self.config.fuse_mode))


def focus_map(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the layer axis (dim 1)."""
    return torch.softmax(logits, dim=1)


def stack_to_tensor(stack: FocalStack | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    layers = stack.layers if isinstance(stack, FocalStack) else np.asarray(stack)
    return torch.from_numpy(np.ascontiguousarray(layers.transpose(0, 3, 1, 2))).to(dtype)


@torch.no_grad()
def run_fusion(model: FusionNet, stack: FocalStack | np.ndarray, mode: str | None = None):
    """Fuse one stack; returns ``(fused H x W x C, probs L x H x W)`` as float64 arrays."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(stack_to_tensor(stack, dtype).unsqueeze(0), mode)
    fused = out.fused[0].permute(1, 2, 0).double().numpy()
    return fused, out.probs[0].double().numpy()


def save_model(path, model: FusionNet, step: int = 0, **extra) -> None:
    from .io import save_checkpoint

    save_checkpoint(path, "fusion", model.config.to_dict(), model.state_dict(), step, **extra)


def load_model(path) -> FusionNet:
    from .io import load_checkpoint

    payload = load_checkpoint(path, "fusion")
    model = FusionNet(FusionModelConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
