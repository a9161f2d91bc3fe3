"""Supervised training of :class:`FusionNet` on synthesized focal stacks."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .fusion_net import FusionModelConfig, FusionNet, save_model, stack_to_tensor
from .stack_synth import FocalStack, drop_layers, stratify_depth, synthesize_stack

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.9
    weight_decay: float = 1e-2
    epochs: int = 20
    patience: int = 4
    image_size: int = 64
    layers_min: int = 3
    layers_max: int = 7
    blur_gain_min: float = 1.5
    blur_gain_max: float = 1.5
    drop_max: float = 0.5
    seed: int = 0
    loss_weight: float = 1.0
    val_fraction: float = 0.1
    val_layers: int = 5
    val_blur_gain: float = 1.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.layers_min <= self.layers_max:
            raise ValueError("need 1 <= layers_min <= layers_max")
        if not 0.0 <= self.drop_max <= 0.5:
            raise ValueError("drop_max must be in [0, 0.5]")


class TrainingPair(NamedTuple):
    stack: FocalStack
    target_map: np.ndarray  # H x W index into the surviving layers
    target_image: np.ndarray


def remap_targets(bins: np.ndarray, layer_meta: Sequence[int]) -> np.ndarray:
    """Index of the surviving layer whose focus bin is nearest each pixel's bin (ties: lower)."""
    meta = np.asarray(layer_meta, dtype=np.int64)
    return np.argmin(np.abs(meta[:, None, None] - bins[None]), axis=0)


def make_training_pair(image: np.ndarray, depth: np.ndarray, L: int, blur_gain: float,
                       drop_fraction: float, rng: np.random.Generator) -> TrainingPair:
    stack = synthesize_stack(image, depth, L, blur_gain)
    stack = drop_layers(stack, drop_fraction, rng)
    bins = stratify_depth(depth, L)
    return TrainingPair(stack, remap_targets(bins, stack.layer_meta), np.asarray(image, dtype=np.float64))


def fusion_loss(log_probs: torch.Tensor, fused: torch.Tensor, target_map: torch.Tensor,
                target_image: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    """Per-pixel cross-entropy on the focus map plus ``weight`` times L1 on the fused image.

    ``log_probs`` is (B, L, H, W) log focus probabilities, ``target_map`` (B, H, W) layer
    indices, ``fused`` / ``target_image`` (B, C, H, W).
    """
    ce = F.nll_loss(log_probs, target_map)
    return ce + weight * (fused - target_image).abs().mean()


def _batch_tensors(pairs: list[TrainingPair], dtype=torch.float32):
    x = torch.stack([stack_to_tensor(p.stack, dtype) for p in pairs])
    y = torch.from_numpy(np.stack([p.target_map for p in pairs])).long()
    gt = torch.from_numpy(np.stack([p.target_image.transpose(2, 0, 1) for p in pairs])).to(dtype)
    return x, y, gt


def _sample_batch(data, idx, cfg: TrainingConfig, rng: np.random.Generator) -> list[TrainingPair]:
    # L and drop fraction are shared by a batch so the stacks have equal depth
    L = int(rng.integers(cfg.layers_min, cfg.layers_max + 1))
    frac = float(rng.uniform(0.0, cfg.drop_max))
    out = []
    for i in idx:
        gain = float(rng.uniform(cfg.blur_gain_min, cfg.blur_gain_max))
        img, depth = data[i]
        out.append(make_training_pair(img, depth, L, gain, frac, rng))
    return out


def validation_stacks(val_data, cfg: TrainingConfig) -> list[tuple[FocalStack, np.ndarray]]:
    return [(synthesize_stack(img, d, cfg.val_layers, cfg.val_blur_gain), img) for img, d in val_data]


@torch.no_grad()
def validate(model: FusionNet, val_stacks, mode: Optional[str] = None) -> tuple[float, float]:
    model.eval()
    ssims, psnrs = [], []
    for stack, gt in val_stacks:
        out = model(stack_to_tensor(stack).unsqueeze(0), mode)
        fused = out.fused[0].permute(1, 2, 0).double().numpy()
        ssims.append(metrics.ssim(fused, gt))
        psnrs.append(metrics.psnr(fused, gt))
    return float(np.mean(ssims)), float(np.mean(psnrs))


@dataclass
class TrainResult:
    model: FusionNet
    history: list[dict]
    best_val_ssim: float
    steps: int


def train(dataset, config: TrainingConfig | None = None, model_config: FusionModelConfig | None = None,
          val_dataset=None, out: str | Path | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Train with AdamW, per-epoch exponential lr decay and early stopping on val SSIM.

    ``dataset`` is a sequence of ``(image, depth)`` pairs. Without ``val_dataset`` the last
    ``val_fraction`` of ``dataset`` is held out. The best-validation weights are kept.
    """
    cfg = config or TrainingConfig()
    mcfg = model_config or FusionModelConfig()
    data = list(dataset)
    if not data:
        raise ValueError("training dataset is empty")
    if val_dataset is None:
        n_val = int(round(len(data) * cfg.val_fraction))
        if 0 < n_val < len(data):
            data, val_dataset = data[:-n_val], data[-n_val:]
        else:
            val_dataset = data
    val_stacks = validation_stacks(list(val_dataset), cfg)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = FusionNet(mcfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)

    history: list[dict] = []
    best, best_state, stale, steps = -np.inf, None, 0, 0
    for epoch in range(cfg.epochs):
        model.train()
        lr = opt.param_groups[0]["lr"]
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = _sample_batch(data, order[start:start + cfg.batch_size], cfg, rng)
            x, y, gt = _batch_tensors(batch)
            pred = model(x, "soft")
            loss = fusion_loss(torch.log_softmax(pred.logits, dim=1), pred.fused, y, gt, cfg.loss_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            steps += 1
        sched.step()
        val_ssim, val_psnr = validate(model, val_stacks)
        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "val_ssim": val_ssim, "val_psnr": val_psnr}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f val ssim %.4f psnr %.2f", epoch, lr, row["loss"], val_ssim, val_psnr)
        if val_ssim > best:
            best, stale = val_ssim, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    if out is not None:
        save_model(out, model, steps, train_config=dataclasses.asdict(cfg))
    if log_path is not None:
        write_history(log_path, history)
    return TrainResult(model, history, float(best), steps)


def write_history(path: str | Path, history: list[dict]) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
