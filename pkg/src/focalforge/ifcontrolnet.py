"""Generative restoration of a fused image with a residual control branch.

The branch sees the noisy latent and the latent of the fused image and adds
a residual to the denoiser *input*; the same shifted latent then goes
through the ancestral update. Its output projections start at zero, so an
untrained branch leaves sampling unchanged.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io as ffio
from .diffusion import (Autoencoder, Denoiser, DenoiserConfig, NoiseSchedule, NotReadyError, ResBlock,
                        TimeEmbedding, _coef, _write_log, images_to_tensor, make_schedule, p_sample_step,
                        q_sample, respace, sample_timesteps)
from .fusion_net import FusionNet, run_fusion
from .stack_synth import drop_layers, stratify_depth, synthesize_stack

log = logging.getLogger(__name__)


CONTROL_OBJECTIVES = ("sampler", "eps")
CONTROL_WEIGHTINGS = ("eps", "x0")


class FreezeError(RuntimeError):
    """The diffusion backbone was trainable, or changed during control training."""


class ControlBranch(nn.Module):
    """Half-width copy of the denoiser's encoder path over ``concat(z_t, c_IF)``."""

    def __init__(self, denoiser_config: DenoiserConfig | None = None):
        super().__init__()
        dc = denoiser_config or DenoiserConfig()
        self.denoiser_config = dc
        widths = [max(8, w // 2) for w in dc.widths]
        emb = dc.time_dim * 2
        self.time = TimeEmbedding(dc.time_dim)
        self.inp = nn.Conv2d(2 * dc.latent_channels, widths[0], 3, 1, 1)
        self.blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        self.proj = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(prev, w, emb))
            self.proj.append(nn.Conv2d(w, dc.latent_channels, 1))
            prev = w
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, 2, 1))
        for p in self.proj:
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)
        # fixed per-timestep output scale; a single 1 means none
        self.register_buffer("out_gain", torch.ones(1))

    def set_gain(self, gain) -> None:
        self.out_gain = torch.as_tensor(np.asarray(gain), dtype=torch.float32).clone()

    def forward(self, z_t: torch.Tensor, c_if: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        emb = self.time(t)
        h = self.inp(torch.cat([z_t, c_if], dim=1))
        size = z_t.shape[-2:]
        delta = torch.zeros_like(z_t)
        for i, block in enumerate(self.blocks):
            h = block(h, emb)
            r = self.proj[i](h)
            delta = delta + (r if r.shape[-2:] == size else F.interpolate(r, size=size, mode="nearest"))
            if i < len(self.downsample):
                h = self.downsample[i](h)
        if self.out_gain.numel() > 1:
            delta = delta * self.out_gain[t - 1].reshape(-1, 1, 1, 1)
        return delta


def encode_condition(fused: torch.Tensor | np.ndarray, vae: Autoencoder) -> torch.Tensor:
    """Latent of the deterministic fusion result; accepts H x W x 3 arrays or (B, 3, H, W) tensors."""
    if isinstance(fused, np.ndarray):
        fused = images_to_tensor([fused]) if fused.ndim == 3 else images_to_tensor(list(fused))
    with torch.no_grad():
        return vae.encode(fused)


def control_residual(branch: ControlBranch, z_t: torch.Tensor, c_if: torch.Tensor, t) -> torch.Tensor:
    if z_t.shape != c_if.shape:
        raise ValueError(f"z_t {tuple(z_t.shape)} and c_IF {tuple(c_if.shape)} differ in shape")
    return branch(z_t, c_if, torch.as_tensor(t))


def conditioned_denoise_step(z_t: torch.Tensor, t: int, branch: ControlBranch, denoiser: Denoiser,
                             c_if: torch.Tensor, schedule: NoiseSchedule,
                             noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    tt = torch.full((z_t.shape[0],), schedule.model_t(t), dtype=torch.long)
    z_tilde = z_t + control_residual(branch, z_t, c_if, tt)
    return p_sample_step(z_tilde, t, denoiser(z_tilde, tt), schedule, noise)


@dataclass
class RestorationConfig:
    steps: int = 200
    sigma_mode: str = "beta"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def sampling_schedule(schedule_cfg: dict, steps: int, sigma_mode: str = "beta") -> NoiseSchedule:
    base = make_schedule(schedule_cfg["T"], schedule_cfg["beta_start"], schedule_cfg["beta_end"], sigma_mode)
    return respace(base, min(steps, base.T), sigma_mode)


@torch.no_grad()
def restore_latent(c_if: torch.Tensor, denoiser: Denoiser, branch: ControlBranch, schedule: NoiseSchedule,
                   generator: torch.Generator) -> torch.Tensor:
    # same draw order as diffusion.sample, so a zero branch reproduces it exactly
    shape = c_if.shape
    z = torch.randn(shape, generator=generator)
    for t in range(schedule.T, 0, -1):
        noise = torch.randn(shape, generator=generator) if t > 1 else None
        z = conditioned_denoise_step(z, t, branch, denoiser, c_if, schedule, noise)
    return z


def _check_ready(vae, denoiser):
    for name, m in (("autoencoder", vae), ("denoiser", denoiser)):
        if not bool(m.ready):
            raise NotReadyError(f"{name} has not been trained or loaded")


@torch.no_grad()
def restore(fused, vae: Autoencoder, denoiser: Denoiser, branch: ControlBranch, schedule: NoiseSchedule,
            seed: int = 0) -> np.ndarray:
    """Restore one H x W x 3 fused image (or a B x H x W x 3 batch); deterministic given ``seed``."""
    _check_ready(vae, denoiser)
    fused = np.asarray(fused, dtype=np.float64)
    single = fused.ndim == 3
    batch = fused[None] if single else fused
    c_if = encode_condition(batch, vae)
    gen = torch.Generator().manual_seed(seed)
    z0 = restore_latent(c_if, denoiser, branch, schedule, gen)
    out = vae.decode(z0).permute(0, 2, 3, 1).double().numpy()
    return out[0] if single else out


# -- training ---------------------------------------------------------------


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ControlTrainConfig:
    steps: int = 2000
    phase1_steps: int = 1500
    lr: float = 1e-3
    lr_phase2: float = 1e-4
    batch_size: int = 16
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50
    # "sampler": noise-matching loss on the effective predictor eps_theta(z~) - delta / k_t that the
    # ancestral step actually applies to z_t; "eps": the same loss on eps_theta(z~) alone
    objective: str = "sampler"
    # "eps": uniform noise-space loss; "x0": the same error measured on the clean latent
    weighting: str = "x0"

    def __post_init__(self):
        if self.weighting not in CONTROL_WEIGHTINGS:
            raise ValueError(f"weighting must be one of {CONTROL_WEIGHTINGS}, got {self.weighting!r}")
        if self.objective not in CONTROL_OBJECTIVES:
            raise ValueError(f"objective must be one of {CONTROL_OBJECTIVES}, got {self.objective!r}")


class RestorationPair(NamedTuple):
    fused: np.ndarray
    target: np.ndarray
    bins: np.ndarray
    dropped: tuple[int, ...]


def make_restoration_pairs(scenes_, fusion: FusionNet, rng: np.random.Generator, layers: tuple[int, int] = (4, 7),
                           drop: tuple[float, float] = (0.0, 0.5), blur_gain: float = 1.5) -> list[RestorationPair]:
    """Degrade each ``(image, depth)`` scene by stack synthesis, layer dropping and learned fusion."""
    pairs = []
    for image, depth in scenes_:
        L = int(rng.integers(layers[0], layers[1] + 1))
        frac = float(rng.uniform(*drop)) if drop[1] > drop[0] else float(drop[0])
        stack = drop_layers(synthesize_stack(image, depth, L, blur_gain), frac, rng)
        fused, _ = run_fusion(fusion, stack)
        pairs.append(RestorationPair(fused, np.asarray(image, dtype=np.float64), stratify_depth(depth, L),
                                     stack.dropped))
    return pairs


def step_gain(schedule: NoiseSchedule) -> np.ndarray:
    """``k_t = (1 - alpha_t) / sqrt(1 - alpha_bar_t)``, the noise coefficient of the ancestral mean."""
    return (1.0 - schedule.alpha) / np.sqrt(1.0 - schedule.alpha_bar)


def latent_gain(schedule: NoiseSchedule) -> np.ndarray:
    """Output scale under which a residual ``v`` shifts the sampler's clean-latent estimate by ``v``."""
    ab = schedule.alpha_bar
    return step_gain(schedule) * np.sqrt(ab / (1.0 - ab))


def control_loss(branch: ControlBranch, denoiser: Denoiser, z0: torch.Tensor, c_if: torch.Tensor, t: torch.Tensor,
                 eps: torch.Tensor, schedule: NoiseSchedule, objective: str = "sampler",
                 weighting: str = "eps") -> torch.Tensor:
    """Denoising loss with the residual on the denoiser input.

    Since ``p_sample_step(z_t + d, t, e)`` equals ``p_sample_step(z_t, t, e - d / k_t)``, the
    "sampler" objective fits the noise predictor the sampler effectively uses on ``z_t``.
    """
    z_t = q_sample(z0, t, eps, schedule)
    delta = branch(z_t, c_if, t)
    pred = denoiser(z_t + delta, t)
    if objective == "sampler":
        pred = pred - delta / _coef(step_gain(schedule), t, z_t)
    elif objective != "eps":
        raise ValueError(f"objective must be one of {CONTROL_OBJECTIVES}, got {objective!r}")
    err = (eps - pred) ** 2
    if weighting == "x0":
        # clean-latent error: (1 - abar) / abar times the noise error
        ab = _coef(schedule.alpha_bar, t, z_t)
        err = err * (1 - ab) / ab
    elif weighting != "eps":
        raise ValueError(f"weighting must be one of {CONTROL_WEIGHTINGS}, got {weighting!r}")
    return err.mean()


def train_control(pairs: Sequence, vae: Autoencoder, denoiser: Denoiser, schedule: NoiseSchedule,
                  config: ControlTrainConfig | None = None, out=None, log_path=None):
    """Fit the control branch with the denoising objective; backbone must be frozen.

    ``pairs`` holds ``(degraded fused image, ground truth)`` items. Returns ``(branch, history)``.
    """
    cfg = config or ControlTrainConfig()
    _check_ready(vae, denoiser)
    for name, m in (("autoencoder", vae), ("denoiser", denoiser)):
        if any(p.requires_grad for p in m.parameters()):
            raise FreezeError(f"{name} parameters must be frozen before control training")
    if not pairs:
        raise ValueError("no training pairs")
    before = (state_hash(vae), state_hash(denoiser))

    cond = torch.cat([encode_condition(np.stack([p[0] for p in pairs[i:i + 64]]), vae)
                      for i in range(0, len(pairs), 64)])
    target = torch.cat([encode_condition(np.stack([p[1] for p in pairs[i:i + 64]]), vae)
                        for i in range(0, len(pairs), 64)])

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    branch = ControlBranch(denoiser.config)
    if cfg.objective == "sampler":
        branch.set_gain(latent_gain(schedule))
    opt = torch.optim.AdamW(branch.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    branch.train()
    for step in range(cfg.steps):
        if step == cfg.phase1_steps:
            for g in opt.param_groups:
                g["lr"] = cfg.lr_phase2
        idx = torch.randint(0, len(cond), (cfg.batch_size,), generator=gen)
        t = sample_timesteps(cfg.batch_size, schedule.T, gen)
        eps = torch.randn(target[idx].shape, generator=gen)
        loss = control_loss(branch, denoiser, target[idx], cond[idx], t, eps, schedule, cfg.objective, cfg.weighting)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "lr": opt.param_groups[0]["lr"], "loss": loss.item()})
            log.info("control step %d loss %.4f", step, loss.item())
    branch.eval()
    if (state_hash(vae), state_hash(denoiser)) != before:
        raise FreezeError("backbone parameters changed during control training")
    if out is not None:
        save_control(out, branch, cfg.steps)
    _write_log(log_path, history)
    return branch, history


def save_control(path, branch: ControlBranch, step: int = 0) -> None:
    ffio.save_checkpoint(path, "control", dataclasses.asdict(branch.denoiser_config), branch.state_dict(), step)


def load_control(path) -> ControlBranch:
    payload = ffio.load_checkpoint(path, "control")
    branch = ControlBranch(DenoiserConfig(**payload["config"]))
    if "out_gain" in payload["state"]:
        branch.out_gain = torch.empty_like(payload["state"]["out_gain"])
    branch.load_state_dict(payload["state"])
    return branch.eval()
