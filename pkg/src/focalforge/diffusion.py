"""Toy latent diffusion: autoencoder, noise schedule, noising, loss and
ancestral sampling step.

Timesteps are 1-based throughout (``t`` in ``1..T``); schedule arrays are
stored 0-based, so ``alpha_bar[t - 1]`` is the cumulative product up to ``t``.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io as ffio

log = logging.getLogger(__name__)

SIGMA_MODES = ("beta", "posterior")


class NotReadyError(RuntimeError):
    """Raised when an untrained model is asked to encode, decode or sample."""


# -- noise schedule ---------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    # denoiser timestep fed at each sampling step; differs from 1..T only after respacing
    timesteps: np.ndarray = field(default=None)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> None:
        tt = torch.as_tensor(t)
        if tt.numel() == 0 or int(tt.min()) < 1 or int(tt.max()) > self.T:
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")

    def model_t(self, t: int) -> int:
        return int(self.timesteps[t - 1]) if self.timesteps is not None else t


def _sigma(beta, alpha_bar, mode):
    if mode == "beta":
        return np.sqrt(beta)
    if mode == "posterior":
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        return np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {mode!r}")


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02,
                  sigma_mode: str = "beta") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar, _sigma(beta, alpha_bar, sigma_mode),
                         np.arange(1, T + 1))


def respace(schedule: NoiseSchedule, steps: int, sigma_mode: str = "beta") -> NoiseSchedule:
    """Ancestral schedule over ``steps`` evenly spaced timesteps of ``schedule``.

    The retained cumulative products are unchanged; per-step betas are recomputed
    from their ratios.
    """
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must be in 1..{schedule.T}")
    if steps == schedule.T:
        return dataclasses.replace(schedule, sigma=_sigma(schedule.beta, schedule.alpha_bar, sigma_mode))
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(np.int64))
    ab = schedule.alpha_bar[ts - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    alpha = ab / prev
    beta = 1.0 - alpha
    return NoiseSchedule(beta, alpha, ab, _sigma(beta, ab, sigma_mode), ts)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    idx = torch.as_tensor(t, dtype=torch.long) - 1
    c = torch.as_tensor(values, dtype=like.dtype)[idx]
    if c.dim() == 1:
        c = c.reshape(-1, *([1] * (like.dim() - 1)))
    return c


def q_sample(z: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * z + sqrt(1 - abar_t) * eps``; ``t`` is an int or a per-sample tensor."""
    schedule.check_t(t)
    if eps.shape != z.shape:
        raise ValueError("eps must match z in shape")
    ab = _coef(schedule.alpha_bar, t, z)
    return torch.sqrt(ab) * z + torch.sqrt(1.0 - ab) * eps


def p_sample_step(z_t: torch.Tensor, t: int, eps_pred: torch.Tensor, schedule: NoiseSchedule,
                  noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}``; ``noise`` is ignored at ``t == 1``."""
    schedule.check_t(t)
    a = float(schedule.alpha[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    mean = (z_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a)
    if t == 1 or noise is None:
        return mean
    return mean + float(schedule.sigma[t - 1]) * noise


def ldm_loss(denoiser: Callable, z: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule,
             cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's prediction from the noised latent."""
    z_t = q_sample(z, t, eps, schedule)
    t_tensor = torch.as_tensor(t, dtype=torch.long).expand(z.shape[0]) if z.dim() > 1 else torch.as_tensor(t)
    pred = denoiser(z_t, t_tensor) if cond is None else denoiser(z_t, t_tensor, cond)
    return ((eps - pred) ** 2).mean()


def sample_timesteps(n: int, T: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform integer timesteps in ``1..T``."""
    return torch.randint(1, T + 1, (n,), generator=generator)


# -- networks ---------------------------------------------------------------


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, c), c)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int = 0):
        super().__init__()
        self.n1 = _gn(cin)
        self.c1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.n2 = _gn(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb=None):
        h = self.c1(F.silu(self.n1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


@dataclass
class AutoencoderConfig:
    latent_channels: int = 4
    downsample: int = 4
    widths: tuple[int, ...] = (32, 64)
    kl_weight: float = 1e-6

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.downsample != 2 ** len(self.widths):
            raise ValueError("downsample factor must equal 2 ** len(widths)")


class Autoencoder(nn.Module):
    """Convolutional VAE with a near-deterministic latent (tiny KL weight).

    ``encode`` returns the posterior mean multiplied by ``scale`` (set from training
    data so latents have roughly unit variance); ``decode`` undoes the scaling.
    """

    def __init__(self, config: AutoencoderConfig | None = None):
        super().__init__()
        self.config = c = config or AutoencoderConfig()
        w = c.widths
        enc = [nn.Conv2d(3, w[0], 3, 1, 1)]
        prev = w[0]
        for width in w:
            enc += [nn.Conv2d(prev, width, 3, 2, 1), ResBlock(width, width)]
            prev = width
        self.enc = nn.Sequential(*enc)
        self.enc_out = nn.Sequential(_gn(prev), nn.SiLU(), nn.Conv2d(prev, 2 * c.latent_channels, 3, 1, 1))
        dec = [nn.Conv2d(c.latent_channels, prev, 3, 1, 1), ResBlock(prev, prev)]
        for width in reversed(w):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(prev, width, 3, 1, 1), ResBlock(width, width)]
            prev = width
        self.dec = nn.Sequential(*dec)
        self.dec_out = nn.Sequential(_gn(prev), nn.SiLU(), nn.Conv2d(prev, 3, 3, 1, 1))
        self.register_buffer("scale", torch.ones(()))
        self.register_buffer("ready", torch.zeros((), dtype=torch.bool))

    def moments(self, x: torch.Tensor):
        mean, logvar = self.enc_out(self.enc(x * 2.0 - 1.0)).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return (self.dec_out(self.dec(z)) + 1.0) / 2.0

    def _require_ready(self):
        if not bool(self.ready):
            raise NotReadyError("autoencoder has not been trained or loaded")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._require_ready()
        return self.moments(x)[0] * self.scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        self._require_ready()
        return self.decode_raw(z / self.scale).clamp(0.0, 1.0)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim * 2))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.dim))


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    widths: tuple[int, ...] = (48, 96, 96)
    time_dim: int = 64

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)


class Denoiser(nn.Module):
    """Small time-conditioned U-Net predicting the noise in a latent.

    The prompt input is a single learned null token added to the time embedding.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = c = config or DenoiserConfig()
        w = c.widths
        emb = c.time_dim * 2
        self.time = TimeEmbedding(c.time_dim)
        self.null_token = nn.Parameter(torch.zeros(emb))
        self.inp = nn.Conv2d(c.latent_channels, w[0], 3, 1, 1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = w[0]
        for i, width in enumerate(w):
            self.down.append(ResBlock(prev, width, emb))
            prev = width
            if i < len(w) - 1:
                self.downsample.append(nn.Conv2d(width, width, 3, 2, 1))
        self.mid = ResBlock(prev, prev, emb)
        self.up = nn.ModuleList()
        for width in reversed(w):
            self.up.append(ResBlock(prev + width, width, emb))
            prev = width
        self.out = nn.Sequential(_gn(prev), nn.SiLU(), nn.Conv2d(prev, c.latent_channels, 3, 1, 1))
        self.register_buffer("ready", torch.zeros((), dtype=torch.bool))

    def embed(self, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        e = self.time(t)
        return e + (self.null_token if cond is None else cond)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        emb = self.embed(t, cond)
        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for block in self.up:
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(h)


# -- training ---------------------------------------------------------------


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    log_every: int = 50
    ssim_weight: float = 0.5


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32).transpose(2, 0, 1) for im in images])
    return torch.from_numpy(arr)


def _write_log(path, rows):
    if path is None or not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def ssim_torch(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Differentiable mean SSIM on luma of (B, 3, H, W) tensors in [0, 1]."""
    luma = torch.tensor([0.299, 0.587, 0.114], dtype=a.dtype).reshape(1, 3, 1, 1)
    x, y = (a * luma).sum(1, keepdim=True), (b * luma).sum(1, keepdim=True)
    r = torch.arange(window, dtype=a.dtype) - (window - 1) / 2
    g = torch.exp(-0.5 * (r / sigma) ** 2)
    g = g / g.sum()
    gh, gv = g.reshape(1, 1, 1, -1), g.reshape(1, 1, -1, 1)

    def filt(v):
        return F.conv2d(F.conv2d(v, gh), gv)

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = filt(x), filt(y)
    sxx, syy, sxy = filt(x * x) - mx * mx, filt(y * y) - my * my, filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).mean()


def train_autoencoder(images, config: DiffusionTrainConfig | None = None,
                      model_config: AutoencoderConfig | None = None, out=None, log_path=None):
    """Reconstruction + tiny-KL training. Returns ``(model, history)``."""
    cfg = config or DiffusionTrainConfig()
    x_all = images_to_tensor(list(images))
    if len(x_all) == 0:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = Autoencoder(model_config)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(x_all), (cfg.batch_size,), generator=gen)
        x = x_all[idx]
        mean, logvar = model.moments(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        rec = model.decode_raw(z)
        rec_loss = (rec - x).abs().mean() + cfg.ssim_weight * (1.0 - ssim_torch(rec, x))
        kl = 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar).mean()
        loss = rec_loss + model.config.kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss.item(), "rec": rec_loss.item()})
            log.info("vae step %d loss %.4f", step, loss.item())
    model.eval()
    with torch.no_grad():
        means = torch.cat([model.moments(x_all[i:i + 64])[0] for i in range(0, len(x_all), 64)])
        model.scale.fill_(1.0 / float(means.std()))
    model.ready.fill_(True)
    if out is not None:
        save_autoencoder(out, model, cfg.steps)
    _write_log(log_path, history)
    return model, history


@torch.no_grad()
def encode_images(vae: Autoencoder, images, batch: int = 64) -> torch.Tensor:
    x = images if isinstance(images, torch.Tensor) else images_to_tensor(list(images))
    vae.eval()
    return torch.cat([vae.encode(x[i:i + batch]) for i in range(0, len(x), batch)])


def train_denoiser(images, vae: Autoencoder, config: DiffusionTrainConfig | None = None,
                   model_config: DenoiserConfig | None = None, out=None, log_path=None):
    """Fit the noise predictor on latents of ``images``. Returns ``(model, history)``."""
    cfg = config or DiffusionTrainConfig()
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    latents = encode_images(vae, images)
    if len(latents) == 0:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    mc = model_config or DenoiserConfig(latent_channels=latents.shape[1])
    model = Denoiser(mc)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, len(latents), (cfg.batch_size,), generator=gen)
        z = latents[idx]
        t = sample_timesteps(cfg.batch_size, schedule.T, gen)
        eps = torch.randn(z.shape, generator=gen)
        loss = ldm_loss(model, z, t, eps, schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": loss.item()})
            log.info("denoiser step %d loss %.4f", step, loss.item())
    model.eval()
    model.ready.fill_(True)
    if out is not None:
        save_denoiser(out, model, schedule_config(cfg), cfg.steps)
    _write_log(log_path, history)
    return model, history


def schedule_config(cfg: DiffusionTrainConfig) -> dict:
    return {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end}


@torch.no_grad()
def sample(denoiser: Denoiser, schedule: NoiseSchedule, shape, generator: torch.Generator) -> torch.Tensor:
    """Unconditional ancestral sampling from ``z_T ~ N(0, I)``."""
    if not bool(denoiser.ready):
        raise NotReadyError("denoiser has not been trained or loaded")
    z = torch.randn(shape, generator=generator)
    for t in range(schedule.T, 0, -1):
        eps = denoiser(z, torch.full((shape[0],), schedule.model_t(t)))
        noise = torch.randn(shape, generator=generator) if t > 1 else None
        z = p_sample_step(z, t, eps, schedule, noise)
    return z


# -- checkpoints ------------------------------------------------------------


def save_autoencoder(path, model: Autoencoder, step: int = 0) -> None:
    ffio.save_checkpoint(path, "vae", dataclasses.asdict(model.config), model.state_dict(), step)


def load_autoencoder(path) -> Autoencoder:
    payload = ffio.load_checkpoint(path, "vae")
    model = Autoencoder(AutoencoderConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    return model.eval()


def save_denoiser(path, model: Denoiser, schedule: dict, step: int = 0) -> None:
    ffio.save_checkpoint(path, "denoiser", dataclasses.asdict(model.config), model.state_dict(), step,
                         schedule=dict(schedule))


def load_denoiser(path) -> tuple[Denoiser, dict]:
    payload = ffio.load_checkpoint(path, "denoiser")
    model = Denoiser(DenoiserConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    return model.eval(), payload["schedule"]
