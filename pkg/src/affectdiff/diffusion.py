"""Conditional 1D latent diffusion: cosine schedule, U-Net noise predictor,
classifier-free guidance, deterministic DDIM sampling and EMA weights."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import group_count


@dataclass
class DiffusionConfig:
    enabled: bool = True
    steps: int = 1000
    base_dim: int = 128
    channel_mult: tuple[int, ...] = (1, 2, 4)
    cosine_s: float = 0.008
    null_prob: float = 0.2
    cfg_scale: float = 3.0
    ddim_steps: int = 50
    ema_decay: float = 0.999
    stop_gradient: bool = True
    x0_clip: float | None = None

    def __post_init__(self):
        if len(self.channel_mult) != 3:
            raise ValueError("the U-Net has exactly three resolutions")
        if not 0.0 <= self.null_prob <= 1.0:
            raise ValueError("null_prob must be a probability")


@dataclass
class DiffusionSchedule:
    T: int
    alpha_bar: torch.Tensor  # float64, length T + 1, alpha_bar[0] = 1
    betas: torch.Tensor  # float64, length T + 1, betas[0] = 0


def build_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> DiffusionSchedule:
    """Cosine schedule f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2).

    Per-step betas are clipped at ``max_beta`` and alpha_bar is rebuilt as
    their cumulative product, which keeps every entry strictly positive.
    """
    if T < 2:
        raise ValueError("need at least two diffusion steps")
    t = torch.arange(T + 1, dtype=torch.float64)
    f = torch.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    ab = f / f[0]
    betas = torch.zeros(T + 1, dtype=torch.float64)
    betas[1:] = torch.clamp(1 - ab[1:] / ab[:-1], max=max_beta)
    alpha_bar = torch.cumprod(1 - betas, 0)
    return DiffusionSchedule(T, alpha_bar, betas)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps, with t a scalar or a [B] tensor."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (t.min() < 0 or t.max() > schedule.T):
        raise ValueError(f"timestep outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[t].to(z0.dtype)
    if ab.dim() == 1:
        ab = ab.view(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freq[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


class Conditioning(nn.Module):
    """c = MLP_t(t) + Emb_y(y or null) + MLP_w(w)."""

    def __init__(self, num_classes: int, dim: int):
        super().__init__()
        self.dim = dim
        self.null_token = num_classes
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.label_emb = nn.Embedding(num_classes + 1, dim)
        self.weight_mlp = nn.Sequential(nn.Linear(3, dim), nn.SiLU(), nn.Linear(dim, dim))

    def parts(self, t, y, w):
        t_emb = self.time_mlp(timestep_embedding(t, self.dim, w.dtype))
        return t_emb, self.label_emb(y), self.weight_mlp(w)

    def forward(self, t, y, w):
        t_emb, y_emb, w_emb = self.parts(t, y, w)
        return t_emb + y_emb + w_emb


class ResBlock1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(c_in), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.cond = nn.Linear(cond_dim, c_out)
        self.norm2 = nn.GroupNorm(group_count(c_out), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, c):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond(c)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet1d(nn.Module):
    """Three-resolution encoder/bottleneck/decoder over [B, L, d_z] latents."""

    def __init__(self, latent_dim: int, num_classes: int, base: int = 128, mult=(1, 2, 4)):
        super().__init__()
        c0, c1, c2 = (base * m for m in mult)
        cond_dim = 4 * base
        self.cond = Conditioning(num_classes, cond_dim)
        self.inp = nn.Conv1d(latent_dim, c0, 3, padding=1)
        self.down0 = ResBlock1d(c0, c0, cond_dim)
        self.pool0 = nn.Conv1d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock1d(c0, c1, cond_dim)
        self.pool1 = nn.Conv1d(c1, c1, 3, stride=2, padding=1)
        self.mid0 = ResBlock1d(c1, c2, cond_dim)
        self.mid1 = ResBlock1d(c2, c2, cond_dim)
        self.up1_conv = nn.Conv1d(c2, c2, 3, padding=1)
        self.up1 = ResBlock1d(c2 + c1, c1, cond_dim)
        self.up0_conv = nn.Conv1d(c1, c1, 3, padding=1)
        self.up0 = ResBlock1d(c1 + c0, c0, cond_dim)
        self.out_norm = nn.GroupNorm(group_count(c0), c0)
        self.out = nn.Conv1d(c0, latent_dim, 3, padding=1)

    @property
    def null_token(self) -> int:
        return self.cond.null_token

    def forward(self, z_t, t, y, w):
        """Predict the noise in ``z_t`` ([B, L, d_z]); any L works via right padding."""
        L = z_t.shape[1]
        pad = (-L) % 4
        x = z_t.transpose(1, 2)
        if pad:
            x = F.pad(x, (0, pad))
        c = self.cond(t, y, w)
        h0 = self.down0(self.inp(x), c)
        h1 = self.down1(self.pool0(h0), c)
        h = self.mid1(self.mid0(self.pool1(h1), c), c)
        h = self.up1_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, h1], 1), c)
        h = self.up0_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, h0], 1), c)
        out = self.out(F.silu(self.out_norm(h)))
        return out[:, :, :L].transpose(1, 2)


def diffusion_loss(eps_model, z0: torch.Tensor, y: torch.Tensor, w: torch.Tensor,
                   schedule: DiffusionSchedule, generator: torch.Generator | None = None,
                   null_prob: float = 0.2, null_token: int | None = None) -> torch.Tensor:
    """Noise-prediction MSE at a uniform random step in [1, T].

    Labels are swapped for ``null_token`` with probability ``null_prob``;
    ``t`` and ``w`` conditioning are never dropped. The caller decides whether
    ``z0`` is detached.
    """
    B = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    drop = torch.rand(B, generator=generator) < null_prob
    if null_token is None:
        null_token = eps_model.null_token
    y_in = torch.where(drop, torch.full_like(y, null_token), y)
    z_t = q_sample(z0, t, eps, schedule)
    return F.mse_loss(eps_model(z_t, t, y_in, w), eps)


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """eps_u + s (eps_c - eps_u); lerp returns eps_c exactly at s = 1."""
    return torch.lerp(eps_uncond, eps_cond, scale)


def ddim_timesteps(T: int, steps: int = 50) -> list[int]:
    """round(T*k/steps) for k = steps..1, deduplicated, descending, all >= 1."""
    ts = []
    for k in range(steps, 0, -1):
        t = int(math.floor(T * k / steps + 0.5))
        if t >= 1 and (not ts or t != ts[-1]):
            ts.append(t)
    return ts


@torch.no_grad()
def ddim_sample(eps_model, n: int, y, w, schedule: DiffusionSchedule, length: int, latent_dim: int,
                steps: int = 50, cfg_scale: float | None = 3.0, generator: torch.Generator | None = None,
                dtype=torch.float32, x0_clip: float | None = None) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM sampling with classifier-free guidance.

    ``cfg_scale=None`` runs the conditional branch alone.
    """
    if n <= 0:
        raise ValueError("number of samples must be positive")
    y = torch.as_tensor(y, dtype=torch.long).expand(n) if torch.as_tensor(y).dim() == 0 else torch.as_tensor(y)
    w = torch.as_tensor(w, dtype=dtype)
    if w.dim() == 1:
        w = w.expand(n, -1)
    null = torch.full_like(y, eps_model.null_token)
    x = torch.randn((n, length, latent_dim), generator=generator, dtype=dtype)
    ts = ddim_timesteps(schedule.T, steps)
    ab = schedule.alpha_bar
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((n,), t, dtype=torch.long)
        eps = eps_model(x, tt, y, w)
        if cfg_scale is not None:
            # separate passes keep the conditional branch bit-equal to the unguided path
            eps = guided_noise(eps, eps_model(x, tt, null, w), cfg_scale)
        a_t, a_prev = ab[t].item(), ab[t_prev].item()
        x0 = (x - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        if x0_clip is not None:
            x0 = x0.clamp(-x0_clip, x0_clip)
        x = math.sqrt(a_prev) * x0 + math.sqrt(1 - a_prev) * eps
    return x


def ema_update(shadow, live, gamma: float = 0.999):
    """shadow <- gamma * shadow + (1 - gamma) * live, in place, element-wise.

    Written as a lerp so that gamma = 1 and shadow == live are exact fixed points.
    """
    shadow, live = list(shadow), list(live)
    if len(shadow) != len(live):
        raise ValueError("shadow and live parameter lists differ in length")
    for s, p in zip(shadow, live):
        if s.shape != p.shape:
            raise ValueError(f"EMA shape mismatch {tuple(s.shape)} vs {tuple(p.shape)}")
    with torch.no_grad():
        torch._foreach_lerp_(shadow, [p.detach() for p in live], 1.0 - gamma)
    return shadow


class EMA(nn.Module):
    """Frozen shadow copy of a module, updated by ``ema_update``."""

    def __init__(self, module: nn.Module, decay: float = 0.999):
        super().__init__()
        self.decay = decay
        self.shadow = copy.deepcopy(module)
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    def update(self, module: nn.Module):
        ema_update(self.shadow.parameters(), module.parameters(), self.decay)
        with torch.no_grad():
            for s, b in zip(self.shadow.buffers(), module.buffers()):
                s.copy_(b)

    def forward(self, *args, **kw):
        return self.shadow(*args, **kw)
