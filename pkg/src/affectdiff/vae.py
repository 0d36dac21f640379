"""Concat+MLP fusion and the variational bottleneck with free-bits KL."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

LOGVAR_MIN, LOGVAR_MAX = -10.0, 5.0


@dataclass
class VAEConfig:
    latent_dim: int = 128
    beta: float = 0.1
    free_bits: float = 0.25
    deterministic: bool = False
    recon_weight: float = 0.0


@dataclass
class LatentPosterior:
    mu: torch.Tensor
    logvar: torch.Tensor | None  # None for the deterministic projection


class Fusion(nn.Module):
    """[h_t; h_a; h_v] -> Linear -> LayerNorm -> GELU -> Linear, per timestep."""

    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.mlp = nn.Sequential(nn.Linear(3 * hidden, hidden), nn.LayerNorm(hidden), nn.GELU(),
                                 nn.Linear(hidden, hidden))

    def forward(self, h_t, h_a, h_v):
        if not (h_t.shape == h_a.shape == h_v.shape) or h_t.shape[-1] != self.hidden:
            raise ValueError(f"fusion inputs disagree: {tuple(h_t.shape)}, {tuple(h_a.shape)}, {tuple(h_v.shape)}")
        return self.mlp(torch.cat([h_t, h_a, h_v], dim=-1))


class Posterior(nn.Module):
    def __init__(self, hidden: int, cfg: VAEConfig):
        super().__init__()
        self.deterministic = cfg.deterministic
        self.mu = nn.Linear(hidden, cfg.latent_dim)
        if not cfg.deterministic:
            self.logvar = nn.Linear(hidden, cfg.latent_dim)

    def forward(self, fused) -> LatentPosterior:
        if self.deterministic:
            return LatentPosterior(self.mu(fused), None)
        return LatentPosterior(self.mu(fused), torch.clamp(self.logvar(fused), LOGVAR_MIN, LOGVAR_MAX))


def reparameterize(post: LatentPosterior, generator: torch.Generator | None = None,
                   sample: bool = True, eps: torch.Tensor | None = None) -> torch.Tensor:
    """z = mu + eps * exp(logvar / 2) when sampling; the mean otherwise."""
    if not sample or post.logvar is None:
        return post.mu
    if eps is None:
        eps = torch.randn(post.mu.shape, generator=generator, dtype=post.mu.dtype)
    return post.mu + eps * torch.exp(0.5 * post.logvar)


def kl_per_dim(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)


def kl_free_bits(post: LatentPosterior, beta: float = 0.1, free_bits: float = 0.25) -> torch.Tensor:
    """beta * mean over (batch, time) of sum_d max(0, KL_d - free_bits)."""
    if post.logvar is None:
        return post.mu.new_zeros(())
    hinge = torch.relu(kl_per_dim(post.mu, post.logvar) - free_bits)  # subgradient 0 at the kink
    return beta * hinge.sum(-1).mean()
