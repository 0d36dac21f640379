from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class TaskLossConfig:
    label_smoothing: float = 0.1
    focal_gamma: float = 2.0
    dropout: float = 0.3
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")


def attention_pool(z: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """softmax_l(q . z_l / sqrt(d_z)) weighted sum of the timesteps of [B, L, d_z]."""
    attn = torch.softmax(z @ q / math.sqrt(z.shape[-1]), dim=-1)
    return (attn.unsqueeze(-1) * z).sum(1)


class ClassifierHead(nn.Module):
    def __init__(self, latent_dim: int, num_classes: int, dropout: float = 0.3):
        super().__init__()
        self.query = nn.Parameter(torch.randn(latent_dim) * 0.02)
        self.mlp = nn.Sequential(nn.Linear(latent_dim, latent_dim), nn.LayerNorm(latent_dim), nn.GELU(),
                                 nn.Dropout(dropout), nn.Linear(latent_dim, num_classes))

    def forward(self, z):
        return self.mlp(attention_pool(z, self.query))


def task_loss(logits: torch.Tensor, y: torch.Tensor, cfg: TaskLossConfig | None = None) -> torch.Tensor:
    """Focal-modulated, label-smoothed cross-entropy, averaged over the batch.

    Per sample: (1 - p_y)^gamma * sum_c -t_c log p_c with
    t_c = (1 - alpha) [c = y] + alpha / C. Optional class weights scale each
    sample by the weight of its true class.
    """
    cfg = cfg or TaskLossConfig()
    C = logits.shape[-1]
    if y.numel() and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = F.log_softmax(logits, dim=-1)
    target = torch.full_like(logp, cfg.label_smoothing / C)
    target.scatter_add_(-1, y[:, None], torch.full_like(logp[:, :1], 1.0 - cfg.label_smoothing))
    ce = -(target * logp).sum(-1)
    p_y = logp.gather(-1, y[:, None]).squeeze(-1).exp()
    loss = (1.0 - p_y).pow(cfg.focal_gamma) * ce
    if cfg.class_weights is not None:
        loss = loss * torch.as_tensor(cfg.class_weights, dtype=loss.dtype)[y]
    return loss.mean()
