"""Soft DAG over the three modality nodes and the importance gates it produces."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

CAUSAL_MODES = ("notears", "uniform", "gumbel")
N_NODES = 3


@dataclass
class CausalConfig:
    mode: str = "notears"
    gumbel_tau: float = 1.0

    def __post_init__(self):
        if self.mode not in CAUSAL_MODES:
            raise ValueError(f"unknown causal mode {self.mode!r}; expected one of {CAUSAL_MODES}")
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")


@dataclass
class CausalGraphState:
    scores: torch.Tensor  # [..., 3, 3]
    adjacency: torch.Tensor  # [..., 3, 3], zero diagonal
    weights: torch.Tensor  # [..., 3] on the simplex
    penalty: torch.Tensor  # scalar


def edge_scores(h_bar: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product scores between node embeddings.

    ``h_bar`` is [..., 3, H]; ``w_q``/``w_k`` are [H', H] projection matrices.
    Returns [..., 3, 3]; the diagonal is computed but carries no meaning.
    """
    q = h_bar @ w_q.T
    k = h_bar @ w_k.T
    return q @ k.transpose(-1, -2) / math.sqrt(h_bar.shape[-1])


def _offdiag_mask(like: torch.Tensor) -> torch.Tensor:
    n = like.shape[-1]
    return 1.0 - torch.eye(n, dtype=like.dtype, device=like.device)


def adjacency(scores: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(scores) * _offdiag_mask(scores)


def gumbel_adjacency(scores: torch.Tensor, tau: float = 1.0,
                     generator: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Relaxed Bernoulli edges sigmoid((S + g) / tau) with logistic noise g."""
    if noise is None:
        u = torch.rand(scores.shape, generator=generator, dtype=scores.dtype).clamp(1e-12, 1 - 1e-12)
        noise = torch.log(u) - torch.log1p(-u)
    return torch.sigmoid((scores + noise) / tau) * _offdiag_mask(scores)


def matrix_exp(m: torch.Tensor, order: int = 12) -> torch.Tensor:
    """exp(M) by scaling and squaring around a truncated Taylor series.

    M is scaled by 2^-s so its 1-norm is at most 1/2; the order-12 remainder
    is then below 0.5^13/13! ~ 2e-14 relative, and s squarings keep the error
    near 1e-13 for 3x3 inputs of norm <= 3. Built from matmuls only, so
    autograd differentiates it directly.
    """
    norm = m.abs().sum(-2).amax(-1).max().item() if m.numel() else 0.0
    s = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    a = m / (2 ** s)
    eye = torch.eye(m.shape[-1], dtype=m.dtype, device=m.device).expand_as(m)
    term, out = eye, eye
    for k in range(1, order + 1):
        term = term @ a / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def notears_penalty(adj: torch.Tensor) -> torch.Tensor:
    """Acyclicity measure trace(exp(A * A)) - d; zero exactly on DAGs."""
    d = adj.shape[-1]
    e = matrix_exp(adj * adj)
    return torch.diagonal(e, dim1=-2, dim2=-1).sum(-1) - d


def importance_weights(adj: torch.Tensor) -> torch.Tensor:
    """Softmax over the column sums (in-degree mass) of the adjacency."""
    return torch.softmax(adj.sum(-2), dim=-1)


def gate_modalities(h_t, h_a, h_v, weights: torch.Tensor):
    """Scale each [B, L, H] sequence by its scalar weight ([B, 3] or [3])."""
    w = weights if weights.dim() == 2 else weights.expand(h_t.shape[0], -1)
    return h_t * w[:, 0, None, None], h_a * w[:, 1, None, None], h_v * w[:, 2, None, None]


class CausalGraph(nn.Module):
    """Learns per-sample edge scores from mean-pooled modality embeddings."""

    def __init__(self, hidden: int, cfg: CausalConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.mode != "uniform":
            self.w_q = nn.Linear(hidden, hidden, bias=False)
            self.w_k = nn.Linear(hidden, hidden, bias=False)

    def forward(self, h_t, h_a, h_v, generator: torch.Generator | None = None) -> CausalGraphState:
        B = h_t.shape[0]
        if self.cfg.mode == "uniform":
            zeros = h_t.new_zeros(B, N_NODES, N_NODES)
            w = h_t.new_full((B, N_NODES), 1.0 / N_NODES)
            return CausalGraphState(zeros, zeros, w, h_t.new_zeros(()))
        h_bar = torch.stack([h_t.mean(1), h_a.mean(1), h_v.mean(1)], dim=1)
        s = edge_scores(h_bar, self.w_q.weight, self.w_k.weight)
        if self.cfg.mode == "gumbel":
            if self.training:
                a = gumbel_adjacency(s, self.cfg.gumbel_tau, generator)
            else:
                a = adjacency(s / self.cfg.gumbel_tau)
            mask = _offdiag_mask(a)
            penalty = (a.abs() * mask).sum((-2, -1)).mean() / mask.sum()
        else:
            a = adjacency(s)
            penalty = notears_penalty(a).mean()
        return CausalGraphState(s, a, importance_weights(a), penalty)
