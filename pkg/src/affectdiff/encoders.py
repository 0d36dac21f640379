"""Per-modality sequence encoders mapping [B, L, D_m] to [B, L, H]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    audio_kernel: int = 5
    video_kernel: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.hidden % 2:
            raise ValueError("hidden width must be even for sinusoidal positions")
        for k in (self.audio_kernel, self.video_kernel):
            if k % 2 == 0:
                raise ValueError(f"conv kernel {k} must be odd")


def group_count(channels: int) -> int:
    return 8 if channels >= 32 and channels % 8 == 0 else 1


def positional_encoding(length: int, hidden: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal table: even columns sin(pos / 10000^(2i/H)), odd columns cos."""
    if hidden % 2:
        raise ValueError(f"positional encoding needs an even width, got {hidden}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, hidden, 2, dtype=torch.float64) / hidden)
    pe = torch.zeros(length, hidden, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe.to(dtype)


class PreNormLayer(nn.Module):
    """x + MHA(LN(x)), then x + FF(LN(x)) with a GELU feed-forward."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        H = cfg.hidden
        self.heads = cfg.heads
        self.dropout = cfg.dropout
        self.norm1 = nn.LayerNorm(H)
        self.qkv = nn.Linear(H, 3 * H)
        self.out = nn.Linear(H, H)
        self.norm2 = nn.LayerNorm(H)
        self.ff = nn.Sequential(nn.Linear(H, cfg.ff_mult * H), nn.GELU(), nn.Dropout(cfg.dropout),
                                nn.Linear(cfg.ff_mult * H, H))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        B, L, H = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, L, 3, self.heads, H // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        a = F.dropout(attn, self.dropout, self.training) @ v
        x = x + self.drop(self.out(a.transpose(1, 2).reshape(B, L, H)))
        return x + self.drop(self.ff(self.norm2(x)))


class Backbone(nn.Module):
    """Positional encoding + pre-norm transformer stack with a final LayerNorm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.layers = nn.ModuleList(PreNormLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden)

    def forward(self, x):
        x = x + positional_encoding(x.shape[1], x.shape[2], x.dtype).to(x.device)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, in_dim: int, cfg: EncoderConfig):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Linear(in_dim, cfg.hidden)
        self.backbone = Backbone(cfg)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"text features have width {x.shape[-1]}, expected {self.in_dim}")
        return self.backbone(self.proj(x))


class ConvEncoder(nn.Module):
    """Same-length 1D conv front-end (GroupNorm, GELU) before the shared backbone."""

    def __init__(self, in_dim: int, cfg: EncoderConfig, kernel: int):
        super().__init__()
        self.in_dim = in_dim
        self.conv = nn.Conv1d(in_dim, cfg.hidden, kernel, padding=(kernel - 1) // 2)
        self.norm = nn.GroupNorm(group_count(cfg.hidden), cfg.hidden)
        self.act = nn.GELU()
        self.backbone = Backbone(cfg)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"features have width {x.shape[-1]}, expected {self.in_dim}")
        h = self.act(self.norm(self.conv(x.transpose(1, 2)))).transpose(1, 2)
        return self.backbone(h)


class ModalityEncoders(nn.Module):
    def __init__(self, dims: dict[str, int], cfg: EncoderConfig):
        super().__init__()
        self.text = TextEncoder(dims["text"], cfg)
        self.audio = ConvEncoder(dims["audio"], cfg, cfg.audio_kernel)
        self.video = ConvEncoder(dims["video"], cfg, cfg.video_kernel)

    def forward(self, text, audio, video):
        return self.text(text), self.audio(audio), self.video(video)


def backbone_param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count of one backbone."""
    H, W = cfg.hidden, cfg.ff_mult * cfg.hidden
    attn = 3 * H * H + 3 * H + H * H + H
    ff = H * W + W + W * H + H
    norms = 2 * 2 * H
    return cfg.layers * (attn + ff + norms) + 2 * H


def encoder_param_count(in_dim: int, cfg: EncoderConfig, kernel: int | None = None) -> int:
    """Closed-form parameter count of a text (kernel=None) or conv encoder."""
    H = cfg.hidden
    front = in_dim * H + H if kernel is None else in_dim * H * kernel + H + 2 * H
    return front + backbone_param_count(cfg)
