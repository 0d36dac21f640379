"""The full pipeline: encoders -> causal gates -> fusion -> latent -> {classifier, diffusion prior}."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn as nn
import torch.nn.functional as F

from .causal import CausalGraph, CausalGraphState, gate_modalities
from .classifier import ClassifierHead, task_loss
from .diffusion import EMA, UNet1d, build_schedule, ddim_sample, diffusion_loss
from .encoders import ModalityEncoders
from .vae import Fusion, LatentPosterior, Posterior, kl_free_bits, reparameterize

if TYPE_CHECKING:
    from .config import ExperimentConfig
    from .data import Batch


@dataclass
class LossParts:
    task: torch.Tensor
    kl: torch.Tensor
    diff: torch.Tensor
    causal: torch.Tensor
    recon: torch.Tensor


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    posterior: LatentPosterior
    z: torch.Tensor
    graph: CausalGraphState
    fused: torch.Tensor


class AffectDiff(nn.Module):
    def __init__(self, cfg: "ExperimentConfig"):
        super().__init__()
        self.cfg = cfg
        H, d_z, C = cfg.encoders.hidden, cfg.fusion_vae.latent_dim, cfg.data.num_classes
        self.encoders = ModalityEncoders(cfg.data.dims, cfg.encoders)
        self.graph = CausalGraph(H, cfg.causal_graph)
        self.fusion = Fusion(H)
        self.posterior = Posterior(H, cfg.fusion_vae)
        self.classifier = ClassifierHead(d_z, C, cfg.classifier.dropout)
        self.decoder = nn.Linear(d_z, H) if cfg.fusion_vae.recon_weight > 0 else None
        dcfg = cfg.diffusion
        if dcfg.enabled:
            self.unet = UNet1d(d_z, C, dcfg.base_dim, dcfg.channel_mult)
            self.ema = EMA(self.unet, dcfg.ema_decay)
            self.schedule = build_schedule(dcfg.steps, dcfg.cosine_s)
        else:
            self.unet = None
            self.ema = None
            self.schedule = None

    # -- groups used by the stop-gradient checks and the optimizer
    def representation_parameters(self):
        """Encoder, graph, fusion and posterior parameters."""
        for mod in (self.encoders, self.graph, self.fusion, self.posterior):
            yield from mod.named_parameters(prefix=self._prefix(mod))

    def _prefix(self, mod):
        for name, m in self.named_children():
            if m is mod:
                return name
        return ""

    def forward(self, text, audio, video, generator: torch.Generator | None = None,
                sample_latent: bool | None = None) -> ForwardOutput:
        if sample_latent is None:
            sample_latent = self.training
        h_t, h_a, h_v = self.encoders(text, audio, video)
        graph = self.graph(h_t, h_a, h_v, generator=generator)
        fused = self.fusion(*gate_modalities(h_t, h_a, h_v, graph.weights))
        post = self.posterior(fused)
        z = reparameterize(post, generator, sample=sample_latent)
        return ForwardOutput(self.classifier(z), post, z, graph, fused)

    def loss_parts(self, batch: "Batch", generator: torch.Generator | None = None) -> tuple[LossParts, ForwardOutput]:
        out = self(batch.text, batch.audio, batch.video, generator=generator)
        cfg = self.cfg
        zero = out.logits.new_zeros(())
        task = task_loss(out.logits, batch.labels, cfg.classifier)
        kl = kl_free_bits(out.posterior, cfg.fusion_vae.beta, cfg.fusion_vae.free_bits)
        if self.unet is not None:
            z0 = out.z.detach() if cfg.diffusion.stop_gradient else out.z
            diff = diffusion_loss(self.unet, z0, batch.labels, out.graph.weights.detach(), self.schedule,
                                  generator, cfg.diffusion.null_prob)
        else:
            diff = zero
        causal = out.graph.penalty if cfg.causal_graph.mode != "uniform" else zero
        recon = F.mse_loss(self.decoder(out.z), out.fused) if self.decoder is not None else zero
        return LossParts(task, kl, diff, causal, recon), out

    @torch.no_grad()
    def predict(self, text, audio, video) -> torch.Tensor:
        """Logits from the deterministic mean-latent path."""
        return self(text, audio, video, sample_latent=False).logits

    @torch.no_grad()
    def sample_latents(self, n: int, y, w, generator=None, cfg_scale: float | None = None, steps: int | None = None):
        if self.ema is None:
            raise RuntimeError("diffusion prior is disabled in this model")
        d = self.cfg.diffusion
        dtype = next(self.parameters()).dtype
        return ddim_sample(self.ema.shadow, n, y, w, self.schedule, self.cfg.data.seq_len,
                           self.cfg.fusion_vae.latent_dim, steps or d.ddim_steps,
                           d.cfg_scale if cfg_scale is None else cfg_scale, generator, dtype, d.x0_clip)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
