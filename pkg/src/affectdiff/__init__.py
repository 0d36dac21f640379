"""Causal-graph-gated multimodal emotion recognition with a latent diffusion prior."""

from .config import ExperimentConfig, desk_profile, paper_profile
from .model import AffectDiff

__all__ = ["AffectDiff", "ExperimentConfig", "desk_profile", "paper_profile"]
__version__ = "0.1.0"
