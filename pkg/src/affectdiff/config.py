"""Experiment configuration: typed sections, INI round-trip, dotted overrides
and the named profiles."""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .causal import CausalConfig
from .classifier import TaskLossConfig
from .data import AugmentationPolicy, DatasetConfig
from .diffusion import DiffusionConfig
from .encoders import EncoderConfig
from .vae import VAEConfig

ABLATIONS = ("none", "no_diffusion", "no_causal_graph", "gumbel", "no_stop_gradient", "no_vae")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    cosine_epochs: int = 100
    grad_clip: float = 1.0
    batch_size: int = 64
    eval_batch_size: int = 256
    epochs: int = 100
    patience: int = 35
    seed: int = 42
    seeds: tuple[int, ...] = (42, 43, 44)
    lambda_d: float = 0.05
    lambda_c: float = 0.05
    diffusion_warmup: int = 20
    kl_warmup: int = 30
    diffusion_warmup_start: int = 0
    mixed_precision: bool = False
    ablation: str = "none"
    threads: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if min(self.lambda_d, self.lambda_c, self.weight_decay, self.lr) < 0:
            raise ConfigError("loss weights and optimizer constants must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")


@dataclass
class EvalConfig:
    noise_sigmas: tuple[float, ...] = (0.1, 0.5, 2.0)
    mask_ps: tuple[float, ...] = (0.10, 0.25, 0.50)
    eval_seed: int = 1234
    latency_runs: int = 10
    latency_warmup: int = 2
    latency_batch: int = 32


@dataclass
class ExperimentConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    causal_graph: CausalConfig = field(default_factory=CausalConfig)
    fusion_vae: VAEConfig = field(default_factory=VAEConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    classifier: TaskLossConfig = field(default_factory=TaskLossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_values(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` style updates (already typed)."""
        cfg = self
        for key, value in dotted.items():
            section, name = key.split("__", 1)
            sub = dataclasses.replace(getattr(cfg, section), **{name: value})
            cfg = dataclasses.replace(cfg, **{section: sub})
        return cfg


SECTIONS = [f.name for f in dataclasses.fields(ExperimentConfig)]

# symbol comments written next to each hyperparameter in dumped files
SYMBOLS = {
    "data.text_dim": "D_T", "data.audio_dim": "D_A", "data.video_dim": "D_V", "data.seq_len": "L",
    "data.num_classes": "C",
    "augment.frame_mask_p": "p_mask", "augment.noise_sigma": "sigma", "augment.modality_drop_p": "p_drop",
    "encoders.hidden": "H",
    "causal_graph.gumbel_tau": "tau",
    "fusion_vae.latent_dim": "d_z", "fusion_vae.beta": "beta", "fusion_vae.free_bits": "lambda (free bits, nats)",
    "diffusion.steps": "T", "diffusion.cosine_s": "s", "diffusion.cfg_scale": "CFG scale s",
    "diffusion.ema_decay": "gamma_EMA", "diffusion.ddim_steps": "DDIM steps (eta = 0)",
    "classifier.label_smoothing": "alpha", "classifier.focal_gamma": "gamma (focal)",
    "train.lambda_d": "lambda_d", "train.lambda_c": "lambda_c", "train.lr": "lr (AdamW)",
    "train.diffusion_warmup": "gamma = min(1, epoch / this)", "train.kl_warmup": "gamma_kl = min(1, epoch / this)",
}


def _field_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _parse(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _parse(raw, args[0], where)
    if origin is tuple:
        (elem, *_rest) = typing.get_args(tp)
        if not raw:
            return ()
        return tuple(_parse(p, elem, where) for p in raw.split(","))
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _build(values: dict[str, dict[str, str]], base: ExperimentConfig) -> ExperimentConfig:
    sections = {}
    for name in SECTIONS:
        current = getattr(base, name)
        types_ = _field_types(type(current))
        updates = {}
        for key, raw in values.get(name, {}).items():
            if key not in types_:
                raise ConfigError(f"unknown key {name}.{key}")
            updates[key] = _parse(raw, types_[key], f"{name}.{key}")
        try:
            sections[name] = dataclasses.replace(current, **updates)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    return ExperimentConfig(**sections)


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    values = {s: dict(parser[s]) for s in parser.sections()}
    return _build(values, base or ExperimentConfig())


def load(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return loads(Path(path).read_text(), base)


def dumps(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for name in SECTIONS:
        out.write(f"[{name}]\n")
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            line = f"{f.name} = {_format(getattr(section, f.name))}"
            sym = SYMBOLS.get(f"{name}.{f.name}")
            out.write(f"{line}  # {sym}\n" if sym else line + "\n")
        out.write("\n")
    return out.getvalue()


def dump(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps(cfg))
    return path


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; unknown keys are rejected."""
    values: dict[str, dict[str, str]] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        section, name = key.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        values.setdefault(section, {})[name] = raw
    return _build(values, cfg)


def apply_ablation(cfg: ExperimentConfig, token: str) -> ExperimentConfig:
    """Config with exactly the fields implied by one ablation token changed."""
    if token not in ABLATIONS:
        raise ConfigError(f"unknown ablation {token!r}; expected one of {ABLATIONS}")
    if token == "none":
        return cfg
    changes = {
        "no_diffusion": {"diffusion__enabled": False},
        "no_causal_graph": {"causal_graph__mode": "uniform"},
        "gumbel": {"causal_graph__mode": "gumbel"},
        "no_stop_gradient": {"diffusion__stop_gradient": False},
        "no_vae": {"fusion_vae__deterministic": True},
    }[token]
    return cfg.with_values(train__ablation=token, **changes)


def paper_profile() -> ExperimentConfig:
    """Full-size hyperparameters."""
    return ExperimentConfig()


def desk_profile() -> ExperimentConfig:
    """Small widths and a short schedule that train on one CPU core in minutes."""
    return ExperimentConfig().with_values(
        encoders__hidden=32, fusion_vae__latent_dim=32, diffusion__base_dim=32, diffusion__steps=200,
        train__batch_size=32, train__epochs=40)


def sentiment_profile() -> ExperimentConfig:
    """Seven-class sentiment variant with 768-d text features."""
    return paper_profile().with_values(data__text_dim=768, data__num_classes=7,
                                       data__proportions=(1 / 7,) * 7, classifier__focal_gamma=1.0)


PROFILES = {"desk": desk_profile, "paper": paper_profile, "sentiment": sentiment_profile}
