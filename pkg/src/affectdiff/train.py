"""Joint objective, curriculum warmups, the training loop and checkpoints."""

from __future__ import annotations

import base64
import json
import logging
import math
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .affd import AffdWriter, FormatError, read_payload
from .config import ABLATIONS, ExperimentConfig, TrainConfig, apply_ablation  # noqa: F401  (re-exported)
from .data import PreparedData, augment, stream, stream_seed
from .metrics import evaluate
from .model import AffectDiff, LossParts

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODALITY_NAMES = ("T", "A", "V")


class NumericalAbort(RuntimeError):
    """A non-finite loss was produced; carries the offending batch diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class LossBreakdown:
    task: float
    kl: float
    diff: float
    causal: float
    total: float
    gamma: float
    gamma_kl: float
    recon: float = 0.0


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def warmup_factors(epoch: int, train_cfg: TrainConfig | None = None) -> tuple[float, float]:
    """Linear ramps (gamma, gamma_kl); gamma starts at ``diffusion_warmup_start``."""
    t = train_cfg or TrainConfig()
    gamma = min(1.0, max(0.0, (epoch - t.diffusion_warmup_start) / t.diffusion_warmup))
    gamma_kl = min(1.0, epoch / t.kl_warmup)
    return gamma, gamma_kl


def active_terms(cfg: ExperimentConfig) -> dict[str, bool]:
    return {"kl": not cfg.fusion_vae.deterministic,
            "diff": cfg.diffusion.enabled,
            "causal": cfg.causal_graph.mode != "uniform",
            "recon": cfg.fusion_vae.recon_weight > 0}


def weighted_terms(parts, epoch: int, cfg: ExperimentConfig) -> dict[str, object]:
    """The weighted summands of the joint objective; ablated terms are absent."""
    gamma, gamma_kl = warmup_factors(epoch, cfg.train)
    on = active_terms(cfg)
    terms = {"task": parts.task}
    if on["kl"]:
        terms["kl"] = gamma_kl * parts.kl
    if on["diff"]:
        terms["diff"] = gamma * cfg.train.lambda_d * parts.diff
    if on["causal"]:
        terms["causal"] = cfg.train.lambda_c * parts.causal
    if on["recon"]:
        terms["recon"] = cfg.fusion_vae.recon_weight * parts.recon
    return terms


def sum_terms(terms: dict):
    """Left-to-right sum in insertion order, so logs recombine bit-exactly."""
    total = None
    for v in terms.values():
        total = v if total is None else total + v
    return total


def combine(parts, epoch: int, cfg: ExperimentConfig):
    """task + g_kl*kl + g*lambda_d*diff + lambda_c*causal, ablated terms omitted.

    Works on tensors (for backward) and on plain floats (for logs).
    """
    gamma, gamma_kl = warmup_factors(epoch, cfg.train)
    return sum_terms(weighted_terms(parts, epoch, cfg)), gamma, gamma_kl


def joint_loss(parts, epoch: int, cfg: ExperimentConfig) -> LossBreakdown:
    """Float-valued breakdown of the joint objective for ``parts``.

    ``parts`` is anything with task/kl/diff/causal (and optionally recon)
    attributes or a 4-tuple in that order.
    """
    if isinstance(parts, (tuple, list)):
        parts = LossParts(*[float(v) for v in parts], *([0.0] * (5 - len(parts))))
    vals = LossParts(*[_scalar(getattr(parts, k)) for k in ("task", "kl", "diff", "causal", "recon")])
    total, gamma, gamma_kl = combine(vals, epoch, cfg)
    return LossBreakdown(vals.task, vals.kl, vals.diff, vals.causal, float(total), gamma, gamma_kl, vals.recon)


def cosine_lr(epoch: int, t: TrainConfig) -> float:
    e = min(epoch, t.cosine_epochs)
    return t.lr * 0.5 * (1.0 + math.cos(math.pi * e / t.cosine_epochs))


def clip_gradients(params, max_norm: float) -> float:
    """Global l2 clip; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


# --------------------------------------------------------------------------
# checkpoints


def _encode_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def _decode_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def save_checkpoint(path: str | Path, model: AffectDiff, optimizer, epoch: int, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.affd`` (tensors)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    if optimizer is not None:
        index = {id(p): i for i, p in enumerate(optimizer.param_groups[0]["params"])}
        for p, st in optimizer.state.items():
            for k in sorted(st):
                tensors.append((f"optim/{index[id(p)]}/{k}", st[k]))
    entries = []
    with AffdWriter(path.with_suffix(".affd")) as w:
        for name, t in tensors:
            t = t.detach()
            if t.dtype != torch.float32:
                raise FormatError(f"checkpoint tensor {name} has dtype {t.dtype}; only float32 is stored")
            entries.append({"name": name, "shape": list(t.shape), "offset": w.append(t.numpy())})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": cfgmod.dumps(model.cfg),
        "torch_rng": _encode_state(torch.get_rng_state()),
        "tensors": entries,
        "extra": extra or {},
    }
    if optimizer is not None:
        manifest["optimizer"] = {k: v for k, v in optimizer.param_groups[0].items() if k != "params"}
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path.with_suffix(".json")


@dataclass
class Checkpoint:
    model: AffectDiff
    epoch: int
    config: ExperimentConfig
    optimizer_state: dict
    optimizer_hparams: dict
    torch_rng: torch.Tensor
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path).with_suffix(".json")
    if not path.exists():
        raise FormatError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    cfg = cfgmod.loads(manifest["config"])
    payload = read_payload(path.with_suffix(".affd"))
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = (e["offset"] - 8) // 4
        tensors[e["name"]] = torch.from_numpy(payload[start:start + n].copy()).reshape(e["shape"])
    model = AffectDiff(cfg)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    optim = {}
    for k, v in tensors.items():
        if k.startswith("optim/"):
            _, idx, key = k.split("/", 2)
            optim.setdefault(int(idx), {})[key] = v
    return Checkpoint(model, manifest["epoch"], cfg, optim, manifest.get("optimizer", {}),
                      _decode_state(manifest["torch_rng"]), manifest.get("extra", {}))


def _restore_optimizer(optimizer, ckpt: Checkpoint):
    params = optimizer.param_groups[0]["params"]
    state = {"state": {i: dict(s) for i, s in ckpt.optimizer_state.items()},
             "param_groups": [dict(optimizer.param_groups[0], params=list(range(len(params))))]}
    optimizer.load_state_dict(state)


# --------------------------------------------------------------------------
# training


@dataclass
class RunArtifacts:
    model: AffectDiff
    config: ExperimentConfig
    seed: int
    best_epoch: int
    best_val_balanced_accuracy: float
    epoch_log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    stopped_early: bool = False


def build_model(cfg: ExperimentConfig) -> AffectDiff:
    torch.manual_seed(cfg.train.seed)
    return AffectDiff(cfg)


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(cfg: ExperimentConfig, data: PreparedData, checkpoint_dir: str | Path | None = None,
          resume: bool = False, progress=None) -> RunArtifacts:
    """Optimize the joint objective with early stopping on validation balanced accuracy.

    Every random draw is keyed by (seed, epoch, batch, stream) so a run is
    reproducible and a resume from the best checkpoint replays exactly.
    """
    t = cfg.train
    torch.set_num_threads(t.threads)
    seed = t.seed
    model = build_model(cfg)
    params = model.trainable_parameters()
    optimizer = torch.optim.AdamW(params, lr=t.lr, weight_decay=t.weight_decay, foreach=True)
    ckpt_path = Path(checkpoint_dir) / "best" if checkpoint_dir is not None else None

    start, rows = 0, []
    best_epoch, best_val, best_state = -1, -math.inf, None
    if resume and ckpt_path is not None and ckpt_path.with_suffix(".json").exists():
        ck = load_checkpoint(ckpt_path)
        model.load_state_dict(ck.model.state_dict())
        _restore_optimizer(optimizer, ck)
        rows = ck.extra["epoch_log"]
        start = ck.epoch + 1
        best_epoch, best_val = ck.epoch, ck.extra["best_val_balanced_accuracy"]
        best_state = _snapshot(model)
        log.info("resuming from epoch %d", start)

    C = cfg.data.num_classes
    amp = torch.autocast("cpu", dtype=torch.bfloat16) if t.mixed_precision else nullcontext()
    stopped = False
    for epoch in range(start, t.epochs):
        lr = cosine_lr(epoch, t)
        for g in optimizer.param_groups:
            g["lr"] = lr
        torch.manual_seed(stream_seed(seed, epoch, 0))
        model.train()
        sums = {k: 0.0 for k in ("task", "kl", "diff", "causal", "recon")}
        n_seen = 0
        clipped = 0
        for bi, batch in enumerate(data.train.batches(t.batch_size, shuffle_seed=stream_seed(seed, epoch, 1))):
            batch = augment(batch, cfg.augment, stream(seed, epoch, bi, 2))
            with amp:
                parts, _ = model.loss_parts(batch, stream(seed, epoch, bi, 3))
                total, _, _ = combine(parts, epoch, cfg)
            if not torch.isfinite(total):
                diag = {"epoch": epoch, "batch": bi, **{k: _scalar(getattr(parts, k)) for k in sums}}
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {bi}: {diag}", diag)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if clip_gradients(params, t.grad_clip) > t.grad_clip:
                clipped += 1
            optimizer.step()
            if model.ema is not None:
                model.ema.update(model.unet)
            nb = len(batch)
            n_seen += nb
            for k in sums:
                sums[k] += _scalar(getattr(parts, k)) * nb
        bd = joint_loss(LossParts(*[sums[k] / n_seen for k in ("task", "kl", "diff", "causal", "recon")]), epoch, cfg)

        model.eval()
        val = evaluate(model, data.val, C, t.eval_batch_size)
        with torch.no_grad():
            w = torch.cat([model(b.text, b.audio, b.video).graph.weights
                           for b in data.val.batches(t.eval_batch_size)]).mean(0)
        row = {"epoch": epoch, "lr": lr, **{k: v for k, v in asdict(bd).items()},
               "clipped_batches": clipped,
               "val_balanced_accuracy": val.balanced_accuracy, "val_accuracy": val.accuracy,
               "val_macro_f1": val.macro_f1, "val_auroc_macro_ovr": val.auroc_macro_ovr,
               **{f"w_{m}": float(w[i]) for i, m in enumerate(MODALITY_NAMES)}}
        rows.append(row)
        if progress is not None:
            progress(row)

        if val.balanced_accuracy > best_val:
            best_val, best_epoch = val.balanced_accuracy, epoch
            best_state = _snapshot(model)
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model, optimizer, epoch,
                                {"epoch_log": rows, "best_val_balanced_accuracy": best_val, "seed": seed})
        elif epoch - best_epoch >= t.patience:
            stopped = True
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return RunArtifacts(model, cfg, seed, best_epoch, best_val, rows,
                        ckpt_path.with_suffix(".json") if ckpt_path is not None and best_epoch >= 0 else None,
                        stopped)
