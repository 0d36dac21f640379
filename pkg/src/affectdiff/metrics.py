"""Classification metrics, robustness probes and efficiency statistics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Batch, SequenceSet, stream


@dataclass
class MetricsReport:
    balanced_accuracy: float
    accuracy: float
    macro_f1: float
    auroc_macro_ovr: float | None
    per_class_f1: list[float]
    confusion: list[list[int]]
    support: list[int]

    def flat(self, prefix: str = "") -> dict[str, float | None]:
        out = {f"{prefix}balanced_accuracy": self.balanced_accuracy, f"{prefix}accuracy": self.accuracy,
               f"{prefix}macro_f1": self.macro_f1, f"{prefix}auroc_macro_ovr": self.auroc_macro_ovr}
        for c, v in enumerate(self.per_class_f1):
            out[f"{prefix}f1_class{c}"] = v
        return out


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    preds, labels = np.asarray(preds, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    return np.bincount(labels * num_classes + preds, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def balanced_accuracy(preds, labels, num_classes: int | None = None) -> float:
    """Mean recall over classes that occur in ``labels``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("balanced accuracy of an empty label set is undefined")
    C = num_classes or int(max(np.max(labels), np.max(preds))) + 1
    cm = confusion_matrix(preds, labels, C)
    support = cm.sum(1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def per_class_f1(preds, labels, num_classes: int) -> np.ndarray:
    """F1 per class; 0 where a class has no true positives (incl. undefined cases)."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(0) + cm.sum(1)
    return np.divide(2 * tp, denom, out=np.zeros(num_classes), where=tp > 0)


def macro_f1(preds, labels, num_classes: int) -> float:
    return float(per_class_f1(preds, labels, num_classes).mean())


def auroc_macro_ovr(scores, labels) -> float | None:
    """Macro one-vs-rest AUROC from average ranks; classes lacking positives
    or negatives are skipped, None if every class is skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    aucs = []
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs)) if aucs else None


def evaluate_scores(scores, labels, num_classes: int) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = scores.argmax(1)
    cm = confusion_matrix(preds, labels, num_classes)
    return MetricsReport(
        balanced_accuracy=balanced_accuracy(preds, labels, num_classes),
        accuracy=float(np.trace(cm) / cm.sum()),
        macro_f1=macro_f1(preds, labels, num_classes),
        auroc_macro_ovr=auroc_macro_ovr(scores, labels),
        per_class_f1=[float(v) for v in per_class_f1(preds, labels, num_classes)],
        confusion=cm.tolist(),
        support=[int(v) for v in cm.sum(1)],
    )


@torch.no_grad()
def predict_proba(model, data: SequenceSet | Batch, batch_size: int = 256) -> np.ndarray:
    """Class probabilities from the deterministic path; fixed-order batching."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    batches = data.batches(batch_size) if isinstance(data, SequenceSet) else [data]
    out = []
    for b in batches:
        b = b.to(dtype)
        out.append(torch.softmax(model.predict(b.text, b.audio, b.video), -1).double())
    model.train(was_training)
    return torch.cat(out).numpy()


def evaluate(model, data: SequenceSet, num_classes: int, batch_size: int = 256) -> MetricsReport:
    return evaluate_scores(predict_proba(model, data, batch_size), data.labels.numpy(), num_classes)


# --------------------------------------------------------------------------
# robustness


@dataclass(frozen=True)
class RobustnessCondition:
    kind: str  # clean | missing_text | missing_audio | missing_vision | noise | frame_mask
    value: float = 0.0

    @property
    def name(self) -> str:
        if self.kind == "noise":
            return f"noise_sigma={self.value:g}"
        if self.kind == "frame_mask":
            return f"frame_mask_p={self.value:g}"
        return self.kind


def paper_conditions(noise_sigmas=(0.1, 0.5, 2.0), mask_ps=(0.10, 0.25, 0.50)) -> list[RobustnessCondition]:
    conds = [RobustnessCondition("clean")]
    conds += [RobustnessCondition(k) for k in ("missing_text", "missing_audio", "missing_vision")]
    conds += [RobustnessCondition("noise", s) for s in noise_sigmas]
    conds += [RobustnessCondition("frame_mask", p) for p in mask_ps]
    return conds


def perturb(batch: Batch, cond: RobustnessCondition, generator: torch.Generator) -> Batch:
    """Apply one evaluation-time corruption; never mutates ``batch``."""
    text, audio, video = batch.modalities()
    if cond.kind == "clean":
        return batch
    if cond.kind == "missing_text":
        return batch.replace(text=torch.zeros_like(text))
    if cond.kind == "missing_audio":
        return batch.replace(audio=torch.zeros_like(audio))
    if cond.kind == "missing_vision":
        return batch.replace(video=torch.zeros_like(video))
    if cond.kind == "noise":
        if cond.value == 0:
            return batch
        return batch.replace(audio=audio + cond.value * torch.randn(audio.shape, generator=generator, dtype=audio.dtype),
                             video=video + cond.value * torch.randn(video.shape, generator=generator, dtype=video.dtype))
    if cond.kind == "frame_mask":
        keep = (torch.rand(text.shape[:2] + (1,), generator=generator) >= cond.value).to(text.dtype)
        return batch.replace(text=text * keep, audio=audio * keep, video=video * keep)
    raise ValueError(f"unknown robustness condition {cond.kind!r}")


@dataclass
class RobustnessRow:
    condition: str
    report: MetricsReport
    delta: dict[str, float | None] = field(default_factory=dict)


def robustness_suite(model, data: SequenceSet, conditions, num_classes: int, eval_seed: int = 1234,
                     batch_size: int = 256) -> list[RobustnessRow]:
    """Metrics under each condition plus signed deltas against the clean run."""
    rows = []
    clean = None
    for i, cond in enumerate(conditions):
        gen = stream(eval_seed, i)
        perturbed = perturb(data.as_batch(), cond, gen)
        view = SequenceSet(data.ids, perturbed.text, perturbed.audio, perturbed.video, perturbed.labels)
        report = evaluate(model, view, num_classes, batch_size)
        if cond.kind == "clean":
            clean = report
        rows.append(RobustnessRow(cond.name, report))
    if clean is None:
        clean = evaluate(model, data, num_classes, batch_size)
    for row in rows:
        for key in ("balanced_accuracy", "accuracy", "macro_f1", "auroc_macro_ovr"):
            a, b = getattr(row.report, key), getattr(clean, key)
            row.delta[key] = None if a is None or b is None else a - b
    return rows


# --------------------------------------------------------------------------
# efficiency


def count_parameters(model) -> tuple[int, int]:
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


@torch.no_grad()
def efficiency_stats(model, batch: Batch, runs: int = 10, warmup: int = 2) -> dict[str, float]:
    """Parameter counts (EMA shadow counted in total only) and mean forward latency in ms."""
    total, trainable = count_parameters(model)
    was_training = model.training
    model.eval()
    b = batch.to(next(model.parameters()).dtype)
    for _ in range(warmup):
        model.predict(b.text, b.audio, b.video)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.predict(b.text, b.audio, b.video)
        times.append(time.perf_counter() - t0)
    model.train(was_training)
    return {"total_params": total, "trainable_params": trainable, "frozen_params": total - trainable,
            "latency_ms": 1000.0 * float(np.mean(times)), "latency_runs": runs, "batch_size": len(b)}
