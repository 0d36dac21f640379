"""Run records on disk and the table / plot-data files regenerated from them.

Layout under an output root::

    runs/<name>/config.ini, epochs.jsonl, summary.json, manifest.json, checkpoint/best.{json,affd}
    suites/robustness.{json,csv}, suites/efficiency.{json,csv}
    report/*.csv, report/metrics.txt, report/manifest.json

Everything under ``report/`` is a pure function of ``runs/`` and ``suites/``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import config as cfgmod
from .config import ABLATIONS, ExperimentConfig
from .data import EMOTIONS
from .train import LossParts, sum_terms, warmup_factors, weighted_terms

ABLATION_LABELS = {
    "none": "Full Model",
    "no_diffusion": "No Diffusion Prior",
    "no_causal_graph": "No Causal Graph",
    "gumbel": "No NOTEARS (Gumbel)",
    "no_stop_gradient": "No Stop-Gradient",
    "no_vae": "No VAE (deterministic)",
}

REPORT_FILES = {
    "table2": "table2_main_results.csv",
    "table3": "table3_ablation.csv",
    "table4": "table4_per_class_f1.csv",
    "table5": "table5_robustness.csv",
    "table6": "table6_efficiency.csv",
    "fig4": "fig4_val_balanced_accuracy.csv",
    "fig5": "fig5_per_class_f1.csv",
    "fig7": "fig7_causal_weights.csv",
    "fig8": "fig8_loss_decomposition.csv",
    "fig9": "fig9_warmups.csv",
    "fig10": "fig10_efficiency.csv",
    "fig11": "fig11_robustness_deltas.csv",
    "metrics": "metrics.txt",
}


# --------------------------------------------------------------------------
# hashing and small writers


def git_blob_hash(data: bytes) -> str:
    """SHA-1 of ``blob <len>\\0<data>``, the object id git assigns to a file."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(cfg: ExperimentConfig, data_hash: str, seed: int) -> str:
    """Identity of a run: the config text, the dataset bytes and the seed."""
    inputs = {"config": git_blob_hash(cfgmod.dumps(cfg).encode()), "dataset": data_hash, "seed": seed}
    return git_blob_hash(json.dumps(inputs, sort_keys=True).encode())


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    return path


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return path


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def fmt(v, digits: int | None = None) -> str:
    """Cell text: '' for missing, full round-trip precision unless ``digits``."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{digits}f}" if digits is not None else repr(v)
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list], digits: int | None = None) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v, digits) for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _file_list(run_dir: Path) -> list[dict]:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    return [{"path": str(p.relative_to(run_dir)), "bytes": p.stat().st_size, "sha256": file_digest(p)}
            for p in files] + [{"path": "manifest.json"}]


def run_manifest(run_dir: Path, cfg: ExperimentConfig, seeds, chash: str, started: str, finished: str) -> Path:
    """Record the run identity next to every file in ``run_dir`` (sizes and digests)."""
    manifest = {"config": cfgmod.dumps(cfg), "seeds": list(seeds), "content_hash": chash,
                "started": started, "finished": finished, "files": _file_list(run_dir)}
    return write_json(run_dir / "manifest.json", manifest)


def refresh_manifest(run_dir: Path) -> Path:
    """Re-list files after a later command added some to an existing run."""
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["files"] = _file_list(run_dir)
    return write_json(path, manifest)


# --------------------------------------------------------------------------
# loading stored runs


@dataclass
class StoredRun:
    name: str
    path: Path
    summary: dict
    epochs: list[dict]
    config: ExperimentConfig

    @property
    def ablation(self) -> str:
        return self.summary["ablation"]

    @property
    def seed(self) -> int:
        return self.summary["seed"]


def load_runs(root: Path) -> tuple[list[StoredRun], list[str]]:
    """Every complete run under ``root/runs``; incomplete ones are reported as skipped."""
    runs, skipped = [], []
    base = Path(root) / "runs"
    if not base.is_dir():
        return runs, skipped
    for d in sorted(p for p in base.iterdir() if p.is_dir()):
        need = [d / "summary.json", d / "epochs.jsonl", d / "config.ini"]
        missing = [p.name for p in need if not p.exists()]
        if missing:
            skipped.append(f"runs/{d.name}: missing {', '.join(missing)}")
            continue
        runs.append(StoredRun(d.name, d, json.loads(need[0].read_text()), read_jsonl(need[1]),
                              cfgmod.load(need[2])))
    return runs, skipped


def _load_suite(root: Path, name: str):
    p = Path(root) / "suites" / f"{name}.json"
    return json.loads(p.read_text()) if p.exists() else None


# --------------------------------------------------------------------------
# tables and plot data


def _mean_std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    m = sum(xs) / len(xs)
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def table_main(runs: list[StoredRun]):
    full = [r for r in runs if r.ablation == "none"]
    header = ["method", "seed", "val_balanced_accuracy", "test_accuracy", "test_macro_f1", "test_auroc_macro_ovr"]
    keys = ("accuracy", "macro_f1", "auroc_macro_ovr")
    rows = [["Affect-Diff", r.seed, r.summary["val"]["balanced_accuracy"], *(r.summary["test"][k] for k in keys)]
            for r in full]
    if full:
        stats = [_mean_std([r.summary["val"]["balanced_accuracy"] for r in full])]
        stats += [_mean_std([r.summary["test"][k] for r in full]) for k in keys]
        rows.append(["Affect-Diff (mean)", "all", *(m for m, _ in stats)])
        rows.append(["Affect-Diff (std)", "all", *(s for _, s in stats)])
    return header, rows


def _ablation_groups(runs: list[StoredRun]) -> dict[int, dict[str, StoredRun]]:
    """Seed -> {token: run}, for seeds where at least one component was disabled."""
    by_seed: dict[int, dict[str, StoredRun]] = {}
    for r in runs:
        by_seed.setdefault(r.seed, {})[r.ablation] = r
    return {s: g for s, g in sorted(by_seed.items()) if set(g) - {"none"}}


def table_ablation(runs: list[StoredRun]):
    header = ["configuration", "ablation", "seed", "val_balanced_accuracy", "delta", "test_macro_f1",
              "test_auroc_macro_ovr"]
    rows = []
    for seed, group in _ablation_groups(runs).items():
        ref = group.get("none")
        for token in ABLATIONS:
            if token not in group:
                continue
            r = group[token]
            ba = r.summary["val"]["balanced_accuracy"]
            delta = ba - ref.summary["val"]["balanced_accuracy"] if ref is not None else None
            rows.append([ABLATION_LABELS[token], token, seed, ba, delta, r.summary["test"]["macro_f1"],
                         r.summary["test"]["auroc_macro_ovr"]])
    return header, rows


def table_per_class(runs: list[StoredRun], class_names):
    header = ["model", "run", *class_names]
    rows = [[ABLATION_LABELS[r.ablation], r.name, *r.summary["test"]["per_class_f1"]] for r in runs]
    return header, rows


def table_robustness(suite: dict):
    header = ["condition", "balanced_accuracy", "macro_f1", "auroc_macro_ovr", "delta_balanced_accuracy",
              "delta_macro_f1", "delta_auroc_macro_ovr"]
    rows = [[row["condition"], row["metrics"]["balanced_accuracy"], row["metrics"]["macro_f1"],
             row["metrics"]["auroc_macro_ovr"], row["delta"]["balanced_accuracy"], row["delta"]["macro_f1"],
             row["delta"]["auroc_macro_ovr"]] for row in suite["rows"]]
    return header, rows


def table_efficiency(suite: dict):
    header = ["model", "total_params_m", "trainable_params_m", "latency_ms", "val_balanced_accuracy"]
    rows = [[row["model"], row["total_params"] / 1e6, row["trainable_params"] / 1e6, row["latency_ms"],
             row.get("val_balanced_accuracy")] for row in suite["rows"]]
    return header, rows


def fig_val_curves(runs):
    return (["run", "seed", "ablation", "epoch", "val_balanced_accuracy"],
            [[r.name, r.seed, r.ablation, e["epoch"], e["val_balanced_accuracy"]] for r in runs for e in r.epochs])


def fig_per_class(runs, class_names):
    return (["run", "class", "class_name", "test_f1"],
            [[r.name, c, class_names[c], f] for r in runs for c, f in enumerate(r.summary["test"]["per_class_f1"])])


def fig_causal_weights(runs):
    return (["run", "epoch", "w_T", "w_A", "w_V"],
            [[r.name, e["epoch"], e["w_T"], e["w_A"], e["w_V"]] for r in runs for e in r.epochs])


def loss_decomposition_row(epoch_row: dict, cfg: ExperimentConfig) -> dict:
    """Weighted summands of a logged epoch; missing keys are ablated terms."""
    parts = LossParts(*(epoch_row[k] for k in ("task", "kl", "diff", "causal", "recon")))
    terms = weighted_terms(parts, epoch_row["epoch"], cfg)
    return {**terms, "total": sum_terms(terms)}


def fig_loss_decomposition(runs):
    header = ["run", "epoch", "task", "kl", "diff", "causal", "recon", "gamma", "gamma_kl",
              "weighted_kl", "weighted_diff", "weighted_causal", "weighted_recon", "total"]
    rows = []
    for r in runs:
        for e in r.epochs:
            t = loss_decomposition_row(e, r.config)
            rows.append([r.name, e["epoch"], e["task"], e["kl"], e["diff"], e["causal"], e["recon"], e["gamma"],
                         e["gamma_kl"], t.get("kl", 0.0), t.get("diff", 0.0), t.get("causal", 0.0),
                         t.get("recon", 0.0), e["total"]])
    return header, rows


def fig_warmups(cfg: ExperimentConfig):
    horizon = max(cfg.train.cosine_epochs, cfg.train.epochs)
    return ["epoch", "gamma", "gamma_kl"], [[e, *warmup_factors(e, cfg.train)] for e in range(horizon + 1)]


def fig_efficiency(suite):
    header = ["model", "total_params", "trainable_params", "latency_ms", "val_balanced_accuracy"]
    return header, [[r["model"], r["total_params"], r["trainable_params"], r["latency_ms"],
                     r.get("val_balanced_accuracy")] for r in suite["rows"]]


def fig_robustness(suite):
    header = ["condition", "metric", "delta"]
    return header, [[row["condition"], k, row["delta"][k]] for row in suite["rows"] for k in sorted(row["delta"])]


def flat_metrics(runs, robustness, efficiency) -> list[tuple[str, object]]:
    out = []
    for r in runs:
        out.append((f"run.{r.name}.best_epoch", r.summary["best_epoch"]))
        out.append((f"run.{r.name}.epochs_completed", len(r.epochs)))
        for split in ("val", "test"):
            for k, v in r.summary[split].items():
                if isinstance(v, list):
                    if k == "per_class_f1":
                        out += [(f"run.{r.name}.{split}.f1_class{c}", x) for c, x in enumerate(v)]
                    continue
                out.append((f"run.{r.name}.{split}.{k}", v))
    if robustness:
        for row in robustness["rows"]:
            for k, v in row["metrics"].items():
                out.append((f"robustness.{row['condition']}.{k}", v))
            for k, v in row["delta"].items():
                out.append((f"robustness.{row['condition']}.delta_{k}", v))
    if efficiency:
        for row in efficiency["rows"]:
            for k in ("total_params", "trainable_params", "latency_ms"):
                out.append((f"efficiency.{row['ablation']}.{k}", row[k]))
    return sorted(out)


def emit_report(root: Path, class_names=None) -> dict:
    """Regenerate ``root/report`` from stored logs. Returns the report manifest.

    Inputs are only read; repeated calls give byte-identical files.
    """
    root = Path(root)
    out = root / "report"
    runs, skipped = load_runs(root)
    robustness, efficiency = _load_suite(root, "robustness"), _load_suite(root, "efficiency")
    cfg = runs[0].config if runs else ExperimentConfig()
    if class_names is None:
        C = cfg.data.num_classes
        class_names = list(EMOTIONS[:C]) if C <= len(EMOTIONS) else [f"class{c}" for c in range(C)]

    producers = {
        "table2": (runs, lambda: table_main(runs), 4),
        "table3": (_ablation_groups(runs), lambda: table_ablation(runs), 4),
        "table4": (runs, lambda: table_per_class(runs, class_names), 4),
        "table5": (robustness, lambda: table_robustness(robustness), 4),
        "table6": (efficiency, lambda: table_efficiency(efficiency), 3),
        "fig4": (runs, lambda: fig_val_curves(runs), None),
        "fig5": (runs, lambda: fig_per_class(runs, class_names), None),
        "fig7": (runs, lambda: fig_causal_weights(runs), None),
        "fig8": (runs, lambda: fig_loss_decomposition(runs), None),
        "fig9": (True, lambda: fig_warmups(cfg), None),
        "fig10": (efficiency, lambda: fig_efficiency(efficiency), None),
        "fig11": (robustness, lambda: fig_robustness(robustness), None),
    }
    written = []
    for key, (available, make, digits) in producers.items():
        path = out / REPORT_FILES[key]
        if not available:
            skipped.append(f"{REPORT_FILES[key]}: no source logs")
            if path.exists():
                path.unlink()
            continue
        header, rows = make()
        written.append(write_csv(path, header, rows, digits))
    metrics_path = out / REPORT_FILES["metrics"]
    metrics_path.write_text("".join(f"{k} = {fmt(v)}\n" for k, v in flat_metrics(runs, robustness, efficiency)))
    written.append(metrics_path)
    manifest = {
        "sources": sorted([f"runs/{r.name}" for r in runs]
                          + [f"suites/{n}.json" for n, s in (("robustness", robustness), ("efficiency", efficiency))
                             if s]),
        "files": [{"path": p.name, "sha256": file_digest(p)} for p in written],
        "skipped": skipped,
    }
    write_json(out / "manifest.json", manifest)
    return manifest
