"""``affectdiff`` command line: data generation, training, suites and reports.

Exit codes: 0 success, 1 usage or config error, 2 data/format error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import config as cfgmod
from .affd import AffdWriter, FormatError
from .config import ABLATIONS, ConfigError, ExperimentConfig, apply_ablation
from .data import dataset_hash, generate_synthetic, prepare, stream
from .metrics import efficiency_stats, evaluate, paper_conditions, robustness_suite
from .reporting import (ABLATION_LABELS, content_hash, emit_report, refresh_manifest, run_manifest, table_efficiency,
                        table_robustness, write_csv, write_json, write_jsonl)
from .train import NumericalAbort, build_model, load_checkpoint, train

log = logging.getLogger("affectdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3
OUT_ENV = "AFFECTDIFF_OUT"
VERBS = ("gen-data", "train", "evaluate", "ablate", "robustness", "efficiency", "seeds", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_name(seed: int, ablation: str = "none") -> str:
    return f"seed{seed}" if ablation == "none" else f"{ablation}-seed{seed}"


# --------------------------------------------------------------------------
# configuration and paths


def resolve_config(args) -> ExperimentConfig:
    """Profile, then the config file, then ``--set`` overrides."""
    cfg = cfgmod.PROFILES[args.profile]()
    if args.config:
        cfg = cfgmod.load(args.config, base=cfg)
    return cfgmod.apply_overrides(cfg, args.overrides)


def output_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "affectdiff-out")


def data_dir(args, root: Path) -> Path:
    return Path(args.data) if args.data else root / "data"


def _require_data(path: Path):
    if not (path / "manifest.jsonl").exists():
        raise FormatError(f"no dataset at {path}; run `affectdiff gen-data` first or pass --data")


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg if seed is None else cfg.with_values(train__seed=seed)


# --------------------------------------------------------------------------
# single runs


def train_run(root: Path, cfg: ExperimentConfig, data_path: Path, force: bool = False, resume: bool = False) -> dict:
    """Train one (config, seed) pair into ``runs/<name>``; reuses a finished identical run."""
    seed, name = cfg.train.seed, run_name(cfg.train.seed, cfg.train.ablation)
    run_dir = root / "runs" / name
    dhash = dataset_hash(data_path)
    chash = content_hash(cfg, dhash, seed)
    summary_path = run_dir / "summary.json"
    if summary_path.exists() and not force:
        old = json.loads(summary_path.read_text())
        if old.get("content_hash") == chash:
            log.info("%s: reusing finished run %s", name, chash[:12])
            return old
    started = _now()
    data = prepare(data_path, cfg.data)
    (run_dir).mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, run_dir / "config.ini")

    def progress(row):
        log.info("%s epoch %3d  loss %.4f  val-BalAcc %.4f", name, row["epoch"], row["total"],
                 row["val_balanced_accuracy"])

    try:
        art = train(cfg, data, run_dir / "checkpoint", resume=resume, progress=progress)
    except NumericalAbort as exc:
        write_json(run_dir / "abort.json", exc.diagnostics)
        raise
    C = cfg.data.num_classes
    val = evaluate(art.model, data.val, C, cfg.train.eval_batch_size)
    test = evaluate(art.model, data.test, C, cfg.train.eval_batch_size)
    write_jsonl(run_dir / "epochs.jsonl", art.epoch_log)
    summary = {
        "name": name, "seed": seed, "ablation": cfg.train.ablation, "label": ABLATION_LABELS[cfg.train.ablation],
        "best_epoch": art.best_epoch, "stopped_early": art.stopped_early,
        "val": asdict(val), "test": asdict(test),
        "dataset_hash": dhash, "content_hash": chash, "dropped_samples": len(data.dropped),
        "split_sizes": [len(data.train), len(data.val), len(data.test)],
    }
    write_json(summary_path, summary)
    run_manifest(run_dir, cfg, [seed], chash, started, _now())
    return summary


def _train_many(root: Path, cfgs: list[ExperimentConfig], data_path: Path, force: bool, jobs: int) -> list[dict]:
    if jobs <= 1:
        return [train_run(root, c, data_path, force) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(train_run, root, c, data_path, force) for c in cfgs]
        return [f.result() for f in futures]


def _load_run_model(root: Path, name: str):
    ckpt_path = root / "runs" / name / "checkpoint" / "best"
    if not ckpt_path.with_suffix(".json").exists():
        raise FormatError(f"no checkpoint for run {name!r} under {root / 'runs'}")
    ck = load_checkpoint(ckpt_path)
    ck.model.eval()
    return ck


# --------------------------------------------------------------------------
# verbs


def cmd_gen_data(args, cfg, root):
    path = data_dir(args, root)
    generate_synthetic(path, cfg.data, seed=args.seed)
    print(f"wrote {cfg.data.n_samples} samples to {path} (sha256 {dataset_hash(path)[:16]})")


def cmd_train(args, cfg, root):
    path = data_dir(args, root)
    _require_data(path)
    cfg = _with_seed(cfg, args.seed)
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    s = train_run(root, cfg, path, force=args.force, resume=args.resume)
    print(f"{s['name']}: best epoch {s['best_epoch']}  val-BalAcc {s['val']['balanced_accuracy']:.4f}  "
          f"test-BalAcc {s['test']['balanced_accuracy']:.4f}")


def cmd_seeds(args, cfg, root):
    path = data_dir(args, root)
    _require_data(path)
    summaries = _train_many(root, [_with_seed(cfg, s) for s in cfg.train.seeds], path, args.force, args.jobs)
    for s in summaries:
        print(f"{s['name']}: val-BalAcc {s['val']['balanced_accuracy']:.4f}")
    emit_report(root)


def cmd_ablate(args, cfg, root):
    path = data_dir(args, root)
    _require_data(path)
    cfg = _with_seed(cfg, args.seed)
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    summaries = _train_many(root, [apply_ablation(cfg, v) for v in variants], path, args.force, args.jobs)
    base = next((s for s in summaries if s["ablation"] == "none"), None)
    for s in summaries:
        ba = s["val"]["balanced_accuracy"]
        delta = "" if base is None else f"  delta {ba - base['val']['balanced_accuracy']:+.4f}"
        print(f"{s['label']:<24} val-BalAcc {ba:.4f}{delta}")
    emit_report(root)


def cmd_evaluate(args, cfg, root):
    path = data_dir(args, root)
    _require_data(path)
    name = args.run or run_name(args.seed if args.seed is not None else cfg.train.seed)
    ck = _load_run_model(root, name)
    rcfg = ck.config
    data = prepare(path, rcfg.data)
    C = rcfg.data.num_classes
    result = {split: asdict(evaluate(ck.model, getattr(data, split), C, rcfg.train.eval_batch_size))
              for split in ("val", "test")}
    run_dir = root / "runs" / name
    write_json(run_dir / "evaluation.json", result)
    print(f"{name}: val-BalAcc {result['val']['balanced_accuracy']:.4f}  "
          f"test-BalAcc {result['test']['balanced_accuracy']:.4f}")
    if args.samples:
        dump_samples(ck.model, data, args.samples, run_dir, rcfg.eval.eval_seed)
    refresh_manifest(run_dir)


def dump_samples(model, data, n: int, run_dir: Path, seed: int):
    """DDIM latents per class, conditioned on the mean validation weights."""
    if model.ema is None:
        raise ConfigError("this run has no diffusion prior to sample from")
    with torch.no_grad():
        w = torch.cat([model(b.text, b.audio, b.video).graph.weights for b in data.val.batches(256)]).mean(0)
    entries = []
    with AffdWriter(run_dir / "samples.affd") as fh:
        for c in range(model.cfg.data.num_classes):
            z = model.sample_latents(n, c, w, generator=stream(seed, c))
            entries.append({"class": c, "shape": list(z.shape), "offset": fh.append(z.numpy())})
    write_json(run_dir / "samples.json", {"weights": w.tolist(), "samples": entries})
    print(f"wrote {n} latent samples per class to {run_dir / 'samples.affd'}")


def cmd_robustness(args, cfg, root):
    path = data_dir(args, root)
    _require_data(path)
    name = args.run or run_name(args.seed if args.seed is not None else cfg.train.seed)
    ck = _load_run_model(root, name)
    rcfg = ck.config
    data = prepare(path, rcfg.data)
    conds = paper_conditions(rcfg.eval.noise_sigmas, rcfg.eval.mask_ps)
    rows = robustness_suite(ck.model, data.test, conds, rcfg.data.num_classes, rcfg.eval.eval_seed,
                            rcfg.train.eval_batch_size)
    suite = {"run": name, "split": "test",
             "rows": [{"condition": r.condition, "metrics": r.report.flat(), "delta": r.delta} for r in rows]}
    write_json(root / "suites" / "robustness.json", suite)
    write_csv(root / "suites" / "robustness.csv", *table_robustness(suite))
    for r in rows:
        print(f"{r.condition:<20} F1 {r.report.macro_f1:.4f}  delta {r.delta['macro_f1']:+.4f}")


def cmd_efficiency(args, cfg, root):
    path = data_dir(args, root)
    _require_data(path)
    cfg = _with_seed(cfg, args.seed)
    variants = args.variants.split(",") if args.variants else ["none", "no_diffusion", "no_vae"]
    data = prepare(path, cfg.data)
    batch = next(data.test.batches(cfg.eval.latency_batch))
    rows = []
    for token in variants:
        name = run_name(cfg.train.seed, token)
        summary_path = root / "runs" / name / "summary.json"
        if summary_path.exists():
            model, val_ba = _load_run_model(root, name).model, json.loads(summary_path.read_text())["val"][
                "balanced_accuracy"]
        else:
            model, val_ba = build_model(apply_ablation(cfg, token)), None
        stats = efficiency_stats(model, batch, cfg.eval.latency_runs, cfg.eval.latency_warmup)
        rows.append({"model": ABLATION_LABELS[token], "ablation": token, "run": name,
                     "val_balanced_accuracy": val_ba, **stats})
    suite = {"rows": rows}
    write_json(root / "suites" / "efficiency.json", suite)
    write_csv(root / "suites" / "efficiency.csv", *table_efficiency(suite))
    for r in rows:
        print(f"{r['model']:<24} total {r['total_params']:>9d}  trainable {r['trainable_params']:>9d}  "
              f"{r['latency_ms']:.1f} ms")


def cmd_report(args, cfg, root):
    manifest = emit_report(root)
    for f in manifest["files"]:
        print(f"wrote report/{f['path']}")
    for s in manifest["skipped"]:
        print(f"skipped {s}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "robustness": cmd_robustness, "efficiency": cmd_efficiency, "seeds": cmd_seeds, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file applied on top of the profile")
    common.add_argument("--profile", choices=sorted(cfgmod.PROFILES), default="desk")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./affectdiff-out)")
    common.add_argument("--data", help="dataset directory (default <out>/data)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="affectdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    seeded = {"gen-data", "train", "evaluate", "ablate", "robustness", "efficiency"}
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb in seeded:
            p.add_argument("--seed", type=int)
        if verb in ("train", "ablate", "seeds"):
            p.add_argument("--force", action="store_true", help="retrain even if an identical run exists")
        if verb in ("ablate", "seeds"):
            p.add_argument("--jobs", type=int, default=1, help="concurrent training processes")
        if verb in ("ablate", "efficiency"):
            p.add_argument("--variants", help="comma-separated ablation tokens")
        if verb in ("evaluate", "robustness"):
            p.add_argument("--run", help="run name under <out>/runs (default seed<seed>)")
        if verb == "evaluate":
            p.add_argument("--samples", type=int, default=0, help="dump N DDIM latents per class")
        if verb == "train":
            p.add_argument("--ablation", choices=ABLATIONS)
            p.add_argument("--resume", action="store_true", help="continue from the stored best checkpoint")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"affectdiff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        root = output_root(args)
        COMMANDS[args.verb](args, cfg, root)
    except (ConfigError, UsageError) as exc:
        print(f"affectdiff: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"affectdiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"affectdiff: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
