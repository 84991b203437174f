"""``dirlat`` command line: synth, train, eval, traverse, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown verb or
flag), 3 configuration/input error (bad config key, missing manifest,
missing checkpoint, refusing to overwrite).

Data root: ``--data`` flag, else ``data.image_root``, else the
``DIRLAT_DATA_ROOT`` environment variable. The manifest defaults to
``<root>/manifest.csv``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .classify import evaluate, roc_curve_auc, write_metrics, write_roc_csv, youden_thresholds, MetricsError
from .config import Config, ConfigError, apply_overrides, derive_seed, from_dict
from .data import (LabeledImages, ManifestError, SyntheticSpec, balanced_sample, generate_synthetic,
                   load_images, load_manifest_with_counts, split_dataset)
from .explain import (bootstrap_median_ci, eligible_cases, explain_cases, render_traversal_grid,
                      save_series_archive, write_index)
from .train import (CheckpointError, TrainData, TrainPlan, TrainingError, build_model, load_checkpoint,
                    predict_dataset, train_full)

logger = logging.getLogger("dirlat")

DATA_ROOT_ENV = "DIRLAT_DATA_ROOT"
ARTIFACT_SCHEMA = "dirlat-artifact-v1"
REPORT_SCHEMA = "dirlat-report-v1"

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class RefusedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Config and data resolution
# --------------------------------------------------------------------------


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args, base: dict | None = None) -> Config:
    data = dict(base or {})
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {args.config}: {exc}") from exc
        data = _merge(data, loaded)
    data = apply_overrides(data, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    return from_dict(data)


def provenance(cfg: Config, **extra) -> dict:
    return {"artifact_schema": ARTIFACT_SCHEMA, "config_hash": cfg.hash(), "seed": cfg.seed,
            "version": __version__, "prior_kind": cfg.model.prior_kind, **extra}


@dataclass
class Splits:
    train: LabeledImages
    val: LabeledImages
    test: LabeledImages

    def get(self, name: str) -> LabeledImages:
        return getattr(self, name)


def prepare_splits(cfg: Config, data_root: str | None = None) -> Splits:
    """Manifest -> optional balanced sample -> seeded split -> images."""
    root = data_root or cfg.data.image_root or os.environ.get(DATA_ROOT_ENV)
    if cfg.data.manifest:
        manifest = Path(cfg.data.manifest)
        if not manifest.is_absolute() and root and not manifest.exists():
            manifest = Path(root) / manifest
        root = root or str(manifest.parent)
    elif root:
        manifest = Path(root) / "manifest.csv"
    else:
        raise ConfigError(f"no data: set data.manifest, --data or ${DATA_ROOT_ENV}")
    if not manifest.exists():
        raise ConfigError(f"missing manifest {manifest}")
    loaded = load_manifest_with_counts(manifest, cfg.data.class_names, cfg.data.uncertain_policy)
    logger.info("manifest %s: %s", manifest, dict(loaded.counts))
    rows = loaded.rows
    if cfg.data.per_class_quota:
        rows, _ = balanced_sample(rows, cfg.data.per_class_quota, derive_seed(cfg.seed, "sample"), cfg.data.class_names)
    split = split_dataset(rows, cfg.data.split_fractions, derive_seed(cfg.seed, "split"))
    load = lambda part: load_images(part, root, cfg.model.image_size, cfg.data.class_names)
    return Splits(load(split.train), load(split.val), load(split.test))


def synthetic_spec(cfg: Config) -> SyntheticSpec:
    s = cfg.synth
    return SyntheticSpec(image_size=s.image_size, features=tuple(s.features), prevalence=tuple(s.prevalence),
                         cooccurrence=s.cooccurrence, noise=s.noise, class_names=tuple(["no_finding", *s.features]))


def synthetic_splits(cfg: Config) -> Splits:
    """In-memory equivalent of ``synth`` followed by the train/val/test split (no PNG round trip)."""
    ds = generate_synthetic(synthetic_spec(cfg), cfg.synth.n, derive_seed(cfg.seed, "synth"))
    split = split_dataset(ds.rows, cfg.data.split_fractions, derive_seed(cfg.seed, "split"))
    take = lambda part: ds.data.take([r.path for r in part])
    return Splits(take(split.train), take(split.val), take(split.test))


def _prepare_out(out: Path, marker: str, overwrite: bool) -> Path:
    if (out / marker).exists():
        if not overwrite:
            raise RefusedError(f"{out / marker} exists; pass --overwrite to replace")
        logger.info("overwriting %s", out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.run:
        return Path(args.run) / "final.ckpt"
    raise CheckpointError("missing checkpoint: pass --checkpoint or --run")


def _load_run(args):
    ckpt = load_checkpoint(_checkpoint_path(args))
    cfg = resolve_config(args, base=ckpt.config or {"seed": ckpt.seed})
    if ckpt.model.config.prior_kind != cfg.model.prior_kind:
        raise ConfigError("model.prior_kind differs from the checkpoint")
    return ckpt, cfg


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    n = args.n if args.n is not None else cfg.synth.n
    out = Path(args.out or os.environ.get(DATA_ROOT_ENV) or "data/synth")
    _prepare_out(out, "manifest.csv", args.overwrite)
    if args.overwrite and (out / "images").exists():
        shutil.rmtree(out / "images")
    spec = synthetic_spec(cfg)
    ds = generate_synthetic(spec, n, derive_seed(cfg.seed, "synth"))
    manifest = ds.write(out)
    _write_json(out / "synth.json", provenance(cfg, n=n, class_names=list(spec.class_names)))
    logger.info("wrote %d images and %s", n, manifest)
    return 0


def cmd_train(args) -> int:
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        cfg = resolve_config(args, base=resume.config)
    else:
        cfg = resolve_config(args)
    out = Path(args.out or "runs/train")
    _prepare_out(out, "final.ckpt", args.overwrite or resume is not None)
    splits = prepare_splits(cfg, args.data)
    _write_json(out / "config.json", {**provenance(cfg), "config": cfg.to_dict()})
    _write_json(out / "split.json", {**provenance(cfg), "train": splits.train.ids, "val": splits.val.ids,
                                     "test": splits.test.ids})
    if resume is not None:
        model, ensemble, start = resume.model, resume.ensemble, resume.cursor
        if resume.config_hash != cfg.hash():
            raise ConfigError("resume checkpoint was written under a different config")
    else:
        model, ensemble = build_model(cfg, splits.train.class_names)
        start = 0
    if (out / "runlog.jsonl").exists() and resume is None:
        (out / "runlog.jsonl").unlink()
    res = train_full(TrainPlan.from_config(cfg), model, ensemble, TrainData(splits.train, splits.val),
                     out_dir=out, start_stage=start, config=cfg)
    logger.info("final checkpoint %s (best %s)", res.final_checkpoint, res.best_checkpoint)
    return 0


def cmd_eval(args) -> int:
    ckpt, cfg = _load_run(args)
    out = Path(args.out or (Path(args.run) / f"eval_{cfg.eval.split}" if args.run else "runs/eval"))
    _prepare_out(out, "metrics.json", args.overwrite)
    splits = prepare_splits(cfg, args.data)
    data = splits.get(cfg.eval.split)
    probs = predict_dataset(ckpt.model, ckpt.ensemble, data.images)
    if cfg.eval.threshold_mode == "youden":
        thr = youden_thresholds(predict_dataset(ckpt.model, ckpt.ensemble, splits.val.images), splits.val.labels)
    else:
        thr = np.full(len(data.class_names), cfg.eval.threshold)
    report = evaluate(probs, data.labels, data.class_names, thr, cfg.eval.provenance)
    write_metrics(report, out / "metrics.json",
                  provenance(cfg, split=cfg.eval.split, thresholds=[float(t) for t in thr],
                             checkpoint_hash=ckpt.config_hash))
    for c, name in enumerate(data.class_names):
        try:
            fpr, tpr, _ = roc_curve_auc(probs[:, c], data.labels[:, c])
        except MetricsError as exc:
            logger.warning("no ROC for %s: %s", name, exc)
            continue
        write_roc_csv(fpr, tpr, out / f"roc_{name}.csv")
    logger.info("mean AUC %s, EMR %.3f, Hamming %.3f", report.mean_auc, report.exact_match_rate, report.hamming_loss)
    return 0


def explain_run(model, ensemble, data: LabeledImages, cfg: Config, out: Path | None = None, threshold=0.5):
    """Traverse up to ``explain.n_images`` eligible single-label cases; optionally write artifacts."""
    e = cfg.explain
    probs = predict_dataset(model, ensemble, data.images)
    skip = {0} if data.class_names and data.class_names[0].lower().replace(" ", "_") == "no_finding" else set()
    classes = [c for c in range(len(data.class_names)) if c not in skip]
    cases = eligible_cases(data.labels, probs, threshold, classes)[: e.n_images]
    done = explain_cases(model, ensemble, data.images, data.labels, cases, data.ids, threshold, e.steps,
                         e.scale_min, e.scale_max, e.sigma_range, e.top_fraction)
    rows = []
    for case in done:
        name = data.class_names[case.class_index]
        score = "" if case.score is None else repr(case.score)
        rows.append({"image_id": data.ids[case.index], "class": name, "k_star": case.series.factor,
                     "concentration_score": score})
        if out is None:
            continue
        stem = f"{Path(data.ids[case.index]).stem}_{name}"
        meta = provenance(cfg, image_id=data.ids[case.index], class_name=name, k_star=case.series.factor)
        render_traversal_grid(case.series, case.vmap, out / f"{stem}.png", annotations=meta,
                              input_image=data.images[case.index], separator=e.separator)
        save_series_archive(out / f"{stem}.npz", case.series, case.vmap, meta)
    return done, rows


def cmd_traverse(args) -> int:
    ckpt, cfg = _load_run(args)
    out = Path(args.out or (Path(args.run) / "traverse" if args.run else "runs/traverse"))
    _prepare_out(out, "index.csv", args.overwrite)
    data = prepare_splits(cfg, args.data).get(cfg.explain.split)
    done, rows = explain_run(ckpt.model, ckpt.ensemble, data, cfg, out, cfg.eval.threshold)
    write_index(rows, out / "index.csv")
    scores = [c.score for c in done if c.score is not None]
    _write_json(out / "traverse.json", provenance(cfg, n_cases=len(done), top_fraction=cfg.explain.top_fraction,
                                                  median_concentration=float(np.median(scores)) if scores else None))
    logger.info("traversed %d cases into %s", len(done), out)
    return 0


def _read_index_scores(path: Path) -> list[float]:
    import csv

    with open(path) as fh:
        return [float(r["concentration_score"]) for r in csv.DictReader(fh) if r["concentration_score"]]


def build_report(paths: list[Path], seed: int = 0) -> dict:
    """Group metrics.json / traverse outputs under ``paths`` by prior kind."""
    groups: dict[str, dict] = {}
    for root in paths:
        for m in sorted(Path(root).rglob("metrics.json")):
            d = json.loads(m.read_text())
            g = groups.setdefault(d.get("prior_kind", "unknown"), {"metrics": [], "scores": []})
            g["metrics"].append({"path": str(m), "mean_auc": d.get("mean_auc"),
                                 "exact_match_rate": d["exact_match_rate"], "hamming_loss": d["hamming_loss"]})
        for t in sorted(Path(root).rglob("traverse.json")):
            d = json.loads(t.read_text())
            g = groups.setdefault(d.get("prior_kind", "unknown"), {"metrics": [], "scores": []})
            g["scores"].extend(_read_index_scores(t.parent / "index.csv"))
    summary = {}
    for kind, g in sorted(groups.items()):
        row: dict = {"n_runs": len(g["metrics"])}
        for key in ("mean_auc", "exact_match_rate", "hamming_loss"):
            vals = [m[key] for m in g["metrics"] if m[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        if g["scores"]:
            med, lo, hi = bootstrap_median_ci(g["scores"], seed=seed)
            row.update(n_traversals=len(g["scores"]), median_concentration=med, ci_low=lo, ci_high=hi)
        summary[kind] = row
    return {"schema": REPORT_SCHEMA, "groups": summary}


def _report_markdown(report: dict) -> str:
    cols = ["n_runs", "mean_auc", "exact_match_rate", "hamming_loss", "n_traversals", "median_concentration",
            "ci_low", "ci_high"]
    lines = ["| prior | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    fmt = lambda v: "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
    for kind, row in report["groups"].items():
        lines.append(f"| {kind} | " + " | ".join(fmt(row.get(c)) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    missing = [p for p in args.runs if not Path(p).exists()]
    if missing:
        raise ConfigError(f"missing run directory {missing[0]}")
    out = Path(args.out or "runs/report")
    _prepare_out(out, "report.json", args.overwrite)
    report = build_report([Path(p) for p in args.runs], seed=derive_seed(cfg.seed, "bootstrap"))
    report.update(provenance(cfg))
    _write_json(out / "report.json", report)
    (out / "report.md").write_text(_report_markdown(report))
    sys.stdout.write(_report_markdown(report))
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--data", help=f"data root (default ${DATA_ROOT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dirlat", description="Dirichlet VAE multi-label explainability pipeline")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="{synth,train,eval,traverse,report}")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and manifest")
    p.add_argument("--n", type=int, default=None)
    p = sub.add_parser("train", parents=[common], help="run the four-stage schedule")
    p.add_argument("--resume", help="continue from a stage checkpoint")
    for verb in ("eval", "traverse"):
        p = sub.add_parser(verb, parents=[common], help=f"{verb} a trained checkpoint")
        p.add_argument("--checkpoint")
        p.add_argument("--run", help="training output directory (uses final.ckpt)")
    p = sub.add_parser("report", parents=[common], help="compare runs by prior kind")
    p.add_argument("runs", nargs="*")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "traverse": cmd_traverse, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, CheckpointError, ManifestError, RefusedError) as exc:
        print(f"dirlat {args.verb}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, OSError, ValueError, RuntimeError) as exc:
        print(f"dirlat {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
