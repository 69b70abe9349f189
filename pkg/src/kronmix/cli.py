"""Command-line entry point: ``kronmix {synth,train,eval,export}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, CheckpointVersionError
from .data import DataError, NormStats, SpecError, SynthSpec, load_csv, synth, window
from .evaluation import evaluate, weight_trajectory, write_weight_trajectory
from .export import export
from .linalg import ShapeError
from .trainer import ConfigError, TrainConfig, TrainingDivergedError, train

log = logging.getLogger("kronmix")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


def fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{what} {path} is not valid JSON: {e}") from None


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(spec_file, out_dir, seed: int | None = None) -> list[Path]:
    raw = _read_json(spec_file, "synth spec")
    if seed is not None:
        raw["seed"] = seed
    spec = SynthSpec.from_dict(raw)
    result = synth(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "series.csv", out / "labels.csv", out / "spec.json"]
    result.table.to_csv(paths[0])
    result.write_labels(paths[1])
    _write_json(spec.raw, paths[2])
    return paths


def _apply_overrides(cfg: dict, args) -> dict:
    for flag, key in (("seed", "seed"), ("rho", "rho"), ("k", "K"), ("p", "p"), ("q", "q")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "deterministic", False):
        cfg["deterministic"] = True
    if getattr(args, "splits", None):
        cfg["splits"] = [float(s) for s in args.splits.split(",")]
    return cfg


def cmd_train(data_csv, config_json, out_dir, overrides=None) -> dict:
    raw = _read_json(config_json, "training config")
    if overrides is not None:
        raw = _apply_overrides(raw, overrides)
    cfg = TrainConfig.from_dict(raw)
    table = load_csv(data_csv)
    train_ds, val_ds, test_ds = window(table, cfg.p, cfg.q, cfg.splits, stride=cfg.stride, offset=cfg.offset,
                                       per_sensor=cfg.per_sensor_norm)
    result = train(train_ds, val_ds, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out / "checkpoint.json")
    result.write_history(out / "history.csv")
    metrics_name = None
    if len(test_ds):
        report = evaluate(result.checkpoint, test_ds)
        report.write_json(out / "metrics.json")
        report.write_csv(out / "metrics.csv")
        metrics_name = "metrics.json"
    manifest = {
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "data_fingerprint": fingerprint(data_csv),
        "checkpoint": "checkpoint.json",
        "history": "history.csv",
        "metrics": metrics_name,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
    }
    _write_json(manifest, out / "manifest.json")
    return manifest


def cmd_eval(checkpoint, data_csv, out_dir, split: str = "test", horizons=None) -> dict:
    ckpt = Checkpoint.load(checkpoint)
    table = load_csv(data_csv)
    n, p, q = ckpt.dims
    if table.values.shape[1] != n:
        raise ShapeError(f"checkpoint expects N={n}, P={p}, Q={q}; data has N={table.values.shape[1]} sensors")
    d = ckpt.data
    splits = (1.0, 0.0, 0.0) if split == "all" else tuple(d.get("splits", (0.7, 0.1, 0.2)))
    parts = window(table, p, q, splits, stride=d.get("stride", 1), offset=d.get("offset", 0), norm=ckpt.norm)
    ds = parts[{"train": 0, "all": 0, "val": 1, "test": 2}[split]]
    ckpt.check_dataset(ds)
    report = evaluate(ckpt, ds, horizons)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    write_weight_trajectory(weight_trajectory(ckpt, ds), ds.starts, out / "weights.csv")
    return report.to_dict()


def cmd_export(checkpoint, out_dir) -> list[Path]:
    return export(Checkpoint.load(checkpoint), out_dir)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kronmix", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic series with known mixture ground truth")
    s.add_argument("spec_file")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model and its mixture bank")
    t.add_argument("data_csv")
    t.add_argument("config_json")
    t.add_argument("out_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--rho", type=float)
    t.add_argument("--k", type=int)
    t.add_argument("--p", type=int)
    t.add_argument("--q", type=int)
    t.add_argument("--splits", help="train,val,test fractions, e.g. 0.7,0.1,0.2")

    e = sub.add_parser("eval", help="metrics and weight trajectory for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data_csv")
    e.add_argument("out_dir")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--horizons", help="comma-separated 1-based steps (default 3,6,9,12 within Q)")

    x = sub.add_parser("export", help="write covariance/precision CSVs and SVG heatmaps")
    x.add_argument("checkpoint")
    x.add_argument("out_dir")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "synth":
            for p in cmd_synth(args.spec_file, args.out_dir, args.seed):
                print(p)
        elif args.command == "train":
            manifest = cmd_train(args.data_csv, args.config_json, args.out_dir, args)
            print(f"best epoch {manifest['best_epoch']} of {manifest['epochs_run']}; wrote {args.out_dir}")
        elif args.command == "eval":
            horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else None
            report = cmd_eval(args.checkpoint, args.data_csv, args.out_dir, args.split, horizons)
            for h, r, m, a in zip(report["horizons"], report["rmse"], report["mape"], report["mae"]):
                print(f"h={h:>2}  rmse {r:.4f}  mape {m:.3f}%  mae {a:.4f}")
            print(f"mean nll {report['mean_nll']:.4f} nats/window (NQ={report['nq']})")
        elif args.command == "export":
            for p in cmd_export(args.checkpoint, args.out_dir):
                print(p)
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, DataError, SpecError, ConfigError, ShapeError, CheckpointVersionError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
