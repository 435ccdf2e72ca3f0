"""Command-line front end: train, sweep, evaluate, path and verify.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, metrics, verify
from .data import file_digest, group_pairing, load_adult, synth_two_group
from .mixup import SPACES, arc_length, mu_path, uniform_grid
from .model import MlpModel
from .trainer import DEFAULT_LAMBDAS, METHODS, TrainConfig, TrainingAborted, evaluate, run_splits, sweep, train

log = logging.getLogger("fairpath")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DEFAULT_EPOCHS = {"adult": 20, "synth": 50}


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: list
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    started_at: str = ""
    wall_clock_seconds: float = 0.0
    version: str = __version__

    def write(self, path):
        write_json_atomic(path, asdict(self))


def write_json_atomic(path, payload):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    """``0,1,2`` or ``0-9``."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out += list(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '0,1,2' or '0-9', got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty integer list")
    return out


def _split_spec(text):
    fracs = _float_list(text)
    if len(fracs) != 3:
        raise argparse.ArgumentTypeError("split needs three fractions, e.g. 0.6,0.2,0.2")
    return tuple(fracs)


def _env_seed():
    raw = os.environ.get("FAIRPATH_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FAIRPATH_SEED must be an integer, got {raw!r}") from None


def _add_data_flags(p):
    p.add_argument("--dataset", choices=("adult", "synth"), required=True)
    p.add_argument("--data-path", default="data/adult",
                   help="directory holding adult.data/adult.test, or the adult.data file")
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-per-cell", type=int, default=2000)
    g.add_argument("--group-shift", type=float, default=1.0)
    g.add_argument("--label-shift", type=float, default=2.0)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--label-bias", type=float, default=0.0)
    g.add_argument("--data-seed", type=int, default=0)


def _add_train_flags(p):
    p.add_argument("--constraint", choices=("dp", "eo"), default="dp")
    p.add_argument("--space", choices=SPACES, default="input")
    p.add_argument("--penalty-form", choices=("abs", "squared"), default="abs")
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=None, help="default 20 (adult) or 50 (synth)")
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden-dims", type=_int_list, default=[200])
    p.add_argument("--split", type=_split_spec, default=(0.6, 0.2, 0.2))
    p.add_argument("--selection", choices=("constrained", "best_ap", "last"), default="constrained")


def build_parser():
    parser = argparse.ArgumentParser(prog="fairpath", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--method", choices=METHODS, default="erm")
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs/train")

    p = sub.add_parser("sweep", help="lambda x seed sweep into a tradeoff table")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--method", choices=METHODS, default=None, help="single method")
    p.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(",") if m.strip()], default=None)
    p.add_argument("--lambda-list", type=_float_list, default=list(DEFAULT_LAMBDAS))
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="runs/sweep")

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on its train/val/test splits")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default="runs/evaluate")

    p = sub.add_parser("path", help="mixup path curves on the test split")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t-grid", type=int, default=51, help="number of grid points in [0, 1]")
    p.add_argument("--spaces", type=lambda s: [v.strip() for v in s.split(",")], default=list(SPACES))
    p.add_argument("--pair-seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs/path")

    p = sub.add_parser("verify", help="closed-form and path-identity verification suite")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda1", type=float, default=None, help="fix lambda1 in the gap-penalty check")
    p.add_argument("--tolerance-scale", type=float, default=1.0)
    p.add_argument("--out-dir", default="runs/verify")
    return parser


def _load_dataset(args):
    if args.dataset == "synth":
        ds = synth_two_group(args.data_seed, args.n_per_cell, args.group_shift, args.label_shift,
                             args.dim, args.label_bias)
        return ds, {"synth": ds.provenance}
    path = Path(args.data_path)
    if not path.exists():
        raise FileNotFoundError(f"data path {path} does not exist")
    ds = load_adult(path)
    files = [path / "adult.data", path / "adult.test"] if path.is_dir() else [path]
    return ds, {str(f): file_digest(f) for f in files if f.exists()}


def _config_from_args(args, method, lam, seed):
    epochs = args.epochs if args.epochs is not None else DEFAULT_EPOCHS[args.dataset]
    cfg = TrainConfig(method=method, constraint=args.constraint, space=args.space, lambda_=lam,
                      penalty_form=args.penalty_form, h=args.h, epochs=epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, seed=seed, hidden_dims=tuple(args.hidden_dims),
                      split=tuple(args.split), selection=args.selection)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if "config" not in payload:
        raise ValueError(f"{path} has no training config; it was not written by 'fairpath train'")
    return MlpModel.from_dict(payload), TrainConfig.from_dict(payload["config"]), file_digest(path)


def cmd_train(args, manifest):
    seed = args.seed if args.seed is not None else _env_seed()
    config = _config_from_args(args, args.method, args.lambda_, seed)
    dataset, manifest.inputs = _load_dataset(args)
    manifest.config = config.to_dict()
    out = _out_dir(args)
    result = train(config, dataset)
    stem = f"{config.method}_lam{config.lambda_:g}_seed{config.seed}"
    ckpt, rec = out / f"{stem}.model.json", out / f"{stem}.record.json"
    write_json_atomic(ckpt, {**result.model.to_dict(), "config": config.to_dict()})
    write_json_atomic(rec, {"config": config.to_dict(), "record": result.record.to_dict(),
                            "history": result.history})
    manifest.outputs = [str(ckpt), str(rec)]
    return out / f"{stem}.manifest.json"


def cmd_sweep(args, manifest):
    if args.method and args.methods:
        raise UsageError("give --method or --methods, not both")
    methods = args.methods or [args.method or "fair_mixup"]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; choose from {METHODS}")
    if any(lam < 0 for lam in args.lambda_list):
        raise UsageError("lambda values must be non-negative")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    seeds = args.seeds if args.seeds is not None else [_env_seed()]
    base = _config_from_args(args, methods[0], 0.0, seeds[0])
    dataset, manifest.inputs = _load_dataset(args)
    manifest.config = {**base.to_dict(), "methods": methods, "lambda_list": args.lambda_list, "seeds": seeds}
    out = _out_dir(args)
    table = sweep(base, args.lambda_list, seeds, dataset, methods=methods, jobs=args.jobs)
    table.to_csv(out / "tradeoff.csv")
    table.summary_to_csv(out / "summary.csv")
    manifest.outputs = [str(out / "tradeoff.csv"), str(out / "summary.csv")]
    failed = [r for r in table.records if r.status != "ok"]
    if failed:
        log.error("%d of %d runs failed", len(failed), len(table.records))
    return out / "manifest.json", (EXIT_FAILURE if failed else EXIT_OK)


def cmd_evaluate(args, manifest):
    model, config, digest = _load_checkpoint(args.checkpoint)
    dataset, manifest.inputs = _load_dataset(args)
    manifest.inputs[str(args.checkpoint)] = digest
    manifest.config = config.to_dict()
    out = _out_dir(args)
    parts = dict(zip(("train", "val", "test"), run_splits(config, dataset)))
    report = {name: evaluate(model, ds) for name, ds in parts.items()}
    path = out / f"{Path(args.checkpoint).stem}.eval.json"
    write_json_atomic(path, report)
    manifest.outputs = [str(path)]
    return out / f"{Path(args.checkpoint).stem}.eval.manifest.json"


def cmd_path(args, manifest):
    if args.t_grid < 3:
        raise UsageError("--t-grid needs at least 3 points")
    bad = [s for s in args.spaces if s not in SPACES]
    if bad:
        raise UsageError(f"unknown spaces {bad}; choose from {SPACES}")
    model, config, digest = _load_checkpoint(args.checkpoint)
    dataset, manifest.inputs = _load_dataset(args)
    manifest.inputs[str(args.checkpoint)] = digest
    pair_seed = args.pair_seed if args.pair_seed is not None else config.seed
    manifest.config = {**config.to_dict(), "t_grid": args.t_grid, "pair_seed": pair_seed}
    out = _out_dir(args)
    test = run_splits(config, dataset)[2]
    pair = group_pairing(test, pair_seed)
    stem = Path(args.checkpoint).stem
    grid = uniform_grid(args.t_grid)
    per_space = {}
    for space in args.spaces:
        path = out / f"{stem}.path_{space}.csv"
        curve = mu_path(model, pair, grid, space)
        curve.to_csv(path)
        manifest.outputs.append(str(path))
        per_space[space] = {"arc_length": arc_length(model, pair, grid, space),
                            "mu_calibrated_end": float(curve.mu_calibrated[-1])}
    scores = np.concatenate([model(pair.x0), model(pair.x1)])
    groups = np.repeat([0, 1], len(pair))
    summary = out / f"{stem}.path_summary.json"
    write_json_atomic(summary, {"n_pairs": len(pair), "pairing_ddp": metrics.delta_dp(scores, groups),
                                "spaces": per_space})
    manifest.outputs.append(str(summary))
    return out / f"{stem}.path.manifest.json"


def cmd_verify(args, manifest):
    seed = args.seed if args.seed is not None else _env_seed()
    if args.tolerance_scale < 0:
        raise UsageError("--tolerance-scale must be non-negative")
    manifest.config = {"seed": seed, "lambda1": args.lambda1, "tolerance_scale": args.tolerance_scale}
    out = _out_dir(args)
    checks = verify.run_checks(seed, args.tolerance_scale, args.lambda1)
    report = verify.report(checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: error {c.error:.3e} (tolerance {c.tolerance:.1e})")
    path = out / "verify.json"
    write_json_atomic(path, report)
    manifest.outputs = [str(path)]
    return out / "verify.manifest.json", (EXIT_OK if report["passed"] else EXIT_FAILURE)


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "evaluate": cmd_evaluate, "path": cmd_path,
            "verify": cmd_verify}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=["fairpath", *argv], config={},
                           started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    start = time.perf_counter()
    try:
        result = COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fairpath: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, FileNotFoundError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"fairpath: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    manifest_path, code = result if isinstance(result, tuple) else (result, EXIT_OK)
    manifest.wall_clock_seconds = time.perf_counter() - start
    manifest.write(manifest_path)
    return code


if __name__ == "__main__":
    sys.exit(main())
