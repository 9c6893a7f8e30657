"""Command-line surface.

Verbs: gen-data, make-refs, solve, train, predict, bench, render, nfd-train,
nfd-eval. Every command accepts --seed, --workers, and --verbose, resolves
workers from the flag, then the SHIM_WORKERS environment variable, then the
core count, and writes an exact JSON snapshot of its resolved arguments
beside its outputs so any run can be reproduced.

Exit codes: 0 success, 2 usage error, 3 data/model error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import ALL_METHODS, DEFAULT_REPEATS, DEFAULT_VOLUME_SLICES, run_bench
from .dataset_io import load_dataset, save_dataset
from .errors import InvalidArgumentError, ShimError
from .fields import (
    DEFAULT_COILS,
    DEFAULT_DECAY_SCALE_MM,
    DEFAULT_GRID,
    DEFAULT_MASK_FRACTION,
    DEFAULT_RING_RADIUS_MM,
    DEFAULT_WAVELENGTH_MM,
    Dataset,
    assign_splits,
    generate_dataset,
)
from .nfd import (
    DEFAULT_MAX_COV,
    DEFAULT_MIN_RATIO,
    NfdTrainConfig,
    evaluate_nfd,
    synth_labeled_set,
    train_nfd,
)
from .objective import ObjectiveParams, ShimWeights, quadrature_weights, rmse_percent
from .model_io import load_model, save_model
from .parallel import pmap, resolve_workers
from .predictor import PredictorModel, TrainConfig, predict_timed, train
from .render import render_record
from .solvers import DEFAULT_ADAM_LR, DEFAULT_ADAM_STEPS, mls_solve, restart_search


class UsageError(Exception):
    """Bad command-line arguments (exit code 2)."""


def _write_snapshot(target: Path, command: str, args: argparse.Namespace) -> None:
    """Write the resolved-arguments snapshot beside an output file/directory."""
    arguments = {
        k: v for k, v in vars(args).items() if k not in ("func", "command")
    }
    snapshot = {
        "command": command,
        "package_version": __version__,
        "arguments": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in arguments.items()},
    }
    path = target / "run_config.json" if target.is_dir() else Path(
        str(target) + ".run.json"
    )
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


def _parse_pair(text: str, name: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"--{name} expects 'lo,hi'")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise UsageError(f"--{name} expects numbers, got {text!r}") from exc
    return lo, hi


def _parse_counts(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError("--counts expects 'uniform,non_uniform'")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise UsageError(f"--counts expects integers, got {text!r}") from exc


def _load_dataset_checked(path: str) -> Dataset:
    if not Path(path).exists():
        raise ShimError(f"dataset file {path} does not exist")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    if args.slices < 1:
        raise UsageError("--slices must be >= 1")
    workers = resolve_workers(args.workers)
    radius_range = _parse_pair(args.radius_range, "radius-range")
    dataset = generate_dataset(
        args.slices,
        args.seed,
        workers=workers,
        n_coils=args.coils,
        grid_size=args.grid,
        radius_range_mm=radius_range,
        ring_radius_mm=args.ring_radius,
        wavelength_mm=args.wavelength,
        decay_scale_mm=args.decay_scale,
        mask_fraction=args.mask_fraction,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    _write_snapshot(out, "gen-data", args)

    quad = quadrature_weights(args.coils)
    covs = []
    for record in dataset.records:
        from .nfd import uniformity_stats
        from .objective import combine

        mag = np.abs(combine(record.field, quad))
        covs.append(uniformity_stats(mag, record.mask)[1])
    counts = {tag: dataset.split.count(tag) for tag in ("train", "val", "test")}
    print(f"wrote {len(dataset)} records to {out}")
    print(f"splits: {counts}")
    print(
        f"quadrature CoV inside mask: mean {np.mean(covs):.3f} "
        f"min {np.min(covs):.3f} max {np.max(covs):.3f}"
    )
    return 0


# ---------------------------------------------------------------------------
# make-refs


class _RefsTask:
    def __init__(self, params, n_restarts, steps, seed, lr):
        self.params = params
        self.n_restarts = n_restarts
        self.steps = steps
        self.seed = seed
        self.lr = lr

    def __call__(self, item):
        index, record = item
        try:
            report = restart_search(
                record,
                self.params,
                n_restarts=self.n_restarts,
                steps=self.steps,
                seed=self.seed + index,
                lr=self.lr,
            )
            return index, record.with_reference(report.final_weights), None
        except ShimError as exc:
            return index, None, f"{type(exc).__name__}: {exc}"


def cmd_make_refs(args) -> int:
    if args.restarts < 1:
        raise UsageError("--restarts must be >= 1")
    dataset = _load_dataset_checked(args.data)
    workers = resolve_workers(args.workers)
    params = ObjectiveParams(lam=args.lam)
    task = _RefsTask(params, args.restarts, args.steps, args.seed, args.lr)
    results = pmap(task, list(enumerate(dataset.records)), workers)
    failures = []
    for index, record, error in results:
        if error is None:
            dataset.records[index] = record
        else:
            failures.append(
                {
                    "slice_id": dataset.records[index].slice_id,
                    "error": error.split(":")[0],
                    "message": error,
                }
            )
    out = Path(args.out or args.data)
    save_dataset(dataset, out)
    manifest = {
        "n_records": len(dataset.records),
        "n_failed": len(failures),
        "failures": failures,
    }
    Path(str(out) + ".failures.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    _write_snapshot(out, "make-refs", args)
    done = len(dataset.records) - len(failures)
    rmses = [r.ref_rmse_percent for r in dataset.records if r.ref_rmse_percent is not None]
    print(f"references for {done}/{len(dataset.records)} records -> {out}")
    if rmses:
        print(f"mean reference RMSE: {np.mean(rmses):.3f} % of target")
    if failures:
        print(f"{len(failures)} records failed; see {out}.failures.json", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    if args.method not in ("mls", "adam"):
        raise UsageError("--method must be mls or adam")
    dataset = _load_dataset_checked(args.data)
    params = ObjectiveParams(lam=args.lam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for record in dataset.records:
        try:
            if args.method == "mls":
                report = mls_solve(
                    record, params, max_iter=args.max_iter, tol=args.tol
                )
            else:
                report = restart_search(
                    record,
                    params,
                    n_restarts=args.restarts,
                    steps=args.steps,
                    seed=args.seed,
                    lr=args.lr,
                )
            rows.append(
                [
                    record.slice_id,
                    args.method,
                    f"{report.final_rmse_percent:.6f}",
                    str(report.iterations),
                    f"{report.wall_time_s:.6f}",
                    str(report.converged),
                    "",
                ]
            )
        except ShimError as exc:
            rows.append(
                [record.slice_id, args.method, "", "", "", "", type(exc).__name__]
            )
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["slice_id", "method", "rmse_percent", "iterations", "wall_time_s",
             "converged", "error"]
        )
        writer.writerows(rows)
    _write_snapshot(out, "solve", args)
    solved = [float(r[2]) for r in rows if r[2]]
    failed = sum(1 for r in rows if r[6])
    print(f"solved {len(solved)}/{len(rows)} records -> {out}")
    if solved:
        print(f"mean RMSE: {np.mean(solved):.3f} % of target")
    if failed:
        print(f"{failed} records failed (see error column)", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train / predict


def cmd_train(args) -> int:
    if args.folds < 1:
        raise UsageError("--folds must be >= 1")
    dataset = _load_dataset_checked(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fold in range(args.folds):
        fold_seed = (args.seed * 1_000_003 + fold) & 0x7FFFFFFFFFFFFFFF
        config = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=fold_seed,
            width_base=args.width_base,
        )
        fold_dataset = Dataset(
            records=dataset.records,
            split=assign_splits(len(dataset.records), fold_seed, config.split_ratio),
            rng_seed=dataset.rng_seed,
        )
        t0 = time.perf_counter()
        model, history = train(fold_dataset, config)
        elapsed = time.perf_counter() - t0
        save_model(model, out_dir / f"model_fold{fold}.shnn")
        payload = history.to_dict()
        payload["val_loss"] = [
            None if (isinstance(v, float) and math.isnan(v)) else v
            for v in payload["val_loss"]
        ]
        (out_dir / f"history_fold{fold}.json").write_text(
            json.dumps(payload, indent=2) + "\n"
        )
        last = history.train_loss[-1] if history.train_loss else math.nan
        print(
            f"fold {fold}: {args.epochs} epochs in {elapsed:.1f}s, "
            f"final train loss {last:.4f}"
        )
    _write_snapshot(out_dir, "train", args)
    return 0


def cmd_predict(args) -> int:
    dataset = _load_dataset_checked(args.data)
    if not Path(args.model).exists():
        raise ShimError(f"model file {args.model} does not exist")
    model = load_model(args.model)
    if not isinstance(model, PredictorModel):
        raise ShimError(f"{args.model} is not a shim-predictor model")
    records = (
        dataset.records if args.split == "all" else dataset.subset(args.split)
    )
    if not records:
        raise ShimError(f"no records in split {args.split!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    c = records[0].field.n_channels
    header = (
        ["slice_id", "rmse_percent", "wall_time_s"]
        + [f"w_re_{i}" for i in range(c)]
        + [f"w_im_{i}" for i in range(c)]
    )
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        rmses = []
        for record in records:
            weights, seconds = predict_timed(model, record)
            rmse = rmse_percent(record.field, weights, record.mask, record.target)
            rmses.append(rmse)
            writer.writerow(
                [record.slice_id, f"{rmse:.6f}", f"{seconds:.6f}"]
                + [f"{v:.9g}" for v in weights.to_real()]
            )
    _write_snapshot(out, "predict", args)
    print(f"predicted {len(records)} slices -> {out}")
    print(f"mean predicted RMSE: {np.mean(rmses):.3f} % of target")
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    alias = {"adam": "adam_restart"}
    methods = [alias.get(m, m) for m in methods]
    for name in methods:
        if name not in ALL_METHODS:
            raise UsageError(f"unknown method {name!r} (choose from mls,adam,predictor)")
    dataset = _load_dataset_checked(args.data)
    model = None
    model_load_s = 0.0
    if "predictor" in methods:
        if not args.model:
            raise UsageError("--model is required when benching the predictor")
        t0 = time.perf_counter()
        model = load_model(args.model)
        if not isinstance(model, PredictorModel):
            raise ShimError(f"{args.model} is not a shim-predictor model")
        model.folded_arrays()
        model_load_s = time.perf_counter() - t0
    report = run_bench(
        dataset.records,
        methods,
        model=model,
        params=ObjectiveParams(lam=args.lam),
        volume_slices=args.volume_slices,
        repeats=args.repeats,
        model_load_s=model_load_s,
        mls_max_iter=args.max_iter,
        mls_tol=args.tol,
        adam_restarts=args.restarts,
        adam_steps=args.steps,
        adam_lr=args.lr,
        adam_seed=args.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "bench.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n"
    )
    with open(out_dir / "bench.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["method", "mean_rmse_percent", "rmse_q10", "rmse_q25", "rmse_q50",
             "rmse_q75", "rmse_q90", "per_slice_s", "per_volume_s",
             "speedup_vs_mls"]
        )
        for m in report.methods:
            writer.writerow(
                [
                    m.method,
                    f"{m.mean_rmse_percent:.6f}",
                    *(f"{m.rmse_quantiles[q]:.6f}"
                      for q in ("q10", "q25", "q50", "q75", "q90")),
                    f"{m.per_slice_s:.9f}",
                    f"{m.per_volume_s:.6f}",
                    "" if m.speedup_vs_mls is None else f"{m.speedup_vs_mls:.4f}",
                ]
            )
    _write_snapshot(out_dir, "bench", args)
    print(report.text_table())
    print(f"model load: {report.model_load_s:.4f}s (excluded from inference timing)")
    return 0


# ---------------------------------------------------------------------------
# render


def _weights_for_record(record, spec: str | None, model):
    if model is not None:
        from .predictor import predict

        return predict(model, record)
    if spec == "quadrature":
        return quadrature_weights(record.field.n_channels)
    if spec == "ref":
        if record.ref_weights is None:
            raise ShimError(f"record {record.slice_id} has no reference weights")
        return record.ref_weights
    payload = json.loads(Path(spec).read_text())
    return ShimWeights.from_real(np.asarray(payload["weights_real"], dtype=np.float64))


def cmd_render(args) -> int:
    if (args.weights is None) == (args.model is None):
        raise UsageError("provide exactly one of --weights or --model")
    dataset = _load_dataset_checked(args.data)
    model = None
    if args.model:
        model = load_model(args.model)
        if not isinstance(model, PredictorModel):
            raise ShimError(f"{args.model} is not a shim-predictor model")
    records = dataset.records
    if args.slices != "all":
        wanted = set(args.slices.split(","))
        records = [r for r in records if r.slice_id in wanted]
        missing = wanted - {r.slice_id for r in records}
        if missing:
            raise ShimError(f"slice ids not in dataset: {sorted(missing)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_files = 0
    for record in records:
        weights = _weights_for_record(record, args.weights, model)
        n_files += len(render_record(record, weights, out_dir))
    _write_snapshot(out_dir, "render", args)
    print(f"wrote {n_files} images for {len(records)} slices -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# nfd


def _split_subset(dataset: Dataset, split: str) -> Dataset:
    if split == "all":
        return dataset
    records = dataset.subset(split)
    if not records:
        raise ShimError(f"no records in split {split!r}")
    return Dataset(records=records, split=[split] * len(records),
                   rng_seed=dataset.rng_seed)


def cmd_nfd_train(args) -> int:
    dataset = _split_subset(_load_dataset_checked(args.data), args.split)
    counts = _parse_counts(args.counts)
    samples = synth_labeled_set(
        dataset, args.seed, counts,
        min_ratio=args.min_ratio, max_cov=args.max_cov,
    )
    config = NfdTrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed
    )
    model, history = train_nfd(samples, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    _write_snapshot(out, "nfd-train", args)
    final = history.accuracy[-1] if history.accuracy else math.nan
    print(
        f"trained detector on {len(samples)} samples "
        f"({counts[0]} uniform + {counts[1]} non-uniform) -> {out}"
    )
    print(f"final training accuracy: {final:.4f}")
    return 0


def cmd_nfd_eval(args) -> int:
    dataset = _split_subset(_load_dataset_checked(args.data), args.split)
    if not Path(args.model).exists():
        raise ShimError(f"model file {args.model} does not exist")
    model = load_model(args.model)
    from .nfd import NfdModel

    if not isinstance(model, NfdModel):
        raise ShimError(f"{args.model} is not a uniformity-detector model")
    counts = _parse_counts(args.counts)
    samples = synth_labeled_set(
        dataset, args.seed, counts,
        min_ratio=args.min_ratio, max_cov=args.max_cov,
    )
    matrix = evaluate_nfd(model, samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        for key, value in matrix.to_dict().items():
            writer.writerow([key, f"{value:.6f}"])
    _write_snapshot(out, "nfd-eval", args)
    print("confusion matrix (rows: truth, cols: prediction)")
    print(f"{'':>14} {'uniform':>10} {'non_uniform':>12}")
    print(f"{'uniform':>14} {matrix.tp:>10} {matrix.fn:>12}")
    print(f"{'non_uniform':>14} {matrix.fp:>10} {matrix.tn:>12}")
    print(
        f"accuracy {matrix.accuracy:.4f} | mean confidence: "
        f"uniform {matrix.mean_confidence_uniform:.4f}, "
        f"non-uniform {matrix.mean_confidence_non_uniform:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfshim",
        description="Desk-scale RF shimming: data generation, solvers, "
        "learned prediction, and uniformity screening.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument(
        "--workers", type=int, default=None,
        help="worker processes (default: SHIM_WORKERS or core count)",
    )
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic slice dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, required=True)
    p.add_argument("--coils", type=int, default=DEFAULT_COILS)
    p.add_argument("--grid", type=int, default=DEFAULT_GRID)
    p.add_argument("--radius-range", default="80,120",
                   help="phantom radius range in mm, 'lo,hi'")
    p.add_argument("--ring-radius", type=float, default=DEFAULT_RING_RADIUS_MM)
    p.add_argument("--wavelength", type=float, default=DEFAULT_WAVELENGTH_MM)
    p.add_argument("--decay-scale", type=float, default=DEFAULT_DECAY_SCALE_MM)
    p.add_argument("--mask-fraction", type=float, default=DEFAULT_MASK_FRACTION)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-refs", parents=[common],
                       help="fill reference weights via restarted Adam")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="output path (default: in place)")
    p.add_argument("--restarts", type=int, default=300)
    p.add_argument("--steps", type=int, default=DEFAULT_ADAM_STEPS)
    p.add_argument("--lr", type=float, default=DEFAULT_ADAM_LR)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.set_defaults(func=cmd_make_refs)

    p = sub.add_parser("solve", parents=[common],
                       help="solve every record, emit a per-slice CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="mls", help="mls or adam")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--restarts", type=int, default=300)
    p.add_argument("--steps", type=int, default=DEFAULT_ADAM_STEPS)
    p.add_argument("--lr", type=float, default=DEFAULT_ADAM_LR)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", parents=[common],
                       help="train shim predictors over k folds")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width-base", type=int, default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="emit predicted weights and RMSE per slice")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all",
                   choices=["all", "train", "val", "test"])
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", parents=[common],
                       help="time methods on identical slices")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--methods", default="mls,adam,predictor")
    p.add_argument("--volume-slices", type=int, default=DEFAULT_VOLUME_SLICES)
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--restarts", type=int, default=300)
    p.add_argument("--steps", type=int, default=DEFAULT_ADAM_STEPS)
    p.add_argument("--lr", type=float, default=DEFAULT_ADAM_LR)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", parents=[common],
                       help="write grayscale images of shimmed fields")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", default=None,
                   help="'quadrature', 'ref', or a JSON weights file")
    p.add_argument("--model", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--slices", default="all",
                   help="comma-separated slice ids (default: all)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("nfd-train", parents=[common],
                       help="train the non-uniformity detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="200,200")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--min-ratio", type=float, default=DEFAULT_MIN_RATIO)
    p.add_argument("--max-cov", type=float, default=DEFAULT_MAX_COV)
    p.add_argument("--split", default="all",
                   choices=["all", "train", "val", "test"])
    p.set_defaults(func=cmd_nfd_train)

    p = sub.add_parser("nfd-eval", parents=[common],
                       help="evaluate the detector on a held-out synthetic set")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="200,200")
    p.add_argument("--min-ratio", type=float, default=DEFAULT_MIN_RATIO)
    p.add_argument("--max-cov", type=float, default=DEFAULT_MAX_COV)
    p.add_argument("--split", default="all",
                   choices=["all", "train", "val", "test"])
    p.set_defaults(func=cmd_nfd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ShimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
