"""Accuracy/runtime benchmarking of solver and predictor paths.

Methodology: each method runs over the same slices; its pass is repeated
``repeats`` times and the median total divided by the slice count gives the
per-slice time (monotonic clock). Volume time is ``volume_slices`` times the
per-slice time for every method. Predictor timing covers encoding plus the
batched forward pass (the volume-processing path); the one-time model load
and weight-folding cost is reported separately and excluded, as is solver
warmup.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .fields import SliceRecord
from .objective import ObjectiveParams, rmse_percent
from .predictor import PredictorModel, predict_batch
from .solvers import mls_solve, restart_search

DEFAULT_VOLUME_SLICES = 200
DEFAULT_REPEATS = 5

METHOD_MLS = "mls"
METHOD_ADAM = "adam_restart"
METHOD_PREDICTOR = "predictor"
ALL_METHODS = (METHOD_MLS, METHOD_ADAM, METHOD_PREDICTOR)

_QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90)


@dataclass
class MethodStats:
    """Per-method accuracy and timing summary."""

    method: str
    mean_rmse_percent: float
    rmse_quantiles: dict[str, float]
    per_slice_s: float
    per_volume_s: float
    speedup_vs_mls: float | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mean_rmse_percent": self.mean_rmse_percent,
            "rmse_quantiles": dict(self.rmse_quantiles),
            "per_slice_s": self.per_slice_s,
            "per_volume_s": self.per_volume_s,
            "speedup_vs_mls": self.speedup_vs_mls,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MethodStats":
        return cls(
            method=data["method"],
            mean_rmse_percent=float(data["mean_rmse_percent"]),
            rmse_quantiles={k: float(v) for k, v in data["rmse_quantiles"].items()},
            per_slice_s=float(data["per_slice_s"]),
            per_volume_s=float(data["per_volume_s"]),
            speedup_vs_mls=None
            if data.get("speedup_vs_mls") is None
            else float(data["speedup_vs_mls"]),
        )


@dataclass
class BenchReport:
    """Everything the bench command measures, JSON round-trippable."""

    n_slices: int
    volume_slices: int
    repeats: int
    model_load_s: float
    methods: list[MethodStats] = field(default_factory=list)

    def method(self, name: str) -> MethodStats:
        for stats in self.methods:
            if stats.method == name:
                return stats
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "n_slices": self.n_slices,
            "volume_slices": self.volume_slices,
            "repeats": self.repeats,
            "model_load_s": self.model_load_s,
            "methods": [m.to_dict() for m in self.methods],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BenchReport":
        return cls(
            n_slices=int(data["n_slices"]),
            volume_slices=int(data["volume_slices"]),
            repeats=int(data["repeats"]),
            model_load_s=float(data["model_load_s"]),
            methods=[MethodStats.from_dict(m) for m in data["methods"]],
        )

    def text_table(self) -> str:
        lines = [
            f"{'method':<14} {'mean RMSE %':>12} {'median %':>10} "
            f"{'per-slice s':>12} {'per-volume s':>13} {'speedup':>8}"
        ]
        for m in self.methods:
            speed = "-" if m.speedup_vs_mls is None else f"{m.speedup_vs_mls:.1f}x"
            lines.append(
                f"{m.method:<14} {m.mean_rmse_percent:>12.4f} "
                f"{m.rmse_quantiles['q50']:>10.4f} {m.per_slice_s:>12.6f} "
                f"{m.per_volume_s:>13.4f} {speed:>8}"
            )
        return "\n".join(lines)


def _median_time(run, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return sorted(times)[len(times) // 2]


def _stats(method, rmses, per_slice, volume_slices):
    quantiles = {
        f"q{int(q * 100)}": float(np.quantile(rmses, q)) for q in _QUANTILES
    }
    return MethodStats(
        method=method,
        mean_rmse_percent=float(np.mean(rmses)),
        rmse_quantiles=quantiles,
        per_slice_s=per_slice,
        per_volume_s=per_slice * volume_slices,
    )


def run_bench(
    records: list[SliceRecord],
    methods: list[str],
    model: PredictorModel | None = None,
    params: ObjectiveParams = ObjectiveParams(),
    volume_slices: int = DEFAULT_VOLUME_SLICES,
    repeats: int = DEFAULT_REPEATS,
    model_load_s: float = 0.0,
    mls_max_iter: int = 500,
    mls_tol: float = 1e-8,
    adam_restarts: int = 300,
    adam_steps: int = 2000,
    adam_lr: float = 0.05,
    adam_seed: int = 0,
) -> BenchReport:
    """Time the requested methods on identical slices."""
    if not records:
        raise InvalidArgumentError("bench needs at least one record")
    for name in methods:
        if name not in ALL_METHODS:
            raise InvalidArgumentError(f"unknown bench method {name!r}")
    report = BenchReport(
        n_slices=len(records),
        volume_slices=volume_slices,
        repeats=repeats,
        model_load_s=model_load_s,
    )

    if METHOD_MLS in methods:
        def run_mls():
            return [
                mls_solve(r, params, max_iter=mls_max_iter, tol=mls_tol)
                for r in records
            ]

        reports = run_mls()  # warm + RMSE collection
        per_slice = _median_time(run_mls, repeats) / len(records)
        report.methods.append(
            _stats(METHOD_MLS, [r.final_rmse_percent for r in reports],
                   per_slice, volume_slices)
        )

    if METHOD_ADAM in methods:
        def run_adam():
            return [
                restart_search(r, params, n_restarts=adam_restarts,
                               steps=adam_steps, seed=adam_seed, lr=adam_lr)
                for r in records
            ]

        reports = run_adam()
        per_slice = _median_time(run_adam, repeats) / len(records)
        report.methods.append(
            _stats(METHOD_ADAM, [r.final_rmse_percent for r in reports],
                   per_slice, volume_slices)
        )

    if METHOD_PREDICTOR in methods:
        if model is None:
            raise InvalidArgumentError("predictor bench needs a model")
        model.folded_arrays()  # fold once; counted as model load, not inference

        def run_predictor():
            return predict_batch(model, records)

        weights = run_predictor()
        rmses = [
            rmse_percent(r.field, w, r.mask, r.target)
            for r, w in zip(records, weights)
        ]
        per_slice = _median_time(run_predictor, repeats) / len(records)
        report.methods.append(
            _stats(METHOD_PREDICTOR, rmses, per_slice, volume_slices)
        )

    mls_stats = next((m for m in report.methods if m.method == METHOD_MLS), None)
    if mls_stats is not None:
        for m in report.methods:
            m.speedup_vs_mls = mls_stats.per_slice_s / m.per_slice_s
    return report
