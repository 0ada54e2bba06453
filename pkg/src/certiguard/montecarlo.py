"""Batch experiment harness: seeded rollout ensembles and their statistics."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .runtime import RolloutConfig, TrajectoryRecord, run_rollout


@dataclass(frozen=True)
class TraceSummary:
    """Per-trace outcome kept by batches (records themselves can be large)."""

    seed: int
    safe: bool
    min_h: float
    num_triggers: int
    num_infeasible: int
    windows: int
    windows_within_delta: int
    failure: str | None = None

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "safe": self.safe,
            "min_h": self.min_h,
            "num_triggers": self.num_triggers,
            "num_infeasible": self.num_infeasible,
            "windows": self.windows,
            "windows_within_delta": self.windows_within_delta,
            "failure": self.failure,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TraceSummary":
        return cls(**payload)


def summarize_record(record: TrajectoryRecord, drift_bound: float) -> TraceSummary:
    return TraceSummary(
        seed=record.seed,
        safe=record.safe,
        min_h=record.min_h,
        num_triggers=record.num_triggers,
        num_infeasible=record.num_infeasible,
        windows=int(record.window_drift.shape[0]),
        windows_within_delta=int(np.sum(record.window_drift <= drift_bound)),
        failure=record.failure,
    )


@dataclass(frozen=True)
class BatchResult:
    """Aggregated rollout ensemble.

    Infeasible-fallback traces count as unsafe unless excluded; excluded
    traces leave the denominator entirely. Crashed rollouts ("failed"
    traces) always count as unsafe.
    """

    summaries: tuple[TraceSummary, ...]
    config_snapshot: dict
    base_seed: int
    exclude_infeasible: bool = False

    @property
    def n_traces(self) -> int:
        return len(self.summaries)

    def _counted(self) -> list[TraceSummary]:
        if not self.exclude_infeasible:
            return list(self.summaries)
        return [
            s
            for s in self.summaries
            if s.num_infeasible == 0 or s.failure is not None
        ]

    @property
    def safety_rate(self) -> float:
        counted = self._counted()
        if not counted:
            raise ValueError("no traces left after exclusion")
        good = sum(
            1
            for s in counted
            if s.failure is None
            and s.safe
            and (self.exclude_infeasible or s.num_infeasible == 0)
        )
        return good / len(counted)

    @property
    def coverage_rate(self) -> float:
        """Fraction of inter-trigger windows with drift within the bound."""
        total = sum(s.windows for s in self.summaries if s.failure is None)
        if total == 0:
            raise ValueError("no windows recorded")
        within = sum(
            s.windows_within_delta for s in self.summaries if s.failure is None
        )
        return within / total

    def merge(self, other: "BatchResult") -> "BatchResult":
        if self.exclude_infeasible != other.exclude_infeasible:
            raise ValueError("cannot merge batches with different exclusion policies")
        merged = sorted(self.summaries + other.summaries, key=lambda s: s.seed)
        return BatchResult(
            summaries=tuple(merged),
            config_snapshot=self.config_snapshot,
            base_seed=min(self.base_seed, other.base_seed),
            exclude_infeasible=self.exclude_infeasible,
        )

    def to_json(self) -> dict:
        return {
            "base_seed": self.base_seed,
            "n_traces": self.n_traces,
            "exclude_infeasible": self.exclude_infeasible,
            "safety_rate": self.safety_rate,
            "coverage_rate": self.coverage_rate,
            "config": self.config_snapshot,
            "traces": [s.to_json() for s in self.summaries],
        }


def safety_rate(summaries) -> float:
    """Fraction of records whose barrier value stayed nonnegative throughout."""
    summaries = list(summaries)
    if not summaries:
        raise ValueError("safety_rate requires at least one record")
    def is_safe(s) -> bool:
        return bool(s.safe if hasattr(s, "safe") else s["safe"])

    return sum(1 for s in summaries if is_safe(s)) / len(summaries)


def _config_snapshot(config: RolloutConfig) -> dict:
    return {
        "mode": config.mode,
        "error_bound": config.error_bound,
        "delta": config.delta,
        "eta": config.eta,
        "dt": config.dt,
        "duration": config.duration,
        "steps": config.steps,
        "u_max": config.u_max,
        "nominal_gain": config.nominal_gain,
        "capture_radius": config.capture_radius,
        "beta_offset": config.beta_offset,
        "margins": list(config.margins()),
        "noise_lambda": config.noise.lam,
        "noise_convention": config.noise.convention,
        "perception": config.perception.descriptor,
    }


def _run_one(args) -> TraceSummary:
    config, seed, drift_bound = args
    cfg = replace(config, seed=seed)
    try:
        record = run_rollout(cfg)
    except Exception as exc:  # captured: the batch keeps going
        return TraceSummary(
            seed=seed,
            safe=False,
            min_h=float("nan"),
            num_triggers=0,
            num_infeasible=0,
            windows=0,
            windows_within_delta=0,
            failure=f"{type(exc).__name__}: {exc}",
        )
    return summarize_record(record, drift_bound)


def run_batch(
    config: RolloutConfig,
    n_traces: int,
    base_seed: int,
    jobs: int = 1,
    exclude_infeasible: bool = False,
) -> BatchResult:
    """n_traces rollouts with seeds base_seed .. base_seed + n - 1.

    Deterministic given (config, base_seed) regardless of the worker count:
    every trace owns the random stream derived from its own seed and results
    are collected in seed order.
    """
    if n_traces < 1:
        raise ValueError("n_traces must be >= 1")
    drift_bound = config.delta if config.mode in ("robust", "vanilla") else config.error_bound
    tasks = [(config, base_seed + i, drift_bound) for i in range(n_traces)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_one, tasks))
    else:
        summaries = [_run_one(task) for task in tasks]
    return BatchResult(
        summaries=tuple(summaries),
        config_snapshot=_config_snapshot(config),
        base_seed=base_seed,
        exclude_infeasible=exclude_infeasible,
    )


@dataclass(frozen=True)
class Histogram:
    """Fixed-width binning of nonnegative scores plus an empirical quantile."""

    edges: np.ndarray
    counts: np.ndarray
    quantile_level: float
    quantile: float

    def rows(self) -> list[tuple[float, float, int]]:
        return [
            (float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
            for i in range(self.counts.shape[0])
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for lo, hi, count in self.rows():
                fh.write(f"{lo!r},{hi!r},{count}\n")


def score_histogram(errors, bin_width: float, alpha: float = 0.25) -> Histogram:
    """Histogram of runtime nonconformity scores and their (1-alpha) quantile."""
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    errors = np.asarray(errors, dtype=float).ravel()
    if errors.size == 0:
        raise ValueError("scores must be nonempty")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    top = float(errors.max())
    n_bins = max(1, int(math.ceil(top / bin_width - 1e-12)))
    edges = bin_width * np.arange(n_bins + 1)
    if edges[-1] < top:
        edges = np.append(edges, bin_width * (n_bins + 1))
    counts, _ = np.histogram(errors, bins=edges)
    quantile = float(np.quantile(errors, 1.0 - alpha, method="higher"))
    return Histogram(
        edges=edges,
        counts=counts,
        quantile_level=1.0 - alpha,
        quantile=quantile,
    )
