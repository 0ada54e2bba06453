"""Distribution-free calibration of perception-error bounds.

The quantile rule returns the r-th smallest of k nonconformity scores with
r = ceil((k+1)(1-alpha)); when r > k the bound is unbounded and an explicit
``OVERFLOW`` marker is returned instead of a float, so downstream arithmetic
has to deal with it deliberately. Covering the workspace with an eps-net and
taking the sup of per-point bounds plus a Lipschitz-controlled gridding term
yields the combined estimation-error bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .geometry import Box


class _Overflow:
    """Singleton marker for an unbounded conformal quantile (r > k)."""

    _instance: "_Overflow | None" = None

    def __new__(cls) -> "_Overflow":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "OVERFLOW"

    def __reduce__(self):
        return (_Overflow, ())


OVERFLOW = _Overflow()

#: A conformal bound: a finite float, or OVERFLOW when the quantile index
#: exceeds the sample count.
Bound = float | _Overflow


def is_overflow(value) -> bool:
    return isinstance(value, _Overflow)


def quantile_index(k: int, alpha: float) -> int | _Overflow:
    """Order-statistic index r = ceil((k+1)(1-alpha)), or OVERFLOW if r > k.

    The ceiling is evaluated exactly against the binary value of ``alpha``
    (no floating-point fuzz), so results agree with any exact-arithmetic
    oracle on the same inputs.
    """
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise ValueError(f"sample count must be an integer, got {k!r}")
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    r = math.ceil((int(k) + 1) * (1 - Fraction(alpha)))
    return OVERFLOW if r > k else int(r)


@dataclass(frozen=True)
class ScoreSet:
    """Sorted nonnegative nonconformity scores with a failure probability."""

    scores: tuple[float, ...]
    alpha: float

    def __init__(self, scores: Sequence[float], alpha: float) -> None:
        arr = np.asarray(scores, dtype=float).ravel()
        if arr.size == 0:
            raise ValueError("score set must be nonempty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("scores must be finite")
        if np.any(arr < 0):
            raise ValueError("scores must be nonnegative")
        alpha = float(alpha)
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        object.__setattr__(self, "scores", tuple(np.sort(arr, kind="stable")))
        object.__setattr__(self, "alpha", alpha)

    def __len__(self) -> int:
        return len(self.scores)


def conformal_bound(scores: ScoreSet) -> Bound:
    """The r-th smallest score (1-indexed), or OVERFLOW when r > k."""
    r = quantile_index(len(scores), scores.alpha)
    if is_overflow(r):
        return OVERFLOW
    return scores.scores[r - 1]


def empirical_coverage(bound: Bound, validation_errors: Sequence[float]) -> float:
    """Fraction of fresh errors at or below the bound (1.0 for OVERFLOW)."""
    errors = np.asarray(validation_errors, dtype=float).ravel()
    if errors.size == 0:
        raise ValueError("validation errors must be nonempty")
    if is_overflow(bound):
        return 1.0
    return float(np.mean(errors <= float(bound)))


@dataclass(frozen=True)
class EpsNet:
    """Finite grid covering a workspace box to radius ``epsilon``."""

    points: np.ndarray
    epsilon: float
    workspace: Box

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def __len__(self) -> int:
        return self.points.shape[0]

    def covering_gap(self, probes: np.ndarray) -> float:
        """Largest probe-to-nearest-point distance (should be <= epsilon)."""
        probes = np.atleast_2d(np.asarray(probes, dtype=float))
        gaps = np.empty(probes.shape[0])
        for start in range(0, probes.shape[0], 1024):
            block = probes[start : start + 1024]
            d2 = ((block[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
            gaps[start : start + block.shape[0]] = np.sqrt(d2.min(axis=1))
        return float(gaps.max())


def build_eps_net(workspace: Box, epsilon: float) -> EpsNet:
    """Uniform axis-aligned grid with per-axis spacing at most 2*eps/sqrt(n).

    Cell centers are at most eps/sqrt(n) away per axis from any workspace
    point, hence at most eps away in Euclidean norm.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n = workspace.dim
    max_spacing = 2.0 * epsilon / math.sqrt(n)
    axes = []
    for lo, width in zip(workspace.lo, workspace.widths):
        cells = max(1, math.ceil(width / max_spacing - 1e-12))
        spacing = width / cells
        axes.append(lo + spacing * (np.arange(cells) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)
    return EpsNet(points=points, epsilon=epsilon, workspace=workspace)


#: Oracle producing ``n`` noisy measurement vectors at a given state.
MeasurementSampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class CalibrationResult:
    """Per-grid-point conformal bounds and the combined error bound.

    ``combined_bound`` is sup_j(per-point bound) + (lipschitz_product + 1) *
    epsilon; it is OVERFLOW whenever any per-point bound is.
    """

    points: np.ndarray
    bounds: tuple[Bound, ...]
    sup_bound: Bound
    lipschitz_product: float
    epsilon: float
    combined_bound: Bound
    alpha: float
    samples_per_point: int
    scores: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if len(self.bounds) != pts.shape[0]:
            raise ValueError("one bound per grid point required")
        r = quantile_index(self.samples_per_point, self.alpha)
        if is_overflow(r):
            raise ValueError(
                "samples_per_point too small for alpha: the per-point bound "
                "would always be unbounded"
            )

    @property
    def per_point_bounds(self) -> list[tuple[np.ndarray, Bound]]:
        return [(self.points[i], self.bounds[i]) for i in range(len(self.bounds))]

    def to_json(self) -> dict:
        def enc(b: Bound):
            return None if is_overflow(b) else float(b)

        return {
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "lipschitz_product": self.lipschitz_product,
            "per_point": [
                {"x": [float(v) for v in pt], "bound": enc(b)}
                for pt, b in self.per_point_bounds
            ],
            "sup_bound": enc(self.sup_bound),
            "combined_bound": enc(self.combined_bound),
            "samples_per_point": self.samples_per_point,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "CalibrationResult":
        def dec(v) -> Bound:
            return OVERFLOW if v is None else float(v)

        points = np.array([row["x"] for row in payload["per_point"]], dtype=float)
        bounds = tuple(dec(row["bound"]) for row in payload["per_point"])
        return cls(
            points=points,
            bounds=bounds,
            sup_bound=dec(payload["sup_bound"]),
            lipschitz_product=float(payload["lipschitz_product"]),
            epsilon=float(payload["epsilon"]),
            combined_bound=dec(payload["combined_bound"]),
            alpha=float(payload["alpha"]),
            samples_per_point=int(payload["samples_per_point"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _combine(sup: Bound, lipschitz_product: float, epsilon: float) -> Bound:
    if is_overflow(sup):
        return OVERFLOW
    return float(sup) + (lipschitz_product + 1.0) * epsilon


def calibrate(
    net: EpsNet,
    sampler: MeasurementSampler,
    perception,
    samples_per_point: int,
    alpha: float,
    lipschitz_product: float,
    rng: np.random.Generator,
    keep_scores: bool = False,
) -> CalibrationResult:
    """Conformal calibration over an eps-net.

    At each grid point the sampler draws ``samples_per_point`` measurements,
    the perception map turns them into estimates, and the nonconformity score
    is the Euclidean estimation error on the grid point's coordinates. The
    per-point bounds come from the quantile rule; the combined bound adds the
    (lipschitz_product + 1) * epsilon gridding term.
    """
    if is_overflow(quantile_index(samples_per_point, alpha)):
        raise ValueError(
            f"samples_per_point={samples_per_point} is too small for "
            f"alpha={alpha}: every per-point bound would be unbounded"
        )
    if lipschitz_product < 0:
        raise ValueError("lipschitz_product must be nonnegative")

    estimate_batch = (
        perception if callable(perception) else perception.estimate_batch
    )
    dim = net.points.shape[1]
    bounds: list[Bound] = []
    all_scores = np.empty((len(net), samples_per_point)) if keep_scores else None
    for j, point in enumerate(net.points):
        measurements = sampler(point, samples_per_point, rng)
        estimates = np.asarray(estimate_batch(measurements), dtype=float)
        scores = np.linalg.norm(estimates[:, :dim] - point[None, :], axis=1)
        bounds.append(conformal_bound(ScoreSet(scores, alpha)))
        if all_scores is not None:
            all_scores[j] = np.sort(scores)

    finite = [float(b) for b in bounds if not is_overflow(b)]
    sup: Bound = OVERFLOW if len(finite) < len(bounds) else max(finite)
    return CalibrationResult(
        points=net.points,
        bounds=tuple(bounds),
        sup_bound=sup,
        lipschitz_product=float(lipschitz_product),
        epsilon=net.epsilon,
        combined_bound=_combine(sup, float(lipschitz_product), net.epsilon),
        alpha=float(alpha),
        samples_per_point=int(samples_per_point),
        scores=all_scores,
    )
