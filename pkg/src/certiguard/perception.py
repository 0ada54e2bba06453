"""Perception maps estimating vehicle state from scans, plus their oracles.

Three interchangeable maps sit behind one interface: a Nadaraya-Watson kernel
regressor on raw scan distance, a small fully-connected network, and a
template matcher whose mismatch score is asymmetric to suit one-sided range
noise (observed ranges sit above the noise-free template, so template-above-
observation is penalized much harder than slack the other way). The matcher
is the workhorse for the hallway pipeline; the kernel regressor needs no
training and is the default for calibration-validity checks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Box
from .world import (
    DEFAULT_MAX_RANGE,
    RAY_COUNT,
    Environment,
    NoiseModel,
    Scan,
    sense_batch,
)

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


class TrainingDivergence(RuntimeError):
    """Raised when network training produces a non-finite loss."""


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DataSet:
    """Paired vehicle states (m, 3) and scans (m, RAY_COUNT)."""

    states: np.ndarray
    scans: np.ndarray
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        scans = np.atleast_2d(np.asarray(self.scans, dtype=float))
        if states.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if states.shape[1] != 3:
            raise ValueError("states must be (m, 3): p_x, p_y, heading")
        if scans.shape != (states.shape[0], RAY_COUNT):
            raise ValueError(f"scans must be (m, {RAY_COUNT}) matching states")
        states.flags.writeable = False
        scans.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "scans", scans)

    def __len__(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path) -> None:
        header = "p_x,p_y,heading," + ",".join(f"r{k}" for k in range(RAY_COUNT))
        rows = np.hstack([self.states, self.scans])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "DataSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(
            states=data[:, :3],
            scans=data[:, 3:],
            provenance={"source": str(path)},
        )


#: State distribution over the workspace: (rng, n) -> (n, 3) states.
StateSampler = Callable[[np.random.Generator, int], np.ndarray]


def uniform_state_sampler(
    workspace: Box,
    heading_center: float = math.pi / 2,
    heading_halfwidth: float = 1.2,
) -> StateSampler:
    """Positions uniform over the workspace, headings uniform over an arc."""

    def sampler(rng: np.random.Generator, n: int) -> np.ndarray:
        positions = workspace.sample(rng, n)
        headings = rng.uniform(
            heading_center - heading_halfwidth,
            heading_center + heading_halfwidth,
            size=n,
        )
        return np.column_stack([positions, headings])

    return sampler


def grid_state_sampler(
    workspace: Box,
    position_spacing: float,
    heading_bins: int,
    heading_center: float = math.pi / 2,
    heading_halfwidth: float = 1.2,
) -> tuple[StateSampler, int]:
    """Deterministic pose lattice (used for matcher templates).

    Returns the sampler plus its natural count; requesting a different count
    truncates or cycles the lattice.
    """
    if position_spacing <= 0:
        raise ValueError("position_spacing must be positive")
    if heading_bins < 1:
        raise ValueError("heading_bins must be >= 1")
    axes = []
    for lo, width in zip(workspace.lo, workspace.widths):
        cells = max(1, math.ceil(width / position_spacing))
        spacing = width / cells
        axes.append(lo + spacing * (np.arange(cells) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    positions = np.stack([m.ravel() for m in mesh], axis=-1)
    if heading_bins == 1:
        headings = np.array([heading_center])
    else:
        headings = np.linspace(
            heading_center - heading_halfwidth,
            heading_center + heading_halfwidth,
            heading_bins,
        )
    states = np.column_stack(
        [
            np.repeat(positions, heading_bins, axis=0),
            np.tile(headings, positions.shape[0]),
        ]
    )

    def sampler(rng: np.random.Generator, n: int) -> np.ndarray:
        idx = np.arange(n) % states.shape[0]
        return states[idx]

    return sampler, states.shape[0]


def generate_dataset(
    env: Environment,
    noise: NoiseModel,
    sampler: StateSampler,
    count: int,
    seed: int,
    max_range: float = DEFAULT_MAX_RANGE,
) -> DataSet:
    """Draw count i.i.d. (state, noisy scan) pairs; reproducible from seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = []
    total = 0
    drawn = 0
    while total < count:
        want = count - total
        batch = np.atleast_2d(np.asarray(sampler(rng, want), dtype=float))
        drawn += batch.shape[0]
        inside = env.workspace.contains(batch[:, :2])
        batch = batch[inside]
        if batch.shape[0]:
            kept.append(batch)
            total += batch.shape[0]
        if drawn > 100 * count:
            raise ValueError(
                "state sampler keeps producing out-of-workspace states "
                f"({total}/{count} accepted after {drawn} draws)"
            )
    states = np.vstack(kept)[:count]
    scans = sense_batch(states[:, :2], states[:, 2], env, noise, rng, max_range)
    return DataSet(
        states=states,
        scans=scans,
        provenance={
            "seed": int(seed),
            "count": int(count),
            "noise_lambda": noise.lam,
            "noise_convention": noise.convention,
            "max_range": float(max_range),
        },
    )


def make_measurement_sampler(
    env: Environment,
    noise: NoiseModel,
    heading_center: float = math.pi / 2,
    heading_halfwidth: float = 1.2,
    max_range: float = DEFAULT_MAX_RANGE,
):
    """Oracle for conformal calibration: noisy scans at a fixed position.

    Headings are drawn from the same arc the datasets use, folding heading
    variation into the measurement disturbance.
    """

    def sampler(point: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        positions = np.tile(np.asarray(point, dtype=float)[None, :2], (n, 1))
        headings = rng.uniform(
            heading_center - heading_halfwidth,
            heading_center + heading_halfwidth,
            size=n,
        )
        return sense_batch(positions, headings, env, noise, rng, max_range)

    return sampler


# ---------------------------------------------------------------------------
# perception maps


class PerceptionMap:
    """Deterministic map from a scan to a state estimate (p_x, p_y, heading).

    Estimates are clamped to a position box inflated beyond the workspace so
    downstream barrier evaluations stay finite.
    """

    kind = "abstract"

    def __init__(self, clamp_box: Box):
        if clamp_box.dim != 2:
            raise ValueError("clamp box must cover the 2-D position")
        self.clamp_box = clamp_box

    @property
    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def _estimate_batch_raw(self, ranges: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def estimate_batch(self, ranges: np.ndarray) -> np.ndarray:
        ranges = np.atleast_2d(np.asarray(ranges, dtype=float))
        out = self._estimate_batch_raw(ranges)
        out[:, :2] = self.clamp_box.clip(out[:, :2])
        return out

    def estimate(self, scan) -> np.ndarray:
        ranges = scan.ranges if isinstance(scan, Scan) else np.asarray(scan, dtype=float)
        return self.estimate_batch(ranges[None, :])[0]


def clamp_box_for(workspace: Box, inflation: float = 0.2) -> Box:
    return workspace.inflate(inflation)


class KernelRegressor(PerceptionMap):
    """Nadaraya-Watson regressor with Gaussian weights on raw scan distance.

    Weights are normalized from shifted exponents, so when every raw weight
    underflows the estimate degenerates to the nearest neighbor's state, as
    intended.
    """

    kind = "kernel"

    def __init__(
        self,
        train_states: np.ndarray,
        train_scans: np.ndarray,
        bandwidth: float,
        clamp_box: Box,
    ):
        super().__init__(clamp_box)
        self.train_states = np.atleast_2d(np.asarray(train_states, dtype=float))
        self.train_scans = np.atleast_2d(np.asarray(train_scans, dtype=float))
        if self.train_states.shape[0] != self.train_scans.shape[0]:
            raise ValueError("states and scans must pair up")
        if not bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        self.bandwidth = float(bandwidth)
        self._scan_sq = (self.train_scans**2).sum(axis=1)

    @property
    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "bandwidth": self.bandwidth,
            "train_size": int(self.train_states.shape[0]),
        }

    def _estimate_batch_raw(self, ranges: np.ndarray) -> np.ndarray:
        out = np.empty((ranges.shape[0], self.train_states.shape[1]))
        denom = 2.0 * self.bandwidth**2
        chunk = max(1, int(4_000_000 // max(1, self.train_scans.shape[0])))
        for start in range(0, ranges.shape[0], chunk):
            block = ranges[start : start + chunk]
            d2 = (
                (block**2).sum(axis=1)[:, None]
                - 2.0 * block @ self.train_scans.T
                + self._scan_sq[None, :]
            )
            np.maximum(d2, 0.0, out=d2)
            d2 -= d2.min(axis=1, keepdims=True)
            w = np.exp(-d2 / denom)
            w /= w.sum(axis=1, keepdims=True)
            out[start : start + block.shape[0]] = w @ self.train_states
        return out


def fit_kernel_regressor(
    train: DataSet,
    bandwidth: float | None = None,
    workspace: Box | None = None,
) -> KernelRegressor:
    """Kernel regressor on the training pairs.

    With bandwidth=None a median-pairwise-distance heuristic is used (on a
    deterministic subsample), which is the no-tuning default.
    """
    if bandwidth is None:
        take = np.linspace(0, len(train) - 1, min(len(train), 400)).astype(int)
        sub = train.scans[take]
        d2 = (
            (sub**2).sum(axis=1)[:, None]
            - 2.0 * sub @ sub.T
            + (sub**2).sum(axis=1)[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        upper = d2[np.triu_indices(sub.shape[0], k=1)]
        bandwidth = math.sqrt(float(np.median(upper))) if upper.size else 1.0
        bandwidth = max(bandwidth, 1e-6)
    box = workspace if workspace is not None else _position_box(train)
    return KernelRegressor(
        train_states=train.states,
        train_scans=train.scans,
        bandwidth=float(bandwidth),
        clamp_box=clamp_box_for(box),
    )


def _position_box(train: DataSet) -> Box:
    pos = train.states[:, :2]
    return Box(pos.min(axis=0), pos.max(axis=0))


if _HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _asym_scores_nb(queries, templates, rate, violation_weight, slack_cap, out):  # pragma: no cover
        qn, kn = queries.shape
        tn = templates.shape[0]
        for i in range(qn):
            for j in range(tn):
                acc = np.float32(0.0)
                for k in range(kn):
                    d = queries[i, k] - templates[j, k]
                    pos = min(max(d, np.float32(0.0)), slack_cap)
                    neg = max(-d, np.float32(0.0))
                    acc += rate * pos + violation_weight * neg
                out[i, j] = -acc


def _asym_scores(
    queries: np.ndarray,
    templates: np.ndarray,
    rate: float,
    violation_weight: float,
    slack_cap: float,
) -> np.ndarray:
    if _HAVE_NUMBA:
        out = np.empty((queries.shape[0], templates.shape[0]), dtype=np.float32)
        cap = np.float32(min(slack_cap, 3.4e38))
        _asym_scores_nb(
            np.ascontiguousarray(queries, dtype=np.float32),
            np.ascontiguousarray(templates, dtype=np.float32),
            np.float32(rate),
            np.float32(violation_weight),
            cap,
            out,
        )
        return out.astype(np.float64)
    diff = queries[:, None, :] - templates[None, :, :]
    slack = np.minimum(np.clip(diff, 0.0, None), min(slack_cap, 3.4e38)).sum(axis=2)
    violation = -np.clip(diff, None, 0.0).sum(axis=2)
    return -rate * slack - violation_weight * violation


class ScanMatcher(PerceptionMap):
    """Template matcher with an asymmetric exponential mismatch score.

    Templates are noise-free scans on a pose lattice. A query scan scores
    each template by -rate * (observed above template) - violation_weight *
    (template above observed); the estimate is the softmax-weighted average
    of template states (circular mean for heading), which keeps the map
    smooth enough for sampled Lipschitz estimation.
    """

    kind = "matcher"

    def __init__(
        self,
        template_states: np.ndarray,
        template_scans: np.ndarray,
        rate: float,
        violation_weight: float,
        temperature: float,
        clamp_box: Box,
        slack_cap: float = math.inf,
    ):
        super().__init__(clamp_box)
        self.template_states = np.atleast_2d(np.asarray(template_states, dtype=float))
        self.template_scans = np.ascontiguousarray(
            np.atleast_2d(np.asarray(template_scans, dtype=float))
        )
        if self.template_states.shape[0] != self.template_scans.shape[0]:
            raise ValueError("template states and scans must pair up")
        if rate < 0 or violation_weight < 0:
            raise ValueError("score weights must be nonnegative")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        if not slack_cap > 0:
            raise ValueError("slack_cap must be positive")
        self.rate = float(rate)
        self.violation_weight = float(violation_weight)
        self.temperature = float(temperature)
        self.slack_cap = float(slack_cap)
        self._cos = np.cos(self.template_states[:, 2])
        self._sin = np.sin(self.template_states[:, 2])

    @property
    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "templates": int(self.template_states.shape[0]),
            "rate": self.rate,
            "violation_weight": self.violation_weight,
            "temperature": self.temperature,
            "slack_cap": self.slack_cap,
        }

    def _estimate_batch_raw(self, ranges: np.ndarray) -> np.ndarray:
        out = np.empty((ranges.shape[0], 3))
        chunk = max(1, int(8_000_000 // max(1, self.template_scans.shape[0])))
        for start in range(0, ranges.shape[0], chunk):
            block = ranges[start : start + chunk]
            scores = _asym_scores(
                block, self.template_scans, self.rate, self.violation_weight, self.slack_cap
            )
            scores -= scores.max(axis=1, keepdims=True)
            w = np.exp(scores / self.temperature)
            w /= w.sum(axis=1, keepdims=True)
            sl = slice(start, start + block.shape[0])
            out[sl, :2] = w @ self.template_states[:, :2]
            out[sl, 2] = np.arctan2(w @ self._sin, w @ self._cos)
        return out


def fit_scan_matcher(
    train: DataSet,
    rate: float,
    violation_weight: float,
    temperature: float,
    workspace: Box | None = None,
    slack_cap: float = math.inf,
) -> ScanMatcher:
    """Matcher over the training pairs; expects noise-free template scans.

    slack_cap saturates the per-ray slack reward, which blunts the advantage
    distant small-range templates would otherwise accumulate under heavy
    one-sided noise.
    """
    box = workspace if workspace is not None else _position_box(train)
    return ScanMatcher(
        template_states=train.states,
        template_scans=train.scans,
        rate=rate,
        violation_weight=violation_weight,
        temperature=temperature,
        clamp_box=clamp_box_for(box),
        slack_cap=slack_cap,
    )


# ---------------------------------------------------------------------------
# fully-connected network


def _he_init(widths: Sequence[int], rng: np.random.Generator):
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params.append((w, np.zeros(fan_out)))
    return params


def mlp_forward(params, x: np.ndarray) -> np.ndarray:
    h = x
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < len(params) - 1:
            h = np.maximum(h, 0.0)
    return h


def mlp_loss_and_grad(params, x: np.ndarray, y: np.ndarray):
    """Mean squared error (0.5 * mean over samples and outputs) and its grads."""
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(params):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(params) - 1 else z
        acts.append(h)
    resid = acts[-1] - y
    n = x.shape[0] * y.shape[1]
    loss = 0.5 * float((resid**2).sum()) / n
    grads = [None] * len(params)
    delta = resid / n
    for i in reversed(range(len(params))):
        w, _ = params[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (pre[i - 1] > 0.0)
    return loss, grads


class Mlp(PerceptionMap):
    """Small fully-connected network with standardized inputs and targets."""

    kind = "mlp"

    def __init__(self, params, x_mu, x_sigma, y_mu, y_sigma, widths, clamp_box: Box):
        super().__init__(clamp_box)
        self.params = [(np.asarray(w, dtype=float), np.asarray(b, dtype=float)) for w, b in params]
        self.x_mu = np.asarray(x_mu, dtype=float)
        self.x_sigma = np.asarray(x_sigma, dtype=float)
        self.y_mu = np.asarray(y_mu, dtype=float)
        self.y_sigma = np.asarray(y_sigma, dtype=float)
        self.widths = list(widths)

    @property
    def descriptor(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths)}

    def _estimate_batch_raw(self, ranges: np.ndarray) -> np.ndarray:
        z = (ranges - self.x_mu) / self.x_sigma
        return mlp_forward(self.params, z) * self.y_sigma + self.y_mu


def fit_mlp(
    train: DataSet,
    widths: Sequence[int] = (32, 16),
    epochs: int = 200,
    step_size: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    workspace: Box | None = None,
) -> tuple[Mlp, np.ndarray]:
    """Mini-batch SGD on squared error; returns the map and per-epoch losses.

    Raises TrainingDivergence when the loss goes non-finite.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 1:
        raise ValueError("at least one hidden layer is required")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    rng = np.random.default_rng(seed)
    x = train.scans
    y = train.states
    x_mu = x.mean(axis=0)
    x_sigma = np.maximum(x.std(axis=0), 1e-8)
    y_mu = y.mean(axis=0)
    y_sigma = np.maximum(y.std(axis=0), 1e-8)
    xs = (x - x_mu) / x_sigma
    ys = (y - y_mu) / y_sigma

    layer_widths = [x.shape[1]] + widths + [y.shape[1]]
    params = _he_init(layer_widths, rng)
    n = xs.shape[0]
    batch_size = min(batch_size, n)
    losses = np.empty(epochs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = mlp_loss_and_grad(params, xs[idx], ys[idx])
            if not math.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, batch offset {start} "
                    f"(step_size={step_size})"
                )
            params = [
                (w - step_size * gw, b - step_size * gb)
                for (w, b), (gw, gb) in zip(params, grads)
            ]
        epoch_loss, _ = mlp_loss_and_grad(params, xs, ys)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergence(f"non-finite loss after epoch {epoch}")
        losses[epoch] = epoch_loss

    box = workspace if workspace is not None else _position_box(train)
    return (
        Mlp(
            params,
            x_mu,
            x_sigma,
            y_mu,
            y_sigma,
            layer_widths,
            clamp_box_for(box),
        ),
        losses,
    )


# ---------------------------------------------------------------------------
# Lipschitz estimation


@dataclass(frozen=True)
class LipschitzEstimate:
    """Sampled difference-quotient maximum, inflated by a safety factor.

    A heuristic: sampling underestimates the true constant, and the
    downstream guarantees are stated conditional on the supplied constants
    being valid.
    """

    value: float
    samples_used: int
    pairing_radius: float


def estimate_lipschitz(
    fn: Callable[[np.ndarray], np.ndarray],
    domain: Box,
    num_pairs: int,
    seed: int,
    pairing_radius: float | None = None,
    safety_factor: float = 1.2,
) -> LipschitzEstimate:
    """Max sampled slope over global and local pairs, times a safety factor.

    Pairs are drawn sequentially (even index: two independent points; odd:
    a point plus a step of exactly the pairing radius), hence estimates are
    monotone non-decreasing in num_pairs for a fixed seed. The radius is the
    resolution at which slopes are probed: independent pairs that land
    closer than it are skipped rather than probing an uncontrolled scale.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    radius = (
        float(pairing_radius)
        if pairing_radius is not None
        else 0.1 * float(np.linalg.norm(domain.widths))
    )
    if not radius > 0:
        raise ValueError("pairing_radius must be positive")
    best = -1.0
    used = 0
    for i in range(num_pairs):
        a = domain.sample(rng, 1)[0]
        if i % 2 == 0:
            b = domain.sample(rng, 1)[0]
            if float(np.linalg.norm(a - b)) < radius:
                continue
        else:
            direction = rng.normal(size=domain.dim)
            norm = np.linalg.norm(direction)
            if norm < 1e-12:
                continue
            b = domain.clip(a + radius * (direction / norm))
            if float(np.linalg.norm(a - b)) < 0.5 * radius:
                b = domain.clip(a - radius * (direction / norm))
            if float(np.linalg.norm(a - b)) < 0.5 * radius:
                continue
        gap = float(np.linalg.norm(a - b))
        if gap < 1e-12:
            continue
        fa = np.asarray(fn(a), dtype=float).ravel()
        fb = np.asarray(fn(b), dtype=float).ravel()
        ratio = float(np.linalg.norm(fa - fb)) / gap
        best = max(best, ratio)
        used += 1
    if used == 0:
        raise ValueError("all sampled pairs were degenerate")
    return LipschitzEstimate(
        value=float(best * safety_factor),
        samples_used=used,
        pairing_radius=radius,
    )


def estimate_composed_lipschitz(
    env: Environment,
    noise: NoiseModel,
    perception: PerceptionMap,
    num_pairs: int,
    seed: int,
    pairing_radius: float = 0.25,
    heading_center: float = math.pi / 2,
    heading_halfwidth: float = 1.2,
    max_range: float = DEFAULT_MAX_RANGE,
    safety_factor: float = 1.2,
) -> LipschitzEstimate:
    """Sampled slope of the state-to-estimate chain at fixed disturbance.

    Within each pair the heading and the per-ray noise draw are held common,
    so this bounds exactly the quantity the covering argument propagates
    through the sensor and perception maps (and is far tighter than the
    product of their separate constants when the ray geometry has occlusion
    jumps the estimator is robust to). As in estimate_lipschitz, the pairing
    radius is the probe resolution: closer independent pairs are skipped.
    """
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if not pairing_radius > 0:
        raise ValueError("pairing_radius must be positive")
    rng = np.random.default_rng(seed)
    workspace = env.workspace
    best = -1.0
    used = 0
    for i in range(num_pairs):
        a = workspace.sample(rng, 1)[0]
        if i % 2 == 0:
            b = workspace.sample(rng, 1)[0]
            if float(np.linalg.norm(a - b)) < pairing_radius:
                continue
        else:
            direction = rng.normal(size=workspace.dim)
            norm = np.linalg.norm(direction)
            if norm < 1e-12:
                continue
            b = workspace.clip(a + pairing_radius * (direction / norm))
            if float(np.linalg.norm(a - b)) < 0.5 * pairing_radius:
                b = workspace.clip(a - pairing_radius * (direction / norm))
            if float(np.linalg.norm(a - b)) < 0.5 * pairing_radius:
                continue
        gap = float(np.linalg.norm(a - b))
        if gap < 1e-12:
            continue
        theta = rng.uniform(
            heading_center - heading_halfwidth, heading_center + heading_halfwidth
        )
        disturbance = noise.sample(rng, RAY_COUNT)
        from .world import ray_cast_batch  # local import to avoid cycle at top

        truth = ray_cast_batch(
            np.stack([a, b]), np.array([theta, theta]), env, max_range
        )
        scans = np.minimum(truth + disturbance[None, :], max_range)
        est = perception.estimate_batch(scans)
        ratio = float(np.linalg.norm(est[0, :2] - est[1, :2])) / gap
        best = max(best, ratio)
        used += 1
    if used == 0:
        raise ValueError("all sampled pairs were degenerate")
    return LipschitzEstimate(
        value=float(best * safety_factor),
        samples_used=used,
        pairing_radius=float(pairing_radius),
    )


def validation_errors(
    env: Environment,
    noise: NoiseModel,
    perception: PerceptionMap,
    count: int,
    rng: np.random.Generator,
    heading_center: float = math.pi / 2,
    heading_halfwidth: float = 1.2,
    max_range: float = DEFAULT_MAX_RANGE,
) -> np.ndarray:
    """Fresh position-estimation errors at states drawn like the datasets."""
    sampler = uniform_state_sampler(env.workspace, heading_center, heading_halfwidth)
    states = sampler(rng, count)
    scans = sense_batch(states[:, :2], states[:, 2], env, noise, rng, max_range)
    estimates = perception.estimate_batch(scans)
    return np.linalg.norm(estimates[:, :2] - states[:, :2], axis=1)


# ---------------------------------------------------------------------------
# model persistence


def save_model(model: PerceptionMap, path) -> None:
    if isinstance(model, KernelRegressor):
        payload = {
            "type": "kernel",
            "bandwidth": model.bandwidth,
            "states": model.train_states.tolist(),
            "scans": model.train_scans.tolist(),
            "clamp": model.clamp_box.to_json(),
        }
    elif isinstance(model, ScanMatcher):
        payload = {
            "type": "matcher",
            "rate": model.rate,
            "violation_weight": model.violation_weight,
            "temperature": model.temperature,
            "slack_cap": model.slack_cap if math.isfinite(model.slack_cap) else None,
            "states": model.template_states.tolist(),
            "scans": model.template_scans.tolist(),
            "clamp": model.clamp_box.to_json(),
        }
    elif isinstance(model, Mlp):
        payload = {
            "type": "mlp",
            "widths": model.widths,
            "weights": [w.tolist() for w, _ in model.params],
            "biases": [b.tolist() for _, b in model.params],
            "x_mu": model.x_mu.tolist(),
            "x_sigma": model.x_sigma.tolist(),
            "y_mu": model.y_mu.tolist(),
            "y_sigma": model.y_sigma.tolist(),
            "clamp": model.clamp_box.to_json(),
        }
    else:
        raise ValueError(f"cannot persist perception map of type {type(model)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> PerceptionMap:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    kind = payload.get("type")
    clamp = Box.from_json(payload["clamp"])
    if kind == "kernel":
        return KernelRegressor(
            train_states=np.asarray(payload["states"], dtype=float),
            train_scans=np.asarray(payload["scans"], dtype=float),
            bandwidth=float(payload["bandwidth"]),
            clamp_box=clamp,
        )
    if kind == "matcher":
        return ScanMatcher(
            template_states=np.asarray(payload["states"], dtype=float),
            template_scans=np.asarray(payload["scans"], dtype=float),
            rate=float(payload["rate"]),
            violation_weight=float(payload["violation_weight"]),
            temperature=float(payload["temperature"]),
            clamp_box=clamp,
            slack_cap=math.inf
            if payload.get("slack_cap") is None
            else float(payload["slack_cap"]),
        )
    if kind == "mlp":
        params = [
            (np.asarray(w, dtype=float), np.asarray(b, dtype=float))
            for w, b in zip(payload["weights"], payload["biases"])
        ]
        return Mlp(
            params,
            np.asarray(payload["x_mu"], dtype=float),
            np.asarray(payload["x_sigma"], dtype=float),
            np.asarray(payload["y_mu"], dtype=float),
            np.asarray(payload["y_sigma"], dtype=float),
            payload["widths"],
            clamp,
        )
    raise ValueError(f"unknown model type {kind!r} in {path}")
