"""Closed-loop controllers: self-triggered continuous and per-step discrete.

Both runtimes share one structure per control update: sense, estimate,
filter the nominal command through the robustified constraints, then let the
plant run. Robust and vanilla modes execute the identical code path and
differ only in the injected margin pair, which the record logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .barrier import (
    BarrierSet,
    DtRobustParams,
    RobustParams,
    continuous_constraints,
    continuous_lipschitz_for_affine,
    control_box,
    discrete_constraints,
    discrete_lipschitz_for_affine,
    safety_filter,
)
from .perception import PerceptionMap
from .solver import Infeasible, maximize_min_slack
from .world import (
    DEFAULT_MAX_RANGE,
    ControlInput,
    Environment,
    NoiseModel,
    VehicleState,
    sense,
    step_continuous,
    step_discrete,
)

MODES = ("robust", "vanilla", "discrete")


class ScheduleError(ValueError):
    """The self-triggered schedule is ill-posed (delta <= error bound)."""


@dataclass(frozen=True)
class TriggerSchedule:
    """Constant-interval self-triggered schedule (delta - eps') / F_bar."""

    delta: float
    error_bound: float
    f_bar: float

    def __post_init__(self) -> None:
        if not self.f_bar > 0:
            raise ScheduleError(f"F_bar must be positive, got {self.f_bar}")
        if self.error_bound < 0:
            raise ScheduleError("error bound must be nonnegative")
        if not self.delta > self.error_bound:
            raise ScheduleError(
                f"delta={self.delta} must exceed the calibrated error bound "
                f"{self.error_bound}"
            )

    @property
    def interval(self) -> float:
        return (self.delta - self.error_bound) / self.f_bar


def next_trigger(t_i: float, schedule: TriggerSchedule) -> float:
    return float(t_i) + schedule.interval


def alpha_for_horizon(target_prob: float, m: int) -> float:
    """Per-interval failure probability so (1 - alpha)^m hits the target."""
    if not 0.0 < target_prob < 1.0:
        raise ValueError(f"target probability must lie in (0, 1), got {target_prob}")
    if not isinstance(m, (int, np.integer)) or isinstance(m, bool) or m < 1:
        raise ValueError(f"horizon must be a positive integer, got {m!r}")
    return 1.0 - float(target_prob) ** (1.0 / int(m))


@dataclass(frozen=True)
class RiskBudget:
    """Overall guarantee split uniformly across horizon intervals."""

    target_prob: float
    horizon_intervals: int

    def __post_init__(self) -> None:
        alpha_for_horizon(self.target_prob, self.horizon_intervals)  # validates

    @property
    def alpha(self) -> float:
        return alpha_for_horizon(self.target_prob, self.horizon_intervals)


class WaypointFollower:
    """Proportional pursuit of the next waypoint, saturated to the input box.

    The waypoint advances once the estimate is within the capture radius; at
    the final waypoint (non-looping paths) the command is zero.
    """

    def __init__(
        self,
        waypoints: np.ndarray,
        gain: float,
        u_max: float,
        capture_radius: float = 0.2,
        loop: bool = False,
    ):
        self.waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float))
        if self.waypoints.shape[0] == 0:
            raise ValueError("waypoint path must be nonempty")
        if not gain > 0:
            raise ValueError("gain must be positive")
        self.gain = float(gain)
        self.u_max = float(u_max)
        self.capture_radius = float(capture_radius)
        self.loop = bool(loop)
        self.index = 0

    def nominal_control(self, estimate) -> ControlInput:
        pos = (
            estimate.position
            if isinstance(estimate, VehicleState)
            else np.asarray(estimate, dtype=float).ravel()[:2]
        )
        advances = 0
        while advances <= self.waypoints.shape[0]:
            target = self.waypoints[self.index]
            if float(np.linalg.norm(target - pos)) > self.capture_radius:
                break
            if self.index + 1 < self.waypoints.shape[0]:
                self.index += 1
            elif self.loop:
                self.index = 0
            else:
                return ControlInput(0.0, 0.0)
            advances += 1
        else:
            return ControlInput(0.0, 0.0)
        u = self.gain * (target - pos)
        u = np.clip(u, -self.u_max, self.u_max)
        return ControlInput(u[0], u[1])


@dataclass(frozen=True)
class RolloutConfig:
    """Everything one rollout needs; immutable so batches can fan out seeds."""

    env: Environment
    noise: NoiseModel
    perception: PerceptionMap
    barriers: BarrierSet
    mode: str = "robust"
    error_bound: float = 0.0
    delta: float = 0.35
    eta: float = 1.0
    dt: float = 0.05
    duration: float = 30.0
    steps: int = 20
    substeps: int = 10
    u_max: float = 1.0
    nominal_gain: float = 0.6
    capture_radius: float = 0.2
    seed: int = 0
    max_range: float = DEFAULT_MAX_RANGE
    beta_offset: float = 0.0
    linearize_socp: bool = False
    margins_override: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("robust", "vanilla"):
            if self.substeps < 4:
                raise ValueError(
                    "integrator must take at least 4 substeps per trigger interval"
                )
            TriggerSchedule(self.delta, self.error_bound, self.f_bar)  # validates
        else:
            if not self.dt > 0:
                raise ValueError("discrete dt must be positive")
            if self.steps < 1:
                raise ValueError("steps must be >= 1")

    @property
    def f_bar(self) -> float:
        return math.sqrt(2.0) * self.u_max

    def margins(self) -> tuple[float, float]:
        if self.margins_override is not None:
            return tuple(float(v) for v in self.margins_override)
        if self.mode == "vanilla":
            return (0.0, 0.0)
        if self.mode == "robust":
            l_lfh, l_lgh, l_betah = continuous_lipschitz_for_affine(self.barriers)
            return RobustParams.from_lipschitz(
                self.delta, l_lfh, l_lgh, l_betah, self.barriers.gamma
            ).margins
        l_h, l_f, l_g = discrete_lipschitz_for_affine(self.barriers)
        return DtRobustParams.derive(
            self.error_bound, self.eta, l_h, l_f, l_g, self.beta_offset
        ).margins


@dataclass
class TrajectoryRecord:
    """Logged rollout: fine-grained states plus per-window statistics."""

    seed: int
    mode: str
    margins: tuple[float, float]
    interval: float
    t: np.ndarray
    states: np.ndarray
    estimates: np.ndarray
    controls: np.ndarray
    h_values: np.ndarray
    triggered: np.ndarray
    infeasible: np.ndarray
    trigger_times: np.ndarray
    window_drift: np.ndarray
    estimate_errors: np.ndarray
    displacement_violation: float
    failure: str | None = None

    @property
    def min_h(self) -> float:
        return float(self.h_values.min())

    @property
    def safe(self) -> bool:
        return bool(self.min_h >= 0.0)

    @property
    def num_triggers(self) -> int:
        return int(self.trigger_times.shape[0])

    @property
    def num_infeasible(self) -> int:
        if self.triggered.size == 0:
            return 0
        return int(np.sum(self.infeasible & self.triggered))

    def summary(self) -> dict:
        return {
            "safe": self.safe,
            "min_h": self.min_h,
            "num_triggers": self.num_triggers,
            "num_infeasible": self.num_infeasible,
        }

    def to_csv(self, path) -> None:
        header = "t,x,y,heading,xhat_x,xhat_y,u_x,u_y,h,triggered,infeasible_flag"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for i in range(self.t.shape[0]):
                row = [
                    repr(float(self.t[i])),
                    repr(float(self.states[i, 0])),
                    repr(float(self.states[i, 1])),
                    repr(float(self.states[i, 2])),
                    repr(float(self.estimates[i, 0])),
                    repr(float(self.estimates[i, 1])),
                    repr(float(self.controls[i, 0])),
                    repr(float(self.controls[i, 1])),
                    repr(float(self.h_values[i])),
                    str(int(self.triggered[i])),
                    str(int(self.infeasible[i])),
                ]
                fh.write(",".join(row) + "\n")


def _barrier_arrays(barriers: BarrierSet) -> tuple[np.ndarray, np.ndarray]:
    normals = np.array([m.normal[:2] for m in barriers.members])
    offsets = np.array([m.offset for m in barriers.members])
    return normals, offsets


def _initial_state(env: Environment, rng: np.random.Generator) -> VehicleState:
    start = env.sample_start(rng)
    aim = env.waypoints[0] - start
    heading = math.atan2(aim[1], aim[0]) if np.linalg.norm(aim) > 1e-12 else math.pi / 2
    return VehicleState(start[0], start[1], heading)


def _filter_or_fallback(u_nom, constraints, box, beta_offset, linearize):
    """Returns (control array, infeasible flag)."""
    try:
        u = safety_filter(
            u_nom, constraints, box, beta_offset=beta_offset, linearize_socp=linearize
        )
        return np.asarray(u, dtype=float), False
    except Infeasible:
        fallback, _ = maximize_min_slack(constraints, box)
        return np.asarray(fallback, dtype=float), True


def run_continuous(config: RolloutConfig) -> TrajectoryRecord:
    """Zero-order-hold sampled-data rollout with the self-triggered schedule."""
    if config.mode not in ("robust", "vanilla"):
        raise ValueError("run_continuous requires mode 'robust' or 'vanilla'")
    rng = np.random.default_rng(config.seed)
    schedule = TriggerSchedule(config.delta, config.error_bound, config.f_bar)
    interval = schedule.interval
    dt_fine = interval / config.substeps
    margins = config.margins()
    box = control_box(config.u_max)
    normals, offsets = _barrier_arrays(config.barriers)
    follower = WaypointFollower(
        config.env.waypoints,
        config.nominal_gain,
        config.u_max,
        config.capture_radius,
        config.env.loop,
    )

    state = _initial_state(config.env, rng)
    rows_t, rows_x, rows_xhat, rows_u, rows_h = [], [], [], [], []
    rows_trig, rows_inf = [], []
    trigger_times, window_drift, est_errors = [], [], []
    disp_violation = -np.inf

    def log(t, st, xhat, u, trig, infeas):
        rows_t.append(t)
        rows_x.append(st.as_array())
        rows_xhat.append(xhat)
        rows_u.append(u)
        rows_h.append(float((normals @ st.position + offsets).min()))
        rows_trig.append(trig)
        rows_inf.append(infeas)

    t_i = 0.0
    while t_i < config.duration - 1e-12:
        scan = sense(state, config.env, config.noise, rng, config.max_range)
        xhat = config.perception.estimate(scan)
        est_errors.append(float(np.linalg.norm(xhat[:2] - state.position)))
        u_nom = follower.nominal_control(xhat)
        constraints = continuous_constraints(config.barriers, xhat[:2], margins)
        u, infeasible = _filter_or_fallback(
            u_nom.as_array(), constraints, box, config.beta_offset, config.linearize_socp
        )
        control = ControlInput(u[0], u[1])
        trigger_times.append(t_i)

        anchor_pos = state.position
        window_end = min(t_i + interval, config.duration)
        drift = float(np.linalg.norm(anchor_pos - xhat[:2]))
        log(t_i, state, xhat, u, True, infeasible)
        t = t_i
        while t < window_end - 1e-12:
            step = min(dt_fine, window_end - t)
            state = step_continuous(state, control, step)
            t += step
            displacement = float(np.linalg.norm(state.position - anchor_pos))
            disp_violation = max(
                disp_violation, displacement - config.f_bar * (t - t_i)
            )
            drift = max(drift, float(np.linalg.norm(state.position - xhat[:2])))
            if t < window_end - 1e-12:
                log(t, state, xhat, u, False, infeasible)
        window_drift.append(drift)
        t_i = window_end

    # Terminal row (holds the last control and estimate).
    log(config.duration, state, rows_xhat[-1], rows_u[-1], False, rows_inf[-1])

    return TrajectoryRecord(
        seed=config.seed,
        mode=config.mode,
        margins=margins,
        interval=interval,
        t=np.asarray(rows_t),
        states=np.asarray(rows_x),
        estimates=np.asarray(rows_xhat),
        controls=np.asarray(rows_u),
        h_values=np.asarray(rows_h),
        triggered=np.asarray(rows_trig, dtype=bool),
        infeasible=np.asarray(rows_inf, dtype=bool),
        trigger_times=np.asarray(trigger_times),
        window_drift=np.asarray(window_drift),
        estimate_errors=np.asarray(est_errors),
        displacement_violation=float(disp_violation),
    )


def run_discrete(config: RolloutConfig) -> TrajectoryRecord:
    """Per-step DT-MR-CBF rollout with the exact-flow discrete map."""
    if config.mode != "discrete":
        raise ValueError("run_discrete requires mode 'discrete'")
    rng = np.random.default_rng(config.seed)
    margins = config.margins()
    box = control_box(config.u_max)
    normals, offsets = _barrier_arrays(config.barriers)
    follower = WaypointFollower(
        config.env.waypoints,
        config.nominal_gain,
        config.u_max,
        config.capture_radius,
        config.env.loop,
    )
    state = _initial_state(config.env, rng)

    n = config.steps
    t_axis = config.dt * np.arange(n + 1)
    states = np.empty((n + 1, 3))
    estimates = np.empty((n + 1, 3))
    controls = np.empty((n + 1, 2))
    h_values = np.empty(n + 1)
    infeasible = np.zeros(n + 1, dtype=bool)
    triggered = np.ones(n + 1, dtype=bool)
    triggered[n] = False
    est_errors = np.empty(n)
    disp_violation = -np.inf

    for k in range(n):
        scan = sense(state, config.env, config.noise, rng, config.max_range)
        xhat = config.perception.estimate(scan)
        est_errors[k] = float(np.linalg.norm(xhat[:2] - state.position))
        u_nom = follower.nominal_control(xhat)
        constraints = discrete_constraints(
            config.barriers, xhat[:2], config.dt, margins, config.eta
        )
        u, infeas = _filter_or_fallback(
            u_nom.as_array(), constraints, box, config.beta_offset, config.linearize_socp
        )
        states[k] = state.as_array()
        estimates[k] = xhat
        controls[k] = u
        h_values[k] = float((normals @ state.position + offsets).min())
        infeasible[k] = infeas
        prev_pos = state.position
        state = step_discrete(state, ControlInput(u[0], u[1]), config.dt)
        disp_violation = max(
            disp_violation,
            float(np.linalg.norm(state.position - prev_pos)) - config.f_bar * config.dt,
        )

    states[n] = state.as_array()
    estimates[n] = estimates[n - 1]
    controls[n] = controls[n - 1]
    h_values[n] = float((normals @ state.position + offsets).min())

    return TrajectoryRecord(
        seed=config.seed,
        mode=config.mode,
        margins=margins,
        interval=config.dt,
        t=t_axis,
        states=states,
        estimates=estimates,
        controls=controls,
        h_values=h_values,
        triggered=triggered,
        infeasible=infeasible,
        trigger_times=t_axis[:n],
        window_drift=est_errors.copy(),
        estimate_errors=est_errors,
        displacement_violation=float(disp_violation),
    )


def run_rollout(config: RolloutConfig) -> TrajectoryRecord:
    if config.mode == "discrete":
        return run_discrete(config)
    return run_continuous(config)
