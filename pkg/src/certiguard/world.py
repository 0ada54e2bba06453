"""Simulated plant: corridor geometry, vehicle dynamics, LiDAR, sensor noise.

The vehicle is a planar single integrator: positions move with the commanded
velocities and the heading is the direction of the most recent nonzero
command (it is derived, not integrated). Safety analysis therefore runs on
the 2-D position; the heading only steers the scanner.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .geometry import Box, cast_rays

RAY_COUNT = 64
RAY_OFFSETS = np.linspace(-0.75 * math.pi, 0.75 * math.pi, RAY_COUNT)
RAY_OFFSETS.flags.writeable = False

DEFAULT_MAX_RANGE = 10.0


class DegenerateGeometryError(RuntimeError):
    """Raised when a scan is requested far outside the walled region."""


def _wrap_angle(theta: float) -> float:
    """Normalize to (-pi, pi]."""
    wrapped = math.remainder(float(theta), math.tau)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


@dataclass(frozen=True)
class VehicleState:
    """Planar pose: lateral p_x, longitudinal p_y (m) and heading (rad)."""

    p_x: float
    p_y: float
    heading: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_x", float(self.p_x))
        object.__setattr__(self, "p_y", float(self.p_y))
        object.__setattr__(self, "heading", _wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y])

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.heading])


@dataclass(frozen=True)
class ControlInput:
    """Commanded velocities (m/s)."""

    u_x: float
    u_y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "u_x", float(self.u_x))
        object.__setattr__(self, "u_y", float(self.u_y))

    @property
    def norm(self) -> float:
        return math.hypot(self.u_x, self.u_y)

    def as_array(self) -> np.ndarray:
        return np.array([self.u_x, self.u_y])


@dataclass(frozen=True)
class Scan:
    """Fixed-length LiDAR return; ray k points at heading + RAY_OFFSETS[k]."""

    ranges: np.ndarray
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self) -> None:
        ranges = np.asarray(self.ranges, dtype=float).ravel()
        if ranges.shape != (RAY_COUNT,):
            raise ValueError(f"scan must hold exactly {RAY_COUNT} ranges")
        if np.any(ranges < 0) or not np.all(np.isfinite(ranges)):
            raise ValueError("ranges must be finite and nonnegative")
        ranges.flags.writeable = False
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "max_range", float(self.max_range))

    @staticmethod
    def angles() -> np.ndarray:
        return RAY_OFFSETS


@dataclass(frozen=True)
class NoiseModel:
    """Per-ray additive exponential noise.

    ``lam`` follows the rate convention by default (mean 1/lam); set
    convention="scale" to read it as the mean instead. lam=inf under the
    rate convention means no noise.
    """

    lam: float
    convention: str = "rate"

    def __post_init__(self) -> None:
        if self.convention not in ("rate", "scale"):
            raise ValueError(f"unknown exponential convention {self.convention!r}")
        lam = float(self.lam)
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        if self.convention == "scale" and not math.isfinite(lam):
            raise ValueError("scale-convention lambda must be finite")
        object.__setattr__(self, "lam", lam)

    @property
    def mean(self) -> float:
        return 1.0 / self.lam if self.convention == "rate" else self.lam

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.mean == 0.0:
            return np.zeros(size)
        return rng.exponential(scale=self.mean, size=size)


@dataclass(frozen=True)
class Environment:
    """Walled workspace with a start line and a waypoint path.

    ``workspace`` is the box the calibration guarantee covers; walls may
    extend beyond it (the corner region is visible to the scanner even when
    the mission stays in the straight leg).
    """

    walls: np.ndarray
    workspace: Box
    start_line: np.ndarray
    waypoints: np.ndarray
    loop: bool = False

    def __post_init__(self) -> None:
        walls = np.atleast_2d(np.asarray(self.walls, dtype=float))
        if walls.shape[1] != 4 or walls.shape[0] == 0:
            raise ValueError("walls must be a nonempty (s, 4) segment array")
        start = np.asarray(self.start_line, dtype=float).ravel()
        if start.shape != (4,):
            raise ValueError("start_line must be [x1, y1, x2, y2]")
        wps = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if wps.shape[1] != 2 or wps.shape[0] == 0:
            raise ValueError("waypoints must be a nonempty (w, 2) array")
        for arr in (walls, start, wps):
            arr.flags.writeable = False
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "start_line", start)
        object.__setattr__(self, "waypoints", wps)

    @property
    def wall_bounds(self) -> Box:
        xs = np.concatenate([self.walls[:, 0], self.walls[:, 2]])
        ys = np.concatenate([self.walls[:, 1], self.walls[:, 3]])
        return Box([xs.min(), ys.min()], [xs.max(), ys.max()])

    def sample_start(self, rng: np.random.Generator) -> np.ndarray:
        a = self.start_line[0:2]
        b = self.start_line[2:4]
        return a + rng.uniform() * (b - a)

    def to_json(self) -> dict:
        payload = {
            "walls": [[float(v) for v in row] for row in self.walls],
            "workspace": self.workspace.to_json(),
            "start_line": [float(v) for v in self.start_line],
            "waypoints": [[float(v) for v in row] for row in self.waypoints],
        }
        if self.loop:
            payload["loop"] = True
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "Environment":
        return cls(
            walls=np.asarray(payload["walls"], dtype=float),
            workspace=Box.from_json(payload["workspace"]),
            start_line=np.asarray(payload["start_line"], dtype=float),
            waypoints=np.asarray(payload["waypoints"], dtype=float),
            loop=bool(payload.get("loop", False)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Environment":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def default_environment(
    width: float = 1.5,
    leg_length: float = 3.0,
) -> Environment:
    """L-shaped corridor: a vertical leg with a right turn at the top.

    The vertical leg spans x in [0, width], y in [0, leg_length]; the
    horizontal leg continues to the right above it. The default mission
    patrols the vertical leg, hugging the left wall on the way up.
    """
    w, L = float(width), float(leg_length)
    top = L + w
    walls = np.array(
        [
            [0.0, 0.0, 0.0, top],  # left wall, full height
            [0.0, top, L + w, top],  # top wall of the horizontal leg
            [L + w, top, L + w, L],  # far end of the horizontal leg
            [L + w, L, w, L],  # inner bottom wall of the horizontal leg
            [w, L, w, 0.0],  # right wall of the vertical leg
            [w, 0.0, 0.0, 0.0],  # start-end wall
        ]
    )
    return Environment(
        walls=walls,
        workspace=Box([0.0, 0.0], [w, L]),
        start_line=np.array([0.25 * w, 0.25, 0.85 * w, 0.25]),
        waypoints=np.array(
            [
                [0.30 * w, 0.45 * L],
                [0.22 * w, 0.75 * L],
                [0.50 * w, 0.87 * L],
            ]
        ),
        loop=False,
    )


def ray_cast(
    state: VehicleState,
    env: Environment,
    max_range: float = DEFAULT_MAX_RANGE,
) -> Scan:
    """Noise-free scan: first-wall-hit distance per ray, capped at max_range."""
    bounds = env.wall_bounds
    pad = 1.0 + 0.5 * float(bounds.widths.max())
    if not bounds.contains(state.position, atol=pad):
        raise DegenerateGeometryError(
            f"scan origin {state.position} is far outside the walled region"
        )
    ranges = cast_rays(
        state.position[None, :],
        state.heading + RAY_OFFSETS[None, :],
        env.walls,
        max_range,
    )[0]
    return Scan(ranges=ranges, max_range=max_range)


def ray_cast_batch(
    positions: np.ndarray,
    headings: np.ndarray,
    env: Environment,
    max_range: float = DEFAULT_MAX_RANGE,
) -> np.ndarray:
    """Vectorized noise-free ranges for (m, 2) positions, (m,) headings."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    headings = np.asarray(headings, dtype=float).ravel()
    out = np.empty((positions.shape[0], RAY_COUNT))
    # Chunked: the (m, rays, segments) broadcast is memory-hungry.
    chunk = max(1, int(2_000_000 // (RAY_COUNT * max(1, env.walls.shape[0]))))
    for start in range(0, positions.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = cast_rays(
            positions[sl],
            headings[sl, None] + RAY_OFFSETS[None, :],
            env.walls,
            max_range,
        )
    return out


def sense(
    state: VehicleState,
    env: Environment,
    noise: NoiseModel,
    rng: np.random.Generator,
    max_range: float = DEFAULT_MAX_RANGE,
) -> Scan:
    """Noisy scan: truth plus i.i.d. exponential noise per ray, re-capped."""
    truth = ray_cast(state, env, max_range)
    noisy = truth.ranges + noise.sample(rng, RAY_COUNT)
    return Scan(ranges=np.minimum(noisy, max_range), max_range=max_range)


def sense_batch(
    positions: np.ndarray,
    headings: np.ndarray,
    env: Environment,
    noise: NoiseModel,
    rng: np.random.Generator,
    max_range: float = DEFAULT_MAX_RANGE,
) -> np.ndarray:
    truth = ray_cast_batch(positions, headings, env, max_range)
    noisy = truth + noise.sample(rng, truth.shape)
    return np.minimum(noisy, max_range)


@dataclass(frozen=True)
class Dynamics:
    """Control-affine dynamics xdot = f(x) + g(x) u on the position state."""

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    f_bar: float


def vehicle_dynamics(u_max: float = 1.0) -> Dynamics:
    """Single integrator: f = 0, g = I on positions, speed bound sqrt(2)*u_max."""
    return Dynamics(
        f=lambda x: np.zeros(2),
        g=lambda x: np.eye(2),
        f_bar=math.sqrt(2.0) * float(u_max),
    )


def _step(state: VehicleState, control: ControlInput, dt: float) -> VehicleState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    p_x = state.p_x + control.u_x * dt
    p_y = state.p_y + control.u_y * dt
    if control.norm > 1e-15:
        heading = math.atan2(control.u_y, control.u_x)
    else:
        heading = state.heading
    return VehicleState(p_x=p_x, p_y=p_y, heading=heading)


def step_continuous(state: VehicleState, control: ControlInput, dt: float) -> VehicleState:
    """Exact flow over dt: the drift is zero and the input map is constant."""
    return _step(state, control, dt)


def step_discrete(state: VehicleState, control: ControlInput, dt: float) -> VehicleState:
    """Discrete map x_{t+1} = x_t + u_t * dt (drift identity, input dt * I)."""
    return _step(state, control, dt)
