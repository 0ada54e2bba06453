"""Barrier functions, measurement-robust margins, and the safety filter.

The safe set is the nonnegative superlevel set of h(x) = min_i h_i(x) over
affine members. The min is not differentiable at ties, so every robustified
constraint is enforced per member: each member's superlevel set staying
invariant keeps the intersection invariant, and each per-member constraint
is affine minus a cone term in u, hence convex.

Margins: continuous time uses (a, b) = ((L_Lfh + L_betah) * delta,
L_Lgh * delta); discrete time uses (eps' * (L_h L_f + (1 - eta) L_h),
eps' * L_h L_g). For the hallway vehicle (zero drift, constant input map,
linear class-K with gain gamma, affine members) the continuous triple is
(0, 0, gamma * max ||normal||) and the discrete one is (L_h, 1, 0),
analytically exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box
from .solver import (
    ConeConstraint,
    Infeasible,
    linearize_cone_constraints,
    min_slack,
    project_control,
)
from .world import ControlInput, Dynamics, VehicleState

__all__ = [
    "AffineBarrier",
    "BarrierSet",
    "RobustParams",
    "DtRobustParams",
    "Infeasible",
    "eval_barrier",
    "continuous_margins",
    "discrete_margins",
    "continuous_constraints",
    "discrete_constraints",
    "continuous_constraint_slack",
    "discrete_constraint_slack",
    "safety_filter",
    "shifted_barrier",
    "continuous_lipschitz_for_affine",
    "discrete_lipschitz_for_affine",
]


def _as_position(x) -> np.ndarray:
    if isinstance(x, VehicleState):
        return x.position
    arr = np.asarray(x, dtype=float).ravel()
    return arr


@dataclass(frozen=True)
class AffineBarrier:
    """h(x) = normal . x + offset on the leading state coordinates."""

    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        normal = np.asarray(self.normal, dtype=float).ravel()
        if normal.size == 0 or not np.any(normal != 0.0):
            raise ValueError("barrier normal must be nonzero")
        normal.flags.writeable = False
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    def value(self, x) -> float:
        pos = _as_position(x)
        d = self.normal.shape[0]
        return float(self.normal @ pos[:d]) + self.offset


@dataclass(frozen=True)
class BarrierSet:
    """h(x) = min over members; safe set C = {x : h(x) >= 0}."""

    members: tuple[AffineBarrier, ...]
    gamma: float = 1.0

    def __init__(self, members, gamma: float = 1.0):
        members = tuple(members)
        if not members:
            raise ValueError("barrier set must be nonempty")
        if not gamma > 0:
            raise ValueError("class-K gain gamma must be positive")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "gamma", float(gamma))

    def values(self, x) -> np.ndarray:
        return np.array([m.value(x) for m in self.members])

    def check_nonempty(self, box: Box, rng: np.random.Generator, n: int = 1000) -> bool:
        """Sampled check that the safe set intersects the given box."""
        samples = box.sample(rng, n)
        return bool(np.any([eval_barrier(self, s) >= 0 for s in samples]))

    def to_json(self) -> dict:
        return {
            "barriers": [
                {"normal": [float(v) for v in m.normal], "offset": m.offset}
                for m in self.members
            ],
            "gamma": self.gamma,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "BarrierSet":
        members = [
            AffineBarrier(np.asarray(row["normal"], dtype=float), float(row["offset"]))
            for row in payload["barriers"]
        ]
        return cls(members, gamma=float(payload.get("gamma", 1.0)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BarrierSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def hallway_barriers(width: float = 1.5, gamma: float = 1.0) -> BarrierSet:
    """Keep the lateral position inside [0, width]."""
    return BarrierSet(
        [
            AffineBarrier(np.array([1.0, 0.0]), 0.0),
            AffineBarrier(np.array([-1.0, 0.0]), float(width)),
        ],
        gamma=gamma,
    )


def eval_barrier(barriers: BarrierSet, x) -> float:
    return float(min(m.value(x) for m in barriers.members))


def shifted_barrier(barriers: BarrierSet, beta_offset: float, eta: float) -> BarrierSet:
    """Tightened set hbar(x) = h(x) - beta_offset / eta (per member)."""
    if eta == 0:
        raise ValueError("eta must be nonzero to shift the barrier")
    shift = float(beta_offset) / float(eta)
    return BarrierSet(
        [AffineBarrier(m.normal, m.offset - shift) for m in barriers.members],
        gamma=barriers.gamma,
    )


# ---------------------------------------------------------------------------
# margins


@dataclass(frozen=True)
class RobustParams:
    """Continuous-time margin pair with its ingredients."""

    a: float
    b: float
    delta: float
    class_k_gain: float
    l_lfh: float
    l_lgh: float
    l_betah: float

    def __post_init__(self) -> None:
        if self.a < 0 or self.b < 0:
            raise ValueError("margins must be nonnegative")
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    @property
    def margins(self) -> tuple[float, float]:
        return (self.a, self.b)

    @classmethod
    def from_lipschitz(
        cls,
        delta: float,
        l_lfh: float,
        l_lgh: float,
        l_betah: float,
        class_k_gain: float = 1.0,
    ) -> "RobustParams":
        a, b = continuous_margins(delta, l_lfh, l_lgh, l_betah)
        return cls(
            a=a,
            b=b,
            delta=float(delta),
            class_k_gain=float(class_k_gain),
            l_lfh=float(l_lfh),
            l_lgh=float(l_lgh),
            l_betah=float(l_betah),
        )


@dataclass(frozen=True)
class DtRobustParams:
    """Discrete-time margin pair derived from (eps', eta) and Lipschitz data."""

    eta: float
    eps_prime: float
    l_h: float
    l_f: float
    l_g: float
    a: float
    b: float
    beta_offset: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.eps_prime < 0:
            raise ValueError("eps_prime must be nonnegative")
        a, b = discrete_margins(self.eps_prime, self.eta, self.l_h, self.l_f, self.l_g)
        if not (math.isclose(self.a, a, rel_tol=0, abs_tol=1e-12) and math.isclose(self.b, b, rel_tol=0, abs_tol=1e-12)):
            raise ValueError("margins inconsistent with eps', eta and Lipschitz data")

    @property
    def margins(self) -> tuple[float, float]:
        return (self.a, self.b)

    @classmethod
    def derive(
        cls,
        eps_prime: float,
        eta: float,
        l_h: float,
        l_f: float,
        l_g: float,
        beta_offset: float = 0.0,
    ) -> "DtRobustParams":
        a, b = discrete_margins(eps_prime, eta, l_h, l_f, l_g)
        return cls(
            eta=float(eta),
            eps_prime=float(eps_prime),
            l_h=float(l_h),
            l_f=float(l_f),
            l_g=float(l_g),
            a=a,
            b=b,
            beta_offset=float(beta_offset),
        )


def continuous_margins(delta: float, l_lfh: float, l_lgh: float, l_betah: float) -> tuple[float, float]:
    """(a, b) = ((L_Lfh + L_betah) * delta, L_Lgh * delta)."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if min(l_lfh, l_lgh, l_betah) < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    return ((l_lfh + l_betah) * delta, l_lgh * delta)


def discrete_margins(eps_prime: float, eta: float, l_h: float, l_f: float, l_g: float) -> tuple[float, float]:
    """(a, b) = (eps' * (L_h L_f + (1 - eta) L_h), eps' * L_h * L_g)."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if eps_prime < 0:
        raise ValueError("eps_prime must be nonnegative")
    if min(l_h, l_f, l_g) < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    return (eps_prime * (l_h * l_f + (1.0 - eta) * l_h), eps_prime * l_h * l_g)


def continuous_lipschitz_for_affine(barriers: BarrierSet) -> tuple[float, float, float]:
    """(L_Lfh, L_Lgh, L_betah) for affine members under the hallway vehicle.

    L_f h vanishes identically (zero drift) and L_g h is constant (constant
    input map), so both Lipschitz constants are 0; beta o h has constant
    gamma * max ||normal||.
    """
    max_norm = max(float(np.linalg.norm(m.normal)) for m in barriers.members)
    return (0.0, 0.0, barriers.gamma * max_norm)


def discrete_lipschitz_for_affine(barriers: BarrierSet) -> tuple[float, float, float]:
    """(L_h, L_f, L_g) for the exact-flow discrete map x + u * dt."""
    max_norm = max(float(np.linalg.norm(m.normal)) for m in barriers.members)
    return (max_norm, 1.0, 0.0)


# ---------------------------------------------------------------------------
# robustified constraints


def continuous_constraints(
    barriers: BarrierSet,
    x_hat,
    margins: tuple[float, float],
    gain: float | None = None,
    dynamics: Dynamics | None = None,
) -> list[ConeConstraint]:
    """Per-member constraints grad_h . (f + g u) - (a + b||u||) + gamma h >= 0."""
    a, b = margins
    gamma = barriers.gamma if gain is None else float(gain)
    pos = _as_position(x_hat)
    out = []
    for member in barriers.members:
        d = member.normal.shape[0]
        if dynamics is None:
            drift = 0.0
            grad_u = member.normal
        else:
            drift = float(member.normal @ np.asarray(dynamics.f(pos), dtype=float)[:d])
            grad_u = np.asarray(dynamics.g(pos), dtype=float)[:d].T @ member.normal
        out.append(
            ConeConstraint(
                offset=drift - a + gamma * member.value(pos),
                gradient=grad_u,
                cone_weight=b,
            )
        )
    return out


def continuous_constraint_slack(
    barriers: BarrierSet,
    x_hat,
    u,
    margins: tuple[float, float],
    gain: float | None = None,
    dynamics: Dynamics | None = None,
) -> float:
    u = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    return min_slack(continuous_constraints(barriers, x_hat, margins, gain, dynamics), u)


def discrete_constraints(
    barriers: BarrierSet,
    x_hat,
    dt: float,
    margins: tuple[float, float],
    eta: float,
) -> list[ConeConstraint]:
    """Per-member h(x + u dt) - h(x) - (a + b||u||) + eta h(x) >= 0.

    For affine members h(x + u dt) - h(x) = dt * normal . u exactly.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    a, b = margins
    pos = _as_position(x_hat)
    out = []
    for member in barriers.members:
        out.append(
            ConeConstraint(
                offset=eta * member.value(pos) - a,
                gradient=dt * member.normal[:2]
                if member.normal.shape[0] > 2
                else dt * member.normal,
                cone_weight=b,
            )
        )
    return out


def discrete_constraint_slack(
    barriers: BarrierSet,
    x_hat,
    u,
    dt: float,
    margins: tuple[float, float],
    eta: float,
) -> float:
    u = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    return min_slack(discrete_constraints(barriers, x_hat, dt, margins, eta), u)


def control_box(u_max: float) -> Box:
    return Box([-float(u_max), -float(u_max)], [float(u_max), float(u_max)])


def safety_filter(
    u_nom,
    constraints,
    box: Box,
    beta_offset: float = 0.0,
    linearize_socp: bool = False,
):
    """Minimally deviate from u_nom so every constraint slack >= beta_offset.

    Returns the same flavor as given (ControlInput in, ControlInput out).
    Raises solver.Infeasible -- the runtime owns the fallback policy.
    """
    wrap = isinstance(u_nom, ControlInput)
    u = u_nom.as_array() if wrap else np.asarray(u_nom, dtype=float)
    cons = list(constraints)
    if linearize_socp:
        cons = linearize_cone_constraints(cons, box)
    result = project_control(u, cons, box, required_slack=float(beta_offset))
    return ControlInput(result[0], result[1]) if wrap else result
