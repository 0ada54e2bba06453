"""Minimum-deviation control under affine-minus-cone constraints.

Each constraint has slack  offset + gradient . u - cone_weight * ||u||, a
concave function of u, so its superlevel set is convex and the projection
problem has a unique solution. The solver is a two-stage scheme: if the
nominal input is already feasible it is returned exactly; otherwise the cone
term is repeatedly outer-linearized at the current iterate and the nominal
input is re-projected (Dykstra) onto the linearized polyhedron intersected
with the input box, which converges to the true projection. A final
feasibility polish walks toward the max-min-slack point when the outer
approximation leaves a microscopic violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .geometry import Box

_SLACK_TOL = 1e-9


class Infeasible(RuntimeError):
    """No input in the box satisfies every constraint.

    Carries the best achievable minimum slack, the input achieving it, and
    the index of the constraint binding there (the most violated one).
    """

    def __init__(self, best_input: np.ndarray, best_slack: float, worst_index: int):
        super().__init__(
            f"constraint {worst_index} unsatisfiable: best minimum slack "
            f"{best_slack:.3e} < 0"
        )
        self.best_input = best_input
        self.best_slack = best_slack
        self.worst_index = worst_index


@dataclass(frozen=True)
class ConeConstraint:
    """slack(u) = offset + gradient . u - cone_weight * ||u|| >= 0."""

    offset: float
    gradient: np.ndarray
    cone_weight: float = 0.0

    def __post_init__(self) -> None:
        grad = np.asarray(self.gradient, dtype=float).ravel()
        grad.flags.writeable = False
        object.__setattr__(self, "gradient", grad)
        object.__setattr__(self, "offset", float(self.offset))
        if self.cone_weight < 0:
            raise ValueError("cone_weight must be nonnegative")
        object.__setattr__(self, "cone_weight", float(self.cone_weight))

    def slack(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return self.offset + float(self.gradient @ u) - self.cone_weight * float(
            np.linalg.norm(u)
        )


def min_slack(constraints, u: np.ndarray) -> float:
    if not constraints:
        return np.inf
    return min(c.slack(u) for c in constraints)


def worst_constraint(constraints, u: np.ndarray) -> int:
    return int(np.argmin([c.slack(u) for c in constraints]))


def linearize_cone_constraints(constraints, box: Box) -> list[ConeConstraint]:
    """Conservative linear surrogate: replace ||u|| by its box maximum.

    Strictly shrinks each feasible set, so anything feasible for the
    surrogate is feasible for the original.
    """
    reach = float(np.linalg.norm(np.maximum(np.abs(box.lo), np.abs(box.hi))))
    return [
        ConeConstraint(
            offset=c.offset - c.cone_weight * reach,
            gradient=c.gradient,
            cone_weight=0.0,
        )
        for c in constraints
    ]


def _linearized_rows(constraints, anchor: np.ndarray, required: float):
    """Halfspaces a . u >= c containing {min slack >= required} (outer)."""
    nrm = float(np.linalg.norm(anchor))
    zhat = anchor / nrm if nrm > 1e-12 else np.zeros_like(anchor)
    rows = []
    for con in constraints:
        rows.append((con.gradient - con.cone_weight * zhat, required - con.offset))
    return rows


def _project_halfspace(u: np.ndarray, a: np.ndarray, c: float) -> np.ndarray:
    val = float(a @ u)
    if val >= c:
        return u
    denom = float(a @ a)
    if denom < 1e-300:
        return u
    return u + ((c - val) / denom) * a


def _dykstra(point: np.ndarray, rows, box: Box, max_cycles: int = 500) -> np.ndarray:
    """Projection of point onto the intersection of halfspaces and the box."""
    x = box.clip(point) if not rows else np.array(point, dtype=float)
    corrections = [np.zeros_like(x) for _ in range(len(rows) + 1)]
    for _ in range(max_cycles):
        x_prev = x
        for i, (a, c) in enumerate(rows):
            y = _project_halfspace(x + corrections[i], a, c)
            corrections[i] = x + corrections[i] - y
            x = y
        y = box.clip(x + corrections[-1])
        corrections[-1] = x + corrections[-1] - y
        x = y
        if float(np.max(np.abs(x - x_prev))) < 1e-14:
            ok = all(float(a @ x) >= c - 1e-12 for a, c in rows) and bool(
                box.contains(x, atol=1e-12)
            )
            if ok:
                break
    return x


def maximize_min_slack(constraints, box: Box, iterations: int = 25):
    """Max-min-slack input over the box (concave program, solved by
    successive outer linearization with an LP inner step).

    Returns (input, true minimum slack there).
    """
    if not constraints:
        return box.center, np.inf
    m = box.dim
    starts = [box.center, box.lo.copy(), box.hi.copy()]
    best_u = None
    best_val = -np.inf
    for start in starts:
        u = np.array(start, dtype=float)
        for _ in range(iterations):
            rows = _linearized_rows(constraints, u, 0.0)
            a_ub = np.zeros((len(rows), m + 1))
            b_ub = np.zeros(len(rows))
            for i, (a, c) in enumerate(rows):
                a_ub[i, :m] = -a
                a_ub[i, m] = 1.0
                b_ub[i] = -c
            cost = np.zeros(m + 1)
            cost[m] = -1.0
            bounds = [(lo, hi) for lo, hi in zip(box.lo, box.hi)] + [(None, None)]
            res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
            if not res.success:
                break
            u_new = res.x[:m]
            val = min_slack(constraints, u_new)
            if val > best_val:
                best_val = val
                best_u = u_new.copy()
            if float(np.max(np.abs(u_new - u))) < 1e-12:
                break
            u = u_new
        if best_u is None:
            best_u = u
            best_val = min_slack(constraints, u)
    return best_u, float(best_val)


def project_control(
    u_nom: np.ndarray,
    constraints,
    box: Box,
    required_slack: float = 0.0,
) -> np.ndarray:
    """Closest input to u_nom with every slack >= required_slack, inside box.

    Raises Infeasible when no such input exists.
    """
    u_nom = np.asarray(u_nom, dtype=float).ravel()
    if u_nom.shape[0] != box.dim:
        raise ValueError("nominal input dimension must match the box")
    constraints = list(constraints)

    if bool(box.contains(u_nom)) and min_slack(constraints, u_nom) >= required_slack:
        return u_nom.copy()

    if not constraints:
        return box.clip(u_nom)

    has_cone = any(c.cone_weight > 0 for c in constraints)
    u = box.clip(u_nom)
    for _ in range(60):
        rows = _linearized_rows(constraints, u, required_slack)
        u_new = _dykstra(u_nom, rows, box)
        if float(np.max(np.abs(u_new - u))) < 1e-11:
            u = u_new
            break
        u = u_new
        if not has_cone:
            # Linear constraints: the outer approximation is exact.
            break

    slack = min_slack(constraints, u)
    if slack >= required_slack - _SLACK_TOL:
        return u

    center, center_val = maximize_min_slack(constraints, box)
    if center_val < required_slack - 1e-12:
        raise Infeasible(center, center_val - required_slack, worst_constraint(constraints, center))
    if center_val <= required_slack:
        return center

    # Concave slack along the segment u -> center crosses the requirement
    # exactly once; bisect for the minimal move.
    lo_t, hi_t = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo_t + hi_t)
        candidate = u + mid * (center - u)
        if min_slack(constraints, candidate) >= required_slack:
            hi_t = mid
        else:
            lo_t = mid
    return u + hi_t * (center - u)
