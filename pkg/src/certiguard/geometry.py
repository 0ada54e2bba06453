"""Planar geometry primitives shared across modules: boxes and segment casts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo_i, hi_i]`` in any dimension."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(hi < lo):
            raise ValueError("box upper bounds must dominate lower bounds")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        """Membership mask for an ``(n,)`` point or ``(m, n)`` batch."""
        pts = np.asarray(points, dtype=float)
        inside = np.all(pts >= self.lo - atol, axis=-1) & np.all(
            pts <= self.hi + atol, axis=-1
        )
        return inside

    def clip(self, points: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.lo, self.hi)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def inflate(self, fraction: float) -> "Box":
        """Grow each side by ``fraction`` of its width (symmetrically)."""
        pad = 0.5 * fraction * self.widths
        return Box(self.lo - pad, self.hi + pad)

    def to_json(self) -> list[float]:
        """Interleaved ``[lo_0, hi_0, lo_1, hi_1, ...]`` (matches env files)."""
        out: list[float] = []
        for lo, hi in zip(self.lo, self.hi):
            out.extend([float(lo), float(hi)])
        return out

    @classmethod
    def from_json(cls, values) -> "Box":
        vals = np.asarray(values, dtype=float).ravel()
        if vals.size % 2 != 0 or vals.size == 0:
            raise ValueError("box json must interleave lo/hi per axis")
        return cls(vals[0::2], vals[1::2])


def cast_rays(
    origins: np.ndarray,
    angles: np.ndarray,
    segments: np.ndarray,
    max_range: float,
) -> np.ndarray:
    """Distance from each origin along each ray angle to the first segment hit.

    origins: (m, 2), angles: (m, r) absolute angles, segments: (s, 4) rows
    ``[x1, y1, x2, y2]``. Returns (m, r) ranges capped at ``max_range``.
    """
    origins = np.asarray(origins, dtype=float)
    angles = np.asarray(angles, dtype=float)
    segs = np.asarray(segments, dtype=float)
    m, r = angles.shape
    d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (m, r, 2)
    a = segs[:, 0:2]  # (s, 2)
    e = segs[:, 2:4] - segs[:, 0:2]  # (s, 2)

    rel = a[None, :, :] - origins[:, None, :]  # (m, s, 2)
    # Cramer solve of  t*d - s*e = rel  per (ray, segment) pair.
    denom = d[:, :, None, 0] * e[None, None, :, 1] - d[:, :, None, 1] * e[None, None, :, 0]
    rel_x = rel[:, None, :, 0]
    rel_y = rel[:, None, :, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel_x * e[None, None, :, 1] - rel_y * e[None, None, :, 0]) / denom
        s = (rel_x * d[:, :, None, 1] - rel_y * d[:, :, None, 0]) / denom
    valid = (np.abs(denom) > 1e-14) & (t >= 1e-12) & (s >= 0.0) & (s <= 1.0)
    t = np.where(valid, t, np.inf)
    ranges = t.min(axis=2)
    return np.minimum(ranges, max_range)
