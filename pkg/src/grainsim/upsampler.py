"""High-resolution particle advection through the guide-particle velocity field.

Each visualization particle blends between the weighted mean velocity of
nearby guide particles and its own ballistic motion. The blend parameter is
nonzero only in sparse regions, so densely surrounded particles follow the
flow while free-flying ones fall under gravity. Guide particles belonging to
rigid bodies or boundaries are ignored entirely when no granular guide is
nearby, which keeps externally moved objects from dragging material along.

The upsampling step reads the solver state but never writes it, and the
particles do not interact with each other, so the cost is linear in their
count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import GRANULAR, HrParams, ParticleSet, SimulationError
from .neighbors import NeighborGrid


@dataclass
class HrSet:
    """Positions and velocities of the visualization particles."""

    x: np.ndarray   # (m, 3)
    v: np.ndarray   # (m, 3)
    r_hr: float

    @classmethod
    def create(cls, positions, r_hr: float) -> "HrSet":
        x = np.asarray(positions, dtype=np.float64).reshape(-1, 3).copy()
        return cls(x=x, v=np.zeros_like(x), r_hr=float(r_hr))

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class HrField:
    """Per-particle gather results: blended velocity source and weights."""

    v_tilde: np.ndarray  # (m, 3) weighted mean guide velocity
    max_w: np.ndarray    # (m,) largest single weight
    sum_w: np.ndarray    # (m,) total weight
    alpha: np.ndarray    # (m,) gravity blend factor, filled by compute_alpha


def weight(d2, r_lr: float):
    """Cubic kernel on squared distance; support ends at 3 * r_lr.

    Accepts scalars or arrays. Monotone non-increasing in distance and C1 at
    the support boundary.
    """
    t = 1.0 - np.asarray(d2, dtype=np.float64) / (9.0 * r_lr * r_lr)
    value = np.where(t > 0.0, t, 0.0) ** 3
    return float(value) if np.isscalar(d2) else value


def gather_one(hr_pos, lr: ParticleSet, grid: NeighborGrid):
    """Gather for a single particle; returns (v_tilde, max_w, sum_w).

    Reference implementation of the kernel path: neighbors strictly inside
    the support; rigid/boundary guides dropped when no granular guide exists.
    """
    hr_pos = np.asarray(hr_pos, dtype=np.float64).reshape(3)
    support = 3.0 * lr.radius
    idx = grid.query(hr_pos, support)
    if len(idx):
        d2 = ((lr.x[idx] - hr_pos) ** 2).sum(axis=1)
        inside = d2 < support * support
        idx, d2 = idx[inside], d2[inside]
    if len(idx) == 0 or not np.any(lr.phase[idx] == GRANULAR):
        return np.zeros(3), 0.0, 0.0
    w = weight(d2, lr.radius)
    sum_w = float(w.sum())
    v_tilde = (w[:, None] * lr.v[idx]).sum(axis=0) / sum_w
    return v_tilde, float(w.max()), sum_w


def gather_field(hr: HrSet, lr: ParticleSet, grid: NeighborGrid) -> HrField:
    """Gather for the entire set (parallel map over particles)."""
    m = hr.n
    field = HrField(
        v_tilde=np.zeros((m, 3)),
        max_w=np.zeros(m),
        sum_w=np.zeros(m),
        alpha=np.zeros(m),
    )
    if m == 0 or lr.n == 0:
        field.alpha[:] = 1.0
        return field
    granular = np.ascontiguousarray((lr.phase == GRANULAR).astype(np.uint8))
    kernels.hr_gather(
        grid.keys_sorted, grid.order, grid.positions,
        np.ascontiguousarray(lr.v), granular,
        1.0 / grid.cell_size, lr.radius,
        np.ascontiguousarray(hr.x), field.v_tilde, field.max_w, field.sum_w,
    )
    return field


def alpha(max_w: float, sum_w: float, c1: float, c2: float) -> float:
    """Gravity blend factor from the gathered weights.

    1 with no support at all, 1 - max_w in sparse regions (small best weight
    or one dominant guide), 0 deep inside the material.
    """
    if sum_w <= 0.0:
        return 1.0
    if max_w <= c1 or max_w / sum_w >= c2:
        return 1.0 - max_w
    return 0.0


def compute_alpha(field: HrField, params: HrParams) -> None:
    """Vectorized `alpha` over a gathered field (fills field.alpha)."""
    max_w, sum_w = field.max_w, field.sum_w
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(sum_w > 0.0, max_w / np.where(sum_w > 0.0, sum_w, 1.0), 0.0)
    sparse = (max_w <= params.c1) | (ratio >= params.c2)
    field.alpha[:] = np.where(sum_w <= 0.0, 1.0, np.where(sparse, 1.0 - max_w, 0.0))


def advect(hr: HrSet, field: HrField, params: HrParams) -> None:
    """Blend velocities and integrate positions for one upsampling step."""
    a = field.alpha[:, None]
    ballistic = hr.v + params.dt * params.gravity
    hr.v[:] = (1.0 - a) * field.v_tilde + a * ballistic
    hr.x += params.dt * hr.v
    bad = ~np.all(np.isfinite(hr.x) & np.isfinite(hr.v), axis=1)
    if bad.any():
        idx = int(np.argmax(bad))
        raise SimulationError(f"non-finite state at upsampled particle {idx}")


def floor_clamp(hr: HrSet, ground_height: float, r_hr: float | None = None) -> None:
    """Project particles below the ground plane back on top of it.

    Containment backstop for ballistic particles; the downward velocity
    component is zeroed so clamped particles can still slide sideways.
    """
    r = hr.r_hr if r_hr is None else r_hr
    floor = ground_height + r
    below = hr.x[:, 1] < floor
    hr.x[below, 1] = floor
    hr.v[below, 1] = np.maximum(hr.v[below, 1], 0.0)


def hr_step(hr: HrSet, lr: ParticleSet, grid: NeighborGrid, params: HrParams,
            ground_height: float = 0.0) -> HrField:
    """One full upsampling step against the current solver state."""
    field = gather_field(hr, lr, grid)
    compute_alpha(field, params)
    advect(hr, field, params)
    if params.floor_clamp:
        floor_clamp(hr, ground_height)
    return field
