"""Low-resolution time stepping: prediction, stabilization, constraint solving.

One step advances the particle set by dt (split into CFL substeps when fast
particles would travel more than a fraction of a radius):

  1. predict velocities and positions under gravity, refresh scaled masses
  2. build the neighbor grid from the predicted positions
  3. stabilization sweeps of pure contact constraints, written to both the
     predicted and the current positions (removes start-of-step overlap
     without injecting kinetic energy)
  4. solver sweeps of fused contact+friction constraints plus shape matching,
     averaged per particle by constraint count
  5. velocities from the position difference, positions from the prediction

Constraint evaluation and accumulation run in a fixed order, so stepping is
deterministic for identical inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import GRANULAR, DataError, LrParams, ParameterError, ParticleSet, SimulationError
from .neighbors import NeighborGrid
from .rigid import KINEMATIC, RigidBody, accumulate_shape_matching, drive_kinematic

log = logging.getLogger(__name__)

MAX_SUBSTEPS = 16
COINCIDENT_EPS = 1e-9


@dataclass
class ConstraintBatch:
    """Contact pairs of one substep plus the per-particle averaging buffers."""

    pair_i: np.ndarray   # (p,) int64
    pair_j: np.ndarray   # (p,) int64
    pair_pen: np.ndarray  # (p,) penetration at generation time (friction load)
    dx_sum: np.ndarray   # (n, 3) accumulated deltas, zeroed between sweeps
    count: np.ndarray    # (n,) int32 constraints seen per particle

    @classmethod
    def for_pairs(cls, pair_i, pair_j, n: int, pair_pen=None) -> "ConstraintBatch":
        if pair_pen is None:
            pair_pen = np.zeros(len(pair_i))
        return cls(
            pair_i=pair_i,
            pair_j=pair_j,
            pair_pen=pair_pen,
            dx_sum=np.zeros((n, 3)),
            count=np.zeros(n, dtype=np.int32),
        )

    @property
    def n_pairs(self) -> int:
        return self.pair_i.shape[0]


def predict(ps: ParticleSet, params: LrParams, dt: float | None = None) -> None:
    """Integrate gravity into velocities and predict positions.

    Immovable particles (inverse mass 0) keep their position prediction; their
    velocities stay whatever was prescribed externally.
    """
    dt = params.dt if dt is None else dt
    free = ps.inv_mass > 0.0
    ps.v[free] += dt * params.gravity
    ps.x_pred[free] = ps.x[free] + dt * ps.v[free]
    ps.x_pred[~free] = ps.x[~free]


def scaled_mass(inv_mass: float, height: float, k: float) -> float:
    """Height-attenuated inverse mass used during constraint solving.

    Particles higher above the ground behave lighter inside contacts, which
    speeds up convergence of piles; an inverse mass of 0 stays 0.
    """
    return inv_mass * math.exp(k * max(height, 0.0))


def update_scaled_masses(ps: ParticleSet, params: LrParams) -> None:
    """Refresh the solver-internal scaled inverse masses (granular only)."""
    k = params.resolved_mass_scale_k(ps.radius)
    height = np.maximum(ps.x[:, 1] - params.ground_height, 0.0)
    granular = ps.phase == GRANULAR
    ps.scaled_inv_mass[:] = ps.inv_mass
    ps.scaled_inv_mass[granular] *= np.exp(k * height[granular])


def cfl_substeps(ps: ParticleSet, params: LrParams) -> tuple[int, float]:
    """Substep count and size keeping per-substep travel <= cfl_factor * r."""
    if ps.n == 0:
        return 1, params.dt
    vmax = float(np.sqrt((ps.v**2).sum(axis=1).max()))
    if not math.isfinite(vmax):
        # Let the post-substep finiteness check raise with the particle index.
        return MAX_SUBSTEPS, params.dt / MAX_SUBSTEPS
    limit = params.cfl_factor * ps.radius
    if vmax * params.dt <= limit:
        return 1, params.dt
    n_sub = math.ceil(vmax * params.dt / limit)
    if n_sub > MAX_SUBSTEPS:
        log.warning("CFL substeps capped at %d (wanted %d, vmax=%.3g m/s); "
                    "velocities indicate an unstable state", MAX_SUBSTEPS, n_sub, vmax)
        n_sub = MAX_SUBSTEPS
    return n_sub, params.dt / n_sub


def generate_contacts(ps: ParticleSet, grid: NeighborGrid) -> tuple[np.ndarray, np.ndarray]:
    """Contact pairs (i < j) strictly overlapping at the predicted positions.

    Pairs of two immovable particles and pairs within one rigid body are
    excluded. Coincident particles still pair up; their resolution direction
    falls back to a fixed axis chosen from the indices at solve time.
    """
    pair_i, pair_j, _ = generate_contacts_with_load(ps, grid)
    return pair_i, pair_j


def generate_contacts_with_load(ps: ParticleSet, grid: NeighborGrid):
    """generate_contacts plus each pair's penetration at generation time."""
    if ps.n == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), np.empty(0)
    return kernels.generate_pairs(
        grid.keys_sorted, grid.order, grid.positions, 1.0 / grid.cell_size,
        2.0 * ps.radius, ps.inv_mass, ps.body_id,
    )


def solve_contact(i: int, j: int, ps: ParticleSet) -> tuple[np.ndarray, np.ndarray]:
    """Displacement pair resolving the interpenetration of one contact.

    Split proportionally to the scaled inverse masses; applying both deltas
    separates the pair to exactly one diameter.
    """
    xij = ps.x_pred[j] - ps.x_pred[i]
    dist = float(np.linalg.norm(xij))
    two_r = 2.0 * ps.radius
    wi, wj = ps.scaled_inv_mass[i], ps.scaled_inv_mass[j]
    wsum = wi + wj
    if wsum == 0.0:
        raise ParameterError("contact between two immovable particles is never generated")
    if dist < COINCIDENT_EPS:
        normal = np.zeros(3)
        normal[(i + j) % 3] = 1.0
        dist = 0.0
    else:
        normal = xij / dist
    overlap = two_r - dist
    return (-(wi / wsum) * overlap * normal, (wj / wsum) * overlap * normal)


def solve_friction(i: int, j: int, ps: ParticleSet, delta_i, delta_j):
    """Friction displacements for a contact, given its contact deltas.

    The relative displacement accumulated this step (predicted position plus
    contact delta minus step-start position) is projected onto the contact
    tangent plane; slip below the static threshold is removed entirely, slip
    above it is limited by the kinetic coefficient. The thresholds scale with
    the penetration depth the contact is resolving, so friction capacity
    follows the normal load and a pile's hold/slide transition tracks the
    friction angle. Coefficients of unequal particles combine as a geometric
    mean.
    """
    xij = ps.x_pred[j] - ps.x_pred[i]
    dist = float(np.linalg.norm(xij))
    if dist < COINCIDENT_EPS:
        return np.zeros(3), np.zeros(3)  # tangent plane undefined
    penetration = 2.0 * ps.radius - dist
    if penetration <= 0.0:
        return np.zeros(3), np.zeros(3)  # no load, no friction
    normal = xij / dist
    delta_i = np.asarray(delta_i, dtype=np.float64)
    delta_j = np.asarray(delta_j, dtype=np.float64)
    rel = (ps.x_pred[i] + delta_i - ps.x[i]) - (ps.x_pred[j] + delta_j - ps.x[j])
    tangential = rel - np.dot(rel, normal) * normal
    t_len = float(np.linalg.norm(tangential))
    if t_len == 0.0:
        return np.zeros(3), np.zeros(3)
    mu_s = math.sqrt(ps.mu_s[i] * ps.mu_s[j])
    mu_k = math.sqrt(ps.mu_k[i] * ps.mu_k[j])
    if t_len < penetration * mu_s:
        scale = 1.0
    else:
        scale = min(penetration * mu_k / t_len, 1.0)
    wi, wj = ps.scaled_inv_mass[i], ps.scaled_inv_mass[j]
    wsum = wi + wj
    return (-(wi / wsum) * scale * tangential, (wj / wsum) * scale * tangential)


def apply_averaged(batch: ConstraintBatch, ps: ParticleSet, also_to_x: bool = False) -> None:
    """Move every touched particle by its mean accumulated delta and clear
    the accumulators. Stabilization passes also write the current positions."""
    kernels.apply_average(ps.x_pred, ps.x, batch.dx_sum, batch.count, also_to_x)


@dataclass
class StepInfo:
    substeps: int
    dt_sub: float
    contacts: int


def step(ps: ParticleSet, bodies: list[RigidBody], params: LrParams,
         t0: float = 0.0) -> StepInfo:
    """Advance the particle set by params.dt (CFL substepping included).

    Kinematic bodies with a target track are driven to their transform at the
    end time of each substep. Raises SimulationError if any particle ends up
    non-finite.
    """
    if ps.n == 0:
        return StepInfo(substeps=0, dt_sub=params.dt, contacts=0)
    n_sub, dt_sub = cfl_substeps(ps, params)
    contacts = 0
    for s in range(n_sub):
        t_end = t0 + (s + 1) * dt_sub
        try:
            contacts += _substep(ps, bodies, params, dt_sub, t_end)
        except DataError as exc:  # non-finite prediction caught by the grid
            raise SimulationError(str(exc)) from exc
    ps.check_finite()
    return StepInfo(substeps=n_sub, dt_sub=dt_sub, contacts=contacts)


def _substep(ps: ParticleSet, bodies: list[RigidBody], params: LrParams,
             dt: float, t_end: float) -> int:
    predict(ps, params, dt)
    for body in bodies:
        if body.kind == KINEMATIC and body.track is not None:
            drive_kinematic(body, ps, body.track.at(t_end), dt)
    update_scaled_masses(ps, params)

    grid = NeighborGrid.build(ps.x_pred, 3.0 * ps.radius)
    pair_i, pair_j, pen = generate_contacts_with_load(ps, grid)
    batch = ConstraintBatch.for_pairs(pair_i, pair_j, ps.n, pen)
    for _ in range(params.stabilization_iterations):
        # Overlap is evaluated at the start-of-step positions: stabilization
        # removes illegal pre-existing penetration without touching the
        # velocity the main solve will derive from x_pred - x.
        kernels.solve_pairs(ps.x, ps.x_pred, ps.x, ps.scaled_inv_mass,
                            ps.mu_s, ps.mu_k,
                            batch.pair_i, batch.pair_j, batch.pair_pen,
                            ps.radius, False, batch.dx_sum, batch.count)
        apply_averaged(batch, ps, also_to_x=True)

    # Regenerate from the stabilized prediction; the grid still covers the
    # candidate range since stabilization moves particles well under one cell.
    pair_i, pair_j, pen = generate_contacts_with_load(ps, grid)
    batch = ConstraintBatch.for_pairs(pair_i, pair_j, ps.n, pen)
    for _ in range(params.solver_iterations):
        kernels.solve_pairs(ps.x_pred, ps.x_pred, ps.x, ps.scaled_inv_mass,
                            ps.mu_s, ps.mu_k,
                            batch.pair_i, batch.pair_j, batch.pair_pen,
                            ps.radius, True, batch.dx_sum, batch.count)
        accumulate_shape_matching(bodies, ps, batch.dx_sum, batch.count)
        apply_averaged(batch, ps, also_to_x=False)

    ps.v[:] = (ps.x_pred - ps.x) / dt
    ps.x[:] = ps.x_pred
    if params.inelastic_contacts and batch.n_pairs:
        kernels.damp_approach_velocities(
            ps.x, ps.v, ps.scaled_inv_mass, batch.pair_i, batch.pair_j,
            ps.radius, 2,
        )
    return batch.n_pairs
