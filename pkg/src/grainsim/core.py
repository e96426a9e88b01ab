"""Shared domain types and parameter blocks for the granular simulator.

Particle data is stored structure-of-arrays: positions, predicted positions,
velocities, inverse masses and friction coefficients are parallel numpy
arrays indexed by particle. Static geometry is represented by particles with
inverse mass zero, so one contact path handles grain-grain, grain-body and
grain-wall interactions alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Per-particle phase codes (int8 column in ParticleSet.phase).
GRANULAR = 0
RIGID = 1
BOUNDARY = 2

NO_BODY = -1


class GrainSimError(Exception):
    """Base class for all simulator errors."""


class ParameterError(GrainSimError, ValueError):
    """A parameter violates its documented range or type."""


class GeometryError(GrainSimError, ValueError):
    """A mesh is unusable for the requested operation (open, empty, ...)."""


class DataError(GrainSimError, ValueError):
    """Particle data is malformed (non-finite values, length mismatch)."""


class SceneError(GrainSimError, ValueError):
    """A scene file failed to parse or validate."""


class SimulationError(GrainSimError, RuntimeError):
    """The simulation produced an invalid state (non-finite positions)."""


class FrameFormatError(GrainSimError, ValueError):
    """A frame stream is corrupt or truncated."""


def mass_from_density(density: float, radius: float) -> float:
    """Mass of a spherical particle of the given radius and material density."""
    if density <= 0.0:
        raise ParameterError(f"density must be positive, got {density}")
    if radius <= 0.0:
        raise ParameterError(f"radius must be positive, got {radius}")
    return density * (4.0 / 3.0) * math.pi * radius**3


def cross_friction(mu_i: float, mu_j: float) -> float:
    """Combined friction coefficient of a heterogeneous pair (geometric mean).

    Symmetric in its arguments and the identity when both coefficients are
    equal, so the homogeneous case goes through the same code path.
    """
    if mu_i < 0.0 or mu_j < 0.0:
        raise ParameterError(f"friction coefficients must be >= 0, got ({mu_i}, {mu_j})")
    return math.sqrt(mu_i * mu_j)


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise ParameterError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite, got {arr}")
    return arr


@dataclass
class MaterialParams:
    """Bulk material description shared by all particles of an entity."""

    density: float = 1600.0
    mu_s: float = 0.35
    mu_k: float = 0.3

    def validate(self) -> None:
        if self.density <= 0.0:
            raise ParameterError(f"material density must be positive, got {self.density}")
        if not (self.mu_s >= self.mu_k >= 0.0):
            raise ParameterError(
                f"friction coefficients must satisfy mu_s >= mu_k >= 0, "
                f"got mu_s={self.mu_s}, mu_k={self.mu_k}"
            )


@dataclass
class LrParams:
    """Time stepping and solver configuration for the low-resolution stage."""

    dt: float = 0.005
    solver_iterations: int = 5
    stabilization_iterations: int = 2
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.81, 0.0]))
    # Height-attenuation rate of the convergence mass scaling, in 1/m.
    # None resolves to 1/(2*r_lr) at solve time so behavior is scale-free.
    mass_scale_k: float | None = None
    cfl_factor: float = 0.4
    ground_height: float = 0.0
    # Dissipate the closing normal velocity of persisting contacts after the
    # velocity update. Off reproduces the bare position-difference velocities,
    # at the cost of a permanent bounce cycle in resting piles.
    inelastic_contacts: bool = True

    def __post_init__(self):
        self.gravity = _as_vec3(self.gravity, "gravity")

    def validate(self) -> None:
        if self.dt <= 0.0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if not 3 <= self.solver_iterations <= 16:
            raise ParameterError(
                f"solver_iterations must be in [3, 16], got {self.solver_iterations}"
            )
        if not 0 <= self.stabilization_iterations <= 4:
            raise ParameterError(
                f"stabilization_iterations must be in [0, 4], "
                f"got {self.stabilization_iterations}"
            )
        if not 0.0 < self.cfl_factor <= 1.0:
            raise ParameterError(f"cfl_factor must be in (0, 1], got {self.cfl_factor}")
        if self.mass_scale_k is not None and self.mass_scale_k < 0.0:
            raise ParameterError(f"mass_scale_k must be >= 0, got {self.mass_scale_k}")

    def resolved_mass_scale_k(self, r_lr: float) -> float:
        if self.mass_scale_k is not None:
            return self.mass_scale_k
        return 1.0 / (2.0 * r_lr)


# Weight of the upsampling kernel at a distance of one guide-particle radius;
# doubles as the density threshold of the gravity blend.
C1_DEFAULT = 512.0 / 729.0
C2_DEFAULT = 0.6


@dataclass
class HrParams:
    """Configuration of the high-resolution upsampling stage."""

    r_hr: float
    dt: float = 0.0167
    c1: float = C1_DEFAULT
    c2: float = C2_DEFAULT
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.81, 0.0]))
    # Project particles that fall below the ground plane back onto it.
    # Off reproduces the bare advection scheme with no boundary handling.
    floor_clamp: bool = True

    def __post_init__(self):
        self.gravity = _as_vec3(self.gravity, "gravity")

    def validate(self, r_lr: float | None = None) -> None:
        if self.dt <= 0.0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if self.r_hr <= 0.0:
            raise ParameterError(f"r_hr must be positive, got {self.r_hr}")
        if r_lr is not None and not self.r_hr < r_lr:
            raise ParameterError(f"r_hr must be smaller than r_lr ({self.r_hr} >= {r_lr})")
        for name, value in (("c1", self.c1), ("c2", self.c2)):
            if not 0.0 < value < 1.0:
                raise ParameterError(f"{name} must be in (0, 1), got {value}")


@dataclass
class ParticleSet:
    """Structure-of-arrays store of the low-resolution particles.

    All arrays share one length. ``x_pred`` holds the predicted positions the
    constraint solver operates on; ``scaled_inv_mass`` is the height-attenuated
    inverse mass refreshed once per step and used only inside constraint
    solving. A particle's phase is fixed at construction.
    """

    x: np.ndarray            # (n, 3) positions, m
    x_pred: np.ndarray       # (n, 3) predicted positions, m
    v: np.ndarray            # (n, 3) velocities, m/s
    inv_mass: np.ndarray     # (n,) 1/kg, 0 for static geometry
    scaled_inv_mass: np.ndarray  # (n,) 1/kg, solver-internal
    mu_s: np.ndarray         # (n,) static friction coefficient
    mu_k: np.ndarray         # (n,) kinetic friction coefficient
    phase: np.ndarray        # (n,) int8, GRANULAR / RIGID / BOUNDARY
    body_id: np.ndarray      # (n,) int32, NO_BODY for non-rigid particles
    radius: float            # m, uniform over the set

    @classmethod
    def create(
        cls,
        positions,
        radius: float,
        *,
        inv_mass,
        mu_s,
        mu_k,
        phase=None,
        body_id=None,
        velocities=None,
    ) -> "ParticleSet":
        """Build a validated set from per-particle data, broadcasting scalars."""
        x = np.atleast_2d(np.asarray(positions, dtype=np.float64)).reshape(-1, 3).copy()
        n = x.shape[0]

        def column(value, dtype, default=None):
            if value is None:
                value = default
            arr = np.asarray(value, dtype=dtype)
            if arr.ndim == 0:
                arr = np.full(n, arr, dtype=dtype)
            return arr.copy()

        v = np.zeros((n, 3)) if velocities is None else (
            np.asarray(velocities, dtype=np.float64).reshape(-1, 3).copy()
        )
        if v.shape[0] == 1 and n > 1:
            v = np.repeat(v, n, axis=0)
        ps = cls(
            x=x,
            x_pred=x.copy(),
            v=v,
            inv_mass=column(inv_mass, np.float64),
            scaled_inv_mass=column(inv_mass, np.float64),
            mu_s=column(mu_s, np.float64),
            mu_k=column(mu_k, np.float64),
            phase=column(phase, np.int8, default=GRANULAR),
            body_id=column(body_id, np.int32, default=NO_BODY),
            radius=float(radius),
        )
        ps.validate()
        return ps

    @classmethod
    def empty(cls, radius: float) -> "ParticleSet":
        z3 = np.zeros((0, 3))
        z = np.zeros(0)
        return cls(
            x=z3.copy(), x_pred=z3.copy(), v=z3.copy(),
            inv_mass=z.copy(), scaled_inv_mass=z.copy(),
            mu_s=z.copy(), mu_k=z.copy(),
            phase=np.zeros(0, dtype=np.int8),
            body_id=np.full(0, NO_BODY, dtype=np.int32),
            radius=float(radius),
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def validate(self) -> None:
        n = self.n
        for name in ("x_pred", "v"):
            if getattr(self, name).shape != (n, 3):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected ({n}, 3)")
        for name in ("inv_mass", "scaled_inv_mass", "mu_s", "mu_k", "phase", "body_id"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if self.radius <= 0.0:
            raise ParameterError(f"particle radius must be positive, got {self.radius}")
        if np.any(self.inv_mass < 0.0):
            raise DataError("inverse masses must be >= 0")
        boundary = self.phase == BOUNDARY
        if np.any(self.inv_mass[boundary] != 0.0):
            raise DataError("boundary particles must have inverse mass 0")
        if np.any((self.phase == GRANULAR) & (self.inv_mass == 0.0)):
            raise DataError("granular particles must have positive inverse mass")
        if np.any(self.mu_k < 0.0) or np.any(self.mu_s < self.mu_k):
            raise DataError("friction coefficients must satisfy mu_s >= mu_k >= 0")
        self.check_finite()

    def check_finite(self) -> None:
        """Raise SimulationError naming the first particle with non-finite state."""
        for name in ("x", "x_pred", "v"):
            arr = getattr(self, name)
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                idx = int(np.argmax(bad))
                raise SimulationError(f"non-finite {name} at particle {idx}: {arr[idx]}")

    @staticmethod
    def concatenate(parts: list["ParticleSet"], radius: float) -> "ParticleSet":
        """Merge sets sampled per entity into one simulation set."""
        if not parts:
            return ParticleSet.empty(radius)
        for p in parts:
            if p.radius != radius:
                raise ParameterError("all merged particle sets must share one radius")
        return ParticleSet(
            x=np.concatenate([p.x for p in parts]),
            x_pred=np.concatenate([p.x_pred for p in parts]),
            v=np.concatenate([p.v for p in parts]),
            inv_mass=np.concatenate([p.inv_mass for p in parts]),
            scaled_inv_mass=np.concatenate([p.scaled_inv_mass for p in parts]),
            mu_s=np.concatenate([p.mu_s for p in parts]),
            mu_k=np.concatenate([p.mu_k for p in parts]),
            phase=np.concatenate([p.phase for p in parts]),
            body_id=np.concatenate([p.body_id for p in parts]),
            radius=radius,
        )
