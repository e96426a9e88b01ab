"""Rigid-body particle groups: shape matching and kinematic driving.

A rigid body is a set of solver particles plus their offsets from the rest
centroid. Dynamic bodies are pulled back to the best-fit rigid transform of
the rest pose each solver iteration (two-way coupling); kinematic bodies are
moved to an externally prescribed transform with infinite mass, so they push
the material without being pushed back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ParameterError

DYNAMIC = "dynamic"
KINEMATIC = "kinematic"

_POLAR_TOL = 1e-12
_POLAR_MAX_ITER = 50


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (Rodrigues)."""
    aa = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(aa)
    if angle < 1e-12:
        return np.eye(3)
    x, y, z = aa / angle
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _quat_from_axis_angle(aa):
    aa = np.asarray(aa, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(aa)
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = aa / angle
    half = angle / 2.0
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def _quat_slerp(q0, q1, t):
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 0.9995:
        out = q0 + t * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return (math.sin((1.0 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


class ConstantTarget:
    """Mutable kinematic target; the live session nudges it between steps."""

    def __init__(self, rotation=None, translation=(0.0, 0.0, 0.0)):
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        self.translation = np.asarray(translation, dtype=np.float64).copy()

    def at(self, t: float):
        return self.rotation, self.translation

    def nudge(self, d_translation, d_axis_angle):
        self.translation = self.translation + np.asarray(d_translation, dtype=np.float64)
        self.rotation = axis_angle_to_matrix(d_axis_angle) @ self.rotation

    def set_to(self, translation, axis_angle):
        self.translation = np.asarray(translation, dtype=np.float64).copy()
        self.rotation = axis_angle_to_matrix(axis_angle)


class KeyframeTrack:
    """Keyframed rigid transform: times -> (translation, axis-angle).

    Translations interpolate linearly, rotations by quaternion slerp; the
    track clamps at both ends.
    """

    def __init__(self, times, translations, axis_angles):
        self.times = np.asarray(times, dtype=np.float64)
        if len(self.times) == 0:
            raise ParameterError("keyframe track needs at least one keyframe")
        if np.any(np.diff(self.times) < 0):
            raise ParameterError("keyframe times must be non-decreasing")
        self.translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        self.quats = np.array([_quat_from_axis_angle(aa) for aa in axis_angles])

    def at(self, t: float):
        times = self.times
        if t <= times[0]:
            return _quat_to_matrix(self.quats[0]), self.translations[0]
        if t >= times[-1]:
            return _quat_to_matrix(self.quats[-1]), self.translations[-1]
        k = int(np.searchsorted(times, t, side="right")) - 1
        span = times[k + 1] - times[k]
        f = 0.0 if span <= 0 else (t - times[k]) / span
        trans = (1.0 - f) * self.translations[k] + f * self.translations[k + 1]
        rot = _quat_to_matrix(_quat_slerp(self.quats[k], self.quats[k + 1], f))
        return rot, trans


@dataclass
class RigidBody:
    """A group of solver particles acting as one rigid object."""

    indices: np.ndarray        # (k,) particle indices into the ParticleSet
    rest_offsets: np.ndarray   # (k, 3) offsets from the rest centroid, sum 0
    kind: str = DYNAMIC
    body_id: int = 0
    track: object | None = None   # kinematic target provider: .at(t) -> (R, t)
    prev_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    rest_centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_particles(cls, indices, positions, kind=DYNAMIC, body_id=0,
                       track=None) -> "RigidBody":
        indices = np.asarray(indices, dtype=np.int64)
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(indices) != len(pos):
            raise ParameterError("indices and rest positions must pair up")
        centroid = pos.mean(axis=0)
        offsets = pos - centroid
        offsets -= offsets.mean(axis=0)  # make the zero-sum exact
        if kind == DYNAMIC:
            if len(indices) < 4:
                raise ParameterError("a dynamic body needs at least 4 particles")
            s = np.linalg.svd(offsets, compute_uv=False)
            if s[-1] <= 1e-9 * max(s[0], 1e-30):
                raise ParameterError("dynamic body particles are coplanar; "
                                     "the rotation fit would be rank-deficient")
        return cls(indices=indices, rest_offsets=offsets, kind=kind,
                   body_id=body_id, track=track, rest_centroid=centroid)


def covariance(body: RigidBody, ps) -> np.ndarray:
    """Shape covariance of the body's predicted positions vs the rest pose."""
    cur = ps.x_pred[body.indices]
    centered = cur - cur.mean(axis=0)
    return centered.T @ body.rest_offsets


def polar_rotation(cov: np.ndarray, prev: np.ndarray | None = None) -> np.ndarray:
    """Rotation factor of the polar decomposition of `cov` (det +1).

    Newton iteration with determinant scaling, warm-started from the previous
    rotation when given; converges quadratically on full-rank input. When the
    covariance has collapsed (norm below 1e-12) the previous rotation is
    returned unchanged.
    """
    fallback = np.eye(3) if prev is None else prev
    norm = np.linalg.norm(cov)
    if not np.isfinite(norm) or norm < 1e-12:
        return fallback.copy()
    x = cov if prev is None else prev.T @ cov
    x = x / np.linalg.norm(x)
    for _ in range(_POLAR_MAX_ITER):
        det = np.linalg.det(x)
        if abs(det) < 1e-12:
            return fallback.copy()
        gamma = abs(det) ** (-1.0 / 3.0)
        gamma = min(max(gamma, 1e-4), 1e4)
        x_next = 0.5 * (gamma * x + np.linalg.inv(x).T / gamma)
        if np.linalg.norm(x_next - x) <= _POLAR_TOL * np.linalg.norm(x_next):
            x = x_next
            break
        x = x_next
    rot = x
    if np.linalg.det(rot) < 0.0:
        # Reflection: flip the axis of the smallest singular value.
        sym = rot.T @ (cov if prev is None else prev.T @ cov)
        w, vecs = np.linalg.eigh(0.5 * (sym + sym.T))
        v = vecs[:, 0]
        rot = rot @ (np.eye(3) - 2.0 * np.outer(v, v))
    if prev is not None:
        rot = prev @ rot
    return rot


def shape_match(body: RigidBody, ps) -> np.ndarray:
    """Per-particle deltas moving the body onto its rigid goal configuration.

    Updates the body's cached rotation for warm-starting the next call.
    """
    if body.kind != DYNAMIC:
        raise ParameterError("shape matching applies to dynamic bodies only")
    cur = ps.x_pred[body.indices]
    center = cur.mean(axis=0)
    cov = (cur - center).T @ body.rest_offsets
    rot = polar_rotation(cov, body.prev_rotation)
    body.prev_rotation = rot
    goals = body.rest_offsets @ rot.T + center
    return goals - cur


def accumulate_shape_matching(bodies, ps, dx_sum, count) -> None:
    """Add shape-matching deltas of all dynamic bodies into the averaging
    buffers (each body counts as one constraint per particle)."""
    for body in bodies:
        if body.kind != DYNAMIC:
            continue
        deltas = shape_match(body, ps)
        dx_sum[body.indices] += deltas
        count[body.indices] += 1


def drive_kinematic(body: RigidBody, ps, transform, dt: float) -> None:
    """Place a kinematic body at the target transform for this substep.

    Sets predicted positions to the transformed rest pose and velocities to
    the finite-difference rigid motion, so contacts feel the body moving.
    """
    rotation, translation = transform
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    defect = np.linalg.norm(rotation.T @ rotation - np.eye(3))
    if defect > 1e-6:
        raise ParameterError(f"kinematic target rotation is not orthogonal "
                             f"(||R^T R - I|| = {defect:.2e})")
    idx = body.indices
    targets = body.rest_offsets @ rotation.T + translation
    ps.x_pred[idx] = targets
    ps.v[idx] = (targets - ps.x[idx]) / dt
    body.prev_rotation = rotation
