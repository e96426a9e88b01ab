import numpy as np
import pytest

from grainsim import (
    KINEMATIC,
    ConstantTarget,
    KeyframeTrack,
    ParameterError,
    ParticleSet,
    RigidBody,
    covariance,
    drive_kinematic,
    polar_rotation,
    shape_match,
)
from grainsim.rigid import DYNAMIC, axis_angle_to_matrix


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_body(rng, n=12, scale=0.1):
    rest = rng.normal(size=(n, 3)) * scale
    ps = ParticleSet.create(rest, 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
    ps.x_pred[:] = ps.x
    body = RigidBody.from_particles(np.arange(n), rest, kind=DYNAMIC, body_id=0)
    return body, ps


class TestRigidBodyConstruction:
    def test_rest_offsets_sum_to_zero(self, rng):
        body, _ = make_body(rng)
        assert np.allclose(body.rest_offsets.sum(axis=0), 0, atol=1e-12)

    def test_dynamic_needs_four_noncoplanar(self):
        flat = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        with pytest.raises(ParameterError):
            RigidBody.from_particles(np.arange(4), flat, kind=DYNAMIC)
        with pytest.raises(ParameterError):
            RigidBody.from_particles(np.arange(3), flat[:3], kind=DYNAMIC)
        # The same set is fine for a kinematic body.
        RigidBody.from_particles(np.arange(4), flat, kind=KINEMATIC)


class TestCovariance:
    def test_rest_pose_symmetric_psd(self, rng):
        body, ps = make_body(rng)
        cov = covariance(body, ps)
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(cov) > -1e-12)

    def test_rotation_factors_out(self, rng):
        body, ps = make_body(rng)
        rot = random_rotation(rng)
        ps.x_pred[body.indices] = body.rest_offsets @ rot.T + np.array([1, 2, 3])
        cov = covariance(body, ps)
        base = body.rest_offsets.T @ body.rest_offsets
        assert np.allclose(cov, rot @ base, atol=1e-10)

    def test_translation_invariant(self, rng):
        body, ps = make_body(rng)
        c0 = covariance(body, ps)
        ps.x_pred[body.indices] += np.array([10.0, -4.0, 2.0])
        assert np.allclose(covariance(body, ps), c0, atol=1e-9)


class TestPolarRotation:
    def test_identity(self):
        assert np.allclose(polar_rotation(np.eye(3)), np.eye(3), atol=1e-12)

    def test_rotation_input_returned(self, rng):
        for _ in range(50):
            rot = random_rotation(rng)
            assert np.allclose(polar_rotation(rot), rot, atol=1e-10)

    def test_symmetric_positive_definite_gives_identity(self):
        assert np.allclose(polar_rotation(np.diag([2.0, 1.0, 1.0])), np.eye(3), atol=1e-12)

    def test_random_full_rank_orthonormal(self, rng):
        for _ in range(1000):
            m = rng.normal(size=(3, 3))
            rot = polar_rotation(m)
            assert np.linalg.norm(rot.T @ rot - np.eye(3)) < 1e-9
            assert np.linalg.det(rot) > 0

    def test_reflection_guard(self, rng):
        # Negative-determinant input still yields a proper rotation, and the
        # result matches the SVD construction with the smallest axis flipped.
        for _ in range(100):
            m = rng.normal(size=(3, 3))
            if np.linalg.det(m) > 0:
                m[0] = -m[0]
            rot = polar_rotation(m)
            assert np.linalg.det(rot) > 0
            assert np.linalg.norm(rot.T @ rot - np.eye(3)) < 1e-9
            u, s, vt = np.linalg.svd(m)
            flip = np.diag([1.0, 1.0, -1.0])
            expected = u @ flip @ vt
            assert np.allclose(rot, expected, atol=1e-7)

    def test_rank_collapse_returns_previous(self):
        prev = random_rotation(np.random.default_rng(5))
        assert np.allclose(polar_rotation(np.zeros((3, 3)), prev), prev)

    def test_warm_start_equivalent(self, rng):
        m = rng.normal(size=(3, 3))
        cold = polar_rotation(m)
        warm = polar_rotation(m, prev=random_rotation(rng))
        assert np.allclose(cold, warm, atol=1e-9)


class TestShapeMatch:
    def test_rest_pose_zero_deltas(self, rng):
        body, ps = make_body(rng)
        assert np.allclose(shape_match(body, ps), 0, atol=1e-12)

    def test_rigid_transform_recovered(self, rng):
        body, ps = make_body(rng)
        rot = axis_angle_to_matrix([0, 0, np.pi / 2])
        ps.x_pred[body.indices] = body.rest_offsets @ rot.T + np.array([0.3, -0.1, 2.0])
        deltas = shape_match(body, ps)
        assert np.allclose(deltas, 0, atol=1e-10)

    def test_goal_configuration_is_rigid(self, rng):
        body, ps = make_body(rng)
        ps.x_pred[body.indices] += rng.normal(size=body.rest_offsets.shape) * 0.02
        deltas = shape_match(body, ps)
        goal = ps.x_pred[body.indices] + deltas
        rest = body.rest_offsets
        for a in range(0, len(rest), 3):
            for b in range(a + 1, len(rest), 4):
                d_goal = np.linalg.norm(goal[a] - goal[b])
                d_rest = np.linalg.norm(rest[a] - rest[b])
                assert d_goal == pytest.approx(d_rest, rel=1e-9)

    def test_idempotent_on_goal(self, rng):
        body, ps = make_body(rng)
        ps.x_pred[body.indices] += rng.normal(size=body.rest_offsets.shape) * 0.05
        deltas = shape_match(body, ps)
        ps.x_pred[body.indices] += deltas
        again = shape_match(body, ps)
        assert np.max(np.abs(again)) < 1e-12

    def test_rotation_equivariance(self, rng):
        body, ps = make_body(rng)
        ps.x_pred[body.indices] += rng.normal(size=body.rest_offsets.shape) * 0.03
        shape_match(body, ps)
        r_prev = body.prev_rotation.copy()
        q = random_rotation(rng)
        ps.x_pred[body.indices] = ps.x_pred[body.indices] @ q.T
        shape_match(body, ps)
        assert np.allclose(body.prev_rotation, q @ r_prev, atol=1e-8)


class TestDriveKinematic:
    def make_kinematic(self, rng, n=8):
        rest = rng.normal(size=(n, 3)) * 0.05
        ps = ParticleSet.create(
            rest, 0.02, inv_mass=0.0, mu_s=0.35, mu_k=0.3,
            phase=np.full(n, 1, dtype=np.int8), body_id=0,
        )
        ps.x_pred[:] = ps.x
        body = RigidBody.from_particles(np.arange(n), rest, kind=KINEMATIC, body_id=0)
        return body, ps

    def test_identity_transform_zero_velocity(self, rng):
        body, ps = self.make_kinematic(rng)
        drive_kinematic(body, ps, (np.eye(3), body.rest_centroid), dt=0.005)
        assert np.allclose(ps.v[body.indices], 0, atol=1e-9)

    def test_translation_velocity(self, rng):
        body, ps = self.make_kinematic(rng)
        t = body.rest_centroid + np.array([0.01, 0, 0])
        drive_kinematic(body, ps, (np.eye(3), t), dt=0.005)
        assert np.allclose(ps.v[body.indices], [2.0, 0, 0], atol=1e-9)

    def test_rotation_rim_speed(self, rng):
        body, ps = self.make_kinematic(rng)
        omega = 0.4  # rad over dt about z
        dt = 0.005
        rot = axis_angle_to_matrix([0, 0, omega])
        drive_kinematic(body, ps, (rot, body.rest_centroid), dt=dt)
        for k, offset in enumerate(body.rest_offsets):
            radius = np.linalg.norm(offset[:2])
            speed = np.linalg.norm(ps.v[body.indices[k]])
            # |v| = 2 sin(w/2) * radius / dt, ~ w r / dt to first order
            expected = 2 * np.sin(omega / 2) * radius / dt
            assert speed == pytest.approx(expected, rel=1e-9, abs=1e-9)

    def test_non_orthogonal_rejected(self, rng):
        body, ps = self.make_kinematic(rng)
        with pytest.raises(ParameterError):
            drive_kinematic(body, ps, (np.eye(3) * 1.01, np.zeros(3)), dt=0.005)


class TestTracks:
    def test_keyframe_interpolation(self):
        track = KeyframeTrack(
            times=[0.0, 1.0],
            translations=[[0, 0, 0], [2, 0, 0]],
            axis_angles=[[0, 0, 0], [0, 0, np.pi]],
        )
        rot, trans = track.at(0.5)
        assert np.allclose(trans, [1, 0, 0])
        assert np.allclose(rot, axis_angle_to_matrix([0, 0, np.pi / 2]), atol=1e-12)

    def test_keyframe_clamps_ends(self):
        track = KeyframeTrack([0.0, 1.0], [[0, 0, 0], [1, 0, 0]], [[0, 0, 0]] * 2)
        assert np.allclose(track.at(-5)[1], [0, 0, 0])
        assert np.allclose(track.at(5)[1], [1, 0, 0])

    def test_constant_target_nudges_compose(self):
        target = ConstantTarget()
        target.nudge([0.1, 0, 0], [0, 0, 0])
        target.nudge([0.1, 0, 0], [0, 0, np.pi / 2])
        rot, trans = target.at(0.0)
        assert np.allclose(trans, [0.2, 0, 0])
        assert np.allclose(rot, axis_angle_to_matrix([0, 0, np.pi / 2]), atol=1e-12)
