import math

import numpy as np
import pytest

from grainsim import (
    BOUNDARY,
    GRANULAR,
    LrParams,
    NeighborGrid,
    ParticleSet,
    RigidBody,
    SimulationError,
    apply_averaged,
    cfl_substeps,
    generate_contacts,
    predict,
    scaled_mass,
    solve_contact,
    solve_friction,
    step,
    update_scaled_masses,
)
from grainsim.solver import ConstraintBatch
from grainsim import kernels

from oracles import ballistic_positions, brute_pairs


def particle_pair(xi, xj, radius=0.02, inv_mass=(1.0, 1.0), mu_s=0.35, mu_k=0.3):
    ps = ParticleSet.create(
        [xi, xj], radius, inv_mass=np.array(inv_mass), mu_s=mu_s, mu_k=mu_k,
        phase=np.array(
            [GRANULAR if m > 0 else BOUNDARY for m in inv_mass], dtype=np.int8
        ),
    )
    ps.x_pred[:] = ps.x
    return ps


class TestPredict:
    def test_gravity_integration_golden(self):
        ps = ParticleSet.create([[1, 2, 3]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        predict(ps, LrParams(dt=0.005))
        assert np.allclose(ps.v[0], [0, -0.04905, 0], atol=1e-15)
        assert np.allclose(ps.x_pred[0] - ps.x[0], [0, -0.000245250, 0], atol=1e-12)

    def test_boundary_prediction_frozen(self):
        ps = ParticleSet.create(
            [[0, 1, 0]], 0.02, inv_mass=0.0, mu_s=0.35, mu_k=0.3, phase=BOUNDARY
        )
        ps.x_pred[:] = 123.0
        predict(ps, LrParams())
        assert np.array_equal(ps.x_pred, ps.x)
        assert np.all(ps.v == 0)

    def test_rest_state_without_gravity(self):
        ps = ParticleSet.create([[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        predict(ps, LrParams(gravity=[0, 0, 0]))
        assert np.array_equal(ps.x_pred, ps.x)


class TestScaledMass:
    def test_ground_level_unchanged(self):
        assert scaled_mass(2.0, 0.0, 10.0) == 2.0

    def test_one_meter_one_rate(self):
        # m* = m e^{-kh}: at k=h=1 a 1 kg particle weighs 1/e inside contacts.
        inv = scaled_mass(1.0, 1.0, 1.0)
        assert 1.0 / inv == pytest.approx(0.36788, abs=1e-5)

    def test_infinite_mass_stays(self):
        assert scaled_mass(0.0, 5.0, 3.0) == 0.0

    def test_negative_height_clamped(self):
        assert scaled_mass(1.0, -2.0, 3.0) == 1.0

    def test_update_scales_granular_only(self):
        ps = ParticleSet.create(
            [[0, 1, 0], [0, 1, 0]], 0.02,
            inv_mass=np.array([1.0, 0.0]), mu_s=0.35, mu_k=0.3,
            phase=np.array([GRANULAR, BOUNDARY], dtype=np.int8),
        )
        update_scaled_masses(ps, LrParams(mass_scale_k=1.0))
        assert ps.scaled_inv_mass[0] == pytest.approx(math.e)
        assert ps.scaled_inv_mass[1] == 0.0


class TestCflSubsteps:
    def test_at_rest_single_step(self):
        ps = ParticleSet.create([[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        assert cfl_substeps(ps, LrParams(dt=0.005)) == (1, 0.005)

    def test_fast_particle_golden(self):
        ps = ParticleSet.create(
            [[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3,
            velocities=[[8.0, 0, 0]],
        )
        n, dt = cfl_substeps(ps, LrParams(dt=0.005, cfl_factor=0.4))
        assert (n, dt) == (5, 0.001)

    def test_exact_limit_inclusive(self):
        # v dt == cfl r exactly: no substepping.
        ps = ParticleSet.create(
            [[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3,
            velocities=[[1.6, 0, 0]],
        )
        assert cfl_substeps(ps, LrParams(dt=0.005, cfl_factor=0.4)) == (1, 0.005)

    def test_runaway_capped(self):
        ps = ParticleSet.create(
            [[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3,
            velocities=[[1e4, 0, 0]],
        )
        n, _ = cfl_substeps(ps, LrParams(dt=0.005))
        assert n == 16


class TestGenerateContacts:
    def grid_for(self, ps):
        return NeighborGrid.build(ps.x_pred, 3.0 * ps.radius)

    def test_overlapping_pair_found(self):
        ps = particle_pair([0, 0, 0], [0.03, 0, 0])  # 1.5 r apart
        i, j = generate_contacts(ps, self.grid_for(ps))
        assert (i.tolist(), j.tolist()) == ([0], [1])

    def test_touching_pair_excluded(self):
        ps = particle_pair([0, 0, 0], [0.04, 0, 0])  # exactly 2r
        i, j = generate_contacts(ps, self.grid_for(ps))
        assert len(i) == 0

    def test_boundary_boundary_excluded(self):
        ps = particle_pair([0, 0, 0], [0.01, 0, 0], inv_mass=(0.0, 0.0))
        i, j = generate_contacts(ps, self.grid_for(ps))
        assert len(i) == 0

    def test_same_body_excluded(self):
        ps = particle_pair([0, 0, 0], [0.01, 0, 0])
        ps.body_id[:] = 3
        ps.phase[:] = 1
        i, j = generate_contacts(ps, self.grid_for(ps))
        assert len(i) == 0

    def test_matches_brute_force(self, rng):
        pts = rng.random((50, 3)) * 0.2
        ps = ParticleSet.create(pts, 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        ps.x_pred[:] = ps.x
        i, j = generate_contacts(ps, self.grid_for(ps))
        got = sorted(zip(i.tolist(), j.tolist()))
        assert got == brute_pairs(pts, 0.04, strict=True)


class TestSolveContact:
    def test_equal_masses_split_evenly(self):
        r = 0.02
        ps = particle_pair([0, 0, 0], [1.5 * r, 0, 0], radius=r)
        di, dj = solve_contact(0, 1, ps)
        assert np.allclose(di, [-0.25 * r, 0, 0], atol=1e-15)
        assert np.allclose(dj, [+0.25 * r, 0, 0], atol=1e-15)

    def test_boundary_takes_nothing(self):
        r = 0.02
        ps = particle_pair([0, 0, 0], [1.5 * r, 0, 0], radius=r, inv_mass=(1.0, 0.0))
        di, dj = solve_contact(0, 1, ps)
        assert np.allclose(di, [-0.5 * r, 0, 0])
        assert np.allclose(dj, 0.0)

    def test_mass_ratio_golden(self):
        # m_i = 1, m_j = 3: i takes 3/4 of the correction.
        r = 0.02
        overlap = 0.6 * r
        ps = particle_pair(
            [0, 0, 0], [2 * r - overlap, 0, 0], radius=r, inv_mass=(1.0, 1.0 / 3.0)
        )
        di, dj = solve_contact(0, 1, ps)
        assert np.linalg.norm(di) == pytest.approx(0.75 * overlap)
        assert np.linalg.norm(dj) == pytest.approx(0.25 * overlap)

    def test_separation_exact_after_apply(self, rng):
        for _ in range(100):
            r = 0.02
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dist = rng.uniform(0.1, 1.9) * r
            ps = particle_pair(
                [0, 0, 0], dist * direction, radius=r,
                inv_mass=tuple(rng.uniform(0.1, 10.0, 2)),
            )
            di, dj = solve_contact(0, 1, ps)
            gap = (ps.x_pred[1] + dj) - (ps.x_pred[0] + di)
            assert np.linalg.norm(gap) == pytest.approx(2 * r, rel=1e-12)

    def test_coincident_fallback_axis(self):
        ps = particle_pair([0, 0, 0], [0, 0, 0])
        di, dj = solve_contact(0, 1, ps)
        # axis (0+1) % 3 = 1: resolution along y, full diameter apart.
        assert np.linalg.norm((ps.x_pred[1] + dj) - (ps.x_pred[0] + di)) == pytest.approx(
            2 * ps.radius
        )
        assert abs(di[1]) > 0 and di[0] == di[2] == 0


class TestSolveFriction:
    def test_head_on_no_friction(self):
        ps = particle_pair([0, 0, 0], [0.03, 0, 0])
        di, dj = solve_contact(0, 1, ps)
        fi, fj = solve_friction(0, 1, ps, di, dj)
        assert np.allclose(fi, 0) and np.allclose(fj, 0)

    def test_static_branch_golden(self):
        # Pair at 1.5 r: penetration 0.5 r carries the load. Slip 0.1 r is
        # below mu_s * 0.5 r = 0.175 r: removed entirely, split by the
        # (equal) mass ratio.
        r = 0.02
        ps = particle_pair([0, 0, 0], [1.5 * r, 0, 0], radius=r)
        slip = 0.1 * r
        ps.x[0] = ps.x_pred[0] - np.array([0, slip, 0])  # i slid +y this step
        di, dj = solve_contact(0, 1, ps)
        fi, fj = solve_friction(0, 1, ps, di, dj)
        assert np.allclose(fi, [0, -0.5 * slip, 0], atol=1e-15)
        assert np.allclose(fj, [0, +0.5 * slip, 0], atol=1e-15)

    def test_kinetic_branch_golden(self):
        # Slip 2 r over penetration 0.5 r exceeds the static threshold:
        # scaled by min(mu_k * 0.5 r / slip, 1) = 0.075.
        r = 0.02
        ps = particle_pair([0, 0, 0], [1.5 * r, 0, 0], radius=r)
        slip = 2.0 * r
        ps.x[0] = ps.x_pred[0] - np.array([0, slip, 0])
        di, dj = solve_contact(0, 1, ps)
        fi, fj = solve_friction(0, 1, ps, di, dj)
        scale = 0.3 * (0.5 * r) / slip
        assert scale == pytest.approx(0.075)
        assert np.allclose(fi, [0, -0.5 * scale * slip, 0], atol=1e-15)
        assert np.allclose(fj, [0, +0.5 * scale * slip, 0], atol=1e-15)

    def test_no_load_no_friction(self):
        # A separated pair carries no normal load; crafted deltas produce no
        # friction response.
        r = 0.02
        ps = particle_pair([0, 0, 0], [2.5 * r, 0, 0], radius=r)
        ps.x[0] = ps.x_pred[0] - np.array([0, 0.5 * r, 0])
        fi, fj = solve_friction(0, 1, ps, np.zeros(3), np.zeros(3))
        assert np.allclose(fi, 0) and np.allclose(fj, 0)

    def test_kinetic_never_exceeds_static(self, rng):
        r = 0.02
        for _ in range(50):
            ps = particle_pair([0, 0, 0], [1.2 * r, 0, 0], radius=r)
            slip = rng.uniform(0.1, 4.0) * r
            ps.x[0] = ps.x_pred[0] - np.array([0, slip, 0])
            di, dj = solve_contact(0, 1, ps)
            fi, _ = solve_friction(0, 1, ps, di, dj)
            static_magnitude = 0.5 * slip
            assert np.linalg.norm(fi) <= static_magnitude + 1e-15

    def test_cross_friction_used(self):
        # One frictionless particle disables friction for the pair.
        r = 0.02
        ps = particle_pair([0, 0, 0], [1.5 * r, 0, 0], radius=r)
        ps.mu_s[1] = ps.mu_k[1] = 0.0
        slip = 2.0 * r
        ps.x[0] = ps.x_pred[0] - np.array([0, slip, 0])
        di, dj = solve_contact(0, 1, ps)
        fi, fj = solve_friction(0, 1, ps, di, dj)
        assert np.allclose(fi, 0) and np.allclose(fj, 0)


class TestApplyAveraged:
    def test_single_constraint_moves_exactly(self):
        ps = ParticleSet.create([[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        batch = ConstraintBatch.for_pairs(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 1
        )
        batch.dx_sum[0] = [0.5, 0, 0]
        batch.count[0] = 1
        apply_averaged(batch, ps)
        assert np.allclose(ps.x_pred[0], [0.5, 0, 0])
        assert batch.count[0] == 0 and np.all(batch.dx_sum == 0)

    def test_cancellation(self):
        ps = ParticleSet.create([[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        batch = ConstraintBatch.for_pairs(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 1
        )
        batch.dx_sum[0] = [0.5 - 0.5, 0, 0]
        batch.count[0] = 2
        apply_averaged(batch, ps)
        assert np.allclose(ps.x_pred[0], 0)

    def test_mean_of_three_golden(self):
        ps = ParticleSet.create([[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        batch = ConstraintBatch.for_pairs(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 1
        )
        batch.dx_sum[0] = [1.0 + 1.0 + 4.0, 0, 0]
        batch.count[0] = 3
        apply_averaged(batch, ps)
        assert np.allclose(ps.x_pred[0], [2, 0, 0])

    def test_stabilization_writes_both(self):
        ps = ParticleSet.create([[0, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        batch = ConstraintBatch.for_pairs(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 1
        )
        batch.dx_sum[0] = [0.1, 0, 0]
        batch.count[0] = 1
        apply_averaged(batch, ps, also_to_x=True)
        assert np.allclose(ps.x[0], [0.1, 0, 0])
        assert np.allclose(ps.x_pred[0], [0.1, 0, 0])


class TestKernelAgainstReference:
    def test_fused_kernel_matches_single_pair_ops(self, rng):
        """The batch kernel must agree with the composed reference ops."""
        r = 0.02
        for trial in range(200):
            xi = rng.normal(size=3) * 0.01
            xj = xi + rng.normal(size=3) * r
            ps = particle_pair(
                xi, xj, radius=r,
                inv_mass=tuple(rng.uniform(0.2, 5.0, 2)),
                mu_s=0.35, mu_k=0.3,
            )
            ps.x[0] -= rng.normal(size=3) * r  # prior displacement
            ps.x[1] -= rng.normal(size=3) * r
            d = np.linalg.norm(ps.x_pred[1] - ps.x_pred[0])
            batch = ConstraintBatch.for_pairs(
                np.array([0], dtype=np.int64), np.array([1], dtype=np.int64), 2,
                np.array([max(2 * r - d, 0.0)]),
            )
            kernels.solve_pairs(
                ps.x_pred, ps.x_pred, ps.x, ps.scaled_inv_mass, ps.mu_s, ps.mu_k,
                batch.pair_i, batch.pair_j, batch.pair_pen, ps.radius, True,
                batch.dx_sum, batch.count,
            )
            if d >= 2 * r:
                assert np.all(batch.count == 0)
                continue
            di, dj = solve_contact(0, 1, ps)
            fi, fj = solve_friction(0, 1, ps, di, dj)
            assert np.allclose(batch.dx_sum[0], di + fi, atol=1e-14)
            assert np.allclose(batch.dx_sum[1], dj + fj, atol=1e-14)
            assert batch.count.tolist() == [1, 1]


class TestStep:
    def test_empty_scene_noop(self):
        ps = ParticleSet.empty(0.02)
        info = step(ps, [], LrParams())
        assert info.substeps == 0

    def test_free_fall_matches_closed_form(self):
        # Large radius keeps the CFL condition inactive over the whole fall.
        ps = ParticleSet.create([[0, 0, 0]], 1.0, inv_mass=1.0, mu_s=0.35, mu_k=0.3)
        params = LrParams(dt=0.005)
        for _ in range(100):
            step(ps, [], params)
        expected = ballistic_positions([0, 0, 0], [0, 0, 0], [0, -9.81, 0], 0.005, 100)
        assert abs(ps.x[0, 1] - expected[1]) <= 1e-12 * abs(expected[1])

    def test_particle_rests_on_boundary_floor(self):
        r = 0.02
        # Regular floor lattice beneath one free particle.
        xs = np.arange(-0.06, 0.0601, 0.9 * 2 * r)
        boundary = np.array([[x, 0.0, z] for x in xs for z in xs])
        pts = np.vstack([[0.001, 2.05 * r, 0.001], boundary])
        ps = ParticleSet.create(
            pts, r,
            inv_mass=np.array([1.0] + [0.0] * len(boundary)),
            mu_s=0.35, mu_k=0.3,
            phase=np.array([GRANULAR] + [BOUNDARY] * len(boundary), dtype=np.int8),
        )
        params = LrParams(dt=0.005)
        for _ in range(100):
            step(ps, [], params)  # drop and come to rest
        y0 = ps.x[0, 1]
        for _ in range(100):
            step(ps, [], params)
        assert abs(ps.x[0, 1] - y0) < 0.05 * r  # parked: no vertical drift
        assert np.linalg.norm(ps.v[0]) < 1e-3
        assert np.all(ps.x[1:, 1] == 0.0)  # boundary never moves

    def test_momentum_symmetry_of_contact_deltas(self, rng):
        # Position-level momentum conservation of the pair resolution.
        r = 0.02
        for _ in range(100):
            inv = rng.uniform(0.2, 5.0, 2)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            ps = particle_pair(
                [0, 0, 0], rng.uniform(0.2, 1.9) * r * direction,
                radius=r, inv_mass=tuple(inv),
            )
            di, dj = solve_contact(0, 1, ps)
            residual = di / inv[0] + dj / inv[1]
            scale = max(np.linalg.norm(di / inv[0]), 1e-300)
            assert np.linalg.norm(residual) <= 1e-10 * scale

    def test_nonfinite_state_raises_with_index(self):
        ps = ParticleSet.create(
            [[0, 0, 0], [1, 0, 0]], 0.02, inv_mass=1.0, mu_s=0.35, mu_k=0.3
        )
        ps.v[1, 0] = np.inf
        with pytest.raises(SimulationError, match="particle 1"):
            step(ps, [], LrParams())

    def test_mean_penetration_decreases_over_iterations(self):
        """More solver iterations leave less overlap (seeded ensemble mean)."""
        from oracles import brute_pairs as bp

        r = 0.02

        def mean_penetration(base, iterations):
            ps = ParticleSet.create(
                base.copy(), r, inv_mass=1.0, mu_s=0.35, mu_k=0.3
            )
            params = LrParams(dt=0.005, gravity=[0, 0, 0],
                              solver_iterations=iterations,
                              stabilization_iterations=0)
            step(ps, [], params)
            pen = [
                2 * r - np.linalg.norm(ps.x[j] - ps.x[i])
                for i, j in bp(ps.x, 2 * r, strict=True)
            ]
            return float(np.mean(pen)) if pen else 0.0

        checkpoints = np.zeros(3)
        for seed in range(5):
            base = np.random.default_rng(seed).random((80, 3)) * (6 * r)
            checkpoints += [mean_penetration(base, k) for k in (3, 8, 16)]
        assert checkpoints[1] <= checkpoints[0] + 1e-12
        assert checkpoints[2] <= checkpoints[1] + 1e-12
