import numpy as np
import pytest

from volterra_control.hamiltonian import (
    hamiltonian_constants,
    minimize_hamiltonian,
    minimize_hamiltonian_batch,
    select_control,
    select_control_batch,
)
from volterra_control.problem import ControlSet

from conftest import make_problem


@pytest.fixture(scope="module")
def quad_problem():
    """U = [-1, 1], r(u, gamma) = gamma, ell = ell0(u) + gamma^2/2."""
    return make_problem()


def ell0(u):
    sq = float(np.sum(np.square(u)))
    return sq / (1.0 + sq)


class TestMinimize:
    def test_zero_z_interior(self, quad_problem):
        u = np.array([0.3])
        ev = minimize_hamiltonian(quad_problem, u, [0.0])
        assert ev.minimizer[0] == pytest.approx(0.0, abs=1e-12)
        assert ev.value == pytest.approx(ell0(u), abs=1e-12)

    def test_interior_minimum(self, quad_problem):
        # gamma^2/2 + z gamma is minimized at gamma = -z, value -z^2/2
        u = np.array([0.3])
        ev = minimize_hamiltonian(quad_problem, u, [0.5])
        assert ev.minimizer[0] == pytest.approx(-0.5, abs=1e-10)
        assert ev.value == pytest.approx(ell0(u) - 0.125, abs=1e-10)

    def test_boundary_minimum(self, quad_problem):
        u = np.array([0.3])
        ev = minimize_hamiltonian(quad_problem, u, [2.0])
        assert ev.minimizer[0] == pytest.approx(-1.0, abs=1e-12)
        assert ev.value == pytest.approx(ell0(u) + 0.5 - 2.0, abs=1e-12)

    def test_off_grid_interior_refined(self, quad_problem):
        # -z is not a grid point: golden refinement must localize it
        u = np.array([0.0])
        z = 0.3137
        ev = minimize_hamiltonian(quad_problem, u, [z])
        assert ev.minimizer[0] == pytest.approx(-z, abs=1e-6)
        assert ev.value == pytest.approx(-z * z / 2.0, abs=1e-10)
        assert ev.gap >= 0.0

    def test_dense_grid_oracle(self, quad_problem):
        # oracle: brute force on a 20001-point grid
        rng = np.random.default_rng(2)
        for _ in range(10):
            u = rng.normal(size=1)
            z = rng.normal(size=1)
            grid = np.linspace(-1.0, 1.0, 20001)
            vals = [
                float(quad_problem.running_cost(u, np.array([g])))
                + z[0] * float(quad_problem.control_drift(u, np.array([g]))[0])
                for g in grid
            ]
            brute = min(vals)
            ev = minimize_hamiltonian(quad_problem, u, z)
            assert ev.value <= brute + 1e-9

    def test_flat_tie_returns_lower_corner(self):
        prob = make_problem(
            control_drift=("zero", {}),
            running_cost=("constant", {"value": 0.7}),
        )
        gamma = select_control(prob, np.array([0.1]), np.array([0.0]))
        assert gamma[0] == pytest.approx(-1.0)

    def test_plugback_reproduces_value(self, quad_problem):
        rng = np.random.default_rng(3)
        u = rng.normal(size=(6, 1))
        z = rng.normal(size=(6, 1))
        vals, gammas, _ = minimize_hamiltonian_batch(quad_problem, u, z)
        replug = quad_problem.running_cost(u, gammas) + np.sum(
            z * quad_problem.control_drift(u, gammas), axis=-1
        )
        assert np.allclose(replug, vals, atol=1e-12)

    def test_batch_matches_scalar(self, quad_problem):
        rng = np.random.default_rng(4)
        u = rng.normal(size=(8, 1))
        z = rng.normal(size=(8, 1))
        vals, gammas, _ = minimize_hamiltonian_batch(quad_problem, u, z)
        for i in range(8):
            ev = minimize_hamiltonian(quad_problem, u[i], z[i])
            assert vals[i] == pytest.approx(ev.value, abs=1e-14)
            assert gammas[i, 0] == pytest.approx(ev.minimizer[0], abs=1e-14)

    def test_two_dimensional_control(self):
        # separable quadratic over a 2-d box: minimizer clamp(-z) per axis
        prob = make_problem(
            m=2,
            noise=((0.3, 0.1),),
            control_drift=("control_identity", {"gain": 1.0}),
            running_cost=("bounded_quadratic_effort", {"cap": 1.0, "effort": 0.5}),
            controls=ControlSet(lo=(-1.0, -1.0), hi=(1.0, 1.0), resolution=41, refinements=25),
        )
        z = np.array([0.4, -1.7])
        gamma = select_control(prob, np.array([0.2]), z)
        assert gamma[0] == pytest.approx(-0.4, abs=1e-5)
        assert gamma[1] == pytest.approx(1.0, abs=1e-12)


class TestProperties:
    def test_concavity_in_z(self, quad_problem):
        # psi is an infimum of affine functions of z
        rng = np.random.default_rng(5)
        for _ in range(20):
            u = rng.normal(size=(1, 1))
            z1, z2 = rng.normal(size=(2, 1)) * 2.0
            v1 = minimize_hamiltonian(quad_problem, u[0], z1).value
            v2 = minimize_hamiltonian(quad_problem, u[0], z2).value
            vm = minimize_hamiltonian(quad_problem, u[0], (z1 + z2) / 2.0).value
            assert vm >= 0.5 * (v1 + v2) - 1e-9

    def test_lipschitz_in_z(self, quad_problem):
        rng = np.random.default_rng(6)
        for _ in range(20):
            u = rng.normal(size=1)
            z1, z2 = rng.normal(size=(2, 1)) * 2.0
            v1 = minimize_hamiltonian(quad_problem, u, z1).value
            v2 = minimize_hamiltonian(quad_problem, u, z2).value
            assert abs(v1 - v2) <= quad_problem.r_bound * abs(z1[0] - z2[0]) + 1e-9


class TestConstants:
    def test_zero_control_drift_gives_zero_slope(self):
        prob = make_problem(
            control_drift=("zero", {}),
            running_cost=("bounded_quadratic", {"cap": 1.0}),
        )
        rng = np.random.default_rng(7)
        consts = hamiltonian_constants(prob, rng.normal(size=(16, 1)), rng.normal(size=(4, 1)))
        assert consts.z_lipschitz == 0.0

    def test_certified_against_structural_bounds(self, quad_problem):
        rng = np.random.default_rng(8)
        consts = hamiltonian_constants(
            quad_problem, rng.normal(size=(24, 1)), rng.normal(size=(6, 1))
        )
        assert consts.z_lipschitz <= quad_problem.r_bound + 1e-9
        assert consts.zero_bound <= quad_problem.ell_bound + 1e-9

    def test_zero_bound_is_sup_of_state_cost(self, quad_problem):
        # at z = 0 the optimal effort is 0, so psi(., 0) = ell0(u)
        rng = np.random.default_rng(9)
        us = rng.normal(size=(32, 1))
        consts = hamiltonian_constants(quad_problem, us, np.zeros((1, 1)))
        expected = max(ell0(u) for u in us)
        assert consts.zero_bound == pytest.approx(expected, abs=1e-12)

    def test_empty_samples_rejected(self, quad_problem):
        with pytest.raises(ValueError):
            hamiltonian_constants(quad_problem, np.zeros((0, 1)), np.zeros((1, 1)))
