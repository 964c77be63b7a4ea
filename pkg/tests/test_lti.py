import math

import numpy as np
import pytest

import yoularen as yr
from yoularen.errors import NumericalError
from yoularen.lti import StateSpace


def random_stable(rng, n, m, p, rho_target=None, d_scale=0.3):
    A = rng.standard_normal((n, n))
    target = rho_target if rho_target is not None else rng.uniform(0.3, 0.95)
    A *= target / yr.spectral_radius(A)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    D = d_scale * rng.standard_normal((p, m))
    return StateSpace(A, B, C, D, ts=1.0)


class TestStateSpace:
    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            StateSpace(np.zeros((2, 3)), np.zeros((2, 1)), np.eye(2), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            StateSpace(np.eye(2), np.zeros((3, 1)), np.eye(2), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            StateSpace(np.eye(2), np.zeros((2, 1)), np.eye(2), np.zeros((2, 2)))

    def test_negative_ts_rejected(self):
        with pytest.raises(ValueError):
            StateSpace(np.eye(1), np.eye(1), np.eye(1), np.zeros((1, 1)), ts=-0.1)


class TestZohDiscretize:
    def test_zero_dynamics(self):
        B = np.array([[1.0, 2.0], [3.0, 4.0], [0.5, -1.0]])
        sys_c = StateSpace(np.zeros((3, 3)), B, np.eye(3), np.zeros((3, 2)))
        sys_d = yr.zoh_discretize(sys_c, 0.25)
        np.testing.assert_allclose(sys_d.A, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(sys_d.B, 0.25 * B, atol=1e-15)

    def test_scalar_closed_form(self):
        sys_c = StateSpace([[-1.0]], [[1.0]], [[1.0]], [[0.0]])
        sys_d = yr.zoh_discretize(sys_c, 0.1)
        assert sys_d.A[0, 0] == pytest.approx(math.exp(-0.1), abs=1e-14)
        assert sys_d.B[0, 0] == pytest.approx(1 - math.exp(-0.1), abs=1e-14)

    def test_cartpole_against_series_oracle(self):
        ts = 0.05
        sys_c = yr.cartpole_ct(1.0)
        sys_d = yr.zoh_discretize(sys_c, ts)
        # truncated Taylor series for exp(M*ts) on the augmented matrix
        n, m = 4, 1
        M = np.zeros((5, 5))
        M[:n, :n] = sys_c.A
        M[:n, n:] = sys_c.B
        E = np.eye(5)
        term = np.eye(5)
        for k in range(1, 30):
            term = term @ (M * ts) / k
            E = E + term
        np.testing.assert_allclose(sys_d.A, E[:n, :n], atol=1e-12)
        np.testing.assert_allclose(sys_d.B, E[:n, n:], atol=1e-12)

    def test_requires_continuous(self):
        sys_d = StateSpace(np.eye(1), np.eye(1), np.eye(1), np.zeros((1, 1)), ts=0.1)
        with pytest.raises(ValueError):
            yr.zoh_discretize(sys_d, 0.1)

    def test_hurwitz_maps_to_schur(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = rng.integers(1, 6)
            A = rng.standard_normal((n, n))
            # shift the spectrum strictly into the left half plane
            A = A - (np.max(np.linalg.eigvals(A).real) + rng.uniform(0.1, 2.0)) * np.eye(n)
            sys_c = StateSpace(A, rng.standard_normal((n, 1)), np.eye(n),
                               np.zeros((n, 1)))
            for ts in (0.01, 0.5, 3.0):
                assert yr.spectral_radius(yr.zoh_discretize(sys_c, ts).A) < 1.0


class TestSpectralRadius:
    def test_identity(self):
        assert yr.spectral_radius(np.eye(3)) == pytest.approx(1.0)

    def test_diagonal(self):
        assert yr.spectral_radius(np.diag([0.5, -0.9])) == pytest.approx(0.9)

    def test_companion_matrix_against_root_oracle(self):
        # z^2 - 1.1 z + 0.3
        comp = np.array([[1.1, -0.3], [1.0, 0.0]])
        expected = max(abs(np.roots([1.0, -1.1, 0.3])))
        assert yr.spectral_radius(comp) == pytest.approx(expected, rel=1e-12)

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            yr.spectral_radius(np.zeros((2, 3)))


class TestDlqr:
    def test_deadbeat_single_step(self):
        Q = np.diag([2.0, 3.0])
        K, P = yr.dlqr(np.zeros((2, 2)), np.eye(2), Q, np.eye(2))
        np.testing.assert_allclose(K, np.zeros((2, 2)), atol=1e-14)
        np.testing.assert_allclose(P, Q, atol=1e-14)

    def test_scalar_against_value_iteration_oracle(self):
        K, P = yr.dlqr([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        # fixed horizon value iteration, written independently
        p = 1.0
        for _ in range(10**6):
            p = 1.0 + p - p * p / (1.0 + p)
        assert P[0, 0] == pytest.approx(p, abs=1e-9)
        assert P[0, 0] == pytest.approx((1 + math.sqrt(5)) / 2, abs=1e-9)

    def test_cartpole_grid_stabilizing(self, plant):
        for rho in plant.rho_grid(50):
            Ad, Bd = plant.realize(rho)
            K, _ = yr.dlqr(Ad, Bd, np.eye(4), np.eye(1))
            assert yr.spectral_radius(Ad - Bd @ K) < 1.0

    def test_riccati_residual(self, plant):
        Ad, Bd = plant.realize(0.7)
        Q = np.diag([10.0, 0.1, 10.0, 0.1])
        R = np.array([[0.01]])
        _, P = yr.dlqr(Ad, Bd, Q, R)
        resid = P - (Q + Ad.T @ P @ Ad
                     - Ad.T @ P @ Bd @ np.linalg.solve(
                         R + Bd.T @ P @ Bd, Bd.T @ P @ Ad))
        assert np.linalg.norm(resid) < 1e-9 * np.linalg.norm(P)

    def test_indefinite_r_rejected(self):
        with pytest.raises(ValueError):
            yr.dlqr(np.eye(1), np.eye(1), np.eye(1), [[-1.0]])


class TestHinfNorm:
    def test_static_gain(self):
        D = np.array([[3.0, 1.0], [0.0, 2.0]])
        sys_d = StateSpace(np.zeros((1, 1)), np.zeros((1, 2)), np.zeros((2, 1)),
                           D, ts=1.0)
        expected = np.linalg.svd(D, compute_uv=False)[0]
        assert yr.hinf_norm(sys_d, method="grid") == pytest.approx(expected)
        assert yr.hinf_norm(sys_d, method="bisect") == pytest.approx(expected, rel=1e-5)

    def test_scalar_peak_at_dc(self):
        sys_d = StateSpace([[0.5]], [[1.0]], [[1.0]], [[0.0]], ts=1.0)
        assert yr.hinf_norm(sys_d, method="grid") == pytest.approx(2.0, rel=1e-9)
        assert yr.hinf_norm(sys_d, method="bisect", tol=1e-9) == pytest.approx(2.0, rel=1e-6)

    def test_grid_vs_bisect_cross_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            sys_d = random_stable(rng, int(rng.integers(1, 9)),
                                  int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            g_grid = yr.hinf_norm(sys_d, method="grid", n_freq=4096)
            g_bis = yr.hinf_norm(sys_d, method="bisect", tol=1e-6)
            assert abs(g_grid - g_bis) <= 1e-3 * g_bis

    def test_similarity_invariance(self):
        rng = np.random.default_rng(4)
        sys_d = random_stable(rng, 5, 2, 2)
        g0 = yr.hinf_norm(sys_d, method="bisect", tol=1e-9)
        for _ in range(5):
            T = rng.standard_normal((5, 5)) + 0.5 * np.eye(5)
            Ti = np.linalg.inv(T)
            sys_t = StateSpace(T @ sys_d.A @ Ti, T @ sys_d.B, sys_d.C @ Ti,
                               sys_d.D, ts=1.0)
            g1 = yr.hinf_norm(sys_t, method="bisect", tol=1e-9)
            assert abs(g1 - g0) < 1e-8 * g0 + 1e-7

    def test_zero_system(self):
        sys_d = StateSpace([[0.5]], [[0.0]], [[1.0]], [[0.0]], ts=1.0)
        assert yr.hinf_norm(sys_d, method="bisect") == 0.0

    def test_unstable_rejected(self):
        sys_d = StateSpace([[1.01]], [[1.0]], [[1.0]], [[0.0]], ts=1.0)
        with pytest.raises(NumericalError):
            yr.hinf_norm(sys_d)
