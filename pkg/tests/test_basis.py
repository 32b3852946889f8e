import numpy as np
import pytest
from scipy.linalg import eigh as generalized_eigh, subspace_angles

from cate_transfer.basis import BasisSet, compute_psi, solve_fpc, solve_optimal_basis
from cate_transfer.densities import UniformDensity
from cate_transfer.errors import (
    GridMismatchError,
    InvalidConfigError,
    NotPsdError,
    RankDeficientWarning,
)
from cate_transfer.operators import DiscretizedFunction, OperatorMatrix, inner_product, make_grid
from cate_transfer.simulator import PopulationConfig, generate_population, oracle_operators

UNIF = UniformDensity((0.0,), (1.0,))


def grid1d(n=12):
    return make_grid(1, ((0.0, 1.0),), n, UNIF)


def op_from_weighted(grid, M):
    """OperatorMatrix whose weighted form equals M."""
    rw = np.sqrt(grid.weights)
    return OperatorMatrix(grid, M / rw[:, None] / rw[None, :])


def rank3_population(seed=0):
    cfg = PopulationConfig(G=20, L=3, sigma=0.0, coeff_sd=(1.0, 0.6, 0.3),
                           link=((0.9, 0.2, 0.0), (0.1, 0.7, 0.3), (0.0, -0.4, 0.8)),
                           exact_coeff_cov=True)
    return generate_population(cfg, seed)


class TestSolveOptimalBasis:
    def test_diagonal_oracle(self):
        g = grid1d(8)
        m = g.m
        Mmm = np.diag([2.0, 1.0] + [0.0] * (m - 2))
        Mmt = np.diag([3.0, 1.0] + [0.0] * (m - 2))
        bs = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt),
                                 a=1e-12, K=2)
        assert bs.lam[0] == pytest.approx(4.5, rel=1e-9)
        assert bs.lam[1] == pytest.approx(1.0, rel=1e-9)
        # phi_1 aligned with the first axis in weighted coordinates
        rw = np.sqrt(g.weights)
        v = rw * bs.phi[0].values
        assert np.max(np.abs(v[1:])) < 1e-6 * abs(v[0])

    def test_zero_cross_covariance_rank_deficient(self):
        g = grid1d(8)
        Mmm = np.eye(g.m)
        with pytest.warns(RankDeficientWarning):
            bs = solve_optimal_basis(op_from_weighted(g, Mmm),
                                     op_from_weighted(g, np.zeros((g.m, g.m))), a=0.1, K=2)
        assert bs.K == 0
        assert bs.lam.size == 0

    def test_matches_independent_generalized_eigensolver(self):
        rng = np.random.default_rng(42)
        g = grid1d(8)
        m = g.m
        A = rng.standard_normal((m, m))
        Mmm = A @ A.T / m
        Mmt = rng.standard_normal((m, m))
        a = 0.1
        bs = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt), a, K=m)
        lam, _ = generalized_eigh(Mmt @ Mmt.T, 0.5 * (Mmm + Mmm.T) + a * np.eye(m))
        lam = lam[::-1]
        assert np.max(np.abs(bs.lam - lam[:bs.K]) / lam[0]) < 1e-10

    def test_constraint_orthonormality(self):
        rng = np.random.default_rng(1)
        g = grid1d(10)
        m = g.m
        A = rng.standard_normal((m, m))
        Mmm = A @ A.T / m
        Mmt = rng.standard_normal((m, m))
        a = 0.05
        bs = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt), a, K=4)
        t_mumu = op_from_weighted(g, Mmm)
        for k in range(bs.K):
            for l in range(bs.K):
                shifted = t_mumu.apply(bs.phi[l]).values + a * bs.phi[l].values
                val = inner_product(bs.phi[k], DiscretizedFunction(g, shifted))
                assert val == pytest.approx(float(k == l), abs=1e-8)

    def test_psi_eigenfunction_identity_on_oracle(self):
        pop = rank3_population()
        g = grid1d(14)
        oo = oracle_operators(pop, g)
        a = 0.05
        bs = solve_optimal_basis(oo.h_mumu, oo.h_mutau, a, K=3)
        w = g.weights
        Hmm, Hmt = oo.h_mumu.kernel, oo.h_mutau.kernel
        T_a = Hmm.T * w[None, :] + a * np.eye(g.m)   # acts on values
        for k in range(3):
            psi = bs.psi[k].values
            pulled = Hmt @ (w * psi)                  # tau -> mu
            solved = np.linalg.solve(T_a, pulled)     # T_mumu_a^{-1}
            pushed = Hmt.T @ (w * solved)             # mu -> tau
            num = np.sqrt(np.sum((pushed - bs.lam[k] * psi) ** 2 * w))
            den = np.sqrt(np.sum(psi**2 * w))
            assert num / den < 1e-8

    def test_svd_identity_on_oracle(self):
        pop = rank3_population(seed=2)
        g = grid1d(12)
        oo = oracle_operators(pop, g)
        a = 0.05
        bs = solve_optimal_basis(oo.h_mumu, oo.h_mutau, a, K=3)
        rw = np.sqrt(g.weights)
        Mmm = oo.h_mumu.weighted()
        Mmt = oo.h_mutau.weighted()
        evals, evecs = np.linalg.eigh(0.5 * (Mmm + Mmm.T))
        R = (evecs * (np.maximum(evals, 0) + a) ** -0.5) @ evecs.T
        Rinv = (evecs * (np.maximum(evals, 0) + a) ** 0.5) @ evecs.T
        C = R @ Mmt
        rng = np.random.default_rng(3)
        for _ in range(4):
            h = rng.standard_normal(g.m)
            hw = rw * h
            lhs = C @ hw
            rhs = np.zeros(g.m)
            for k in range(bs.K):
                xi = Rinv @ (rw * bs.phi[k].values)
                psi_w = rw * bs.psi[k].values
                rhs += xi * float(psi_w @ hw)
            assert np.max(np.abs(lhs - rhs)) < 1e-8 * max(1.0, np.max(np.abs(lhs)))

    def test_cross_operator_scaling(self):
        rng = np.random.default_rng(5)
        g = grid1d(8)
        m = g.m
        A = rng.standard_normal((m, m))
        Mmm = A @ A.T / m
        Mmt = rng.standard_normal((m, m))
        a = 0.1
        b1 = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt), a, K=3)
        c = 2.5
        b2 = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, c * Mmt), a, K=3)
        assert np.allclose(b2.lam, c**2 * b1.lam, rtol=1e-10)
        for k in range(3):
            diff = min(np.max(np.abs(b2.phi[k].values - b1.phi[k].values)),
                       np.max(np.abs(b2.phi[k].values + b1.phi[k].values)))
            assert diff < 1e-8

    def test_degenerate_eigenvalues_span(self):
        # two equal eigenvalues: compare subspaces, not individual vectors
        g = grid1d(8)
        m = g.m
        Mmm = np.eye(m)
        Mmt = np.diag([2.0, 2.0] + [0.0] * (m - 2))
        bs = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt), 0.05, K=2)
        rw = np.sqrt(g.weights)
        U = np.stack([rw * f.values for f in bs.phi], axis=1)
        E = np.eye(m)[:, :2]
        assert np.max(subspace_angles(U, E)) < 1e-8

    def test_not_psd_rejected(self):
        g = grid1d(8)
        M = -np.eye(g.m)
        with pytest.raises(NotPsdError):
            solve_optimal_basis(op_from_weighted(g, M), op_from_weighted(g, np.eye(g.m)),
                                0.1, 2)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        g = grid1d(10)
        A = rng.standard_normal((g.m, g.m))
        Mmm = A @ A.T / g.m
        Mmt = rng.standard_normal((g.m, g.m))
        b1 = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt), 0.1, 3)
        b2 = solve_optimal_basis(op_from_weighted(g, Mmm), op_from_weighted(g, Mmt), 0.1, 3)
        assert np.array_equal(b1.lam, b2.lam)
        for k in range(3):
            assert np.array_equal(b1.phi[k].values, b2.phi[k].values)
            assert np.array_equal(b1.psi[k].values, b2.psi[k].values)

    def test_sign_convention(self):
        rng = np.random.default_rng(15)
        g = grid1d(10)
        A = rng.standard_normal((g.m, g.m))
        bs = solve_optimal_basis(op_from_weighted(g, A @ A.T / g.m),
                                 op_from_weighted(g, rng.standard_normal((g.m, g.m))),
                                 0.05, 4)
        for f in bs.phi:
            assert f.values[np.argmax(np.abs(f.values))] > 0

    def test_invalid_arguments(self):
        g = grid1d(8)
        op = op_from_weighted(g, np.eye(g.m))
        with pytest.raises(InvalidConfigError):
            solve_optimal_basis(op, op, a=0.0, K=2)
        with pytest.raises(InvalidConfigError):
            solve_optimal_basis(op, op, a=0.1, K=g.m + 1)

    def test_json_round_trip(self):
        pop = rank3_population(seed=7)
        g = grid1d(8)
        oo = oracle_operators(pop, g)
        bs = solve_optimal_basis(oo.h_mumu, oo.h_mutau, 0.05, 2)
        doc = bs.to_json_dict()
        back = BasisSet.from_json_dict(doc)
        assert np.array_equal(back.lam, bs.lam)
        for k in range(bs.K):
            assert np.array_equal(back.phi[k].values, bs.phi[k].values)


class TestComputePsi:
    def test_rank_one_kernel(self):
        g = grid1d(10)
        x = g.points[:, 0]
        u, v = np.sin(2 * x) + 1.5, x**2 + 0.3
        t_mt = OperatorMatrix(g, np.outer(u, v))
        uu = float(np.sum(u * u * g.weights))
        phi = DiscretizedFunction(g, u / uu)
        psi = compute_psi(t_mt, phi)
        assert np.max(np.abs(psi.values - v)) < 1e-10

    def test_null_space(self):
        g = grid1d(10)
        x = g.points[:, 0]
        u, v = x, np.cos(x)
        t_mt = OperatorMatrix(g, np.outer(u, v))
        one = DiscretizedFunction(g, np.ones(g.m))
        u_f = DiscretizedFunction(g, u)
        orth = one.values - (inner_product(u_f, one) / inner_product(u_f, u_f)) * u
        psi = compute_psi(t_mt, DiscretizedFunction(g, orth))
        assert np.max(np.abs(psi.values)) < 1e-12

    def test_grid_mismatch(self):
        g1, g2 = grid1d(8), grid1d(10)
        t_mt = OperatorMatrix(g1, np.eye(8))
        with pytest.raises(GridMismatchError):
            compute_psi(t_mt, DiscretizedFunction(g2, np.ones(10)))


class TestSolveFpc:
    def test_diagonal(self):
        g = grid1d(8)
        M = np.diag([4.0, 1.0] + [0.0] * (g.m - 2))
        fpc = solve_fpc(op_from_weighted(g, M), 2)
        assert np.allclose(fpc.eigenvalues, [4.0, 1.0])

    def test_rank_one(self):
        g = grid1d(10)
        f = np.sin(3 * g.points[:, 0]) + 1.0
        t = OperatorMatrix(g, np.outer(f, f))
        with pytest.warns(RankDeficientWarning):
            fpc = solve_fpc(t, 2)
        assert fpc.K == 1
        norm2 = float(np.sum(f * f * g.weights))
        assert fpc.eigenvalues[0] == pytest.approx(norm2, rel=1e-10)
        got = fpc.eigenfunctions[0].values
        want = f / np.sqrt(norm2)
        assert min(np.max(np.abs(got - want)), np.max(np.abs(got + want))) < 1e-9

    def test_orthonormal_in_weighted_space(self):
        pop = rank3_population(seed=4)
        g = grid1d(12)
        oo = oracle_operators(pop, g)
        fpc = solve_fpc(oo.h_mumu, 3)
        for k in range(3):
            for l in range(3):
                val = inner_product(fpc.eigenfunctions[k], fpc.eigenfunctions[l])
                assert val == pytest.approx(float(k == l), abs=1e-8)

    def test_oracle_matches_kl_construction(self):
        # orthonormal mu-basis with exact coefficient covariance: FPC recovers it
        cfg = PopulationConfig(G=30, L=2, sigma=0.0, coeff_sd=(1.0, 0.5),
                               exact_coeff_cov=True)
        pop = generate_population(cfg, 11)
        g = grid1d(16)
        oo = oracle_operators(pop, g)
        fpc = solve_fpc(oo.h_mumu, 2)
        assert fpc.eigenvalues[0] == pytest.approx(1.0, rel=1e-6)
        assert fpc.eigenvalues[1] == pytest.approx(0.25, rel=1e-6)
        f1 = pop.f_basis[0].evaluate(g.points)
        got = fpc.eigenfunctions[0].values
        assert min(np.max(np.abs(got - f1)), np.max(np.abs(got + f1))) < 1e-6
