import numpy as np
import pytest

from cate_transfer.basis import solve_fpc, solve_optimal_basis
from cate_transfer.data_io import Design, Role
from cate_transfer.densities import UniformDensity
from cate_transfer.errors import CollinearScoresError, InvalidConfigError
from cate_transfer.operators import DiscretizedFunction, make_grid
from cate_transfer.simulator import (
    AssignmentProtocol,
    PopulationConfig,
    SeparableFunction,
    SyntheticPopulation,
    const_fn,
    generate_population,
    oracle_imse,
    oracle_operators,
    poly_fn,
    rate_experiment,
    sample_dataset,
    sin_fn,
)


def grid1d(n=16):
    return make_grid(1, ((0.0, 1.0),), n, UniformDensity((0.0,), (1.0,)))


def two_site_population(f=None, h=None):
    f = f if f is not None else sin_fn(2 * np.pi, amplitude=np.sqrt(2))
    h = h if h is not None else poly_fn((0.2, 1.0))
    unif = UniformDensity((0.0,), (1.0,))
    return SyntheticPopulation(
        d=1, mu_base=const_fn(0.0), tau_base=const_fn(0.0),
        f_basis=(f,), h_basis=(h,),
        m_coeff=np.array([[1.0], [-1.0]]), b_coeff=np.array([[1.0], [-1.0]]),
        site_densities=(unif, unif), propensities=(0.5, 0.5),
        sigma=0.0, bounds=((0.0, 1.0),))


class TestSeparableFunction:
    def test_descriptor_round_trip(self):
        f = SeparableFunction(factors=(("poly", (1.0, 2.0)), ("sin", 3.0, 0.5)), amplitude=1.5)
        back = SeparableFunction.from_descriptor(f.to_descriptor())
        pts = np.array([[0.2, 0.7], [0.9, 0.1]])
        assert np.array_equal(back.evaluate(pts), f.evaluate(pts))

    def test_product_structure(self):
        f = SeparableFunction(factors=(("poly", (0.0, 1.0)), ("cos", 2.0, 0.0)))
        pts = np.array([[0.5, 0.25]])
        assert f.evaluate(pts)[0] == pytest.approx(0.5 * np.cos(0.5))


class TestGeneratePopulation:
    def test_two_site_symmetric_construction(self):
        pop = two_site_population()
        g = grid1d()
        f1 = pop.f_basis[0].evaluate(g.points)
        assert np.allclose(pop.site_mu0(0, g.points), f1)
        assert np.allclose(pop.site_mu0(1, g.points), -f1)

    def test_determinism(self):
        cfg = PopulationConfig(G=8, L=2, sigma=0.3)
        p1 = generate_population(cfg, 123)
        p2 = generate_population(cfg, 123)
        assert np.array_equal(p1.m_coeff, p2.m_coeff)
        assert np.array_equal(p1.b_coeff, p2.b_coeff)
        assert p1.propensities == p2.propensities

    def test_columns_centered_exactly(self):
        cfg = PopulationConfig(G=100, L=3, sigma=0.2, coeff_sd=(1.0, 0.5, 0.25))
        pop = generate_population(cfg, 7)
        assert np.all(pop.m_coeff.sum(axis=0) == 0.0)
        assert np.all(pop.b_coeff.sum(axis=0) == 0.0)

    def test_exact_coeff_cov(self):
        cfg = PopulationConfig(G=40, L=2, sigma=0.0, coeff_sd=(1.0, 0.5),
                               exact_coeff_cov=True)
        pop = generate_population(cfg, 9)
        C = pop.m_coeff.T @ pop.m_coeff / pop.G
        assert np.allclose(C, np.diag([1.0, 0.25]), atol=1e-12)

    def test_small_g_rejected(self):
        with pytest.raises(InvalidConfigError):
            generate_population(PopulationConfig(G=2), 0)

    def test_invalid_link_shape(self):
        cfg = PopulationConfig(G=5, L=2, link=((1.0,),))
        with pytest.raises(InvalidConfigError):
            generate_population(cfg, 0)


class TestSampleDataset:
    def test_noiseless_treated_outcomes_exact(self):
        cfg = PopulationConfig(G=6, L=2, sigma=0.0)
        pop = generate_population(cfg, 21)
        ds = sample_dataset(pop, 50, AssignmentProtocol(seed=5))
        sid_to_g = {f"s{g:03d}": g for g in range(pop.G)}
        for site in ds.experimental:
            g = sid_to_g[site.site_id]
            treated = site.d_treat == 1
            want = pop.site_mu(g, site.x[treated], 1)
            assert np.allclose(site.y[treated], want, atol=1e-12)

    def test_target_emits_only_controls(self):
        pop = generate_population(PopulationConfig(G=5, L=1, sigma=0.1), 3)
        ds = sample_dataset(pop, 40, AssignmentProtocol(seed=9))
        assert np.all(ds.target.d_treat == 0)

    def test_cluster_level_counts(self):
        pop = generate_population(PopulationConfig(G=10, L=1, sigma=0.1), 4)
        ds = sample_dataset(pop, 30, AssignmentProtocol(design=Design.CLUSTER_LEVEL,
                                                        seed=11, share_treated=0.5))
        treated = sum(s.cluster_treatment == 1 for s in ds.experimental)
        assert treated == 5  # round(9 * 0.5 + 0.5)
        assert all(s.period is not None for s in ds.sites)
        assert np.all(ds.target.period == 0)

    def test_determinism(self):
        pop = generate_population(PopulationConfig(G=5, L=1, sigma=0.2), 6)
        d1 = sample_dataset(pop, 25, AssignmentProtocol(seed=77))
        d2 = sample_dataset(pop, 25, AssignmentProtocol(seed=77))
        assert d1.to_json_dict() == d2.to_json_dict()

    def test_forced_target(self):
        pop = generate_population(PopulationConfig(G=5, L=1, sigma=0.2), 6)
        ds = sample_dataset(pop, 25, AssignmentProtocol(seed=1, target_index=3))
        assert ds.target.site_id == "s003"

    def test_n_guard(self):
        pop = generate_population(PopulationConfig(G=5, L=1), 6)
        with pytest.raises(InvalidConfigError):
            sample_dataset(pop, 1, AssignmentProtocol(seed=1))

    def test_covariate_dependent_propensity(self):
        cfg = PopulationConfig(G=5, L=1, sigma=0.1, propensity_slope=0.5,
                               propensity_range=(0.45, 0.55))
        pop = generate_population(cfg, 8)
        ds = sample_dataset(pop, 4000, AssignmentProtocol(seed=9))
        site = ds.experimental[0]
        low = site.d_treat[site.x[:, 0] < 0.3].mean()
        high = site.d_treat[site.x[:, 0] > 0.7].mean()
        assert high - low > 0.1

    def test_treated_share_within_3_sigma(self):
        cfg = PopulationConfig(G=6, L=1, sigma=0.1, propensity_range=(0.4, 0.6))
        for seed in range(4):
            pop = generate_population(cfg, seed)
            ds = sample_dataset(pop, 200, AssignmentProtocol(seed=seed + 100))
            sid_to_g = {f"s{g:03d}": g for g in range(pop.G)}
            for site in ds.experimental:
                p = pop.propensities[sid_to_g[site.site_id]]
                share = site.d_treat.mean()
                assert abs(share - p) <= 3.0 * np.sqrt(p * (1 - p) / 200)


class TestOracleOperators:
    def test_two_site_rank_one(self):
        pop = two_site_population()
        g = grid1d()
        oo = oracle_operators(pop, g)
        f1 = pop.f_basis[0].evaluate(g.points)
        assert np.allclose(oo.h_mumu.kernel, np.outer(f1, f1), atol=1e-12)

    def test_homogeneous_effects_zero_operators(self):
        cfg = PopulationConfig(G=8, L=2, sigma=0.0, effect_sd=(0.0, 0.0))
        pop = generate_population(cfg, 2)
        g = grid1d()
        oo = oracle_operators(pop, g)
        assert np.max(np.abs(oo.h_mutau.kernel)) == 0.0
        assert np.max(np.abs(oo.h_tautau.kernel)) == 0.0

    def test_rank_bound(self):
        cfg = PopulationConfig(G=15, L=2, sigma=0.0)
        pop = generate_population(cfg, 13)
        g = grid1d()
        oo = oracle_operators(pop, g)
        evals = np.linalg.eigvalsh(oo.h_mumu.weighted())[::-1]
        assert evals[2] <= 1e-12 * evals[0]


class TestOracleImse:
    def test_perfect_linear_dependence(self):
        pop = two_site_population()
        g = grid1d()
        f = DiscretizedFunction(g, pop.f_basis[0].evaluate(g.points))
        assert oracle_imse(pop, g, [f]) < 1e-12

    def test_orthogonal_basis_explains_nothing(self):
        pop = two_site_population()
        g = grid1d()
        f1 = pop.f_basis[0].evaluate(g.points)
        # orthogonal to the single mu-direction in the f0 inner product
        v = np.ones(g.m) - (np.sum(f1 * g.weights) / np.sum(f1 * f1 * g.weights)) * f1
        got = oracle_imse(pop, g, [DiscretizedFunction(g, v)])
        h1 = pop.h_basis[0].evaluate(g.points)
        total = float(np.sum(h1**2 * g.weights))  # (1/G) sum_g ||tau_g - tau||^2 = ||h||^2
        assert got == pytest.approx(total, rel=1e-10)

    def test_nonincreasing_in_k(self):
        cfg = PopulationConfig(G=30, L=3, sigma=0.0, coeff_sd=(1.0, 0.7, 0.4),
                               effect_sd=(0.5, 0.5, 0.5))
        pop = generate_population(cfg, 17)
        g = grid1d()
        oo = oracle_operators(pop, g)
        bs = solve_optimal_basis(oo.h_mumu, oo.h_mutau, 1e-6, 3)
        vals = [oracle_imse(pop, g, bs.phi[:k]) for k in (1, 2, 3)]
        assert vals[0] >= vals[1] - 1e-14
        assert vals[1] >= vals[2] - 1e-14

    def test_collinear_scores(self):
        pop = two_site_population()
        g = grid1d()
        f = DiscretizedFunction(g, pop.f_basis[0].evaluate(g.points))
        f2 = DiscretizedFunction(g, 2.0 * f.values)
        with pytest.raises(CollinearScoresError):
            oracle_imse(pop, g, [f, f2])

    def test_optimal_beats_leading_fpc_on_discriminating_dgp(self):
        # large variance in direction 1, all predictive signal through direction 2
        cfg = PopulationConfig(G=40, L=2, sigma=0.0, coeff_sd=(1.0, np.sqrt(0.1)),
                               link=((0.0, 0.0), (0.0, 1.0)), exact_coeff_cov=True)
        pop = generate_population(cfg, 23)
        g = grid1d(20)
        oo = oracle_operators(pop, g)
        bs = solve_optimal_basis(oo.h_mumu, oo.h_mutau, 1e-8, 1)
        fpc = solve_fpc(oo.h_mumu, 1)
        imse_opt = oracle_imse(pop, g, bs.phi)
        imse_fpc = oracle_imse(pop, g, fpc.eigenfunctions)
        assert imse_opt <= 0.8 * imse_fpc


class TestRateExperiment:
    def flat_config(self):
        # fully homogeneous noiseless population: every error source is off
        return PopulationConfig(G=5, L=1, sigma=0.0,
                                mu_base=const_fn(1.0), tau_base=const_fn(0.5),
                                f_basis=(const_fn(1.0),), h_basis=(const_fn(1.0),),
                                coeff_sd=(0.0,), effect_sd=(0.0,))

    def test_noiseless_constant_dgp_at_floor(self):
        rows = rate_experiment(self.flat_config(), [(5, 40), (8, 60)], reps=2, seed=3,
                               points_per_dim=8)
        for row in rows:
            assert row["sup_mu"] < 1e-10
            assert row["sup_h_mumu"] < 1e-10
            assert row["err_lambda1"] < 1e-10

    def test_reproducible_table(self):
        r1 = rate_experiment(self.flat_config(), [(5, 40)], reps=1, seed=3, points_per_dim=8)
        r2 = rate_experiment(self.flat_config(), [(5, 40)], reps=1, seed=3, points_per_dim=8)
        assert r1 == r2

    def test_ladder_must_ascend(self):
        with pytest.raises(InvalidConfigError):
            rate_experiment(self.flat_config(), [(8, 60), (5, 40)], reps=1, seed=0)

    def test_table_export(self, tmp_path):
        from cate_transfer.data_io import read_results
        from cate_transfer.simulator import write_rate_table

        rows = rate_experiment(self.flat_config(), [(5, 40)], reps=1, seed=3,
                               points_per_dim=8)
        jp, cp = str(tmp_path / "rates.json"), str(tmp_path / "rates.csv")
        write_rate_table(rows, json_path=jp, csv_path=cp)
        assert read_results(jp)["rows"] == rows
        lines = open(cp).read().strip().splitlines()
        assert lines[0].startswith("G,n,h,")
        assert len(lines) == 2
