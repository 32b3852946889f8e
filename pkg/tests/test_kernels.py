import numpy as np
import pytest

from cate_transfer.data_io import Role, SiteSample, UnitRecord
from cate_transfer.errors import (
    InsufficientLocalDataError,
    NoPairsError,
    ValidationError,
)
from cate_transfer.kernels import (
    KernelFamily,
    KernelSpec,
    dyadic_grid,
    dyadic_local_linear,
    h_rate_rule,
    kernel_eval,
    local_linear_mean,
    loclin_mean_grid,
)

GAUSS = KernelSpec(family=KernelFamily.GAUSSIAN, bandwidth=0.4)


def make_site(x, y, d=None, sid="s"):
    x = np.atleast_2d(np.asarray(x, dtype=float).reshape(len(y), -1))
    d = np.zeros(len(y), dtype=int) if d is None else np.asarray(d, dtype=int)
    recs = tuple(UnitRecord(sid, tuple(xi), int(di), float(yi))
                 for xi, di, yi in zip(x, d, y))
    return SiteSample(sid, recs, Role.EXPERIMENTAL)


class TestKernelEval:
    def test_gaussian_at_zero(self):
        assert kernel_eval(GAUSS, [0.0]) == pytest.approx(1.0 / np.sqrt(2 * np.pi), abs=1e-12)

    def test_epanechnikov_boundary(self):
        spec = KernelSpec(family=KernelFamily.EPANECHNIKOV, bandwidth=1.0)
        assert kernel_eval(spec, [1.0]) == 0.0
        assert kernel_eval(spec, [0.0]) == pytest.approx(0.75)

    def test_gaussian_product_form(self):
        assert kernel_eval(GAUSS, [0.0, 0.0]) == pytest.approx(1.0 / (2 * np.pi), abs=1e-12)

    def test_symmetry(self):
        u = np.array([0.3, -0.7])
        assert kernel_eval(GAUSS, u) == kernel_eval(GAUSS, -u)

    def test_integrates_to_one(self):
        # quadrature check on a wide 1-d grid
        z = np.linspace(-12, 12, 20001)
        vals = np.array([kernel_eval(GAUSS, [u]) for u in z[::100]])
        total = np.trapezoid(vals, z[::100])
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_invalid_bandwidth(self):
        with pytest.raises(ValidationError):
            KernelSpec(bandwidth=0.0)


class TestLocalLinearMean:
    @pytest.mark.parametrize("h", [0.1, 0.5, 2.0])
    @pytest.mark.parametrize("d", [1, 2])
    def test_affine_exactness(self, h, d):
        rng = np.random.default_rng(7)
        X = rng.random((80, d))
        beta = np.arange(1, d + 1, dtype=float)
        y = 2.0 + X @ beta
        site = make_site(X, y, d=np.ones(len(y)))
        spec = KernelSpec(bandwidth=h)
        x0 = np.full(d, 0.45)
        got = local_linear_mean(site, 1, x0, spec)
        assert got == pytest.approx(2.0 + x0 @ beta, abs=1e-8)

    def test_constant_data(self):
        rng = np.random.default_rng(1)
        site = make_site(rng.random(30), np.full(30, 7.0))
        assert local_linear_mean(site, 0, [0.5], GAUSS) == pytest.approx(7.0, abs=1e-10)

    def test_single_unit_insufficient(self):
        site = make_site([0.5], [1.0])
        with pytest.raises(InsufficientLocalDataError):
            local_linear_mean(site, 0, [0.5], GAUSS)

    def test_scaling_equivariance(self):
        rng = np.random.default_rng(3)
        x = rng.random(40)
        y = np.sin(4 * x) + 0.1 * rng.standard_normal(40)
        v1 = local_linear_mean(make_site(x, y), 0, [0.4], GAUSS)
        v3 = local_linear_mean(make_site(x, 3.0 * y), 0, [0.4], GAUSS)
        assert v3 == pytest.approx(3.0 * v1, rel=1e-12)

    def test_unit_reweight_is_identity(self):
        rng = np.random.default_rng(4)
        x = rng.random(40)
        y = x**2
        site = make_site(x, y)
        plain = local_linear_mean(site, 0, [0.5], GAUSS)
        ratio_one = local_linear_mean(site, 0, [0.5], GAUSS, reweight=np.ones(40))
        assert ratio_one == plain

    def test_nadaraya_watson_fallback_on_degenerate_design(self):
        # all mass at a single covariate value -> singular local design
        site = make_site(np.full(10, 0.5), np.linspace(0, 1, 10))
        vals, diag = loclin_mean_grid(site.x, site.y, np.array([[0.5]]), GAUSS)
        assert vals[0] == pytest.approx(0.5)
        assert diag.degenerate_points == [0]

    def test_mass_threshold(self):
        spec = KernelSpec(family=KernelFamily.EPANECHNIKOV, bandwidth=0.05)
        site = make_site(np.linspace(0, 0.2, 12), np.ones(12))
        with pytest.raises(InsufficientLocalDataError) as err:
            local_linear_mean(site, 0, [0.9], spec)
        assert err.value.site_id == "s"

    def test_brute_force_oracle(self):
        # direct weighted least squares at each point
        rng = np.random.default_rng(11)
        X = rng.random((50, 1))
        y = np.cos(3 * X[:, 0]) + 0.2 * rng.standard_normal(50)
        pts = np.array([[0.3], [0.6], [0.8]])
        vals, _ = loclin_mean_grid(X, y, pts, GAUSS)
        for j, p in enumerate(pts):
            w = np.exp(-0.5 * ((X[:, 0] - p[0]) / 0.4) ** 2) / np.sqrt(2 * np.pi)
            Z = np.column_stack([np.ones(50), X[:, 0] - p[0]])
            beta = np.linalg.solve(Z.T @ (w[:, None] * Z), Z.T @ (w * y))
            assert vals[j] == pytest.approx(beta[0], abs=1e-10)


def brute_force_dyadic(X1, Y1, X2, Y2, x1, x2, h, excluded=()):
    """Direct WLS over ordered pairs, the independent oracle for dyadic fits."""
    n1, n2 = len(Y1), len(Y2)
    rows, resp, wts = [], [], []
    for i in range(n1):
        for j in range(n2):
            if (i, j) in excluded:
                continue
            w = (np.exp(-0.5 * ((X1[i] - x1) / h) ** 2) / np.sqrt(2 * np.pi)
                 * np.exp(-0.5 * ((X2[j] - x2) / h) ** 2) / np.sqrt(2 * np.pi))
            rows.append([1.0, X1[i] - x1, X2[j] - x2])
            resp.append(Y1[i] * Y2[j])
            wts.append(w)
    Z = np.array(rows)
    w = np.array(wts)
    b = np.linalg.solve(Z.T @ (w[:, None] * Z), Z.T @ (w * np.array(resp)))
    return b[0]


class TestDyadic:
    def test_constant_outcomes(self):
        rng = np.random.default_rng(2)
        site = make_site(rng.random(30), np.full(30, 5.0))
        got = dyadic_local_linear(site, 0, 0, [0.3], [0.7], GAUSS)
        assert got == pytest.approx(25.0, abs=1e-9)

    def test_single_unit_no_pairs(self):
        site = make_site([0.5], [1.0])
        with pytest.raises(NoPairsError):
            dyadic_local_linear(site, 0, 0, [0.4], [0.6], GAUSS)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(9)
        site = make_site(rng.random(25), rng.standard_normal(25))
        a = dyadic_local_linear(site, 0, 0, [0.31], [0.74], GAUSS)
        b = dyadic_local_linear(site, 0, 0, [0.74], [0.31], GAUSS)
        assert a == b

    def test_scaling_square(self):
        rng = np.random.default_rng(10)
        x = rng.random(25)
        y = 1.0 + x + 0.3 * rng.standard_normal(25)
        v1 = dyadic_local_linear(make_site(x, y), 0, 0, [0.3], [0.7], GAUSS)
        v2 = dyadic_local_linear(make_site(x, 2.0 * y), 0, 0, [0.3], [0.7], GAUSS)
        assert v2 == pytest.approx(4.0 * v1, rel=1e-10)

    def test_bilinear_exact_on_symmetric_clouds(self):
        # two disjoint symmetric clouds around x1 and x2, Y = X, compact kernel
        spec = KernelSpec(family=KernelFamily.EPANECHNIKOV, bandwidth=0.08)
        x1, x2 = 0.3, 0.7
        offsets = np.array([-0.02, -0.01, 0.01, 0.02])
        x = np.concatenate([x1 + offsets, x2 + offsets])
        site = make_site(x, x.copy())
        got = dyadic_local_linear(site, 0, 0, [x1], [x2], spec)
        assert got == pytest.approx(x1 * x2, abs=1e-12)

    def test_matches_brute_force_same_arm(self):
        rng = np.random.default_rng(21)
        x = rng.random(14)
        y = np.sin(5 * x) + 0.1 * rng.standard_normal(14)
        site = make_site(x, y)
        excluded = {(i, i) for i in range(14)}
        for x1, x2 in [(0.3, 0.6), (0.5, 0.5), (0.8, 0.2)]:
            got = dyadic_local_linear(site, 0, 0, [x1], [x2], GAUSS)
            want = brute_force_dyadic(x, y, x, y, x1, x2, 0.4, excluded)
            assert got == pytest.approx(want, rel=1e-9)

    def test_matches_brute_force_cross_arm(self):
        rng = np.random.default_rng(22)
        x = rng.random(20)
        y = x + 0.2 * rng.standard_normal(20)
        d = (rng.random(20) < 0.5).astype(int)
        if d.sum() in (0, 20):
            d[0] = 1 - d[0]
        site = make_site(x, y, d=d)
        got = dyadic_local_linear(site, 1, 0, [0.4], [0.6], GAUSS)
        want = brute_force_dyadic(x[d == 1], y[d == 1], x[d == 0], y[d == 0],
                                  0.4, 0.6, 0.4)
        assert got == pytest.approx(want, rel=1e-9)

    def test_grid_matches_pointwise(self):
        rng = np.random.default_rng(23)
        x = rng.random(18)[:, None]
        y = 1.0 + x[:, 0]
        pts = np.array([[0.25], [0.5], [0.75]])
        idx = np.arange(18)
        vals, _ = dyadic_grid(x, y, x, y, pts, pts, GAUSS, overlap=(idx, idx))
        site = make_site(x[:, 0], y)
        for a in range(3):
            for b in range(3):
                want = dyadic_local_linear(site, 0, 0, pts[a], pts[b], GAUSS)
                assert vals[a, b] == pytest.approx(want, rel=1e-12)

    def test_pair_exclusion_matters(self):
        # with own pairs included, noise products would contaminate the fit
        rng = np.random.default_rng(24)
        x = rng.random(60)
        y = 2.0 + 3.0 * rng.standard_normal(60)
        site = make_site(x, y)
        got = dyadic_local_linear(site, 0, 0, [0.5], [0.5], GAUSS)
        # E[Y_i Y_j] = 4 for i != j, while E[Y_i^2] = 13
        assert abs(got - 4.0) < 3.0


def test_h_rate_rule_monotone():
    assert h_rate_rule(200, 800, 1) < h_rate_rule(50, 200, 1)
    assert h_rate_rule(50, 200, 2) > h_rate_rule(50, 200, 1)
