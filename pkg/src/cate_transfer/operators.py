"""Discretization of L2(X, f0) and cross-site moment estimation.

The function space is represented on a tensor-product Gauss-Legendre grid.
A grid carries quadrature weights and the values of the researcher-chosen
weight density f0; their product (renormalized to sum to one) defines the
discrete inner product <f, g> = sum_j f_j g_j w_j. Covariance kernels
H(x1, x2) become matrices on the grid, and the associated integral operators
act through the weighted form W^(1/2) H W^(1/2).

Index convention for the cross-covariance: H_mutau[a, b] pairs the baseline
mean slot at x_a with the treatment-effect slot at x_b, i.e. it estimates
Cov(mu_g(x_a; 0), tau_g(x_b)).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data_io import Dataset, Design, Role, Sampling, SiteSample
from .densities import Density, GaussianDensity, UniformDensity, density_from_descriptor, density_ratio
from .errors import (
    GridMismatchError,
    InsufficientLocalDataError,
    InvalidConfigError,
    NoControlClustersError,
    NoPairsError,
    NoTreatedClustersError,
    UnsupportedDimensionError,
)
from .kernels import KernelSpec, LocalFitDiagnostics, dyadic_grid, loclin_mean_grid
from ._threads import ordered_map


@dataclass
class QuadratureGrid:
    """Tensor-product Gauss-Legendre grid with combined f0 quadrature weights."""

    points: np.ndarray          # (m, d) nodes
    quad_weights: np.ndarray    # (m,) integration rule weights
    f0_values: np.ndarray       # (m,) weight density at the nodes
    weights: np.ndarray         # (m,) combined, renormalized to sum exactly 1
    bounds: tuple[tuple[float, float], ...]
    points_per_dim: int
    f0: Density | None = None
    _key: str = field(init=False, repr=False, default="")

    def __post_init__(self):
        self._key = hashlib.sha256(
            self.points.tobytes() + self.weights.tobytes()).hexdigest()

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def axes(self) -> list[np.ndarray]:
        """Per-dimension node coordinates (the grid is their tensor product)."""
        out = []
        m_rest = self.m
        for c in range(self.d):
            m_rest //= self.points_per_dim
            out.append(self.points[::m_rest, c][:self.points_per_dim].copy())
        return out

    def same_grid(self, other: "QuadratureGrid") -> bool:
        return self is other or self._key == other._key

    def to_json_dict(self) -> dict:
        return {
            "kind": "grid",
            "points": self.points.tolist(),
            "quad_weights": self.quad_weights.tolist(),
            "f0_values": self.f0_values.tolist(),
            "weights": self.weights.tolist(),
            "bounds": [list(b) for b in self.bounds],
            "points_per_dim": self.points_per_dim,
            "f0": None if self.f0 is None else self.f0.to_descriptor(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "QuadratureGrid":
        f0 = doc.get("f0")
        return cls(points=np.array(doc["points"], dtype=float),
                   quad_weights=np.array(doc["quad_weights"], dtype=float),
                   f0_values=np.array(doc["f0_values"], dtype=float),
                   weights=np.array(doc["weights"], dtype=float),
                   bounds=tuple(tuple(b) for b in doc["bounds"]),
                   points_per_dim=int(doc["points_per_dim"]),
                   f0=None if f0 is None else density_from_descriptor(f0))


@dataclass
class DiscretizedFunction:
    """A function known by its values on a quadrature grid."""

    grid: QuadratureGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.m,):
            raise GridMismatchError("value count does not match grid size")
        if not np.all(np.isfinite(self.values)):
            raise InvalidConfigError("discretized function has non-finite values")


@dataclass
class OperatorMatrix:
    """Covariance kernel H on the grid plus its weighted matrix form."""

    grid: QuadratureGrid
    kernel: np.ndarray  # (m, m), kernel[a, b] = H(x_a, x_b)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=float)
        m = self.grid.m
        if self.kernel.shape != (m, m):
            raise GridMismatchError("kernel shape does not match grid size")
        if not np.all(np.isfinite(self.kernel)):
            raise InvalidConfigError("operator kernel has non-finite values")

    def weighted(self) -> np.ndarray:
        """W^(1/2) H W^(1/2), the matrix of the operator in weighted coordinates."""
        rw = np.sqrt(self.grid.weights)
        return self.kernel * rw[:, None] * rw[None, :]

    def apply(self, f: DiscretizedFunction) -> DiscretizedFunction:
        """Integral-operator action: g(x_b) = sum_a H(x_a, x_b) f(x_a) w_a."""
        if not self.grid.same_grid(f.grid):
            raise GridMismatchError("function lives on a different grid")
        return DiscretizedFunction(self.grid, self.kernel.T @ (self.grid.weights * f.values))

    def to_json_dict(self) -> dict:
        return {"kind": "operator", "kernel": self.kernel.tolist()}


def make_grid(d: int, bounds, points_per_dim: int, f0: Density) -> QuadratureGrid:
    """Tensor-product Gauss-Legendre rule on a box, weighted by f0.

    Combined weights quad_weight * f0 are renormalized so that they sum to
    exactly 1.0 in floating point (f0 acts as a probability density on the
    box).
    """
    if d not in (1, 2, 3):
        raise UnsupportedDimensionError(f"supported covariate dimensions are 1-3, got {d}")
    if points_per_dim < 4:
        raise InvalidConfigError("points_per_dim must be at least 4")
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    if len(bounds) != d or any(hi <= lo for lo, hi in bounds):
        raise InvalidConfigError("bounds must give lo < hi per coordinate")

    nodes_1d, weights_1d = [], []
    z, w = np.polynomial.legendre.leggauss(points_per_dim)
    for lo, hi in bounds:
        nodes_1d.append(0.5 * (hi + lo) + 0.5 * (hi - lo) * z)
        weights_1d.append(0.5 * (hi - lo) * w)
    mesh = np.meshgrid(*nodes_1d, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    qw = np.ones(points.shape[0])
    wmesh = np.meshgrid(*weights_1d, indexing="ij")
    for wm in wmesh:
        qw = qw * wm.ravel()

    f0_values = f0.pdf(points)
    if np.any(f0_values <= 0):
        raise InvalidConfigError("f0 must be positive at every grid node")
    combined = qw * f0_values
    combined = combined / combined.sum()
    # nudge the largest weight so the float sum is exactly 1.0
    for _ in range(3):
        resid = 1.0 - combined.sum()
        if resid == 0.0:
            break
        combined[int(np.argmax(combined))] += resid
    return QuadratureGrid(points=points, quad_weights=qw, f0_values=f0_values,
                          weights=combined, bounds=bounds,
                          points_per_dim=points_per_dim, f0=f0)


def default_bounds(ds: Dataset, trim: float = 0.025) -> tuple[tuple[float, float], ...]:
    """Pooled experimental covariate range shrunk to the (trim, 1-trim) quantiles."""
    X = ds.pooled_experimental_x()
    lo = np.quantile(X, trim, axis=0)
    hi = np.quantile(X, 1.0 - trim, axis=0)
    return tuple((float(l), float(h)) for l, h in zip(lo, hi))


def default_f0(ds: Dataset, bounds=None, kind: str = "gaussian") -> Density:
    """Default weight density: Gaussian fit to the pooled experimental sample."""
    X = ds.pooled_experimental_x()
    if kind == "uniform":
        if bounds is None:
            bounds = default_bounds(ds)
        return UniformDensity(tuple(b[0] for b in bounds), tuple(b[1] for b in bounds))
    if kind != "gaussian":
        raise InvalidConfigError(f"unknown default f0 kind {kind!r}")
    mean = tuple(float(v) for v in X.mean(axis=0))
    sd = tuple(float(v) if v > 0 else 1.0 for v in X.std(axis=0))
    return GaussianDensity(mean, sd)


def inner_product(f: DiscretizedFunction, g: DiscretizedFunction) -> float:
    """<f, g> = sum_j f_j g_j w_j on the shared grid."""
    if not f.grid.same_grid(g.grid):
        raise GridMismatchError("inner product needs both functions on the same grid")
    return float(np.sum(f.values * g.values * f.grid.weights))


def norm(f: DiscretizedFunction) -> float:
    return float(np.sqrt(max(inner_product(f, f), 0.0)))


# --- estimation over a dataset ----------------------------------------------


@dataclass
class MeanEstimates:
    """Cross-site mean functions and the per-site fits they average."""

    grid: QuadratureGrid
    mu0: DiscretizedFunction
    mu1: DiscretizedFunction
    tau: DiscretizedFunction
    site_mu0: dict[str, DiscretizedFunction]
    site_mu1: dict[str, DiscretizedFunction]
    mu1_control: DiscretizedFunction | None = None
    diagnostics: LocalFitDiagnostics | None = None


@dataclass
class CovarianceEstimates:
    """Covariance kernels of site-level mean functions."""

    grid: QuadratureGrid
    h_mumu: OperatorMatrix
    h_mutau: OperatorMatrix
    h_tautau: OperatorMatrix | None = None
    diagnostics: LocalFitDiagnostics | None = None


def _site_reweight(ds: Dataset, site: SiteSample, grid: QuadratureGrid) -> np.ndarray | None:
    if ds.sampling is not Sampling.SPARSE:
        return None
    if grid.f0 is None:
        raise InvalidConfigError("sparse reweighting needs the f0 density on the grid")
    return density_ratio(grid.f0, site.covariate_density, site.x)


def _fit_site_mean(site: SiteSample, d_treat: int, grid: QuadratureGrid, spec: KernelSpec,
                   scale: np.ndarray, reweight: np.ndarray | None,
                   period: int | None = None) -> tuple[np.ndarray, LocalFitDiagnostics]:
    mask = site.d_treat == d_treat
    if period is not None:
        mask &= site.period == period
    if not np.any(mask):
        raise InsufficientLocalDataError(
            f"no units with treatment {d_treat}", site_id=site.site_id, d_treat=d_treat)
    try:
        return loclin_mean_grid(site.x[mask], site.y[mask], grid.points, spec, scale=scale,
                                unit_weights=None if reweight is None else reweight[mask])
    except InsufficientLocalDataError as exc:
        raise exc.tagged(site.site_id, d_treat) from None


def estimate_mean_functions(ds: Dataset, grid: QuadratureGrid, spec_mu: KernelSpec,
                            threads: int = 1) -> MeanEstimates:
    """Cross-site average mean functions and per-site baseline fits.

    Within-cluster design: mu(x; d) is the equal-weight average over the
    experimental sites of the per-site local linear fits, tau = mu(.;1) -
    mu(.;0), and the target site contributes only its control-arm fit.

    Cluster-level design: the per-site baseline fit replaces the control-arm
    fit, the follow-up means are averaged separately over treated and control
    clusters, and tau is their difference.
    """
    scale = ds.covariate_scale()
    diag = LocalFitDiagnostics(effective_sample_size=np.inf, min_local_mass=np.inf)

    if ds.design is Design.WITHIN_CLUSTER:
        def work(site: SiteSample):
            rw = _site_reweight(ds, site, grid)
            v0, dg0 = _fit_site_mean(site, 0, grid, spec_mu, scale, rw)
            if site.role is Role.TARGET:
                return v0, None, dg0
            v1, dg1 = _fit_site_mean(site, 1, grid, spec_mu, scale, rw)
            return v0, v1, dg0.merge(dg1)

        results = ordered_map(work, ds.sites, threads)
        site_mu0, site_mu1 = {}, {}
        acc0, acc1 = [], []
        for site, (v0, v1, dg) in zip(ds.sites, results):
            diag = diag.merge(dg)
            site_mu0[site.site_id] = DiscretizedFunction(grid, v0)
            if v1 is not None:
                site_mu1[site.site_id] = DiscretizedFunction(grid, v1)
                acc0.append(v0)
                acc1.append(v1)
        mu0 = np.mean(acc0, axis=0)
        mu1 = np.mean(acc1, axis=0)
        return MeanEstimates(grid=grid,
                             mu0=DiscretizedFunction(grid, mu0),
                             mu1=DiscretizedFunction(grid, mu1),
                             tau=DiscretizedFunction(grid, mu1 - mu0),
                             site_mu0=site_mu0, site_mu1=site_mu1, diagnostics=diag)

    # cluster-level design: baseline fits for everyone, follow-up by arm
    def work(site: SiteSample):
        rw = _site_reweight(ds, site, grid)
        v0, dg = _fit_site_mean(site, 0, grid, spec_mu, scale, rw, period=0)
        v1 = None
        if site.role is Role.EXPERIMENTAL:
            d_follow = int(site.cluster_treatment)
            v1, dg1 = _fit_site_mean(site, d_follow, grid, spec_mu, scale, rw, period=1)
            dg = dg.merge(dg1)
        return v0, v1, dg

    results = ordered_map(work, ds.sites, threads)
    site_mu0, site_mu1 = {}, {}
    base_acc, treat_acc, ctrl_acc = [], [], []
    for site, (v0, v1, dg) in zip(ds.sites, results):
        diag = diag.merge(dg)
        site_mu0[site.site_id] = DiscretizedFunction(grid, v0)
        if site.role is Role.EXPERIMENTAL:
            base_acc.append(v0)
            site_mu1[site.site_id] = DiscretizedFunction(grid, v1)
            (treat_acc if site.cluster_treatment == 1 else ctrl_acc).append(v1)
    if not treat_acc:
        raise NoTreatedClustersError("no treated clusters in the experimental sample")
    if not ctrl_acc:
        raise NoControlClustersError("no control clusters in the experimental sample")
    mu0 = np.mean(base_acc, axis=0)
    mu1_treat = np.mean(treat_acc, axis=0)
    mu1_ctrl = np.mean(ctrl_acc, axis=0)
    return MeanEstimates(grid=grid,
                         mu0=DiscretizedFunction(grid, mu0),
                         mu1=DiscretizedFunction(grid, mu1_treat),
                         tau=DiscretizedFunction(grid, mu1_treat - mu1_ctrl),
                         site_mu0=site_mu0, site_mu1=site_mu1,
                         mu1_control=DiscretizedFunction(grid, mu1_ctrl),
                         diagnostics=diag)


def _site_pair_surface(site: SiteSample, d1: int, d2: int, grid: QuadratureGrid,
                       spec: KernelSpec, scale: np.ndarray, reweight: np.ndarray | None,
                       ) -> tuple[np.ndarray, LocalFitDiagnostics]:
    if site.n < 2:
        raise NoPairsError(f"site {site.site_id!r} has fewer than two units")
    m1 = site.d_treat == d1
    m2 = site.d_treat == d2
    if not np.any(m1) or not np.any(m2):
        raise InsufficientLocalDataError(
            f"no units in arm pair ({d1},{d2})", site_id=site.site_id)
    overlap = None
    if d1 == d2:
        idx = np.arange(int(m1.sum()))
        overlap = (idx, idx)
    w1 = w2 = None
    if reweight is not None:
        w1, w2 = reweight[m1], reweight[m2]
    try:
        return dyadic_grid(site.x[m1], site.y[m1], site.x[m2], site.y[m2],
                           grid.points, grid.points, spec, scale=scale,
                           w1=w1, w2=w2, overlap=overlap)
    except InsufficientLocalDataError as exc:
        raise exc.tagged(site.site_id) from None


def estimate_covariance_kernels(ds: Dataset, grid: QuadratureGrid, spec_H: KernelSpec,
                                threads: int = 1) -> CovarianceEstimates:
    """Covariance kernels H_mumu, H_mutau, H_tautau under within-cluster design.

    For each experimental site the dyadic surfaces M_g(x1, x2; d1, d2) are
    fitted for (d1, d2) in {(0,0), (0,1), (1,1)}; the (1,0) surface is the
    transpose of (0,1). Averages minus products of the (same-bandwidth) mean
    fits give H(d1, d2), and

        H_mumu = H(0,0)   H_mutau = H(0,1) - H(0,0)
        H_tautau = H(1,1) - H(0,1) - H(1,0) + H(0,0)

    with the self-covariances symmetrized as (H + H')/2.
    """
    if ds.design is not Design.WITHIN_CLUSTER:
        raise InvalidConfigError("use estimate_covariance_cluster_design for cluster-level data")
    scale = ds.covariate_scale()
    sites = ds.experimental

    def work(site: SiteSample):
        rw = _site_reweight(ds, site, grid)
        s00, dg0 = _site_pair_surface(site, 0, 0, grid, spec_H, scale, rw)
        s01, dg1 = _site_pair_surface(site, 0, 1, grid, spec_H, scale, rw)
        s11, dg2 = _site_pair_surface(site, 1, 1, grid, spec_H, scale, rw)
        v0, dgm0 = _fit_site_mean(site, 0, grid, spec_H, scale, rw)
        v1, dgm1 = _fit_site_mean(site, 1, grid, spec_H, scale, rw)
        return s00, s01, s11, v0, v1, dg0.merge(dg1).merge(dg2).merge(dgm0).merge(dgm1)

    results = ordered_map(work, sites, threads)
    diag = LocalFitDiagnostics(effective_sample_size=np.inf, min_local_mass=np.inf)
    M00 = np.mean([r[0] for r in results], axis=0)
    M01 = np.mean([r[1] for r in results], axis=0)
    M11 = np.mean([r[2] for r in results], axis=0)
    mu0 = np.mean([r[3] for r in results], axis=0)
    mu1 = np.mean([r[4] for r in results], axis=0)
    for r in results:
        diag = diag.merge(r[5])

    H00 = M00 - np.outer(mu0, mu0)
    H01 = M01 - np.outer(mu0, mu1)
    H11 = M11 - np.outer(mu1, mu1)
    H10 = H01.T
    h_mumu = 0.5 * (H00 + H00.T)
    h_mutau = H01 - H00
    h_tautau = H11 - H01 - H10 + H00
    h_tautau = 0.5 * (h_tautau + h_tautau.T)
    return CovarianceEstimates(grid=grid,
                               h_mumu=OperatorMatrix(grid, h_mumu),
                               h_mutau=OperatorMatrix(grid, h_mutau),
                               h_tautau=OperatorMatrix(grid, h_tautau),
                               diagnostics=diag)


def _cross_period_surface(site: SiteSample, d_follow: int, grid: QuadratureGrid,
                          spec: KernelSpec, scale: np.ndarray, reweight: np.ndarray | None,
                          ) -> tuple[np.ndarray, LocalFitDiagnostics]:
    base = (site.period == 0) & (site.d_treat == 0)
    follow = (site.period == 1) & (site.d_treat == d_follow)
    if not np.any(base) or not np.any(follow):
        raise InsufficientLocalDataError(
            "missing baseline or follow-up records", site_id=site.site_id)
    bi = np.flatnonzero(base)
    fi = np.flatnonzero(follow)
    overlap = None
    ids = site.unit_ids
    if any(u is not None for u in ids):
        by_unit = {ids[i]: k for k, i in enumerate(fi) if ids[i] is not None}
        pairs = [(k, by_unit[ids[i]]) for k, i in enumerate(bi) if ids[i] in by_unit]
        if pairs:
            overlap = (np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))
    w1 = w2 = None
    if reweight is not None:
        w1, w2 = reweight[base], reweight[follow]
    try:
        return dyadic_grid(site.x[base], site.y[base], site.x[follow], site.y[follow],
                           grid.points, grid.points, spec, scale=scale,
                           w1=w1, w2=w2, overlap=overlap)
    except InsufficientLocalDataError as exc:
        raise exc.tagged(site.site_id) from None


def estimate_covariance_cluster_design(ds: Dataset, grid: QuadratureGrid, spec_H: KernelSpec,
                                       threads: int = 1) -> CovarianceEstimates:
    """Covariance kernels under cluster-level randomization with a baseline survey.

    Baseline-to-follow-up covariances are estimated separately from treated
    clusters (pairing baseline with treated follow-up) and control clusters
    (pairing baseline with control follow-up); their difference estimates
    Cov(mu_g0(x1), tau_g(x2)). H_mumu is the baseline covariance over all
    experimental clusters. Pairs of records belonging to the same unit across
    periods are excluded from the dyadic sums when unit ids are available.
    """
    if ds.design is not Design.CLUSTER_LEVEL:
        raise InvalidConfigError("dataset does not declare cluster-level randomization")
    scale = ds.covariate_scale()
    treated = [s for s in ds.experimental if s.cluster_treatment == 1]
    control = [s for s in ds.experimental if s.cluster_treatment == 0]
    if not treated:
        raise NoTreatedClustersError("no treated clusters in the experimental sample")
    if not control:
        raise NoControlClustersError("no control clusters in the experimental sample")

    means = estimate_mean_functions(ds, grid, spec_H, threads=threads)
    diag = means.diagnostics

    def base_work(site: SiteSample):
        rw = _site_reweight(ds, site, grid)
        b0 = (site.period == 0) & (site.d_treat == 0)
        idx = np.arange(int(b0.sum()))
        return dyadic_grid(site.x[b0], site.y[b0], site.x[b0], site.y[b0],
                           grid.points, grid.points, spec_H, scale=scale,
                           w1=None if rw is None else rw[b0],
                           w2=None if rw is None else rw[b0],
                           overlap=(idx, idx))

    base_surfaces = ordered_map(base_work, ds.experimental, threads)
    for _, dg in base_surfaces:
        diag = diag.merge(dg)
    M_base = np.mean([s for s, _ in base_surfaces], axis=0)
    mu0_all = np.mean([means.site_mu0[s.site_id].values for s in ds.experimental], axis=0)
    h_mumu = M_base - np.outer(mu0_all, mu0_all)
    h_mumu = 0.5 * (h_mumu + h_mumu.T)

    def arm_cross(sites: list[SiteSample], d_follow: int) -> np.ndarray:
        nonlocal diag
        surfaces = ordered_map(
            lambda s: _cross_period_surface(s, d_follow, grid, spec_H, scale,
                                            _site_reweight(ds, s, grid)),
            sites, threads)
        for _, dg in surfaces:
            diag = diag.merge(dg)
        M = np.mean([s for s, _ in surfaces], axis=0)
        mu_base = np.mean([means.site_mu0[s.site_id].values for s in sites], axis=0)
        mu_follow = np.mean([means.site_mu1[s.site_id].values for s in sites], axis=0)
        return M - np.outer(mu_base, mu_follow)

    h_treat = arm_cross(treated, 1)   # Cov(mu_g0(x1), mu_g1(x2; 1)) from treated clusters
    h_ctrl = arm_cross(control, 0)    # Cov(mu_g0(x1), mu_g1(x2; 0)) from control clusters
    h_mutau = h_treat - h_ctrl
    return CovarianceEstimates(grid=grid,
                               h_mumu=OperatorMatrix(grid, h_mumu),
                               h_mutau=OperatorMatrix(grid, h_mutau),
                               h_tautau=None,
                               diagnostics=diag)


def psd_project(op: OperatorMatrix) -> tuple[OperatorMatrix, float]:
    """Project a self-covariance operator onto the PSD cone.

    Eigendecomposes the weighted form, clamps negative eigenvalues to zero,
    and maps back to a kernel. Returns the projected operator and the clamped
    mass (sum of the absolute values of the removed eigenvalues). This is the
    Frobenius-nearest PSD matrix in weighted coordinates.
    """
    rw = np.sqrt(op.grid.weights)
    M = op.weighted()
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    clamped = float(np.sum(np.abs(evals[evals < 0])))
    if clamped == 0.0:
        return OperatorMatrix(op.grid, 0.5 * (op.kernel + op.kernel.T)), 0.0
    Mplus = (evecs * np.maximum(evals, 0.0)) @ evecs.T
    kernel = Mplus / rw[:, None] / rw[None, :]
    return OperatorMatrix(op.grid, 0.5 * (kernel + kernel.T)), clamped
