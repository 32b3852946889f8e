"""Synthetic multi-site populations with exact finite-population oracles.

A population is a fixed set of G sites whose baseline mean and treatment
effect functions are finite-rank expansions

    mu_g(x; 0) = mu0(x) + sum_l m_gl f_l(x)
    tau_g(x)   = tau(x) + sum_l b_gl h_l(x)

with coefficient columns centered to mean exactly zero across sites, so the
cross-site means are mu0 and tau themselves. Basis functions are separable
polynomials/sinusoids, evaluated analytically; population operators on a grid
are therefore exact up to floating arithmetic (no sampling, no smoothing),
which makes them usable as oracles several orders of magnitude more accurate
than any estimate under test.

All randomness flows through an explicit 64-bit seed feeding a counter-based
Philox generator; there is no global RNG state anywhere in the package.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data_io import Dataset, Design, Role, Sampling, SiteSample, UnitRecord, write_results
from .densities import Density, GaussianDensity, UniformDensity, density_from_descriptor
from .errors import CollinearScoresError, InvalidConfigError, IoError, RankDeficientWarning
from .kernels import KernelSpec, h_rate_rule
from .operators import (
    DiscretizedFunction,
    OperatorMatrix,
    QuadratureGrid,
    _fit_site_mean,
    _site_pair_surface,
    make_grid,
    psd_project,
)
from .basis import solve_fpc
from ._threads import ordered_map


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based portable generator with explicit 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


# --- analytic basis functions -------------------------------------------------


@dataclass(frozen=True)
class SeparableFunction:
    """Product of per-coordinate factors, each a polynomial or sinusoid.

    Factors are descriptors: ("one",), ("poly", (c0, c1, ...)),
    ("sin", freq, phase), or ("cos", freq, phase).
    """

    factors: tuple[tuple, ...]
    amplitude: float = 1.0

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != len(self.factors):
            raise InvalidConfigError(
                f"function has {len(self.factors)} factors, points have dim {pts.shape[1]}")
        out = np.full(pts.shape[0], self.amplitude)
        for c, f in enumerate(self.factors):
            kind = f[0]
            xc = pts[:, c]
            if kind == "one":
                continue
            if kind == "poly":
                out = out * np.polynomial.polynomial.polyval(xc, np.asarray(f[1], dtype=float))
            elif kind == "sin":
                out = out * np.sin(f[1] * xc + f[2])
            elif kind == "cos":
                out = out * np.cos(f[1] * xc + f[2])
            else:
                raise InvalidConfigError(f"unknown factor kind {kind!r}")
        return out

    def to_descriptor(self) -> dict:
        return {"amplitude": self.amplitude,
                "factors": [list(f[:1]) + [list(p) if isinstance(p, tuple) else p for p in f[1:]]
                            for f in self.factors]}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "SeparableFunction":
        factors = []
        for f in desc["factors"]:
            if f[0] == "poly":
                factors.append(("poly", tuple(f[1])))
            else:
                factors.append(tuple(f))
        return cls(factors=tuple(factors), amplitude=float(desc["amplitude"]))


def const_fn(value: float, d: int = 1) -> SeparableFunction:
    return SeparableFunction(factors=(("one",),) * d, amplitude=value)


def poly_fn(coeffs, d: int = 1, coord: int = 0, amplitude: float = 1.0) -> SeparableFunction:
    factors = [("one",)] * d
    factors[coord] = ("poly", tuple(float(c) for c in coeffs))
    return SeparableFunction(factors=tuple(factors), amplitude=amplitude)


def sin_fn(freq: float, phase: float = 0.0, d: int = 1, coord: int = 0,
           amplitude: float = 1.0) -> SeparableFunction:
    factors = [("one",)] * d
    factors[coord] = ("sin", float(freq), float(phase))
    return SeparableFunction(factors=tuple(factors), amplitude=amplitude)


def cos_fn(freq: float, phase: float = 0.0, d: int = 1, coord: int = 0,
           amplitude: float = 1.0) -> SeparableFunction:
    factors = [("one",)] * d
    factors[coord] = ("cos", float(freq), float(phase))
    return SeparableFunction(factors=tuple(factors), amplitude=amplitude)


def _default_mu_basis(L: int, d: int) -> tuple[SeparableFunction, ...]:
    # orthonormal under the uniform density on [0, 1] in the first coordinate
    out = []
    for l in range(L):
        freq = 2.0 * math.pi * (l // 2 + 1)
        if l % 2 == 0:
            out.append(sin_fn(freq, d=d, amplitude=math.sqrt(2.0)))
        else:
            out.append(cos_fn(freq, d=d, amplitude=math.sqrt(2.0)))
    return tuple(out)


def _default_tau_basis(L: int, d: int) -> tuple[SeparableFunction, ...]:
    out = []
    for l in range(L):
        freq = math.pi * (2 * (l // 2) + 1)
        if l % 2 == 0:
            out.append(cos_fn(freq, d=d, amplitude=math.sqrt(2.0)))
        else:
            out.append(sin_fn(freq, d=d, amplitude=math.sqrt(2.0)))
    return tuple(out)


# --- population ----------------------------------------------------------------


@dataclass
class PopulationConfig:
    """Recipe for a finite synthetic population.

    Site coefficients for the baseline expansion are drawn with per-factor
    standard deviations ``coeff_sd``; effect coefficients are ``b = m A' + e``
    where A is the optional ``link`` matrix and e has per-factor sd
    ``effect_sd``. With ``exact_coeff_cov`` the empirical (divisor G)
    covariance of the baseline coefficients is forced to equal
    diag(coeff_sd^2) exactly, which pins oracle spectra for tests.
    """

    G: int
    d: int = 1
    L: int = 2
    sigma: float = 0.25
    bounds: tuple[tuple[float, float], ...] = ((0.0, 1.0),)
    coeff_sd: tuple[float, ...] | None = None
    effect_sd: tuple[float, ...] | None = None
    link: tuple[tuple[float, ...], ...] | None = None
    exact_coeff_cov: bool = False
    mu_base: SeparableFunction | None = None
    tau_base: SeparableFunction | None = None
    f_basis: tuple[SeparableFunction, ...] | None = None
    h_basis: tuple[SeparableFunction, ...] | None = None
    covariate_family: str = "uniform"     # "uniform" | "gauss-shift"
    density_shift_sd: float = 0.05
    propensity_range: tuple[float, float] = (0.35, 0.65)
    propensity_slope: float = 0.0         # gradient of p_g(x) in the first coordinate

    def __post_init__(self):
        if self.L < 1:
            raise InvalidConfigError("need at least one basis function")
        if len(self.bounds) != self.d:
            raise InvalidConfigError("bounds must match the covariate dimension")
        if self.covariate_family not in ("uniform", "gauss-shift"):
            raise InvalidConfigError(f"unknown covariate family {self.covariate_family!r}")
        lo, hi = self.propensity_range
        if not 0.0 < lo <= hi < 1.0:
            raise InvalidConfigError("propensity range must be inside (0, 1)")


@dataclass
class SyntheticPopulation:
    """Fixed finite population of sites with analytic mean/effect functions."""

    d: int
    mu_base: SeparableFunction
    tau_base: SeparableFunction
    f_basis: tuple[SeparableFunction, ...]
    h_basis: tuple[SeparableFunction, ...]
    m_coeff: np.ndarray   # (G, L) baseline coefficients, columns mean exactly zero
    b_coeff: np.ndarray   # (G, L) effect coefficients, columns mean exactly zero
    site_densities: tuple[Density, ...]
    propensities: tuple[float, ...]
    sigma: float
    bounds: tuple[tuple[float, float], ...]
    propensity_slope: float = 0.0

    def __post_init__(self):
        self.m_coeff = np.asarray(self.m_coeff, dtype=float)
        self.b_coeff = np.asarray(self.b_coeff, dtype=float)
        if self.m_coeff.shape != self.b_coeff.shape or self.m_coeff.ndim != 2:
            raise InvalidConfigError("coefficient matrices must be G x L and congruent")
        if self.m_coeff.shape[0] < 2:
            raise InvalidConfigError("population needs at least two sites")
        if len(self.site_densities) != self.G or len(self.propensities) != self.G:
            raise InvalidConfigError("need one density and one propensity per site")

    @property
    def G(self) -> int:
        return self.m_coeff.shape[0]

    @property
    def L(self) -> int:
        return self.m_coeff.shape[1]

    def mu0_values(self, points: np.ndarray) -> np.ndarray:
        return self.mu_base.evaluate(points)

    def tau_values(self, points: np.ndarray) -> np.ndarray:
        return self.tau_base.evaluate(points)

    def f_matrix(self, points: np.ndarray) -> np.ndarray:
        return np.stack([f.evaluate(points) for f in self.f_basis], axis=0)

    def h_matrix(self, points: np.ndarray) -> np.ndarray:
        return np.stack([h.evaluate(points) for h in self.h_basis], axis=0)

    def site_mu0(self, g: int, points: np.ndarray) -> np.ndarray:
        return self.mu0_values(points) + self.m_coeff[g] @ self.f_matrix(points)

    def site_tau(self, g: int, points: np.ndarray) -> np.ndarray:
        return self.tau_values(points) + self.b_coeff[g] @ self.h_matrix(points)

    def site_mu(self, g: int, points: np.ndarray, d_treat: int) -> np.ndarray:
        vals = self.site_mu0(g, points)
        if d_treat == 1:
            vals = vals + self.site_tau(g, points)
        return vals

    def propensity(self, g: int, points: np.ndarray) -> np.ndarray:
        """Treatment probability p_g(x): a per-site level plus an optional
        gradient in the first coordinate, kept inside the unit interval."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = self.bounds[0]
        centered = (pts[:, 0] - 0.5 * (lo + hi)) / (hi - lo)
        p = self.propensities[g] + self.propensity_slope * centered
        return np.clip(p, 0.02, 0.98)

    def to_json_dict(self) -> dict:
        return {
            "kind": "population",
            "d": self.d,
            "sigma": self.sigma,
            "bounds": [list(b) for b in self.bounds],
            "mu_base": self.mu_base.to_descriptor(),
            "tau_base": self.tau_base.to_descriptor(),
            "f_basis": [f.to_descriptor() for f in self.f_basis],
            "h_basis": [h.to_descriptor() for h in self.h_basis],
            "m_coeff": self.m_coeff.tolist(),
            "b_coeff": self.b_coeff.tolist(),
            "site_densities": [dn.to_descriptor() for dn in self.site_densities],
            "propensities": list(self.propensities),
            "propensity_slope": self.propensity_slope,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SyntheticPopulation":
        return cls(
            d=int(doc["d"]),
            mu_base=SeparableFunction.from_descriptor(doc["mu_base"]),
            tau_base=SeparableFunction.from_descriptor(doc["tau_base"]),
            f_basis=tuple(SeparableFunction.from_descriptor(f) for f in doc["f_basis"]),
            h_basis=tuple(SeparableFunction.from_descriptor(h) for h in doc["h_basis"]),
            m_coeff=np.array(doc["m_coeff"], dtype=float),
            b_coeff=np.array(doc["b_coeff"], dtype=float),
            site_densities=tuple(density_from_descriptor(d) for d in doc["site_densities"]),
            propensities=tuple(float(p) for p in doc["propensities"]),
            sigma=float(doc["sigma"]),
            bounds=tuple(tuple(b) for b in doc["bounds"]),
            propensity_slope=float(doc.get("propensity_slope", 0.0)),
        )


def _center_columns_exactly(m: np.ndarray) -> np.ndarray:
    """Shift each column so its float sum is exactly zero."""
    m = m - m.mean(axis=0)
    m[-1, :] = -m[:-1, :].sum(axis=0)
    return m


def generate_population(config: PopulationConfig, seed: int) -> SyntheticPopulation:
    """Draw a population; deterministic given the seed.

    Coefficients are drawn, linked, and then centered so that cross-site
    coefficient means are exactly zero.
    """
    if config.G < 3:
        raise InvalidConfigError(f"need at least 3 sites, got G={config.G}")
    rng = make_rng(seed)
    G, L, d = config.G, config.L, config.d
    coeff_sd = np.asarray(config.coeff_sd if config.coeff_sd is not None
                          else [1.0 / (l + 1) for l in range(L)], dtype=float)
    if coeff_sd.shape != (L,) or np.any(coeff_sd < 0):
        raise InvalidConfigError("coeff_sd must be L nonnegative values")

    m = rng.standard_normal((G, L)) * coeff_sd
    m = _center_columns_exactly(m)
    if config.exact_coeff_cov:
        if np.any(coeff_sd <= 0):
            raise InvalidConfigError("exact_coeff_cov needs strictly positive coeff_sd")
        C = m.T @ m / G
        chol = np.linalg.cholesky(C)
        m = m @ np.linalg.inv(chol).T * coeff_sd
        m = _center_columns_exactly(m)

    if config.link is not None:
        A = np.asarray(config.link, dtype=float)
        if A.shape != (L, L):
            raise InvalidConfigError("link matrix must be L x L")
        b = m @ A.T
    else:
        b = np.zeros((G, L))
    if config.effect_sd is not None:
        effect_sd = np.asarray(config.effect_sd, dtype=float)
        if effect_sd.shape != (L,) or np.any(effect_sd < 0):
            raise InvalidConfigError("effect_sd must be L nonnegative values")
        b = b + rng.standard_normal((G, L)) * effect_sd
    elif config.link is None:
        b = rng.standard_normal((G, L)) * coeff_sd
    b = _center_columns_exactly(b)

    lo = np.array([bb[0] for bb in config.bounds])
    hi = np.array([bb[1] for bb in config.bounds])
    densities: list[Density] = []
    if config.covariate_family == "uniform":
        densities = [UniformDensity(tuple(lo), tuple(hi))] * G
    else:
        center = 0.5 * (lo + hi)
        spread = 0.45 * (hi - lo)
        shifts = rng.uniform(-config.density_shift_sd, config.density_shift_sd, (G, d))
        shifts = shifts * (hi - lo)
        for g in range(G):
            densities.append(GaussianDensity(tuple(center + shifts[g]), tuple(spread),
                                             tuple(lo), tuple(hi)))
    p_lo, p_hi = config.propensity_range
    propensities = tuple(float(p) for p in rng.uniform(p_lo, p_hi, G))

    return SyntheticPopulation(
        d=d,
        mu_base=config.mu_base if config.mu_base is not None else poly_fn((0.5, 1.0), d=d),
        tau_base=config.tau_base if config.tau_base is not None else poly_fn((0.3, -0.2), d=d),
        f_basis=config.f_basis if config.f_basis is not None else _default_mu_basis(L, d),
        h_basis=config.h_basis if config.h_basis is not None else _default_tau_basis(L, d),
        m_coeff=m, b_coeff=b,
        site_densities=tuple(densities),
        propensities=propensities,
        sigma=float(config.sigma),
        bounds=config.bounds,
        propensity_slope=float(config.propensity_slope),
    )


# --- sampling -------------------------------------------------------------------


@dataclass(frozen=True)
class AssignmentProtocol:
    """Randomization protocol: target selection plus treatment assignment.

    The target site is drawn uniformly unless ``target_index`` pins it.
    Within-cluster assignment treats each unit independently with the site's
    propensity; cluster-level assignment treats a fixed share of experimental
    clusters (count rounded half up) and adds a baseline survey period.
    """

    design: Design = Design.WITHIN_CLUSTER
    seed: int = 0
    share_treated: float = 0.5
    target_index: int | None = None


def sample_dataset(pop: SyntheticPopulation, n: int, protocol: AssignmentProtocol) -> Dataset:
    """Draw unit-level data from the population under the protocol.

    Deterministic given the protocol seed: the target site, cluster
    assignments, covariates, treatments, and noise are consumed from a single
    Philox stream in fixed site order.
    """
    if n < 2:
        raise InvalidConfigError(f"need at least 2 units per site, got n={n}")
    rng = make_rng(protocol.seed)
    gstar = int(rng.integers(pop.G)) if protocol.target_index is None else int(protocol.target_index)
    if not 0 <= gstar < pop.G:
        raise InvalidConfigError(f"target index {gstar} out of range")

    cluster_treat: dict[int, int] = {}
    if protocol.design is Design.CLUSTER_LEVEL:
        exp_idx = [g for g in range(pop.G) if g != gstar]
        n_treat = int(math.floor(protocol.share_treated * len(exp_idx) + 0.5))
        perm = rng.permutation(len(exp_idx))
        treated = {exp_idx[int(i)] for i in perm[:n_treat]}
        cluster_treat = {g: int(g in treated) for g in exp_idx}

    sites = []
    for g in range(pop.G):
        sid = f"s{g:03d}"
        role = Role.TARGET if g == gstar else Role.EXPERIMENTAL
        X = pop.site_densities[g].sample(rng, n)
        if protocol.design is Design.WITHIN_CLUSTER:
            if role is Role.TARGET:
                D = np.zeros(n, dtype=int)
            else:
                D = (rng.random(n) < pop.propensity(g, X)).astype(int)
            noise = rng.standard_normal(n)
            mu0 = pop.site_mu0(g, X)
            tau = pop.site_tau(g, X)
            Y = mu0 + D * tau + pop.sigma * noise
            records = tuple(
                UnitRecord(site_id=sid, x=tuple(float(v) for v in X[i]),
                           d_treat=int(D[i]), y=float(Y[i]), unit_id=f"u{i:05d}")
                for i in range(n))
            sites.append(SiteSample(site_id=sid, records=records, role=role))
        else:
            noise0 = rng.standard_normal(n)
            mu0 = pop.site_mu0(g, X)
            y0 = mu0 + pop.sigma * noise0
            records = [
                UnitRecord(site_id=sid, x=tuple(float(v) for v in X[i]),
                           d_treat=0, y=float(y0[i]), period=0, unit_id=f"u{i:05d}")
                for i in range(n)]
            ct = None
            if role is Role.EXPERIMENTAL:
                ct = cluster_treat[g]
                noise1 = rng.standard_normal(n)
                y1 = mu0 + ct * pop.site_tau(g, X) + pop.sigma * noise1
                records += [
                    UnitRecord(site_id=sid, x=tuple(float(v) for v in X[i]),
                               d_treat=ct, y=float(y1[i]), period=1, unit_id=f"u{i:05d}")
                    for i in range(n)]
            sites.append(SiteSample(site_id=sid, records=tuple(records), role=role,
                                    cluster_treatment=ct))
    return Dataset(sites=tuple(sites), d=pop.d, design=protocol.design,
                   sampling=Sampling.DENSE)


# --- oracles ----------------------------------------------------------------------


@dataclass
class OracleOperators:
    """Exact finite-population moments of a synthetic population on a grid."""

    grid: QuadratureGrid
    mu0: DiscretizedFunction
    mu1: DiscretizedFunction
    tau: DiscretizedFunction
    h_mumu: OperatorMatrix
    h_mutau: OperatorMatrix
    h_tautau: OperatorMatrix
    mu_dev: np.ndarray   # (G, m) per-site baseline deviations
    tau_dev: np.ndarray  # (G, m) per-site effect deviations


def oracle_operators(pop: SyntheticPopulation, grid: QuadratureGrid) -> OracleOperators:
    """Exact population means and covariance kernels on the grid.

    Averages run over all G sites with equal weight 1/G; no sampling or
    smoothing is involved, so rank and spectrum reflect the construction
    exactly.
    """
    pts = grid.points
    mu0 = pop.mu0_values(pts)
    tau = pop.tau_values(pts)
    F = pop.f_matrix(pts)
    H = pop.h_matrix(pts)
    mu_dev = pop.m_coeff @ F
    tau_dev = pop.b_coeff @ H
    G = pop.G
    h_mumu = mu_dev.T @ mu_dev / G
    h_mutau = mu_dev.T @ tau_dev / G
    h_tautau = tau_dev.T @ tau_dev / G
    return OracleOperators(
        grid=grid,
        mu0=DiscretizedFunction(grid, mu0),
        mu1=DiscretizedFunction(grid, mu0 + tau),
        tau=DiscretizedFunction(grid, tau),
        h_mumu=OperatorMatrix(grid, 0.5 * (h_mumu + h_mumu.T)),
        h_mutau=OperatorMatrix(grid, h_mutau),
        h_tautau=OperatorMatrix(grid, 0.5 * (h_tautau + h_tautau.T)),
        mu_dev=mu_dev,
        tau_dev=tau_dev,
    )


def oracle_imse(pop: SyntheticPopulation, grid: QuadratureGrid, phi_set) -> float:
    """Brute-force integrated MSE of predicting tau_g from scores on phi_set.

    Computes the scores s_gk = <mu_g - mu, phi_k> for every site, regresses
    tau_g(x) - tau(x) on the scores across sites at every grid point, and
    integrates the residual mean square against f0. No operator algebra is
    involved, which keeps this evaluation independent of the eigen-solver it
    is used to check.
    """
    if not phi_set:
        raise InvalidConfigError("phi_set must contain at least one function")
    for f in phi_set:
        if not f.grid.same_grid(grid):
            raise InvalidConfigError("phi functions must live on the supplied grid")
    pts = grid.points
    w = grid.weights
    Phi = np.stack([f.values for f in phi_set], axis=1)
    gram = Phi.T @ (w[:, None] * Phi)
    gv = np.linalg.eigvalsh(gram)
    if gv[-1] <= 0 or gv[0] <= 1e-12 * gv[-1]:
        raise CollinearScoresError("phi_set is linearly dependent on the grid")

    mu_dev = pop.m_coeff @ pop.f_matrix(pts)
    tau_dev = pop.b_coeff @ pop.h_matrix(pts)
    S = mu_dev @ (w[:, None] * Phi)  # (G, K) scores
    # columns orthogonal to all mu variation carry no signal; drop them rather
    # than letting rounding-level scores soak up fit
    dev_norm = np.sqrt(np.max(mu_dev**2 @ w)) if mu_dev.size else 0.0
    phi_norm = np.sqrt(np.diag(gram))
    keep = np.abs(S).max(axis=0) > 1e-12 * np.maximum(dev_norm * phi_norm, 1e-300)
    if not np.any(keep):
        return float(np.mean(tau_dev**2 @ w))
    S = S[:, keep]
    sv = np.linalg.svd(S, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise CollinearScoresError("site scores on phi_set are collinear")
    B, *_ = np.linalg.lstsq(S, tau_dev, rcond=None)
    resid = tau_dev - S @ B
    return float(np.mean(resid**2 @ w))


def write_rate_table(rows: list[dict], json_path: str | None = None,
                     csv_path: str | None = None) -> None:
    """Export a rate-experiment table as JSON and/or flat CSV."""
    if json_path is not None:
        write_results({"kind": "rate_table", "rows": rows}, json_path)
    if csv_path is not None:
        cols = ["G", "n", "h", "sup_mu", "sup_h_mumu", "err_lambda1", "sup_phi1"]
        try:
            with open(csv_path, "w", encoding="utf-8") as fh:
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                                      else str(row[c]) for c in cols) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {csv_path}: {exc}") from exc


def rate_experiment(config: PopulationConfig, ladder, reps: int, seed: int,
                    points_per_dim: int = 24, h_scale: float = 1.0,
                    threads: int = 1) -> list[dict]:
    """Monte Carlo error table across a ladder of (G, n) sizes.

    For each rung the population and sample are redrawn ``reps`` times
    (seed + rep index), estimates use the rate-rule bandwidth, and the table
    records median sup-norm errors of the mean function, the baseline
    covariance kernel, and its leading eigenpair.
    """
    ladder = [(int(G), int(n)) for G, n in ladder]
    if any(ladder[i] >= ladder[i + 1] for i in range(len(ladder) - 1)):
        raise InvalidConfigError("ladder must be strictly ascending")
    f0 = UniformDensity(tuple(b[0] for b in config.bounds), tuple(b[1] for b in config.bounds))
    grid = make_grid(config.d, config.bounds, points_per_dim, f0)

    rows = []
    for G, n in ladder:
        cfg = replace(config, G=G)
        h = h_rate_rule(G, n, config.d, scale=h_scale)
        spec = KernelSpec(bandwidth=h)

        def one_rep(rep: int):
            pop = generate_population(cfg, seed + rep)
            ds = sample_dataset(pop, n, AssignmentProtocol(seed=seed + rep + 500_009))
            oracle = oracle_operators(pop, grid)
            scale_vec = ds.covariate_scale()
            fits0, fits1, surfaces = [], [], []
            for site in ds.experimental:
                v0, _ = _fit_site_mean(site, 0, grid, spec, scale_vec, None)
                v1, _ = _fit_site_mean(site, 1, grid, spec, scale_vec, None)
                s00, _ = _site_pair_surface(site, 0, 0, grid, spec, scale_vec, None)
                fits0.append(v0)
                fits1.append(v1)
                surfaces.append(s00)
            mu0_hat = np.mean(fits0, axis=0)
            mu1_hat = np.mean(fits1, axis=0)
            H00 = np.mean(surfaces, axis=0) - np.outer(mu0_hat, mu0_hat)
            H00 = 0.5 * (H00 + H00.T)
            sup_mu = max(float(np.max(np.abs(mu0_hat - oracle.mu0.values))),
                         float(np.max(np.abs(mu1_hat - oracle.mu1.values))))
            sup_h = float(np.max(np.abs(H00 - oracle.h_mumu.kernel)))
            h_psd, _ = psd_project(OperatorMatrix(grid, H00))
            fpc_hat = solve_fpc(h_psd, 1)
            fpc_true = solve_fpc(oracle.h_mumu, 1)
            lam_hat = float(fpc_hat.eigenvalues[0]) if fpc_hat.K else 0.0
            lam_true = float(fpc_true.eigenvalues[0]) if fpc_true.K else 0.0
            err_lam = abs(lam_hat - lam_true)
            if fpc_hat.K and fpc_true.K:
                phi_hat = fpc_hat.eigenfunctions[0].values
                phi_true = fpc_true.eigenfunctions[0].values
                if float(np.sum(phi_hat * phi_true * grid.weights)) < 0:
                    phi_hat = -phi_hat
                sup_phi = float(np.max(np.abs(phi_hat - phi_true)))
            else:
                sup_phi = 0.0
            return sup_mu, sup_h, err_lam, sup_phi

        # degenerate populations legitimately produce empty eigenbases
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientWarning)
            results = ordered_map(one_rep, range(reps), threads)
        arr = np.array(results)
        med = np.median(arr, axis=0)
        rows.append({"G": G, "n": n, "h": h,
                     "sup_mu": float(med[0]), "sup_h_mumu": float(med[1]),
                     "err_lambda1": float(med[2]), "sup_phi1": float(med[3])})
    return rows
