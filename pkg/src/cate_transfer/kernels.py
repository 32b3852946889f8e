"""Per-site nonparametric smoothing.

Two estimators drive everything downstream: a local linear fit of the
conditional outcome mean within a treatment arm, and a dyadic local linear
fit over ordered unit pairs (i, j), i != j, that estimates second-moment
surfaces E[Y_i Y_j | x1, x2] without own-unit noise products.

Both come in a scalar form (the public operations) and a vectorized form
that evaluates a whole grid at once. The dyadic grid fit never materializes
the pair set: with product weights every normal-equation entry factors into
per-slot moment sums minus a correction for excluded pairs, which keeps the
cost linear in the number of units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data_io import SiteSample
from .errors import InsufficientLocalDataError, NoPairsError, ValidationError

_EPS = float(np.finfo(float).eps)
_DEGENERATE_RTOL = 1e-10


class KernelFamily(Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"


def h_rate_rule(G: int, n: int, d: int, scale: float = 1.0) -> float:
    """Reference bandwidth (log n / (G n))^(1/(4+d)), times a scale factor.

    Balances smoothing bias against sampling error when per-site fits are
    averaged over G sites of n units each; useful for centering candidate
    grids in standardized covariate units.
    """
    return float(scale * (math.log(n) / (G * n)) ** (1.0 / (4 + d)))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and isotropic bandwidth (applied per coordinate).

    The bandwidth is understood in standardized covariate units: callers pass
    a per-coordinate ``scale`` (pooled sample std) and distances are divided
    by ``bandwidth * scale``.

    The Gaussian kernel is smooth with controlled tails and is the default.
    The Epanechnikov kernel is offered with a caveat: it is not differentiable
    at the edge of its support, so uniformity arguments that require a smooth
    kernel do not cover it directly, and it assigns exactly zero weight
    outside the bandwidth window, so local fits can run out of data at small
    bandwidths.

    ``mass_tol_factor`` scales the minimum local weighted mass below which a
    fit refuses to extrapolate: the threshold is factor * machine eps * n.
    """

    family: KernelFamily = KernelFamily.GAUSSIAN
    bandwidth: float = 0.5
    mass_tol_factor: float = 10.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValidationError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.mass_tol_factor > 0:
            raise ValidationError("mass_tol_factor must be positive")


@dataclass
class LocalFitDiagnostics:
    """Quality report for a batch of local fits."""

    effective_sample_size: float = 0.0
    min_local_mass: float = 0.0
    degenerate_points: list[int] = field(default_factory=list)

    def merge(self, other: "LocalFitDiagnostics") -> "LocalFitDiagnostics":
        return LocalFitDiagnostics(
            effective_sample_size=min(self.effective_sample_size, other.effective_sample_size),
            min_local_mass=min(self.min_local_mass, other.min_local_mass),
            degenerate_points=self.degenerate_points + other.degenerate_points,
        )


def _kernel_profile(family: KernelFamily, u: np.ndarray) -> np.ndarray:
    if family is KernelFamily.GAUSSIAN:
        return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    return 0.75 * np.maximum(1.0 - u * u, 0.0)


def kernel_eval(spec: KernelSpec, u) -> float:
    """Product kernel value at the (already scaled) offset vector u."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if not np.all(np.isfinite(u)):
        raise ValidationError("kernel argument must be finite")
    return float(np.prod(_kernel_profile(spec.family, u)))


def _kernel_matrix(spec: KernelSpec, X: np.ndarray, points: np.ndarray,
                   scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kernel weights and scaled offsets for all (unit, point) combinations.

    Returns (K, U): K is (n, m) with product-kernel weights, U is (n, m, d)
    with offsets (X_i - p_j) / (h * scale) used as local regressors.
    """
    U = (X[:, None, :] - points[None, :, :]) / (spec.bandwidth * scale)
    K = np.prod(_kernel_profile(spec.family, U), axis=2)
    return K, U


def _resolve_scale(scale, d: int) -> np.ndarray:
    if scale is None:
        return np.ones(d)
    scale = np.asarray(scale, dtype=float)
    if scale.shape != (d,) or np.any(scale <= 0):
        raise ValidationError("scale must be a positive vector of length d")
    return scale


def _resolve_reweight(reweight, X: np.ndarray) -> np.ndarray | None:
    if reweight is None:
        return None
    if callable(reweight):
        w = np.asarray(reweight(X), dtype=float)
    else:
        w = np.asarray(reweight, dtype=float)
    if w.shape != (X.shape[0],) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("reweight must give one finite nonnegative value per unit")
    return w


def loclin_mean_grid(X: np.ndarray, Y: np.ndarray, points: np.ndarray, spec: KernelSpec,
                     scale=None, unit_weights: np.ndarray | None = None,
                     ) -> tuple[np.ndarray, LocalFitDiagnostics]:
    """Local linear mean fit of Y on X evaluated at each grid point.

    At each point the intercept of the weighted least-squares fit of Y on
    (1, X - x) is returned. Singular local designs fall back to the locally
    constant (kernel-weighted mean) value and are recorded in diagnostics.

    Raises
    ------
    InsufficientLocalDataError
        If some point has local weighted mass below the spec's mass tolerance
        (mass_tol_factor * eps * n) or fewer than d + 2 units with nonzero
        weight.
    """
    n, d = X.shape
    points = np.atleast_2d(np.asarray(points, dtype=float))
    scale = _resolve_scale(scale, d)
    if n < d + 2:
        raise InsufficientLocalDataError(
            f"need at least {d + 2} units for a local linear fit, got {n}")
    K, U = _kernel_matrix(spec, X, points, scale)
    if unit_weights is not None:
        K = K * unit_weights[:, None]

    mass = K.sum(axis=0)
    eps_mass = spec.mass_tol_factor * _EPS * n
    if np.any(mass < eps_mass):
        j = int(np.argmin(mass))
        raise InsufficientLocalDataError(
            f"local weighted mass {mass[j]:.3e} below threshold at point {j}",
            point_index=j)
    support = (K > 0).sum(axis=0)
    if np.any(support < d + 2):
        j = int(np.argmin(support))
        raise InsufficientLocalDataError(
            f"only {support[j]} units with nonzero weight at point {j}, need {d + 2}",
            point_index=j)

    KU = K[:, :, None] * U
    A = np.empty((points.shape[0], d + 1, d + 1))
    b = np.empty((points.shape[0], d + 1))
    A[:, 0, 0] = mass
    A[:, 0, 1:] = KU.sum(axis=0)
    A[:, 1:, 0] = A[:, 0, 1:]
    A[:, 1:, 1:] = np.einsum("iac,iae->ace", KU, U)
    b[:, 0] = K.T @ Y
    b[:, 1:] = np.einsum("iac,i->ac", KU, Y)

    eigs = np.linalg.eigvalsh(A)
    degenerate = eigs[:, 0] <= _DEGENERATE_RTOL * eigs[:, -1]
    values = np.empty(points.shape[0])
    if np.any(~degenerate):
        sol = np.linalg.solve(A[~degenerate], b[~degenerate][:, :, None])
        values[~degenerate] = sol[:, 0, 0]
    values[degenerate] = b[degenerate, 0] / mass[degenerate]

    ess = float(np.min(mass**2 / (K * K).sum(axis=0)))
    diag = LocalFitDiagnostics(effective_sample_size=ess,
                               min_local_mass=float(mass.min()),
                               degenerate_points=np.flatnonzero(degenerate).tolist())
    return values, diag


def local_linear_mean(site: SiteSample, d_treat: int, x, spec: KernelSpec,
                      reweight=None, scale=None) -> float:
    """Local linear estimate of E[Y | X = x, D = d_treat] within one site."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mask = site.d_treat == d_treat
    if not np.any(mask):
        raise InsufficientLocalDataError(
            f"no units with treatment {d_treat}", site_id=site.site_id, d_treat=d_treat)
    w = _resolve_reweight(reweight, site.x)
    try:
        values, _ = loclin_mean_grid(site.x[mask], site.y[mask], x[None, :], spec,
                                     scale=scale,
                                     unit_weights=None if w is None else w[mask])
    except InsufficientLocalDataError as exc:
        raise exc.tagged(site.site_id, d_treat) from None
    return float(values[0])


def dyadic_grid(X1: np.ndarray, Y1: np.ndarray, X2: np.ndarray, Y2: np.ndarray,
                pts1: np.ndarray, pts2: np.ndarray, spec: KernelSpec, scale=None,
                w1: np.ndarray | None = None, w2: np.ndarray | None = None,
                overlap: tuple[np.ndarray, np.ndarray] | None = None,
                ) -> tuple[np.ndarray, LocalFitDiagnostics]:
    """Dyadic local linear fit of Y1_i * Y2_j over pairs, on a grid of (x1, x2).

    Fits Y1_i Y2_j ~ b0 + b11'(X1_i - x1) + b12'(X2_j - x2) by weighted least
    squares with product weights w_i(x1) w_j(x2), summing over ordered pairs.
    ``overlap`` lists index pairs (rows of slot 1, rows of slot 2) that refer
    to the same unit and must be excluded from the pair sum; those exclusions
    are applied exactly through closed-form corrections to the moment sums.

    Returns the (len(pts1), len(pts2)) intercept surface.
    """
    n1, d = X1.shape
    n2 = X2.shape[0]
    m1, m2 = pts1.shape[0], pts2.shape[0]
    scale = _resolve_scale(scale, d)
    if n1 == 0 or n2 == 0:
        raise InsufficientLocalDataError("a pair slot has no units")

    K1, U1 = _kernel_matrix(spec, X1, pts1, scale)
    K2, U2 = _kernel_matrix(spec, X2, pts2, scale)
    if w1 is not None:
        K1 = K1 * w1[:, None]
    if w2 is not None:
        K2 = K2 * w2[:, None]
    KU1 = K1[:, :, None] * U1
    KU2 = K2[:, :, None] * U2

    S0 = K1.sum(axis=0)
    S1 = KU1.sum(axis=0)
    S2 = np.einsum("iac,iae->ace", KU1, U1)
    SY0 = K1.T @ Y1
    SY1 = np.einsum("iac,i->ac", KU1, Y1)
    T0 = K2.sum(axis=0)
    T1 = KU2.sum(axis=0)
    T2 = np.einsum("iac,iae->ace", KU2, U2)
    TY0 = K2.T @ Y2
    TY1 = np.einsum("iac,i->ac", KU2, Y2)

    p = 2 * d + 1
    A = np.empty((m1, m2, p, p))
    rhs = np.empty((m1, m2, p))
    A[..., 0, 0] = S0[:, None] * T0[None, :]
    A[..., 0, 1:1 + d] = S1[:, None, :] * T0[None, :, None]
    A[..., 0, 1 + d:] = S0[:, None, None] * T1[None, :, :]
    A[..., 1:1 + d, 1:1 + d] = S2[:, None, :, :] * T0[None, :, None, None]
    A[..., 1:1 + d, 1 + d:] = S1[:, None, :, None] * T1[None, :, None, :]
    A[..., 1 + d:, 1 + d:] = S0[:, None, None, None] * T2[None, :, :, :]
    rhs[..., 0] = SY0[:, None] * TY0[None, :]
    rhs[..., 1:1 + d] = SY1[:, None, :] * TY0[None, :, None]
    rhs[..., 1 + d:] = SY0[:, None, None] * TY1[None, :, :]

    if overlap is not None and overlap[0].size:
        i1, i2 = overlap
        A1, A2 = K1[i1], K2[i2]
        AV1, AV2 = KU1[i1], KU2[i2]
        V1, V2 = U1[i1], U2[i2]
        Yp = Y1[i1] * Y2[i2]
        A[..., 0, 0] -= A1.T @ A2
        A[..., 0, 1:1 + d] -= np.einsum("qac,qb->abc", AV1, A2)
        A[..., 0, 1 + d:] -= np.einsum("qa,qbc->abc", A1, AV2)
        A[..., 1:1 + d, 1:1 + d] -= np.einsum("qace,qb->abce", AV1[:, :, :, None] * V1[:, :, None, :], A2)
        A[..., 1:1 + d, 1 + d:] -= np.einsum("qac,qbe->abce", AV1, AV2)
        A[..., 1 + d:, 1 + d:] -= np.einsum("qa,qbce->abce", A1, AV2[:, :, :, None] * V2[:, :, None, :])
        A1y = A1 * Yp[:, None]
        rhs[..., 0] -= A1y.T @ A2
        rhs[..., 1:1 + d] -= np.einsum("qac,qb->abc", AV1 * Yp[:, None, None], A2)
        rhs[..., 1 + d:] -= np.einsum("qa,qbc->abc", A1y, AV2)

    A[..., 1:1 + d, 0] = A[..., 0, 1:1 + d]
    A[..., 1 + d:, 0] = A[..., 0, 1 + d:]
    A[..., 1 + d:, 1:1 + d] = np.swapaxes(A[..., 1:1 + d, 1 + d:], -1, -2)

    mass = A[..., 0, 0]
    eps_pair = spec.mass_tol_factor * _EPS * n1 * n2
    if np.any(mass < eps_pair):
        flat = int(np.argmin(mass))
        raise InsufficientLocalDataError(
            f"pair weight mass {mass.ravel()[flat]:.3e} below threshold at point pair {flat}",
            point_index=flat)

    Af = A.reshape(m1 * m2, p, p)
    rf = rhs.reshape(m1 * m2, p)
    eigs = np.linalg.eigvalsh(Af)
    degenerate = eigs[:, 0] <= _DEGENERATE_RTOL * eigs[:, -1]
    values = np.empty(m1 * m2)
    if np.any(~degenerate):
        sol = np.linalg.solve(Af[~degenerate], rf[~degenerate][:, :, None])
        values[~degenerate] = sol[:, 0, 0]
    values[degenerate] = rf[degenerate, 0] / mass.ravel()[degenerate]

    sq_mass = np.maximum(_pair_sq_mass(K1, K2, overlap), _EPS * eps_pair)
    ess = float(np.min(mass**2 / sq_mass))
    diag = LocalFitDiagnostics(effective_sample_size=ess,
                               min_local_mass=float(mass.min()),
                               degenerate_points=np.flatnonzero(degenerate).tolist())
    return values.reshape(m1, m2), diag


def _pair_sq_mass(K1: np.ndarray, K2: np.ndarray, overlap) -> np.ndarray:
    sq = (K1 * K1).sum(axis=0)[:, None] * (K2 * K2).sum(axis=0)[None, :]
    if overlap is not None and overlap[0].size:
        i1, i2 = overlap
        sq = sq - (K1[i1] * K1[i1]).T @ (K2[i2] * K2[i2])
    return sq


def dyadic_local_linear(site: SiteSample, d1: int, d2: int, x1, x2, spec: KernelSpec,
                        reweight=None, scale=None) -> float:
    """Dyadic estimate of E[Y(d1) Y(d2) | x1, x2] within one site.

    For d1 == d2 the pair sum is symmetric under (i, j) <-> (j, i), so the
    estimate is evaluated at a canonical ordering of (x1, x2) to make the
    symmetry exact in floating point.
    """
    if site.n < 2:
        raise NoPairsError(f"site {site.site_id!r} has {site.n} unit(s); pairs need two")
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if d1 == d2 and tuple(x2) < tuple(x1):
        x1, x2 = x2, x1
    mask1 = site.d_treat == d1
    mask2 = site.d_treat == d2
    if not np.any(mask1) or not np.any(mask2):
        raise InsufficientLocalDataError(
            f"no units in arm pair ({d1},{d2})", site_id=site.site_id)
    w = _resolve_reweight(reweight, site.x)
    if d1 == d2:
        idx = np.arange(int(mask1.sum()))
        overlap = (idx, idx)
    else:
        overlap = None
    try:
        vals, _ = dyadic_grid(site.x[mask1], site.y[mask1], site.x[mask2], site.y[mask2],
                              x1[None, :], x2[None, :], spec, scale=scale,
                              w1=None if w is None else w[mask1],
                              w2=None if w is None else w[mask2],
                              overlap=overlap)
    except InsufficientLocalDataError as exc:
        raise exc.tagged(site.site_id) from None
    return float(vals[0, 0])
