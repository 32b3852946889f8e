"""Target-site scores, predicted CATE, and reporting aggregates.

The predicted effect function at a held-out site is the cross-site mean
effect plus a linear combination of response functions, with loadings read
off the site's centered baseline mean function:

    t_k = (1+a)/(1-a) * <mu_g - mu_mean, phi_k>,
    tau_hat(x) = tau_mean(x) + sum_k t_k psi_k(x).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .basis import BasisSet, FpcBasis
from .errors import (
    DegenerateVarianceError,
    EmptyUnitListError,
    GridMismatchError,
    InvalidConfigError,
    OutOfGridRangeWarning,
    UnmappedSiteError,
)
from .operators import DiscretizedFunction, OperatorMatrix, QuadratureGrid, inner_product


@dataclass
class ScoreVector:
    """Basis loadings of one site's centered baseline mean function."""

    site_id: str
    t: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if not np.all(np.isfinite(self.t)):
            raise InvalidConfigError("scores must be finite")

    def to_json_dict(self) -> dict:
        return {"kind": "scores", "site_id": self.site_id, "t": self.t.tolist()}


@dataclass
class CatePrediction:
    """Predicted conditional average treatment effect for one site."""

    site_id: str
    grid: QuadratureGrid
    tau_hat: DiscretizedFunction
    tau_mean: DiscretizedFunction
    k_used: int

    @property
    def centered(self) -> np.ndarray:
        """Prediction deviation from the cross-site mean effect."""
        return self.tau_hat.values - self.tau_mean.values

    def to_json_dict(self) -> dict:
        return {
            "kind": "cate_prediction",
            "site_id": self.site_id,
            "k_used": self.k_used,
            "grid": self.grid.to_json_dict(),
            "tau_hat": self.tau_hat.values.tolist(),
            "tau_mean": self.tau_mean.values.tolist(),
        }


def compute_scores(mu_g: DiscretizedFunction, mu_mean: DiscretizedFunction,
                   basis: BasisSet, site_id: str = "") -> ScoreVector:
    """Loadings t_k = (1+a)/(1-a) <mu_g - mu_mean, phi_k> for k = 1..K."""
    if not mu_g.grid.same_grid(mu_mean.grid) or not mu_g.grid.same_grid(basis.grid):
        raise GridMismatchError("scores need mean functions and basis on one grid")
    if basis.a >= 1.0:
        raise InvalidConfigError("the score factor (1+a)/(1-a) requires a < 1")
    dev = DiscretizedFunction(mu_g.grid, mu_g.values - mu_mean.values)
    factor = (1.0 + basis.a) / (1.0 - basis.a)
    t = np.array([factor * inner_product(dev, phi_k) for phi_k in basis.phi])
    return ScoreVector(site_id=site_id, t=t)


def predict_cate(scores: ScoreVector, tau_mean: DiscretizedFunction,
                 basis: BasisSet, k_use: int | None = None) -> CatePrediction:
    """tau_hat = tau_mean + sum_{k <= k_use} t_k psi_k, pointwise on the grid."""
    if k_use is None:
        k_use = basis.K
    if not 0 <= k_use <= basis.K:
        raise InvalidConfigError(f"k_use must be in [0, {basis.K}], got {k_use}")
    if scores.t.size < k_use:
        raise InvalidConfigError("score vector shorter than k_use")
    if not tau_mean.grid.same_grid(basis.grid):
        raise GridMismatchError("tau_mean lives on a different grid than the basis")
    values = tau_mean.values.copy()
    for k in range(k_use):
        values = values + scores.t[k] * basis.psi[k].values
    return CatePrediction(site_id=scores.site_id, grid=basis.grid,
                          tau_hat=DiscretizedFunction(basis.grid, values),
                          tau_mean=tau_mean, k_used=k_use)


def fpc_prediction_components(mu_g: DiscretizedFunction, mu_mean: DiscretizedFunction,
                              fpc: FpcBasis, t_mutau: OperatorMatrix,
                              site_id: str = "") -> tuple[ScoreVector, list[DiscretizedFunction]]:
    """Scores and response functions for prediction from an FPC basis.

    The best linear predictor given FPC features uses loadings
    s_k = <mu_g - mu_mean, xi_k> / nu_k and responses T_mutau* xi_k, so the
    pair plugs straight into :func:`predict_cate` via a wrapper basis.
    """
    if not mu_g.grid.same_grid(fpc.grid) or not t_mutau.grid.same_grid(fpc.grid):
        raise GridMismatchError("FPC prediction needs all inputs on one grid")
    dev = DiscretizedFunction(mu_g.grid, mu_g.values - mu_mean.values)
    t = []
    psi = []
    for nu, xi in zip(fpc.eigenvalues, fpc.eigenfunctions):
        if nu <= 0:
            break
        t.append(inner_product(dev, xi) / nu)
        psi.append(t_mutau.apply(xi))
    return ScoreVector(site_id=site_id, t=np.array(t)), psi


def predict_from_components(site_id: str, tau_mean: DiscretizedFunction,
                            scores: ScoreVector, psi: list[DiscretizedFunction],
                            k_use: int) -> CatePrediction:
    """Prediction from explicit score/response pairs (used by the FPC baseline)."""
    if not 0 <= k_use <= min(scores.t.size, len(psi)):
        raise InvalidConfigError("k_use out of range for the supplied components")
    values = tau_mean.values.copy()
    for k in range(k_use):
        values = values + scores.t[k] * psi[k].values
    return CatePrediction(site_id=site_id, grid=tau_mean.grid,
                          tau_hat=DiscretizedFunction(tau_mean.grid, values),
                          tau_mean=tau_mean, k_used=k_use)


def interpolate_on_grid(grid: QuadratureGrid, values: np.ndarray, X) -> np.ndarray:
    """Multilinear interpolation of grid values at arbitrary points.

    Points outside the grid bounding box raise an OutOfGridRangeWarning and
    are clamped to the nearest grid face; points between the box edge and the
    outermost node are clamped to the node hull silently (the quadrature
    nodes are interior to the box).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != grid.d:
        raise GridMismatchError(f"points have dimension {X.shape[1]}, grid has {grid.d}")
    lo = np.array([b[0] for b in grid.bounds])
    hi = np.array([b[1] for b in grid.bounds])
    outside = np.any((X < lo) | (X > hi), axis=1)
    if np.any(outside):
        warnings.warn(
            f"{int(outside.sum())} point(s) outside the grid bounding box were clamped",
            OutOfGridRangeWarning, stacklevel=2)
        X = np.clip(X, lo, hi)

    axes = grid.axes
    p = grid.points_per_dim
    lattice = values.reshape((p,) * grid.d)
    n = X.shape[0]
    idx_lo = np.empty((n, grid.d), dtype=int)
    frac = np.empty((n, grid.d))
    for c in range(grid.d):
        ax = axes[c]
        xc = np.clip(X[:, c], ax[0], ax[-1])
        j = np.clip(np.searchsorted(ax, xc, side="right") - 1, 0, p - 2)
        idx_lo[:, c] = j
        frac[:, c] = (xc - ax[j]) / (ax[j + 1] - ax[j])

    out = np.zeros(n)
    for corner in range(2 ** grid.d):
        w = np.ones(n)
        idx = []
        for c in range(grid.d):
            up = (corner >> c) & 1
            w = w * (frac[:, c] if up else 1.0 - frac[:, c])
            idx.append(idx_lo[:, c] + up)
        out += w * lattice[tuple(idx)]
    return out


def site_average_effect(pred: CatePrediction, target_units) -> float:
    """Average of the centered prediction over the listed unit covariates."""
    X = np.atleast_2d(np.asarray(target_units, dtype=float))
    if X.size == 0:
        raise EmptyUnitListError("no target units supplied")
    vals = interpolate_on_grid(pred.grid, pred.centered, X)
    return float(np.mean(vals))


def study_aggregate(site_averages: dict[str, float],
                    grouping: dict[str, str]) -> dict[str, float]:
    """Unweighted mean of per-site averages within each study label."""
    buckets: dict[str, list[float]] = {}
    for site_id, value in site_averages.items():
        if site_id not in grouping:
            raise UnmappedSiteError(f"site {site_id!r} has no study label")
        buckets.setdefault(grouping[site_id], []).append(value)
    return {label: float(np.mean(vals)) for label, vals in sorted(buckets.items())}


def evaluate_holdout_correlation(predicted, realized) -> float:
    """Pearson correlation between predicted and realized per-site values."""
    p = np.asarray(list(predicted), dtype=float)
    r = np.asarray(list(realized), dtype=float)
    if p.shape != r.shape or p.ndim != 1:
        raise InvalidConfigError("predicted and realized must be equal-length vectors")
    if p.size < 3:
        raise InvalidConfigError(f"need at least 3 sites, got {p.size}")
    if np.std(p) == 0 or np.std(r) == 0:
        raise DegenerateVarianceError("zero variance in predicted or realized values")
    return float(np.corrcoef(p, r)[0, 1])
