"""Predictive basis construction.

The basis that is IMSE-optimal for predicting the treatment-effect function
from baseline mean functions solves the regularized generalized eigenproblem

    (T_mutau T_mutau*) phi_k = lambda_k (T_mumu + a I) phi_k.

On the grid the problem is whitened: with M = W^(1/2) H W^(1/2) the symmetric
matrix S = (M_mumu + aI)^(-1/2) M_mutau M_mutau' (M_mumu + aI)^(-1/2) is
eigendecomposed, and phi_k = W^(-1/2) (M_mumu + aI)^(-1/2) xi_k, which makes
<phi_k, (T_mumu + a I) phi_l> = delta_kl. The response functions are
psi_k = T_mutau* phi_k. Functional principal components of a single
self-covariance operator are provided as the comparison baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import GridMismatchError, InvalidConfigError, NotPsdError, RankDeficientWarning
from .operators import DiscretizedFunction, OperatorMatrix, QuadratureGrid

_RANK_RTOL = 1e-12
_PSD_ATOL = 1e-8


class Normalization(Enum):
    REGULARIZED = "phi_T_mumu_a_orthonormal"


@dataclass
class BasisSet:
    """Solution of the regularized predictive eigenproblem.

    Eigenvalues are sorted descending; each predictor function phi_k is
    paired with its response function psi_k. K may be smaller than requested
    when the problem is rank deficient. The sign convention fixes the grid
    value of phi_k with the largest magnitude to be positive.
    """

    grid: QuadratureGrid
    a: float
    K: int
    lam: np.ndarray
    phi: list[DiscretizedFunction]
    psi: list[DiscretizedFunction]
    normalization: Normalization = Normalization.REGULARIZED

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if self.K != len(self.phi) or self.K != len(self.psi) or self.K != self.lam.size:
            raise InvalidConfigError("inconsistent basis set sizes")
        if np.any(np.diff(self.lam) > 0):
            raise InvalidConfigError("eigenvalues must be nonincreasing")

    def to_json_dict(self) -> dict:
        return {
            "kind": "basis",
            "a": self.a,
            "K": self.K,
            "lambda": self.lam.tolist(),
            "normalization": self.normalization.value,
            "grid": self.grid.to_json_dict(),
            "phi": [f.values.tolist() for f in self.phi],
            "psi": [f.values.tolist() for f in self.psi],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BasisSet":
        grid = QuadratureGrid.from_json_dict(doc["grid"])
        return cls(grid=grid, a=float(doc["a"]), K=int(doc["K"]),
                   lam=np.array(doc["lambda"], dtype=float),
                   phi=[DiscretizedFunction(grid, np.array(v)) for v in doc["phi"]],
                   psi=[DiscretizedFunction(grid, np.array(v)) for v in doc["psi"]],
                   normalization=Normalization(doc["normalization"]))


@dataclass
class FpcBasis:
    """Leading functional principal components of a self-covariance operator."""

    grid: QuadratureGrid
    eigenvalues: np.ndarray
    eigenfunctions: list[DiscretizedFunction]

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(self.eigenvalues) > 0):
            raise InvalidConfigError("eigenvalues must be nonincreasing")

    @property
    def K(self) -> int:
        return self.eigenvalues.size

    def to_json_dict(self) -> dict:
        return {
            "kind": "fpc_basis",
            "eigenvalues": self.eigenvalues.tolist(),
            "grid": self.grid.to_json_dict(),
            "eigenfunctions": [f.values.tolist() for f in self.eigenfunctions],
        }


def _fix_sign(vec: np.ndarray) -> float:
    """Sign making the largest-magnitude entry positive (ties: first index)."""
    j = int(np.argmax(np.abs(vec)))
    return -1.0 if vec[j] < 0 else 1.0


def _check_psd(M: np.ndarray, label: str) -> np.ndarray:
    evals = np.linalg.eigvalsh(M)
    if evals[0] < -_PSD_ATOL:
        raise NotPsdError(f"{label} has eigenvalue {evals[0]:.3e}; project it onto the PSD cone first")
    return evals


def compute_psi(t_mutau: OperatorMatrix, phi_k: DiscretizedFunction) -> DiscretizedFunction:
    """Response function psi_k(x) = sum_j H_mutau(x_j, x) phi_k(x_j) w_j."""
    if not t_mutau.grid.same_grid(phi_k.grid):
        raise GridMismatchError("phi lives on a different grid than the operator")
    return t_mutau.apply(phi_k)


def solve_optimal_basis(t_mumu: OperatorMatrix, t_mutau: OperatorMatrix,
                        a: float, K: int) -> BasisSet:
    """Solve the regularized predictive eigenproblem for the K leading pairs.

    Parameters
    ----------
    t_mumu : OperatorMatrix
        Baseline self-covariance kernel; must be PSD up to 1e-8 (apply
        ``psd_project`` beforehand on estimated kernels).
    t_mutau : OperatorMatrix
        Cross-covariance kernel, baseline slot first.
    a : float
        Regularization (spectral shift of the baseline operator), a > 0.
    K : int
        Number of eigenpairs requested, at most the grid size.

    If fewer than K eigenvalues exceed 1e-12 times the leading one, the
    basis is truncated to the informative rank and a RankDeficientWarning is
    emitted rather than an error.
    """
    if not a > 0:
        raise InvalidConfigError(f"regularization a must be positive, got {a}")
    grid = t_mumu.grid
    if not grid.same_grid(t_mutau.grid):
        raise GridMismatchError("operators live on different grids")
    if not 1 <= K <= grid.m:
        raise InvalidConfigError(f"K must be in [1, {grid.m}], got {K}")

    M_mm = t_mumu.weighted()
    M_mm = 0.5 * (M_mm + M_mm.T)
    _check_psd(M_mm, "T_mumu")
    M_mt = t_mutau.weighted()

    evals, evecs = np.linalg.eigh(M_mm)
    inv_sqrt = (evecs * (np.maximum(evals, 0.0) + a) ** -0.5) @ evecs.T
    C = inv_sqrt @ M_mt
    S = C @ C.T
    S = 0.5 * (S + S.T)
    lam_all, xi_all = np.linalg.eigh(S)
    order = np.argsort(lam_all)[::-1]
    lam_all = np.maximum(lam_all[order], 0.0)
    xi_all = xi_all[:, order]

    informative = int(np.sum(lam_all > _RANK_RTOL * lam_all[0])) if lam_all[0] > 0 else 0
    k_eff = min(K, informative)
    if k_eff < K:
        warnings.warn(
            f"requested K={K} but only {k_eff} informative eigenvalues; basis truncated",
            RankDeficientWarning, stacklevel=2)

    rw = np.sqrt(grid.weights)
    phi, psi = [], []
    lam = lam_all[:k_eff].copy()
    t_mutau_sym = OperatorMatrix(grid, t_mutau.kernel)
    for k in range(k_eff):
        phi_vals = (inv_sqrt @ xi_all[:, k]) / rw
        phi_vals = _fix_sign(phi_vals) * phi_vals
        phi_k = DiscretizedFunction(grid, phi_vals)
        phi.append(phi_k)
        psi.append(compute_psi(t_mutau_sym, phi_k))
    return BasisSet(grid=grid, a=float(a), K=k_eff, lam=lam, phi=phi, psi=psi)


def solve_fpc(t_self: OperatorMatrix, K: int) -> FpcBasis:
    """Leading K functional principal components of a self-covariance operator.

    Eigenfunctions are orthonormal in L2(X, f0) and follow the same sign
    convention as the predictive basis.
    """
    grid = t_self.grid
    if not 1 <= K <= grid.m:
        raise InvalidConfigError(f"K must be in [1, {grid.m}], got {K}")
    M = t_self.weighted()
    M = 0.5 * (M + M.T)
    _check_psd(M, "operator")
    evals, evecs = np.linalg.eigh(M)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]

    informative = int(np.sum(evals > _RANK_RTOL * evals[0])) if evals[0] > 0 else 0
    k_eff = min(K, informative)
    if k_eff < K:
        warnings.warn(
            f"requested K={K} but only {k_eff} informative eigenvalues; basis truncated",
            RankDeficientWarning, stacklevel=2)

    rw = np.sqrt(grid.weights)
    funcs = []
    for k in range(k_eff):
        vals = evecs[:, k] / rw
        vals = _fix_sign(vals) * vals
        funcs.append(DiscretizedFunction(grid, vals))
    return FpcBasis(grid=grid, eigenvalues=evals[:k_eff].copy(), eigenfunctions=funcs)
