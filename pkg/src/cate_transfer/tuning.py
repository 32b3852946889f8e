"""Leave-one-site-out cross-validation for bandwidths and regularization.

Folds are sites, not units: the estimands are cross-site structures, so each
experimental site is held out exactly once per candidate. Bandwidth losses
compare the held-out site's own fit, taken at a fixed reference bandwidth
(the smallest candidate at which every site fits) so the reference does not
move with the candidate, against the leave-one-out cross-site average at the
candidate bandwidth.
Regularization is scored by cross-site prediction: the basis built without
site g predicts tau_g from the site's baseline fit, validated against the
site's own experimental effect estimate.

Losses are f0-weighted integrated squared errors with equal fold weights.
Ties break toward the smallest bandwidth and the largest regularization.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .basis import solve_fpc, solve_optimal_basis
from .data_io import Dataset, Design
from .errors import (
    AllCandidatesFailedError,
    DegenerateVarianceError,
    InvalidConfigError,
    RankDeficientWarning,
    TransferError,
)
from .kernels import KernelFamily, KernelSpec, dyadic_grid, h_rate_rule
from .operators import (
    DiscretizedFunction,
    OperatorMatrix,
    QuadratureGrid,
    _fit_site_mean,
    _site_pair_surface,
    _site_reweight,
    psd_project,
)
from .transfer import (
    compute_scores,
    evaluate_holdout_correlation,
    fpc_prediction_components,
    predict_cate,
    predict_from_components,
)
from ._threads import ordered_map


@dataclass
class CvPlan:
    """Candidate grids and fold policy for cross-validation."""

    h_mu_grid: tuple[float, ...]
    h_H_grid: tuple[float, ...]
    a_grid: tuple[float, ...]
    K_cv: int = 2
    kernel_family: str = "gaussian"

    def __post_init__(self):
        for name, g in (("h_mu_grid", self.h_mu_grid), ("h_H_grid", self.h_H_grid),
                        ("a_grid", self.a_grid)):
            if not g:
                raise InvalidConfigError(f"{name} must be nonempty")
            if any(v <= 0 for v in g):
                raise InvalidConfigError(f"{name} must be positive")
            if list(g) != sorted(g):
                raise InvalidConfigError(f"{name} must be sorted ascending")
        if any(a >= 1.0 for a in self.a_grid):
            raise InvalidConfigError("a_grid must lie in (0, 1)")
        if self.K_cv < 1:
            raise InvalidConfigError("K_cv must be at least 1")

    def spec(self, h: float) -> KernelSpec:
        return KernelSpec(family=KernelFamily(self.kernel_family), bandwidth=h)


@dataclass
class CvTable:
    """Per-candidate summary for one tuning parameter."""

    parameter: str
    candidates: list[float]
    losses: list[float]          # nan where a candidate was excluded
    folds_ok: list[int]
    chosen: float

    def to_json_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "candidates": self.candidates,
            "losses": [None if np.isnan(v) else v for v in self.losses],
            "folds_ok": self.folds_ok,
            "chosen": self.chosen,
        }


@dataclass
class CvReport:
    """Chosen tuning parameters with their loss tables."""

    h_mu: float
    h_H: float
    a: float
    k_cv: int
    folds: int
    tables: list[CvTable] = field(default_factory=list)
    h_rate_reference: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": "cv_report",
            "h_mu": self.h_mu,
            "h_H": self.h_H,
            "a": self.a,
            "k_cv": self.k_cv,
            "folds": self.folds,
            "h_rate_reference": self.h_rate_reference,
            "tables": [t.to_json_dict() for t in self.tables],
        }


def _pick(candidates, losses, prefer_large: bool) -> float:
    """Argmin with a rounding-tolerant tie rule.

    Losses within max(1e-12, 1e-9 * |best|) of the best count as tied; ties
    resolve to the smallest bandwidth or the largest regularization.
    """
    losses = np.asarray(losses, dtype=float)
    if np.all(np.isnan(losses)):
        raise AllCandidatesFailedError("every candidate failed in every fold")
    best = np.nanmin(losses)
    tol = max(1e-12, 1e-9 * abs(best))
    tied = np.flatnonzero(~np.isnan(losses) & (losses <= best + tol))
    idx = int(tied[-1]) if prefer_large else int(tied[0])
    return float(candidates[idx])


def _integrated_sq(diff: np.ndarray, w: np.ndarray) -> float:
    return float(np.sum(diff * diff * w))


def _surface_sq(diff: np.ndarray, w: np.ndarray) -> float:
    return float(w @ (diff * diff) @ w)


def _mean_arms(ds: Dataset) -> list[tuple[int, int | None]]:
    """(d_treat, period) combinations entering the mean-fit CV loss."""
    if ds.design is Design.WITHIN_CLUSTER:
        return [(0, None), (1, None)]
    return [(0, 0)]


def _canonical_sites(ds: Dataset):
    """Experimental sites in site-id order, so CV losses do not depend on the
    ordering of sites in the dataset."""
    return sorted(ds.experimental, key=lambda s: s.site_id)


def _pick_reference(candidates, fits_by_h) -> dict:
    """Held-out reference fits: the smallest candidate where every site fit."""
    for h in candidates:
        fits = fits_by_h[h]
        if all(f is not None for f in fits.values()):
            return fits
    raise AllCandidatesFailedError("no candidate produced fits for every site")


def _site_mean_fits(ds: Dataset, grid: QuadratureGrid, spec: KernelSpec,
                    threads: int) -> dict[str, dict | None]:
    """Per-site fits for every arm; None marks a site whose fit failed."""
    scale = ds.covariate_scale()
    arms = _mean_arms(ds)

    def work(site):
        rw = _site_reweight(ds, site, grid)
        try:
            return {arm: _fit_site_mean(site, arm[0], grid, spec, scale, rw, period=arm[1])[0]
                    for arm in arms}
        except TransferError:
            return None

    sites = _canonical_sites(ds)
    fits = ordered_map(work, sites, threads)
    return {s.site_id: f for s, f in zip(sites, fits)}


def _loo_fold_losses(sites, ref, fits, arms, loss_fn) -> list[float]:
    """One loss per valid fold; a fold is valid when the held-out reference
    and every remaining site's candidate fit are available."""
    out = []
    for held in sites:
        if ref[held.site_id] is None:
            continue
        others = [fits[s.site_id] for s in sites if s.site_id != held.site_id]
        if any(f is None for f in others):
            continue
        loss = 0.0
        for arm in arms:
            loo_mean = np.mean([f[arm] for f in others], axis=0)
            loss += loss_fn(ref[held.site_id][arm] - loo_mean)
        out.append(loss / len(arms))
    return out


def cv_bandwidth_mean(ds: Dataset, grid: QuadratureGrid, plan: CvPlan,
                      threads: int = 1) -> CvTable:
    """Choose the mean-function bandwidth by leave-one-site-out validation.

    For each candidate h, each experimental site in turn is held out and the
    cross-site mean fit from the remaining sites (at h) is scored against the
    held-out site's own fit at a fixed reference bandwidth (the smallest
    candidate at which every site fit succeeds).
    """
    sites = _canonical_sites(ds)
    if len(sites) < 3:
        raise InvalidConfigError("bandwidth CV needs at least 3 experimental sites")
    arms = _mean_arms(ds)
    w = grid.weights
    fits_by_h = {h: _site_mean_fits(ds, grid, plan.spec(h), threads)
                 for h in plan.h_mu_grid}
    ref = _pick_reference(plan.h_mu_grid, fits_by_h)

    losses, folds_ok = [], []
    for h in plan.h_mu_grid:
        fold_losses = _loo_fold_losses(sites, ref, fits_by_h[h], arms,
                                       lambda diff: _integrated_sq(diff, w))
        losses.append(float(np.mean(fold_losses)) if fold_losses else float("nan"))
        folds_ok.append(len(fold_losses))
    chosen = _pick(plan.h_mu_grid, losses, prefer_large=False)
    return CvTable("h_mu", list(plan.h_mu_grid), losses, folds_ok, chosen)


def _pair_arms(ds: Dataset) -> list[tuple[int, int]]:
    if ds.design is Design.WITHIN_CLUSTER:
        return [(0, 0), (0, 1), (1, 1)]
    return [(0, 0)]


def _site_pair_fits(ds: Dataset, grid: QuadratureGrid, spec: KernelSpec,
                    threads: int) -> dict[str, dict | None]:
    scale = ds.covariate_scale()
    arms = _pair_arms(ds)

    def work(site):
        rw = _site_reweight(ds, site, grid)
        out = {}
        try:
            for arm in arms:
                if ds.design is Design.WITHIN_CLUSTER:
                    out[arm], _ = _site_pair_surface(site, arm[0], arm[1], grid, spec, scale, rw)
                else:
                    b0 = (site.period == 0) & (site.d_treat == 0)
                    idx = np.arange(int(b0.sum()))
                    out[arm], _ = dyadic_grid(site.x[b0], site.y[b0], site.x[b0], site.y[b0],
                                              grid.points, grid.points, spec, scale=scale,
                                              w1=None if rw is None else rw[b0],
                                              w2=None if rw is None else rw[b0],
                                              overlap=(idx, idx))
        except TransferError:
            return None
        return out

    sites = _canonical_sites(ds)
    fits = ordered_map(work, sites, threads)
    return {s.site_id: f for s, f in zip(sites, fits)}


def cv_bandwidth_cov(ds: Dataset, grid: QuadratureGrid, plan: CvPlan,
                     threads: int = 1) -> CvTable:
    """Choose the covariance-surface bandwidth by leave-one-site-out validation.

    The fold loss is the f0 x f0 weighted squared deviation between the
    held-out site's dyadic second-moment surfaces (at a fixed reference
    bandwidth) and the leave-one-out average surface at the candidate.
    """
    sites = _canonical_sites(ds)
    if len(sites) < 3:
        raise InvalidConfigError("bandwidth CV needs at least 3 experimental sites")
    arms = _pair_arms(ds)
    w = grid.weights
    fits_by_h = {h: _site_pair_fits(ds, grid, plan.spec(h), threads)
                 for h in plan.h_H_grid}
    ref = _pick_reference(plan.h_H_grid, fits_by_h)

    losses, folds_ok = [], []
    for h in plan.h_H_grid:
        fold_losses = _loo_fold_losses(sites, ref, fits_by_h[h], arms,
                                       lambda diff: _surface_sq(diff, w))
        losses.append(float(np.mean(fold_losses)) if fold_losses else float("nan"))
        folds_ok.append(len(fold_losses))
    chosen = _pick(plan.h_H_grid, losses, prefer_large=False)
    return CvTable("h_H", list(plan.h_H_grid), losses, folds_ok, chosen)


def cv_regularization(ds: Dataset, grid: QuadratureGrid, plan: CvPlan,
                      spec_mu: KernelSpec, spec_H: KernelSpec,
                      threads: int = 1) -> CvTable:
    """Choose the regularization a by leave-one-site-out prediction error.

    Each fold rebuilds the covariance operators without the held-out site,
    solves the basis at each candidate a (K_cv functions), predicts the
    held-out site's effect function from its baseline fit, and scores the
    prediction against the site's own experimental effect estimate.
    """
    if ds.design is not Design.WITHIN_CLUSTER:
        raise InvalidConfigError("regularization CV requires the within-cluster design")
    sites = _canonical_sites(ds)
    if len(sites) < 4:
        raise InvalidConfigError("regularization CV needs at least 4 experimental sites")
    w = grid.weights
    scale = ds.covariate_scale()

    # per-site ingredients, reused across folds and candidates
    def work(site):
        rw = _site_reweight(ds, site, grid)
        mu0_mu, _ = _fit_site_mean(site, 0, grid, spec_mu, scale, rw)
        mu1_mu, _ = _fit_site_mean(site, 1, grid, spec_mu, scale, rw)
        mu0_H, _ = _fit_site_mean(site, 0, grid, spec_H, scale, rw)
        mu1_H, _ = _fit_site_mean(site, 1, grid, spec_H, scale, rw)
        s00, _ = _site_pair_surface(site, 0, 0, grid, spec_H, scale, rw)
        s01, _ = _site_pair_surface(site, 0, 1, grid, spec_H, scale, rw)
        return {"mu0_mu": mu0_mu, "mu1_mu": mu1_mu, "mu0_H": mu0_H, "mu1_H": mu1_H,
                "s00": s00, "s01": s01}

    parts = {s.site_id: p for s, p in zip(sites, ordered_map(work, sites, threads))}

    fold_losses: dict[float, list[float]] = {a: [] for a in plan.a_grid}
    for held in sites:
        rest = [s.site_id for s in sites if s.site_id != held.site_id]
        mu0_H = np.mean([parts[r]["mu0_H"] for r in rest], axis=0)
        mu1_H = np.mean([parts[r]["mu1_H"] for r in rest], axis=0)
        M00 = np.mean([parts[r]["s00"] for r in rest], axis=0)
        M01 = np.mean([parts[r]["s01"] for r in rest], axis=0)
        H00 = M00 - np.outer(mu0_H, mu0_H)
        h_mumu, _ = psd_project(OperatorMatrix(grid, 0.5 * (H00 + H00.T)))
        h_mutau = OperatorMatrix(grid, (M01 - np.outer(mu0_H, mu1_H)) - H00)

        mu0_mean = DiscretizedFunction(grid, np.mean([parts[r]["mu0_mu"] for r in rest], axis=0))
        mu1_mean = np.mean([parts[r]["mu1_mu"] for r in rest], axis=0)
        tau_mean = DiscretizedFunction(grid, mu1_mean - mu0_mean.values)
        mu_held = DiscretizedFunction(grid, parts[held.site_id]["mu0_mu"])
        tau_held = parts[held.site_id]["mu1_mu"] - parts[held.site_id]["mu0_mu"]

        for a in plan.a_grid:
            try:
                bset = solve_optimal_basis(h_mumu, h_mutau, a, plan.K_cv)
                scores = compute_scores(mu_held, mu0_mean, bset, site_id=held.site_id)
                pred = predict_cate(scores, tau_mean, bset, k_use=bset.K)
            except TransferError:
                continue
            fold_losses[a].append(_integrated_sq(pred.tau_hat.values - tau_held, w))

    losses, folds_ok = [], []
    for a in plan.a_grid:
        ok = fold_losses[a]
        folds_ok.append(len(ok))
        losses.append(float(np.mean(ok)) if ok else float("nan"))
    chosen = _pick(plan.a_grid, losses, prefer_large=True)
    return CvTable("a", list(plan.a_grid), losses, folds_ok, chosen)


def cv_regularization_joint(ds: Dataset, grid: QuadratureGrid, plan: CvPlan,
                            spec_mu: KernelSpec, spec_H: KernelSpec,
                            threads: int = 1) -> tuple[float, int, list[dict]]:
    """Joint (a, K) selection over a_grid x {1..K_cv}.

    Same folds and loss as :func:`cv_regularization`, but the truncation order
    varies with the candidate. Not the default tuning path; selecting K by
    this criterion has no established guarantee, so the main pipeline keeps
    K fixed during a-selection.
    """
    if ds.design is not Design.WITHIN_CLUSTER:
        raise InvalidConfigError("regularization CV requires the within-cluster design")
    sites = _canonical_sites(ds)
    if len(sites) < 4:
        raise InvalidConfigError("regularization CV needs at least 4 experimental sites")
    w = grid.weights
    scale = ds.covariate_scale()

    def work(site):
        rw = _site_reweight(ds, site, grid)
        mu0_mu, _ = _fit_site_mean(site, 0, grid, spec_mu, scale, rw)
        mu1_mu, _ = _fit_site_mean(site, 1, grid, spec_mu, scale, rw)
        mu0_H, _ = _fit_site_mean(site, 0, grid, spec_H, scale, rw)
        mu1_H, _ = _fit_site_mean(site, 1, grid, spec_H, scale, rw)
        s00, _ = _site_pair_surface(site, 0, 0, grid, spec_H, scale, rw)
        s01, _ = _site_pair_surface(site, 0, 1, grid, spec_H, scale, rw)
        return {"mu0_mu": mu0_mu, "mu1_mu": mu1_mu, "mu0_H": mu0_H, "mu1_H": mu1_H,
                "s00": s00, "s01": s01}

    parts = {s.site_id: p for s, p in zip(sites, ordered_map(work, sites, threads))}
    pairs = [(a, k) for a in plan.a_grid for k in range(1, plan.K_cv + 1)]
    fold_losses: dict[tuple[float, int], list[float]] = {p: [] for p in pairs}
    for held in sites:
        rest = [s.site_id for s in sites if s.site_id != held.site_id]
        mu0_H = np.mean([parts[r]["mu0_H"] for r in rest], axis=0)
        mu1_H = np.mean([parts[r]["mu1_H"] for r in rest], axis=0)
        M00 = np.mean([parts[r]["s00"] for r in rest], axis=0)
        M01 = np.mean([parts[r]["s01"] for r in rest], axis=0)
        H00 = M00 - np.outer(mu0_H, mu0_H)
        h_mumu, _ = psd_project(OperatorMatrix(grid, 0.5 * (H00 + H00.T)))
        h_mutau = OperatorMatrix(grid, (M01 - np.outer(mu0_H, mu1_H)) - H00)
        mu0_mean = DiscretizedFunction(grid, np.mean([parts[r]["mu0_mu"] for r in rest], axis=0))
        mu1_mean = np.mean([parts[r]["mu1_mu"] for r in rest], axis=0)
        tau_mean = DiscretizedFunction(grid, mu1_mean - mu0_mean.values)
        mu_held = DiscretizedFunction(grid, parts[held.site_id]["mu0_mu"])
        tau_held = parts[held.site_id]["mu1_mu"] - parts[held.site_id]["mu0_mu"]
        for a in plan.a_grid:
            try:
                with _suppress_rank_warnings():
                    bset = solve_optimal_basis(h_mumu, h_mutau, a, plan.K_cv)
                scores = compute_scores(mu_held, mu0_mean, bset, site_id=held.site_id)
            except TransferError:
                continue
            for k in range(1, plan.K_cv + 1):
                pred = predict_cate(scores, tau_mean, bset, k_use=min(k, bset.K))
                fold_losses[(a, k)].append(
                    _integrated_sq(pred.tau_hat.values - tau_held, w))

    table = [{"a": a, "K": k,
              "loss": float(np.mean(v)) if (v := fold_losses[(a, k)]) else None,
              "folds_ok": len(fold_losses[(a, k)])}
             for a, k in pairs]
    valid = [row for row in table if row["loss"] is not None]
    if not valid:
        raise AllCandidatesFailedError("every (a, K) candidate failed in every fold")
    best = min(valid, key=lambda r: (r["loss"], -r["a"], r["K"]))
    return float(best["a"]), int(best["K"]), table


def loo_basis_comparison(ds: Dataset, grid: QuadratureGrid, spec_mu: KernelSpec,
                         spec_H: KernelSpec, a: float, k_max: int,
                         threads: int = 1) -> list[dict]:
    """Leave-one-site-out prediction losses of the predictive basis vs FPC.

    For each truncation order K <= k_max, every experimental site is predicted
    from a basis built without it, once with the regularized predictive basis
    and once with the leading functional principal components of the baseline
    covariance. Returns one row per K with mean integrated losses and, where
    defined, the cross-site correlation between predicted and realized
    f0-average effects.
    """
    if ds.design is not Design.WITHIN_CLUSTER:
        raise InvalidConfigError("basis comparison requires the within-cluster design")
    sites = _canonical_sites(ds)
    if len(sites) < 4:
        raise InvalidConfigError("basis comparison needs at least 4 experimental sites")
    w = grid.weights
    scale = ds.covariate_scale()

    def work(site):
        rw = _site_reweight(ds, site, grid)
        mu0_mu, _ = _fit_site_mean(site, 0, grid, spec_mu, scale, rw)
        mu1_mu, _ = _fit_site_mean(site, 1, grid, spec_mu, scale, rw)
        mu0_H, _ = _fit_site_mean(site, 0, grid, spec_H, scale, rw)
        mu1_H, _ = _fit_site_mean(site, 1, grid, spec_H, scale, rw)
        s00, _ = _site_pair_surface(site, 0, 0, grid, spec_H, scale, rw)
        s01, _ = _site_pair_surface(site, 0, 1, grid, spec_H, scale, rw)
        return {"mu0_mu": mu0_mu, "mu1_mu": mu1_mu, "mu0_H": mu0_H, "mu1_H": mu1_H,
                "s00": s00, "s01": s01}

    parts = {s.site_id: p for s, p in zip(sites, ordered_map(work, sites, threads))}

    losses = {("optimal", k): [] for k in range(1, k_max + 1)}
    losses.update({("fpc", k): [] for k in range(1, k_max + 1)})
    averages = {key: [] for key in losses}
    realized_avg = []
    for held in sites:
        rest = [s.site_id for s in sites if s.site_id != held.site_id]
        mu0_H = np.mean([parts[r]["mu0_H"] for r in rest], axis=0)
        mu1_H = np.mean([parts[r]["mu1_H"] for r in rest], axis=0)
        M00 = np.mean([parts[r]["s00"] for r in rest], axis=0)
        M01 = np.mean([parts[r]["s01"] for r in rest], axis=0)
        H00 = M00 - np.outer(mu0_H, mu0_H)
        h_mumu, _ = psd_project(OperatorMatrix(grid, 0.5 * (H00 + H00.T)))
        h_mutau = OperatorMatrix(grid, (M01 - np.outer(mu0_H, mu1_H)) - H00)

        mu0_mean = DiscretizedFunction(grid, np.mean([parts[r]["mu0_mu"] for r in rest], axis=0))
        mu1_mean = np.mean([parts[r]["mu1_mu"] for r in rest], axis=0)
        tau_mean = DiscretizedFunction(grid, mu1_mean - mu0_mean.values)
        mu_held = DiscretizedFunction(grid, parts[held.site_id]["mu0_mu"])
        tau_held = parts[held.site_id]["mu1_mu"] - parts[held.site_id]["mu0_mu"]
        realized_avg.append(float(np.sum((tau_held - tau_mean.values) * w)))

        with _suppress_rank_warnings():
            bset = solve_optimal_basis(h_mumu, h_mutau, a, k_max)
            fpc = solve_fpc(h_mumu, k_max)
        scores = compute_scores(mu_held, mu0_mean, bset, site_id=held.site_id)
        s_fpc, psi_fpc = fpc_prediction_components(mu_held, mu0_mean, fpc, h_mutau,
                                                   site_id=held.site_id)
        for k in range(1, k_max + 1):
            pred = predict_cate(scores, tau_mean, bset, k_use=min(k, bset.K))
            losses[("optimal", k)].append(_integrated_sq(pred.tau_hat.values - tau_held, w))
            averages[("optimal", k)].append(float(np.sum(pred.centered * w)))
            pred_f = predict_from_components(held.site_id, tau_mean, s_fpc, psi_fpc,
                                             k_use=min(k, len(psi_fpc)))
            losses[("fpc", k)].append(_integrated_sq(pred_f.tau_hat.values - tau_held, w))
            averages[("fpc", k)].append(float(np.sum(pred_f.centered * w)))

    rows = []
    for k in range(1, k_max + 1):
        row = {"K": k,
               "optimal_loss": float(np.mean(losses[("optimal", k)])),
               "fpc_loss": float(np.mean(losses[("fpc", k)]))}
        for label in ("optimal", "fpc"):
            try:
                row[f"{label}_correlation"] = evaluate_holdout_correlation(
                    averages[(label, k)], realized_avg)
            except DegenerateVarianceError:
                row[f"{label}_correlation"] = None
        rows.append(row)
    return rows


@contextmanager
def _suppress_rank_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        yield


def run_cv(ds: Dataset, grid: QuadratureGrid, plan: CvPlan, threads: int = 1) -> CvReport:
    """Full tuning pass: h_mu, then h_H, then a at the chosen bandwidths.

    When prediction-based a-selection is unavailable (cluster-level design or
    fewer than four experimental sites) the middle a-candidate is reported
    and no a-table is produced.
    """
    t_mu = cv_bandwidth_mean(ds, grid, plan, threads=threads)
    t_H = cv_bandwidth_cov(ds, grid, plan, threads=threads)
    tables = [t_mu, t_H]
    if ds.design is Design.WITHIN_CLUSTER and len(ds.experimental) >= 4:
        t_a = cv_regularization(ds, grid, plan, plan.spec(t_mu.chosen), plan.spec(t_H.chosen),
                                threads=threads)
        tables.append(t_a)
        a = t_a.chosen
    else:
        a = plan.a_grid[len(plan.a_grid) // 2]
    n_med = int(np.median([s.n for s in ds.experimental]))
    return CvReport(h_mu=t_mu.chosen, h_H=t_H.chosen, a=a, k_cv=plan.K_cv,
                    folds=len(ds.experimental), tables=tables,
                    h_rate_reference=h_rate_rule(ds.G, max(n_med, 2), ds.d))
