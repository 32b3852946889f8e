"""Command-line pipeline: simulate, cv, estimate, predict, fpca.

Every command validates its configuration up front, writes JSON artifacts
that embed the exact configuration and seed (so a run is reproducible from
its artifacts alone), and exits with 0 on success, 1 on validation errors,
2 on data errors, and 3 on numerical errors. A rank-deficient basis is a
success with a warning. Values from a --config JSON file override values
given as flags. The output directory is not part of the embedded
configuration, so runs into different directories produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from .basis import BasisSet, solve_fpc, solve_optimal_basis
from .data_io import (
    ColumnSchema,
    Dataset,
    Design,
    Sampling,
    canonical_schema,
    ingest_csv,
    read_results,
    write_dataset_csv,
    write_results,
)
from .densities import density_from_descriptor
from .errors import InvalidConfigError, IoError, TransferError
from .kernels import KernelFamily, KernelSpec
from .operators import (
    DiscretizedFunction,
    default_bounds,
    default_f0,
    estimate_covariance_cluster_design,
    estimate_covariance_kernels,
    estimate_mean_functions,
    make_grid,
    psd_project,
)
from .simulator import AssignmentProtocol, PopulationConfig, generate_population, sample_dataset
from .transfer import compute_scores, predict_cate, site_average_effect, study_aggregate
from .tuning import CvPlan, loo_basis_comparison, run_cv

_DESIGNS = {"within": Design.WITHIN_CLUSTER, "cluster": Design.CLUSTER_LEVEL}
_SAMPLINGS = {"dense": Sampling.DENSE, "sparse": Sampling.SPARSE}


@dataclass
class RunConfig:
    """Every knob of the pipeline; embedded verbatim into output artifacts."""

    # shared
    input: str | None = None
    out_dir: str = "."
    seed: int = 0
    threads: int = 1
    design: str = "within"
    sampling: str = "dense"
    # CSV schema
    site_col: str = "site"
    treatment_col: str = "D"
    outcome_col: str = "Y"
    covariate_cols: tuple[str, ...] = ("X1",)
    period_col: str | None = None
    unit_col: str | None = None
    role_col: str | None = "role"
    target_site: str | None = None
    site_density_file: str | None = None
    # grid and weight density
    grid_points: int = 16
    grid_bounds: tuple[tuple[float, float], ...] | None = None
    f0: str = "gaussian"
    # kernels and basis
    kernel: str = "gaussian"
    h_mu: float = 0.3
    h_H: float = 0.4
    mass_tol_factor: float = 10.0
    a: float = 0.05
    K: int = 2
    k_use: int | None = None
    # cross-validation grids
    h_mu_grid: tuple[float, ...] = (0.15, 0.3, 0.6)
    h_H_grid: tuple[float, ...] = (0.2, 0.4, 0.8)
    a_grid: tuple[float, ...] = (0.01, 0.05, 0.2)
    k_cv: int = 2
    # predict
    estimate_file: str | None = None
    study_map_file: str | None = None
    # simulate
    g_sites: int = 12
    n_units: int = 150
    l_rank: int = 2
    dim: int = 1
    sigma: float = 0.25
    share_treated: float = 0.5
    covariate_family: str = "uniform"

    def validate(self) -> None:
        if self.design not in _DESIGNS:
            raise InvalidConfigError(f"design must be one of {sorted(_DESIGNS)}")
        if self.sampling not in _SAMPLINGS:
            raise InvalidConfigError(f"sampling must be one of {sorted(_SAMPLINGS)}")
        if self.kernel not in ("gaussian", "epanechnikov"):
            raise InvalidConfigError("kernel must be gaussian or epanechnikov")
        for name in ("h_mu", "h_H", "a", "sigma", "mass_tol_factor"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive")
        if not 0.0 < self.a < 1.0:
            raise InvalidConfigError("a must lie in (0, 1)")
        if self.K < 1 or self.k_cv < 1:
            raise InvalidConfigError("K and k_cv must be at least 1")
        if self.grid_points < 4:
            raise InvalidConfigError("grid_points must be at least 4")
        if self.threads < 1:
            raise InvalidConfigError("threads must be at least 1")

    def provenance(self) -> dict:
        """Configuration embedded into artifacts. Excludes execution knobs that
        cannot change results (output location, thread count)."""
        doc = asdict(self)
        doc.pop("out_dir")
        doc.pop("threads")
        for key, val in doc.items():
            if isinstance(val, tuple):
                doc[key] = [list(v) if isinstance(v, tuple) else v for v in val]
        return doc

    def spec_mu(self) -> KernelSpec:
        return KernelSpec(family=KernelFamily(self.kernel), bandwidth=self.h_mu,
                          mass_tol_factor=self.mass_tol_factor)

    def spec_H(self) -> KernelSpec:
        return KernelSpec(family=KernelFamily(self.kernel), bandwidth=self.h_H,
                          mass_tol_factor=self.mass_tol_factor)


def _load_json(path: str) -> dict:
    if not os.path.exists(path):
        raise IoError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(
                f"invalid JSON in {path} at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from None


def _load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.input is None:
        raise InvalidConfigError("an input CSV is required (--input)")
    schema = ColumnSchema(
        site=cfg.site_col, treatment=cfg.treatment_col, outcome=cfg.outcome_col,
        covariates=tuple(cfg.covariate_cols),
        period=cfg.period_col, unit=cfg.unit_col,
        role=cfg.role_col, target_site=cfg.target_site)
    densities = None
    if cfg.site_density_file is not None:
        raw = _load_json(cfg.site_density_file)
        densities = {sid: density_from_descriptor(desc) for sid, desc in raw.items()}
    return ingest_csv(cfg.input, schema, design=_DESIGNS[cfg.design],
                      sampling=_SAMPLINGS[cfg.sampling], covariate_densities=densities)


def _build_grid(cfg: RunConfig, ds: Dataset):
    bounds = cfg.grid_bounds if cfg.grid_bounds is not None else default_bounds(ds)
    if cfg.f0 == "gaussian":
        f0 = default_f0(ds)
    elif cfg.f0 == "uniform":
        f0 = default_f0(ds, bounds=bounds, kind="uniform")
    else:
        f0 = density_from_descriptor(_load_json(cfg.f0))
    return make_grid(ds.d, bounds, cfg.grid_points, f0)


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def cmd_simulate(cfg: RunConfig) -> list[str]:
    """Generate a synthetic population, sample a dataset, write both."""
    bounds = cfg.grid_bounds if cfg.grid_bounds is not None else ((0.0, 1.0),) * cfg.dim
    pop_cfg = PopulationConfig(G=cfg.g_sites, d=cfg.dim, L=cfg.l_rank, sigma=cfg.sigma,
                               bounds=tuple(tuple(b) for b in bounds),
                               covariate_family=cfg.covariate_family)
    pop = generate_population(pop_cfg, cfg.seed)
    protocol = AssignmentProtocol(design=_DESIGNS[cfg.design], seed=cfg.seed + 1_000_003,
                                  share_treated=cfg.share_treated)
    ds = sample_dataset(pop, cfg.n_units, protocol)

    csv_path = _out(cfg, "dataset.csv")
    write_dataset_csv(ds, csv_path)
    pop_doc = pop.to_json_dict()
    pop_doc["config"] = cfg.provenance()
    pop_doc["seed"] = cfg.seed
    pop_path = _out(cfg, "population.json")
    write_results(pop_doc, pop_path)
    manifest = {"kind": "simulate", "config": cfg.provenance(), "seed": cfg.seed,
                "files": ["dataset.csv", "population.json"],
                "target_site": ds.target.site_id}
    man_path = _out(cfg, "simulate.json")
    write_results(manifest, man_path)
    return [csv_path, pop_path, man_path]


def _diagnostics_doc(*diags) -> dict:
    merged = None
    for dg in diags:
        if dg is None:
            continue
        merged = dg if merged is None else merged.merge(dg)
    if merged is None:
        return {}
    return {"effective_sample_size": merged.effective_sample_size,
            "min_local_mass": merged.min_local_mass,
            "degenerate_point_count": len(merged.degenerate_points)}


def cmd_estimate(cfg: RunConfig) -> list[str]:
    """Estimate means, covariance operators, and the predictive basis."""
    ds = _load_dataset(cfg)
    grid = _build_grid(cfg, ds)
    if cfg.K > grid.m:
        raise InvalidConfigError(f"K={cfg.K} exceeds the grid size {grid.m}")
    means = estimate_mean_functions(ds, grid, cfg.spec_mu(), threads=cfg.threads)
    if ds.design is Design.WITHIN_CLUSTER:
        covs = estimate_covariance_kernels(ds, grid, cfg.spec_H(), threads=cfg.threads)
    else:
        covs = estimate_covariance_cluster_design(ds, grid, cfg.spec_H(), threads=cfg.threads)
    h_mumu, clamped = psd_project(covs.h_mumu)
    bset = solve_optimal_basis(h_mumu, covs.h_mutau, cfg.a, cfg.K)

    doc = {
        "kind": "estimate",
        "config": cfg.provenance(),
        "seed": cfg.seed,
        "target_site": ds.target.site_id,
        "basis": bset.to_json_dict(),
        "means": {
            "mu0": means.mu0.values.tolist(),
            "mu1": means.mu1.values.tolist(),
            "tau": means.tau.values.tolist(),
            "mu1_control": None if means.mu1_control is None
            else means.mu1_control.values.tolist(),
            "site_mu0": {sid: f.values.tolist() for sid, f in sorted(means.site_mu0.items())},
            "site_mu1": {sid: f.values.tolist() for sid, f in sorted(means.site_mu1.items())},
        },
        "covariances": {
            "h_mumu": h_mumu.kernel.tolist(),
            "h_mutau": covs.h_mutau.kernel.tolist(),
            "h_tautau": None if covs.h_tautau is None else covs.h_tautau.kernel.tolist(),
            "psd_clamped_mass": clamped,
        },
        "diagnostics": _diagnostics_doc(means.diagnostics, covs.diagnostics),
    }
    path = _out(cfg, "estimate.json")
    write_results(doc, path)
    return [path]


def cmd_predict(cfg: RunConfig) -> list[str]:
    """Predict the target-site CATE and report site/study-level aggregates."""
    est_path = cfg.estimate_file or os.path.join(cfg.out_dir, "estimate.json")
    doc = read_results(est_path)
    bset = BasisSet.from_json_dict(doc["basis"])
    grid = bset.grid
    means = doc["means"]
    mu0_mean = DiscretizedFunction(grid, np.array(means["mu0"]))
    tau_mean = DiscretizedFunction(grid, np.array(means["tau"]))
    ds = _load_dataset(cfg)
    k_use = bset.K if cfg.k_use is None else min(cfg.k_use, bset.K)

    site_mu0 = {sid: DiscretizedFunction(grid, np.array(v))
                for sid, v in means["site_mu0"].items()}
    target_id = ds.target.site_id
    if target_id not in site_mu0:
        raise InvalidConfigError(
            f"estimate artifact has no baseline fit for target site {target_id!r}")

    sites_by_id = {s.site_id: s for s in ds.sites}
    scores_doc, averages = {}, {}
    target_pred = None
    for sid, mu_g in site_mu0.items():
        scores = compute_scores(mu_g, mu0_mean, bset, site_id=sid)
        pred = predict_cate(scores, tau_mean, bset, k_use=k_use)
        scores_doc[sid] = scores.t.tolist()
        if sid in sites_by_id:
            averages[sid] = site_average_effect(pred, sites_by_id[sid].x)
        if sid == target_id:
            target_pred = pred

    if cfg.study_map_file is not None:
        grouping = {str(k): str(v) for k, v in _load_json(cfg.study_map_file).items()}
    else:
        grouping = {sid: "all" for sid in averages}
    study_table = study_aggregate(averages, grouping)

    out_doc = {
        "kind": "predict",
        "config": cfg.provenance(),
        "seed": cfg.seed,
        "target_site": target_id,
        "k_use": k_use,
        "tau_hat": target_pred.tau_hat.values.tolist(),
        "tau_mean": tau_mean.values.tolist(),
        "scores": scores_doc,
        "site_averages": averages,
        "study_averages": study_table,
    }
    json_path = _out(cfg, "predict.json")
    write_results(out_doc, json_path)
    csv_path = _out(cfg, "predictions.csv")
    try:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("site,K,average_effect\n")
            for sid in sorted(averages):
                fh.write(f"{sid},{k_use},{averages[sid]!r}\n")
    except OSError as exc:
        raise IoError(f"cannot write {csv_path}: {exc}") from exc
    return [json_path, csv_path]


def cmd_cv(cfg: RunConfig) -> list[str]:
    """Cross-validate the two bandwidths and the regularization parameter."""
    ds = _load_dataset(cfg)
    grid = _build_grid(cfg, ds)
    plan = CvPlan(h_mu_grid=tuple(cfg.h_mu_grid), h_H_grid=tuple(cfg.h_H_grid),
                  a_grid=tuple(cfg.a_grid), K_cv=cfg.k_cv, kernel_family=cfg.kernel)
    report = run_cv(ds, grid, plan, threads=cfg.threads)
    doc = report.to_json_dict()
    doc["config"] = cfg.provenance()
    doc["seed"] = cfg.seed
    path = _out(cfg, "cv.json")
    write_results(doc, path)
    return [path]


def cmd_fpca(cfg: RunConfig) -> list[str]:
    """Functional PCA of the baseline covariance plus a basis comparison."""
    ds = _load_dataset(cfg)
    grid = _build_grid(cfg, ds)
    if cfg.K > grid.m:
        raise InvalidConfigError(f"K={cfg.K} exceeds the grid size {grid.m}")
    if ds.design is Design.WITHIN_CLUSTER:
        covs = estimate_covariance_kernels(ds, grid, cfg.spec_H(), threads=cfg.threads)
    else:
        covs = estimate_covariance_cluster_design(ds, grid, cfg.spec_H(), threads=cfg.threads)
    h_mumu, clamped = psd_project(covs.h_mumu)
    fpc = solve_fpc(h_mumu, cfg.K)
    comparison = None
    if ds.design is Design.WITHIN_CLUSTER and len(ds.experimental) >= 4:
        comparison = loo_basis_comparison(ds, grid, cfg.spec_mu(), cfg.spec_H(),
                                          cfg.a, cfg.K, threads=cfg.threads)
    doc = fpc.to_json_dict()
    doc["config"] = cfg.provenance()
    doc["seed"] = cfg.seed
    doc["psd_clamped_mass"] = clamped
    doc["comparison"] = comparison
    path = _out(cfg, "fpca.json")
    write_results(doc, path)
    return [path]


_COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "fpca": cmd_fpca,
}

_TUPLE_FLOAT_FIELDS = {"h_mu_grid", "h_H_grid", "a_grid"}
_TUPLE_STR_FIELDS = {"covariate_cols"}


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InvalidConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_bounds(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in text.split(";"):
        vals = part.split(",")
        if len(vals) != 2:
            raise InvalidConfigError("bounds must look like 'lo,hi[;lo,hi...]'")
        out.append((float(vals[0]), float(vals[1])))
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cate-transfer",
        description="Transfer estimation of conditional average treatment effects "
                    "across heterogeneous sites.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="JSON file whose entries override flags")
        p.add_argument("--input", help="input dataset CSV")
        p.add_argument("--out-dir", help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help="64-bit seed for all randomness")
        p.add_argument("--threads", type=int,
                       help="worker threads (default from CATE_TRANSFER_THREADS or 1); "
                            "results are identical for any value")
        p.add_argument("--design", choices=sorted(_DESIGNS), help="randomization design")
        p.add_argument("--sampling", choices=sorted(_SAMPLINGS), help="sampling regime")
        p.add_argument("--site-col", help="CSV column with the site id")
        p.add_argument("--treatment-col", help="CSV column with the 0/1 treatment")
        p.add_argument("--outcome-col", help="CSV column with the outcome")
        p.add_argument("--covariate-cols", help="comma-separated covariate columns")
        p.add_argument("--period-col", help="CSV column with the 0/1 period flag")
        p.add_argument("--unit-col", help="CSV column with the unit id")
        p.add_argument("--role-col", help="CSV column with experimental/target roles "
                                          "(pass '' to disable)")
        p.add_argument("--target-site", help="site id of the single target site")
        p.add_argument("--site-density-file",
                       help="JSON file mapping site id to a covariate density descriptor "
                            "(required for sparse sampling)")
        p.add_argument("--grid-points", type=int, help="quadrature nodes per dimension")
        p.add_argument("--grid-bounds", help="grid box as 'lo,hi[;lo,hi...]' "
                                             "(default: pooled 2.5/97.5 percent quantiles)")
        p.add_argument("--f0", help="weight density: gaussian, uniform, or a JSON "
                                    "descriptor file (default: gaussian fit)")
        p.add_argument("--kernel", choices=("gaussian", "epanechnikov"), help="kernel family")
        p.add_argument("--h-mu", type=float, help="bandwidth for mean functions "
                                                  "(standardized covariate units)")
        p.add_argument("--h-H", type=float, help="bandwidth for covariance surfaces")
        p.add_argument("--mass-tol-factor", type=float,
                       help="minimum local mass threshold, in units of eps*n (default 10)")
        p.add_argument("--a", type=float, help="regularization parameter in (0, 1)")
        p.add_argument("--K", type=int, help="number of basis functions")
        p.add_argument("--k-use", type=int, help="truncation order used in prediction")
        p.add_argument("--h-mu-grid", help="comma-separated CV candidates for h_mu")
        p.add_argument("--h-H-grid", help="comma-separated CV candidates for h_H")
        p.add_argument("--a-grid", help="comma-separated CV candidates for a")
        p.add_argument("--k-cv", type=int, help="basis size held fixed during a-selection")
        p.add_argument("--estimate-file", help="estimate.json from a previous run")
        p.add_argument("--study-map-file", help="JSON file mapping site id to study label")
        p.add_argument("--g-sites", type=int, help="simulate: number of sites")
        p.add_argument("--n-units", type=int, help="simulate: units per site")
        p.add_argument("--l-rank", type=int, help="simulate: expansion rank")
        p.add_argument("--dim", type=int, help="simulate: covariate dimension")
        p.add_argument("--sigma", type=float, help="simulate: outcome noise sd")
        p.add_argument("--share-treated", type=float,
                       help="simulate: treated cluster share (cluster design)")
        p.add_argument("--covariate-family", choices=("uniform", "gauss-shift"),
                       help="simulate: per-site covariate density family")
    return parser


def _config_from_args(ns: argparse.Namespace) -> RunConfig:
    values: dict = {}
    for f in fields(RunConfig):
        flag = getattr(ns, f.name, None)
        if flag is None:
            continue
        values[f.name] = flag
    for key in _TUPLE_FLOAT_FIELDS:
        if key in values and isinstance(values[key], str):
            values[key] = _parse_floats(values[key])
    for key in _TUPLE_STR_FIELDS:
        if key in values and isinstance(values[key], str):
            values[key] = tuple(values[key].split(","))
    if "grid_bounds" in values and isinstance(values["grid_bounds"], str):
        values["grid_bounds"] = _parse_bounds(values["grid_bounds"])
    if values.get("role_col") == "":
        values["role_col"] = None

    if getattr(ns, "config", None):
        overrides = _load_json(ns.config)
        known = {f.name for f in fields(RunConfig)}
        for key, val in overrides.items():
            if key not in known:
                raise InvalidConfigError(f"unknown config key {key!r}")
            if key in _TUPLE_FLOAT_FIELDS:
                val = tuple(float(v) for v in val)
            elif key in _TUPLE_STR_FIELDS:
                val = tuple(val)
            elif key == "grid_bounds" and val is not None:
                val = tuple((float(lo), float(hi)) for lo, hi in val)
            values[key] = val

    if "threads" not in values:
        env = os.environ.get("CATE_TRANSFER_THREADS")
        if env is not None:
            try:
                values["threads"] = int(env)
            except ValueError:
                raise InvalidConfigError(
                    f"CATE_TRANSFER_THREADS must be an integer, got {env!r}") from None
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = _config_from_args(ns)
        written = _COMMANDS[ns.command](cfg)
    except TransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
