"""Dataset model, CSV ingestion, and JSON artifact serialization.

A dataset is a collection of sites (clusters). Each site holds unit-level
records (covariates, binary treatment, realized outcome, and an optional
baseline/follow-up period flag for cluster-randomized designs). Exactly one
site carries the Target role; all others are Experimental. Site order is
first-appearance order in the source file and unit order is row order, so
re-ingesting the same file always yields an identical dataset.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .densities import Density, density_from_descriptor
from .errors import (
    DuplicateUnitError,
    InvalidConfigError,
    IoError,
    MissingColumnError,
    MultipleTargetSitesError,
    NonNumericValueError,
    NoTargetSiteError,
    TreatedUnitInTargetError,
    ValidationError,
)

SCHEMA_VERSION = 1


class Role(Enum):
    EXPERIMENTAL = "experimental"
    TARGET = "target"


class Design(Enum):
    WITHIN_CLUSTER = "within_cluster"
    CLUSTER_LEVEL = "cluster_level"


class Sampling(Enum):
    DENSE = "dense"
    SPARSE = "sparse"


@dataclass(frozen=True)
class UnitRecord:
    """One observed unit: covariates x, treatment d_treat, outcome y."""

    site_id: str
    x: tuple[float, ...]
    d_treat: int
    y: float
    period: int | None = None
    unit_id: str | None = None

    def __post_init__(self):
        if self.d_treat not in (0, 1):
            raise ValidationError(f"treatment must be 0 or 1, got {self.d_treat}")
        if self.period is not None and self.period not in (0, 1):
            raise ValidationError(f"period must be 0 or 1, got {self.period}")
        if not np.isfinite(self.y):
            raise ValidationError("outcome must be finite")


@dataclass
class SiteSample:
    """All records of one site plus its role and optional design metadata."""

    site_id: str
    records: tuple[UnitRecord, ...]
    role: Role
    cluster_treatment: int | None = None
    covariate_density: Density | None = None

    x: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    d_treat: np.ndarray = field(init=False, repr=False)
    period: np.ndarray | None = field(init=False, repr=False)
    unit_ids: tuple[str | None, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.records:
            raise ValidationError(f"site {self.site_id!r} has no records")
        self.x = np.array([r.x for r in self.records], dtype=float)
        self.y = np.array([r.y for r in self.records], dtype=float)
        self.d_treat = np.array([r.d_treat for r in self.records], dtype=int)
        if all(r.period is not None for r in self.records):
            self.period = np.array([r.period for r in self.records], dtype=int)
        else:
            self.period = None
        self.unit_ids = tuple(r.unit_id for r in self.records)

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass
class Dataset:
    """Validated multi-site dataset.

    Invariants enforced at construction: at least three sites, exactly one
    Target site, a uniform covariate dimension, control-only target records,
    and (for cluster-level randomization) a period flag on every record plus
    a cluster treatment status on every experimental site.
    """

    sites: tuple[SiteSample, ...]
    d: int
    design: Design = Design.WITHIN_CLUSTER
    sampling: Sampling = Sampling.DENSE

    def __post_init__(self):
        if len(self.sites) < 3:
            raise ValidationError(f"need at least 3 sites, got {len(self.sites)}")
        targets = [s for s in self.sites if s.role is Role.TARGET]
        if not targets:
            raise NoTargetSiteError("no site carries the target role")
        if len(targets) > 1:
            ids = ", ".join(s.site_id for s in targets)
            raise MultipleTargetSitesError(f"multiple target sites: {ids}")
        for s in self.sites:
            if s.d != self.d:
                raise ValidationError(
                    f"site {s.site_id!r} has covariate dimension {s.d}, expected {self.d}")
        tgt = targets[0]
        if np.any(tgt.d_treat == 1):
            raise TreatedUnitInTargetError(f"target site {tgt.site_id!r} has treated units")
        if self.design is Design.CLUSTER_LEVEL:
            for s in self.sites:
                if s.period is None:
                    raise ValidationError(
                        f"cluster-level design requires a period flag (site {s.site_id!r})")
                if s.role is Role.EXPERIMENTAL and s.cluster_treatment is None:
                    raise ValidationError(
                        f"experimental site {s.site_id!r} lacks cluster treatment status")
        else:
            for s in self.sites:
                if s.cluster_treatment is not None:
                    raise ValidationError(
                        "cluster treatment status is only valid under cluster-level design")
        if self.sampling is Sampling.SPARSE:
            for s in self.sites:
                if s.covariate_density is None:
                    raise ValidationError(
                        f"sparse sampling requires a covariate density for site {s.site_id!r}")

    @property
    def G(self) -> int:
        return len(self.sites)

    @property
    def target(self) -> SiteSample:
        return next(s for s in self.sites if s.role is Role.TARGET)

    @property
    def experimental(self) -> tuple[SiteSample, ...]:
        return tuple(s for s in self.sites if s.role is Role.EXPERIMENTAL)

    def pooled_experimental_x(self) -> np.ndarray:
        return np.concatenate([s.x for s in self.experimental], axis=0)

    def covariate_scale(self) -> np.ndarray:
        """Per-coordinate std of the pooled experimental sample (zeros -> 1)."""
        sd = np.std(self.pooled_experimental_x(), axis=0)
        return np.where(sd > 0, sd, 1.0)

    def to_json_dict(self) -> dict:
        sites = []
        for s in self.sites:
            entry = {
                "site_id": s.site_id,
                "role": s.role.value,
                "x": s.x.tolist(),
                "d_treat": s.d_treat.tolist(),
                "y": s.y.tolist(),
            }
            if s.period is not None:
                entry["period"] = s.period.tolist()
            if s.cluster_treatment is not None:
                entry["cluster_treatment"] = s.cluster_treatment
            if s.covariate_density is not None:
                entry["covariate_density"] = s.covariate_density.to_descriptor()
            if any(u is not None for u in s.unit_ids):
                entry["unit_ids"] = list(s.unit_ids)
            sites.append(entry)
        return {
            "kind": "dataset",
            "d": self.d,
            "design": self.design.value,
            "sampling": self.sampling.value,
            "sites": sites,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Dataset":
        sites = []
        for entry in doc["sites"]:
            unit_ids = entry.get("unit_ids")
            periods = entry.get("period")
            records = tuple(
                UnitRecord(
                    site_id=entry["site_id"],
                    x=tuple(xi),
                    d_treat=int(di),
                    y=float(yi),
                    period=None if periods is None else int(periods[i]),
                    unit_id=None if unit_ids is None else unit_ids[i],
                )
                for i, (xi, di, yi) in enumerate(zip(entry["x"], entry["d_treat"], entry["y"]))
            )
            dens = entry.get("covariate_density")
            sites.append(SiteSample(
                site_id=entry["site_id"],
                records=records,
                role=Role(entry["role"]),
                cluster_treatment=entry.get("cluster_treatment"),
                covariate_density=None if dens is None else density_from_descriptor(dens),
            ))
        return cls(sites=tuple(sites), d=int(doc["d"]),
                   design=Design(doc["design"]), sampling=Sampling(doc["sampling"]))


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV columns to dataset fields.

    The target site is identified either by ``target_site`` (an explicit site
    id) or by a ``role`` column whose values are ``experimental``/``target``.

    Parameters
    ----------
    site : str
        Column holding the site identifier.
    treatment : str
        Column holding the binary treatment indicator.
    outcome : str
        Column holding the realized outcome.
    covariates : tuple of str
        Covariate columns, in order (X1..Xd).
    period : str, optional
        Column holding the 0/1 baseline/follow-up flag.
    unit : str, optional
        Column holding a within-site unit identifier; duplicates are rejected.
    role : str, optional
        Column holding the site role.
    target_site : str, optional
        Site id of the single target site.
    """

    site: str
    treatment: str
    outcome: str
    covariates: tuple[str, ...]
    period: str | None = None
    unit: str | None = None
    role: str | None = None
    target_site: str | None = None

    def __post_init__(self):
        if not self.covariates:
            raise InvalidConfigError("schema needs at least one covariate column")
        if self.role is None and self.target_site is None:
            raise InvalidConfigError("schema must give either a role column or a target site id")


def _parse_float(raw: str, row: int, column: str) -> float:
    try:
        val = float(raw)
    except (TypeError, ValueError):
        raise NonNumericValueError(row, column, raw) from None
    if not np.isfinite(val):
        raise NonNumericValueError(row, column, raw)
    return val


def ingest_csv(path: str, schema: ColumnSchema,
               design: Design = Design.WITHIN_CLUSTER,
               sampling: Sampling = Sampling.DENSE,
               covariate_densities: dict[str, Density] | None = None) -> Dataset:
    """Read a unit-per-row CSV file into a validated :class:`Dataset`.

    Parameters
    ----------
    path : str
        CSV file with a header row, comma separators, and '.' decimals.
    schema : ColumnSchema
        Column mapping; see :class:`ColumnSchema`.
    design, sampling
        Randomization design and sampling regime declared for the data.
    covariate_densities : dict, optional
        Site id -> parametric covariate density, required for sparse sampling.
    """
    if not os.path.exists(path):
        raise IoError(f"input file not found: {path}")
    needed = [schema.site, schema.treatment, schema.outcome, *schema.covariates]
    for opt in (schema.period, schema.unit, schema.role):
        if opt is not None:
            needed.append(opt)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in needed if c not in header]
        if missing:
            raise MissingColumnError(f"missing columns: {', '.join(missing)}")

        order: list[str] = []
        rows: dict[str, list[UnitRecord]] = {}
        roles: dict[str, Role] = {}
        seen_units: set[tuple[str, str]] = set()
        for i, row in enumerate(reader, start=1):
            site_id = row[schema.site]
            if site_id is None or site_id == "":
                raise NonNumericValueError(i, schema.site, row[schema.site])
            d_raw = _parse_float(row[schema.treatment], i, schema.treatment)
            if d_raw not in (0.0, 1.0):
                raise NonNumericValueError(i, schema.treatment, row[schema.treatment])
            y = _parse_float(row[schema.outcome], i, schema.outcome)
            x = tuple(_parse_float(row[c], i, c) for c in schema.covariates)
            period = None
            if schema.period is not None:
                p_raw = _parse_float(row[schema.period], i, schema.period)
                if p_raw not in (0.0, 1.0):
                    raise NonNumericValueError(i, schema.period, row[schema.period])
                period = int(p_raw)
            unit_id = row[schema.unit] if schema.unit is not None else None
            if unit_id is not None:
                key = (site_id, unit_id) if period is None else (site_id, f"{unit_id}@{period}")
                if key in seen_units:
                    raise DuplicateUnitError(f"duplicate unit {unit_id!r} in site {site_id!r}")
                seen_units.add(key)
            if site_id not in rows:
                rows[site_id] = []
                order.append(site_id)
            if schema.role is not None:
                val = row[schema.role].strip().lower()
                if val not in ("experimental", "target"):
                    raise NonNumericValueError(i, schema.role, row[schema.role])
                role = Role(val)
                if roles.setdefault(site_id, role) is not role:
                    raise ValidationError(f"inconsistent role for site {site_id!r}")
            rows[site_id].append(UnitRecord(site_id=site_id, x=x, d_treat=int(d_raw),
                                            y=y, period=period, unit_id=unit_id))

    if schema.target_site is not None:
        if schema.target_site not in rows:
            raise NoTargetSiteError(f"declared target site {schema.target_site!r} not in file")
        roles = {sid: (Role.TARGET if sid == schema.target_site else Role.EXPERIMENTAL)
                 for sid in order}

    densities = covariate_densities or {}
    sites = []
    for sid in order:
        role = roles.get(sid, Role.EXPERIMENTAL)
        recs = tuple(rows[sid])
        cluster_treatment = None
        if design is Design.CLUSTER_LEVEL and role is Role.EXPERIMENTAL:
            follow = [r.d_treat for r in recs if r.period == 1]
            if follow and len(set(follow)) > 1:
                raise ValidationError(
                    f"site {sid!r}: mixed treatment at follow-up under cluster-level design")
            cluster_treatment = follow[0] if follow else 0
        sites.append(SiteSample(site_id=sid, records=recs, role=role,
                                cluster_treatment=cluster_treatment,
                                covariate_density=densities.get(sid)))
    d = sites[0].d
    return Dataset(sites=tuple(sites), d=d, design=design, sampling=sampling)


def write_dataset_csv(ds: Dataset, path: str) -> None:
    """Write a dataset to CSV in the canonical column layout.

    Columns: site, role, unit, [period,] D, Y, X1..Xd. Values are written
    with full float precision so ingest(write(ingest(f))) == ingest(f).
    """
    cols = ["site", "role", "unit"]
    has_period = all(s.period is not None for s in ds.sites)
    if has_period:
        cols.append("period")
    cols += ["D", "Y"] + [f"X{i + 1}" for i in range(ds.d)]
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for s in ds.sites:
                for j, r in enumerate(s.records):
                    unit = r.unit_id if r.unit_id is not None else f"u{j:05d}"
                    row = [s.site_id, s.role.value, unit]
                    if has_period:
                        row.append(r.period)
                    row += [r.d_treat, repr(float(r.y))] + [repr(float(v)) for v in r.x]
                    writer.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def canonical_schema(d: int, with_period: bool = False) -> ColumnSchema:
    """Schema matching :func:`write_dataset_csv` output."""
    return ColumnSchema(site="site", treatment="D", outcome="Y",
                        covariates=tuple(f"X{i + 1}" for i in range(d)),
                        period="period" if with_period else None,
                        unit="unit", role="role")


def write_results(result, path: str) -> None:
    """Serialize a result artifact to JSON with a schema version field.

    ``result`` is either a mapping or an object exposing ``to_json_dict``.
    Floats are written in shortest round-trip form, so reading the document
    back reproduces every finite value bit-exactly.
    """
    if hasattr(result, "to_json_dict"):
        payload = result.to_json_dict()
    elif isinstance(result, dict):
        payload = result
    else:
        raise InvalidConfigError(f"cannot serialize object of type {type(result).__name__}")
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(payload)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_results(path: str) -> dict:
    if not os.path.exists(path):
        raise IoError(f"result file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
