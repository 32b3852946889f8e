"""Parametric covariate densities.

Product densities over the coordinates of x, used for three purposes: the
weight density f0 that defines the L2 inner product, per-site covariate
distributions in the simulator, and analytic reweighting ratios f0/f_g for
sparsely sampled sites. All densities are JSON-round-trippable through
``to_descriptor`` / ``density_from_descriptor``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InvalidConfigError

_SQRT2PI = float(np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class UniformDensity:
    """Uniform product density on the box [lo_c, hi_c] per coordinate."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise InvalidConfigError("uniform density needs lo < hi per coordinate")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def pdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        vol = float(np.prod(hi - lo))
        return np.where(inside, 1.0 / vol, 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return lo + (hi - lo) * rng.random((n, self.dim))

    def to_descriptor(self) -> dict:
        return {"family": "uniform", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class GaussianDensity:
    """Independent Gaussian per coordinate, optionally truncated to a box.

    With truncation bounds the pdf is renormalized per coordinate and
    sampling uses the inverse-cdf transform, so samples never leave the box.
    """

    mean: tuple[float, ...]
    sd: tuple[float, ...]
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.mean) != len(self.sd) or any(s <= 0 for s in self.sd):
            raise InvalidConfigError("gaussian density needs positive sd per coordinate")
        if (self.lo is None) != (self.hi is None):
            raise InvalidConfigError("truncation needs both lo and hi")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def _alpha_beta(self):
        m = np.asarray(self.mean)
        s = np.asarray(self.sd)
        a = (np.asarray(self.lo) - m) / s
        b = (np.asarray(self.hi) - m) / s
        return a, b

    def pdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = np.asarray(self.mean)
        s = np.asarray(self.sd)
        z = (pts - m) / s
        dens = np.exp(-0.5 * z * z) / (s * _SQRT2PI)
        if self.lo is not None:
            a, b = self._alpha_beta()
            dens = dens / (ndtr(b) - ndtr(a))
            inside = (pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi))
            dens = np.where(inside, dens, 0.0)
        return np.prod(dens, axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        m = np.asarray(self.mean)
        s = np.asarray(self.sd)
        if self.lo is None:
            return m + s * rng.standard_normal((n, self.dim))
        a, b = self._alpha_beta()
        u = rng.random((n, self.dim))
        fa, fb = ndtr(a), ndtr(b)
        return m + s * ndtri(fa + u * (fb - fa))

    def to_descriptor(self) -> dict:
        out = {"family": "gaussian", "mean": list(self.mean), "sd": list(self.sd)}
        if self.lo is not None:
            out["lo"] = list(self.lo)
            out["hi"] = list(self.hi)
        return out


@dataclass(frozen=True)
class LogNormalDensity:
    """Independent log-normal per coordinate (x > 0)."""

    mu: tuple[float, ...]
    sigma: tuple[float, ...]

    def __post_init__(self):
        if len(self.mu) != len(self.sigma) or any(s <= 0 for s in self.sigma):
            raise InvalidConfigError("log-normal density needs positive sigma per coordinate")

    @property
    def dim(self) -> int:
        return len(self.mu)

    def pdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        mu = np.asarray(self.mu)
        sg = np.asarray(self.sigma)
        pos = pts > 0
        safe = np.where(pos, pts, 1.0)
        z = (np.log(safe) - mu) / sg
        dens = np.exp(-0.5 * z * z) / (safe * sg * _SQRT2PI)
        return np.prod(np.where(pos, dens, 0.0), axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        mu = np.asarray(self.mu)
        sg = np.asarray(self.sigma)
        return np.exp(mu + sg * rng.standard_normal((n, self.dim)))

    def to_descriptor(self) -> dict:
        return {"family": "lognormal", "mu": list(self.mu), "sigma": list(self.sigma)}


Density = UniformDensity | GaussianDensity | LogNormalDensity


def density_from_descriptor(desc: dict) -> Density:
    family = desc.get("family")
    if family == "uniform":
        return UniformDensity(tuple(desc["lo"]), tuple(desc["hi"]))
    if family == "gaussian":
        lo = tuple(desc["lo"]) if "lo" in desc else None
        hi = tuple(desc["hi"]) if "hi" in desc else None
        return GaussianDensity(tuple(desc["mean"]), tuple(desc["sd"]), lo, hi)
    if family == "lognormal":
        return LogNormalDensity(tuple(desc["mu"]), tuple(desc["sigma"]))
    raise InvalidConfigError(f"unknown density family {family!r}")


def density_ratio(f0: Density, f_g: Density, points: np.ndarray) -> np.ndarray:
    """Pointwise ratio f0(x)/f_g(x), used to reweight sparsely sampled sites."""
    num = f0.pdf(points)
    den = f_g.pdf(points)
    if np.any(den <= 0):
        raise InvalidConfigError("site density vanishes at an observed covariate value")
    return num / den
