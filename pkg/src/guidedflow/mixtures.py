"""Two-component mixture specifications.

The data distribution is an equal-weight mixture of a positive-class and a
negative-class density. Two families are supported:

* compact pairs: the classes live on disjoint intervals [alpha1, alpha2] and
  [-alpha2, -alpha1], each with a bounded piecewise-polynomial density, and
  the two densities are within a multiplicative factor beta of each other;
* Gaussian pairs: N(+mu, sigma0^2) and N(-mu, sigma0^2).

A spec may append independent nuisance coordinates (class-independent):
Uniform[-1/2, 1/2] for compact pairs, matching the square construction used
by the 2-D experiments, and N(0, 1) for Gaussian pairs.

Compact densities are stored as piecewise-polynomial tables so that
normalization, moments, the CDF and its inverse are all exact, which keeps
sampling deterministic given the random stream.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

_NORM_TOL = 1e-8


class ClassLabel(enum.IntEnum):
    POSITIVE = 1
    NEGATIVE = -1


def _as_label(label) -> ClassLabel:
    return ClassLabel(int(label))


@dataclass(frozen=True)
class PiecewisePolynomial:
    """Polynomial density table on consecutive intervals.

    Parameters
    ----------
    breakpoints:
        Strictly increasing grid x_0 < x_1 < ... < x_m.
    coefficients:
        One row per interval; row i holds ascending-power coefficients of the
        polynomial in the local variable (x - x_i) on [x_i, x_{i+1}].
    """

    breakpoints: tuple[float, ...]
    coefficients: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        bp = tuple(float(v) for v in self.breakpoints)
        co = tuple(tuple(float(c) for c in row) for row in self.coefficients)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "coefficients", co)
        if len(bp) < 2:
            raise ValueError("need at least two breakpoints")
        if len(co) != len(bp) - 1:
            raise ValueError("one coefficient row required per interval")
        if any(hi <= lo for lo, hi in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(len(row) == 0 for row in co):
            raise ValueError("empty coefficient row")

    @property
    def lower(self) -> float:
        return self.breakpoints[0]

    @property
    def upper(self) -> float:
        return self.breakpoints[-1]

    def __call__(self, x):
        """Evaluate the table at x (vectorized); zero outside the support."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for i, row in enumerate(self.coefficients):
            lo, hi = self.breakpoints[i], self.breakpoints[i + 1]
            last = i == len(self.coefficients) - 1
            mask = (x >= lo) & ((x <= hi) if last else (x < hi))
            if not np.any(mask):
                continue
            xi = x[mask] - lo
            acc = np.zeros_like(xi)
            for c in reversed(row):
                acc = acc * xi + c
            out[mask] = acc
        return out if out.ndim else float(out)

    def piece_masses(self) -> np.ndarray:
        """Exact integral of each piece."""
        masses = []
        for i, row in enumerate(self.coefficients):
            width = self.breakpoints[i + 1] - self.breakpoints[i]
            masses.append(
                sum(c * width ** (k + 1) / (k + 1) for k, c in enumerate(row))
            )
        return np.asarray(masses)

    def integral(self) -> float:
        return float(self.piece_masses().sum())

    def moment(self, order: int) -> float:
        """Exact integral of x^order against the table."""
        total = 0.0
        for i, row in enumerate(self.coefficients):
            lo = self.breakpoints[i]
            width = self.breakpoints[i + 1] - lo
            # expand x^order = (lo + xi)^order in the local variable
            for j in range(order + 1):
                binom = math.comb(order, j) * lo ** (order - j)
                for k, c in enumerate(row):
                    total += binom * c * width ** (k + j + 1) / (k + j + 1)
        return total

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.piece_masses())])
        out = np.zeros_like(x)
        out[x >= self.upper] = cum[-1]
        for i, row in enumerate(self.coefficients):
            lo, hi = self.breakpoints[i], self.breakpoints[i + 1]
            mask = (x >= lo) & (x < hi)
            if not np.any(mask):
                continue
            xi = x[mask] - lo
            acc = np.zeros_like(xi)
            for k in reversed(range(len(row))):
                acc = acc * xi + row[k] / (k + 1)
            out[mask] = cum[i] + acc * xi
        return out if out.ndim else float(out)

    def ppf(self, u):
        """Inverse CDF of the (normalized) table, exact per piece.

        Constant and linear pieces invert in closed form; higher degrees use
        bisection, which stays inside the piece by construction.
        """
        u = np.asarray(u, dtype=float)
        scalar = u.ndim == 0
        u = np.atleast_1d(u).copy()
        if np.any((u < 0.0) | (u > 1.0)):
            raise ValueError("quantile levels must lie in [0, 1]")
        masses = self.piece_masses()
        total = masses.sum()
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        target = u * total
        idx = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, len(masses) - 1)
        out = np.empty_like(u)
        for i, row in enumerate(self.coefficients):
            mask = idx == i
            if not np.any(mask):
                continue
            lo = self.breakpoints[i]
            width = self.breakpoints[i + 1] - lo
            t = target[mask] - cum[i]
            out[mask] = lo + self._invert_piece(row, width, t)
        out[u >= 1.0] = self.upper
        out[u <= 0.0] = self.lower
        return float(out[0]) if scalar else out

    @staticmethod
    def _invert_piece(row, width, t):
        deg = len(row) - 1
        if deg == 0:
            xi = t / row[0]
        elif deg == 1:
            c0, c1 = row
            disc = np.sqrt(np.maximum(c0 * c0 + 2.0 * c1 * t, 0.0))
            if c1 >= 0:
                xi = 2.0 * t / (c0 + disc)
            else:
                xi = (disc - c0) / c1
        else:
            lo = np.zeros_like(t)
            hi = np.full_like(t, width)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                acc = np.zeros_like(mid)
                for k in reversed(range(len(row))):
                    acc = acc * mid + row[k] / (k + 1)
                below = acc * mid < t
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            xi = 0.5 * (lo + hi)
        return np.clip(xi, 0.0, width)


def _check_density(name: str, poly: PiecewisePolynomial) -> None:
    err = abs(poly.integral() - 1.0)
    if err > _NORM_TOL:
        raise ValueError(f"{name} integrates to 1 within {_NORM_TOL}; off by {err:.3e}")
    for i in range(len(poly.coefficients)):
        lo, hi = poly.breakpoints[i], poly.breakpoints[i + 1]
        grid = np.linspace(lo, hi, 257)
        if np.min(poly(grid)) < -1e-12:
            raise ValueError(f"{name} is negative on [{lo}, {hi}]")


@dataclass(frozen=True)
class CompactPairSpec:
    """Disjoint compact pair on [alpha1, alpha2] and [-alpha2, -alpha1]."""

    alpha1: float
    alpha2: float
    density_pos: PiecewisePolynomial
    density_neg: PiecewisePolynomial
    beta: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha1 <= self.alpha2):
            raise ValueError(
                f"support edges violate 0 < alpha1 <= alpha2: "
                f"alpha1={self.alpha1!r}, alpha2={self.alpha2!r}"
            )
        if not (self.beta >= 1.0):
            raise ValueError(f"beta={self.beta!r} must be >= 1")
        if (self.density_pos.lower, self.density_pos.upper) != (self.alpha1, self.alpha2):
            raise ValueError("density_pos support must equal [alpha1, alpha2]")
        if (self.density_neg.lower, self.density_neg.upper) != (-self.alpha2, -self.alpha1):
            raise ValueError("density_neg support must equal [-alpha2, -alpha1]")
        _check_density("density_pos", self.density_pos)
        _check_density("density_neg", self.density_neg)

    def component(self, label) -> PiecewisePolynomial:
        return self.density_pos if _as_label(label) > 0 else self.density_neg


@dataclass(frozen=True)
class GaussianPairSpec:
    """Pair N(+mu, sigma0^2) / N(-mu, sigma0^2)."""

    mu: float = 1.0
    sigma0: float = 1.0

    def __post_init__(self):
        if not (self.sigma0 > 0.0):
            raise ValueError(f"sigma0={self.sigma0!r} must be positive")


@dataclass(frozen=True)
class MixtureSpec:
    """A pair spec plus optional independent nuisance coordinates."""

    kind: CompactPairSpec | GaussianPairSpec
    extra_dims: int = 0

    def __post_init__(self):
        if not isinstance(self.kind, (CompactPairSpec, GaussianPairSpec)):
            raise ValueError("kind must be a CompactPairSpec or GaussianPairSpec")
        if self.extra_dims < 0:
            raise ValueError(f"extra_dims={self.extra_dims!r} must be >= 0")

    @property
    def dim(self) -> int:
        return 1 + self.extra_dims

    @property
    def is_compact(self) -> bool:
        return isinstance(self.kind, CompactPairSpec)


def _pair_of(spec) -> CompactPairSpec | GaussianPairSpec:
    return spec.kind if isinstance(spec, MixtureSpec) else spec


def _extra_dims_of(spec) -> int:
    return spec.extra_dims if isinstance(spec, MixtureSpec) else 0


def _phi(x, mu, sigma):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def component_density(spec, x, label):
    """Density of the labeled class coordinate at x (vectorized)."""
    pair = _pair_of(spec)
    label = _as_label(label)
    if isinstance(pair, CompactPairSpec):
        return pair.component(label)(x)
    return _phi(x, label * pair.mu, pair.sigma0)


def component_cdf(spec, x, label):
    """CDF of the labeled class coordinate at x (vectorized)."""
    pair = _pair_of(spec)
    label = _as_label(label)
    if isinstance(pair, CompactPairSpec):
        return pair.component(label).cdf(x)
    return ndtr((np.asarray(x, dtype=float) - label * pair.mu) / pair.sigma0)


def nuisance_density(spec, x):
    pair = _pair_of(spec)
    x = np.asarray(x, dtype=float)
    if isinstance(pair, CompactPairSpec):
        return np.where((x >= -0.5) & (x <= 0.5), 1.0, 0.0)
    return _phi(x, 0.0, 1.0)


def density(spec, x):
    """Mixture density at a point (scalar for 1-D specs, vector otherwise)."""
    extra = _extra_dims_of(spec)
    if extra == 0:
        x0 = np.asarray(x, dtype=float)
        if x0.ndim and x0.shape[-1] == 1:
            x0 = x0[..., 0]
    else:
        x0 = np.asarray(x, dtype=float)
        if x0.shape[-1] != 1 + extra:
            raise ValueError(
                f"point has {x0.shape[-1]} coordinates, spec has {1 + extra}"
            )
        nuis = x0[..., 1:]
        x0 = x0[..., 0]
    val = 0.5 * component_density(spec, x0, +1) + 0.5 * component_density(spec, x0, -1)
    if extra:
        for j in range(extra):
            val = val * nuisance_density(spec, nuis[..., j])
    return val if np.ndim(val) else float(val)


def support(spec, label) -> tuple[float, float]:
    """Exact support interval of the labeled class coordinate."""
    pair = _pair_of(spec)
    if isinstance(pair, GaussianPairSpec):
        return (-math.inf, math.inf)
    if _as_label(label) > 0:
        return (pair.alpha1, pair.alpha2)
    return (-pair.alpha2, -pair.alpha1)


def support_box(spec, label) -> list[tuple[float, float]]:
    """Per-coordinate support box: class coordinate plus nuisance ranges."""
    box = [support(spec, label)]
    pair = _pair_of(spec)
    nuis = (-0.5, 0.5) if isinstance(pair, CompactPairSpec) else (-math.inf, math.inf)
    box.extend([nuis] * _extra_dims_of(spec))
    return box


def sample(spec, label=None, rng=None, n: int | None = None):
    """Draw from the mixture (or from the labeled class when given).

    Compact classes are drawn by exact inverse CDF of the stored table.
    With n=None a single point is returned; otherwise an array of shape (n,)
    or (n, dim). The stream is consumed in a fixed order: labels (when
    drawing unconditionally), class coordinate, then each nuisance column.
    """
    if rng is None:
        raise ValueError("a seeded numpy Generator is required")
    pair = _pair_of(spec)
    extra = _extra_dims_of(spec)
    m = 1 if n is None else int(n)
    if m < 1:
        raise ValueError("n must be >= 1")
    if label is None:
        z = np.where(rng.random(m) < 0.5, 1, -1)
    else:
        z = np.full(m, int(_as_label(label)))
    if isinstance(pair, CompactPairSpec):
        u = rng.random(m)
        pos = pair.density_pos.ppf(u)
        neg = pair.density_neg.ppf(u)
        x0 = np.where(z > 0, pos, neg)
    else:
        x0 = z * pair.mu + pair.sigma0 * rng.standard_normal(m)
    if extra == 0:
        return float(x0[0]) if n is None else x0
    cols = [x0]
    for _ in range(extra):
        if isinstance(pair, CompactPairSpec):
            cols.append(rng.random(m) - 0.5)
        else:
            cols.append(rng.standard_normal(m))
    pts = np.column_stack(cols)
    return pts[0] if n is None else pts


@dataclass(frozen=True)
class BetaBoundReport:
    holds: bool
    worst_ratio: float


def verify_beta_bound(spec: CompactPairSpec, grid_size: int) -> BetaBoundReport:
    """Check 1/beta <= density_neg(x1)/density_pos(x2) <= beta on a grid.

    Evaluates the cross ratio on a grid_size x grid_size product grid over
    the two supports and reports whether the declared beta covers the worst
    observed ratio. Failure is reported, not raised.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    xs_neg = np.linspace(-spec.alpha2, -spec.alpha1, grid_size)
    xs_pos = np.linspace(spec.alpha1, spec.alpha2, grid_size)
    dn = spec.density_neg(xs_neg)
    dp = spec.density_pos(xs_pos)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = dn[:, None] / dp[None, :]
    worst = float(max(np.max(ratios), np.max(1.0 / ratios)))
    if not np.isfinite(worst):
        return BetaBoundReport(holds=False, worst_ratio=math.inf)
    return BetaBoundReport(holds=worst <= spec.beta, worst_ratio=worst)


def uniform_pair(alpha1: float = 1.0, alpha2: float = 2.0, extra_dims: int = 0) -> MixtureSpec:
    """Equal uniform densities on [alpha1, alpha2] and [-alpha2, -alpha1]."""
    if not (0.0 < alpha1 < alpha2):
        raise ValueError("uniform pair needs 0 < alpha1 < alpha2")
    h = 1.0 / (alpha2 - alpha1)
    pos = PiecewisePolynomial((alpha1, alpha2), ((h,),))
    neg = PiecewisePolynomial((-alpha2, -alpha1), ((h,),))
    return MixtureSpec(
        kind=CompactPairSpec(alpha1, alpha2, pos, neg, beta=1.0),
        extra_dims=extra_dims,
    )


def square_pair_2d() -> MixtureSpec:
    """Unit squares centered at (+2, 0) and (-2, 0): the 2-D experiment."""
    return uniform_pair(1.5, 2.5, extra_dims=1)


def gaussian_pair(mu: float = 1.0, sigma0: float = 1.0, extra_dims: int = 0) -> MixtureSpec:
    return MixtureSpec(kind=GaussianPairSpec(mu, sigma0), extra_dims=extra_dims)


def spec_to_json(spec: MixtureSpec) -> str:
    """Serialize to the canonical JSON document; round-trips exactly."""
    pair = _pair_of(spec)
    if isinstance(pair, CompactPairSpec):
        doc = {
            "kind": "compact",
            "alpha1": pair.alpha1,
            "alpha2": pair.alpha2,
            "beta": pair.beta,
            "breakpoints": {
                "pos": list(pair.density_pos.breakpoints),
                "neg": list(pair.density_neg.breakpoints),
            },
            "coefficients": {
                "pos": [list(r) for r in pair.density_pos.coefficients],
                "neg": [list(r) for r in pair.density_neg.coefficients],
            },
            "extra_dims": _extra_dims_of(spec),
        }
    else:
        doc = {
            "kind": "gaussian",
            "mu": pair.mu,
            "sigma0": pair.sigma0,
            "extra_dims": _extra_dims_of(spec),
        }
    return json.dumps(doc, sort_keys=True)


_COMPACT_KEYS = {"kind", "alpha1", "alpha2", "beta", "breakpoints", "coefficients", "extra_dims"}
_GAUSSIAN_KEYS = {"kind", "mu", "sigma0", "extra_dims"}


def spec_from_json(text: str | dict) -> MixtureSpec:
    doc = json.loads(text) if isinstance(text, str) else text
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ValueError("mixture document must be an object with a 'kind' field")
    kind = doc["kind"]
    if kind == "compact":
        unknown = set(doc) - _COMPACT_KEYS
        if unknown:
            raise ValueError(f"unknown mixture fields: {sorted(unknown)}")
        pos = PiecewisePolynomial(
            tuple(doc["breakpoints"]["pos"]),
            tuple(tuple(r) for r in doc["coefficients"]["pos"]),
        )
        neg = PiecewisePolynomial(
            tuple(doc["breakpoints"]["neg"]),
            tuple(tuple(r) for r in doc["coefficients"]["neg"]),
        )
        pair = CompactPairSpec(doc["alpha1"], doc["alpha2"], pos, neg, doc.get("beta", 1.0))
    elif kind == "gaussian":
        unknown = set(doc) - _GAUSSIAN_KEYS
        if unknown:
            raise ValueError(f"unknown mixture fields: {sorted(unknown)}")
        pair = GaussianPairSpec(doc.get("mu", 1.0), doc.get("sigma0", 1.0))
    else:
        raise ValueError(f"unknown mixture kind {kind!r}")
    return MixtureSpec(kind=pair, extra_dims=int(doc.get("extra_dims", 0)))
