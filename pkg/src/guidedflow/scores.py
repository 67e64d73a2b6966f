"""Noised score fields, posterior diagnostics and corrupted estimates.

The noised density at schedule point (a, b) is the convolution
p_t(x) = E[ N(x; a X0, b^2) ] with X0 drawn from the mixture (or from one
class for the conditional field). Every score here is evaluated through the
posterior-mean identity

    score(x) = (a * E[X0 | X_t = x] - x) / b^2,

with the posterior weights and the component posterior means computed from
one shared set of quadrature nodes. That makes the mixture-score identity
and the posterior-mean identity hold to roundoff instead of to quadrature
tolerance.

Compact-pair integrals are evaluated by Clenshaw-Curtis quadrature on an
effective window of each support piece. The window keeps every node where
the Gaussian exponent is within _EXPONENT_DROP of its maximum over the
piece, exponents are shifted by their maximum before exponentiation, and
the node count doubles (with the embedded half-rule as error control) until
the mass and mean estimates stabilize. Refinement past the budget raises
QuadratureError. When b shrinks to the clamp the window collapses onto the
support point nearest the rescaled state, so the posterior mean degrades
gracefully to that point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .mixtures import (
    ClassLabel,
    CompactPairSpec,
    GaussianPairSpec,
    MixtureSpec,
    PiecewisePolynomial,
    _as_label,
    _pair_of,
    sample as mixture_sample,
)
from .schedule import B_MIN, SchedulePoint

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Gaussian exponent budget for the quadrature window: contributions more
# than e^-36 below the in-piece maximum are dropped (2e-16 relative).
_EXPONENT_DROP = 36.0

_CC_SIZES = (64, 128, 256, 512)
_LOGMASS_TOL = 1e-11
_MEAN_TOL = 1e-12

_DEGENERATE_LOG = math.log(1e-300)


class QuadratureError(RuntimeError):
    """Quadrature refinement exhausted its subdivision budget."""


class DegenerateDenominatorError(RuntimeError):
    """Monte-Carlo kernel mean too small to form the ratio at this n."""


@dataclass(frozen=True)
class ScoreQuery:
    point: SchedulePoint
    x: float
    label: ClassLabel | None = None


@dataclass(frozen=True)
class PosteriorDiagnostics:
    q_pos: float
    q_neg: float
    mean_uncond: float
    mean_pos: float
    mean_neg: float


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    n: int


@dataclass(frozen=True)
class CorruptionL2Report:
    error_pos: float
    error_uncond: float
    bound: float


# ---------------------------------------------------------------------------
# Clenshaw-Curtis rules (nodes nested: rule N/2 sits on the even nodes of N).

_cc_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _clenshaw_curtis(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes (descending cosines) and weights of the n+1 point rule on [-1, 1]."""
    if n in _cc_cache:
        return _cc_cache[n]
    theta = np.pi * np.arange(n + 1) / n
    x = np.cos(theta)
    w = np.zeros(n + 1)
    v = np.ones(n - 1)
    # n is even throughout this module
    for k in range(1, n // 2):
        v -= 2.0 * np.cos(2.0 * k * theta[1:-1]) / (4.0 * k * k - 1.0)
    v -= np.cos(n * theta[1:-1]) / (n * n - 1.0)
    w[0] = w[n] = 1.0 / (n * n - 1.0)
    w[1:-1] = 2.0 * v / n
    _cc_cache[n] = (x, w)
    return x, w


def _piece_nodes(row, lo_piece, a, be, x, n_cc):
    """Window, nodes and weighted density values for one support piece.

    Returns (u, logw, E): node positions (m, n_cc+1), log of the nonnegative
    quadrature weight times density, and the Gaussian exponent at each node.
    """
    xi_cc, w_cc = _clenshaw_curtis(n_cc)
    l = lo_piece
    h = row["hi"]
    center = x / a
    sigma = be / a
    c = np.clip(center, l, h)
    d = np.abs(center - c)
    r = np.sqrt(d * d + 2.0 * _EXPONENT_DROP * sigma * sigma)
    lo = np.maximum(l, center - r)
    hi = np.minimum(h, center + r)
    hi = np.maximum(hi, lo + 32.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(lo)))
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    u = mid[:, None] + half[:, None] * xi_cc[None, :]
    q = np.zeros_like(u)
    xi = u - l
    coeffs = row["coeffs"]
    for ck in reversed(coeffs):
        q = q * xi + ck
    q = np.maximum(q, 0.0)
    weight = w_cc[None, :] * half[:, None] * q
    diff = x[:, None] - a[:, None] * u
    E = -(diff * diff) / (2.0 * (be * be)[:, None])
    return u, weight, E


def _cc_moments(poly: PiecewisePolynomial, a, b, x, n_cc):
    """One evaluation level: (logmass, mean, converged) at rule size n_cc."""
    be = np.maximum(b, B_MIN)
    blocks_u, blocks_w, blocks_e = [], [], []
    for i, coeffs in enumerate(poly.coefficients):
        row = {"coeffs": coeffs, "hi": poly.breakpoints[i + 1]}
        u, w, E = _piece_nodes(row, poly.breakpoints[i], a, be, x, n_cc)
        blocks_u.append(u)
        blocks_w.append(w)
        blocks_e.append(E)
    U = np.concatenate(blocks_u, axis=1)
    W = np.concatenate(blocks_w, axis=1)
    E = np.concatenate(blocks_e, axis=1)
    S = E.max(axis=1)
    ex = np.exp(E - S[:, None])
    term = W * ex
    t0 = term.sum(axis=1)
    t1 = (U * term).sum(axis=1)
    # embedded half rule reuses the even-index nodes of every piece block
    n_nodes = n_cc + 1
    _, w_half = _clenshaw_curtis(n_cc // 2)
    n_pieces = len(poly.coefficients)
    t0h = np.zeros_like(t0)
    t1h = np.zeros_like(t1)
    for p in range(n_pieces):
        cols = p * n_nodes + np.arange(0, n_nodes, 2)
        # the half-width scale is recovered from the fine-rule weights ratio
        half_scale = W[:, cols] / np.where(
            _clenshaw_curtis(n_cc)[1][None, ::2] == 0.0,
            1.0,
            _clenshaw_curtis(n_cc)[1][None, ::2],
        )
        term_h = w_half[None, :] * half_scale * ex[:, cols]
        t0h += term_h.sum(axis=1)
        t1h += (U[:, cols] * term_h).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logmass = S + np.log(t0)
        logmass_h = S + np.log(t0h)
        mean = t1 / t0
        mean_h = t1h / t0h
    scale = max(1.0, abs(poly.lower), abs(poly.upper))
    fallback = np.clip(x / a, poly.lower, poly.upper)
    empty = ~np.isfinite(logmass)
    mean = np.where(empty, fallback, np.clip(mean, poly.lower, poly.upper))
    dlog = np.abs(logmass - logmass_h)
    dmean = np.abs(mean - np.where(np.isfinite(mean_h), mean_h, mean))
    converged = empty | ((dlog <= _LOGMASS_TOL) & (dmean <= _MEAN_TOL * scale))
    return logmass, mean, converged


def component_log_moments(poly: PiecewisePolynomial, a, b, x):
    """log of the unnormalized noised component mass and its posterior mean.

    logmass(x) = log integral of q(u) exp(-(x - a u)^2 / (2 b^2)) du, without
    the 1/(b sqrt(2 pi)) factor; mean(x) = E[X0 | X_t = x, this component].
    Vectorized over x (with a, b broadcast alongside).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0 and a.ndim == 0 and b.ndim == 0
    a, b, x = np.broadcast_arrays(np.atleast_1d(a), np.atleast_1d(b), np.atleast_1d(x))
    a = a.astype(float).ravel()
    b = b.astype(float).ravel()
    x = x.astype(float).ravel()
    logmass, mean, ok = _cc_moments(poly, a, b, x, _CC_SIZES[0])
    level = 1
    while not ok.all():
        if level >= len(_CC_SIZES):
            worst = int(np.argmax(~ok))
            raise QuadratureError(
                f"quadrature did not stabilize within {_CC_SIZES[-1] + 1} nodes "
                f"(first offending state x={x[worst]!r}, a={a[worst]!r}, b={b[worst]!r})"
            )
        idx = np.flatnonzero(~ok)
        lm, mn, okk = _cc_moments(poly, a[idx], b[idx], x[idx], _CC_SIZES[level])
        logmass[idx] = lm
        mean[idx] = mn
        ok[idx] = okk
        level += 1
    if scalar:
        return float(logmass[0]), float(mean[0])
    return logmass, mean


# ---------------------------------------------------------------------------
# Posterior diagnostics shared by scores and drifts.


def posterior_parts(spec, a, b, x) -> dict:
    """Posterior weights, component means and the mixture mean, vectorized.

    Returns arrays q_pos, q_neg, mean_pos, mean_neg, mean_uncond and the
    component log masses logmass_pos, logmass_neg (compact pairs only carry
    quadrature masses; Gaussian pairs use closed forms).
    """
    pair = _pair_of(spec)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    be = np.maximum(b, B_MIN)
    if isinstance(pair, CompactPairSpec):
        lp, mp = component_log_moments(pair.density_pos, a, be, x)
        ln_, mn = component_log_moments(pair.density_neg, a, be, x)
        delta = np.asarray(lp - ln_, dtype=float)
        q_pos = expit(delta)
        q_pos = np.where(np.isnan(q_pos), 0.5, q_pos)
        q_neg = expit(-delta)
        q_neg = np.where(np.isnan(q_neg), 0.5, q_neg)
    else:
        sigma2 = a * a * pair.sigma0 * pair.sigma0 + be * be
        amu = a * pair.mu
        mp = (a * pair.sigma0 * pair.sigma0 * x + be * be * pair.mu) / sigma2
        mn = (a * pair.sigma0 * pair.sigma0 * x - be * be * pair.mu) / sigma2
        q_pos = expit(2.0 * amu * x / sigma2)
        q_neg = expit(-2.0 * amu * x / sigma2)
        lp = -((x - amu) ** 2) / (2.0 * sigma2) - 0.5 * np.log(sigma2 / (be * be))
        ln_ = -((x + amu) ** 2) / (2.0 * sigma2) - 0.5 * np.log(sigma2 / (be * be))
    mean_uncond = q_pos * mp + q_neg * mn
    return {
        "q_pos": q_pos,
        "q_neg": q_neg,
        "mean_pos": mp,
        "mean_neg": mn,
        "mean_uncond": mean_uncond,
        "logmass_pos": lp,
        "logmass_neg": ln_,
    }


def posterior(spec, point: SchedulePoint, x: float) -> PosteriorDiagnostics:
    """Posterior diagnostics at one state; see posterior_parts."""
    parts = posterior_parts(spec, point.a, point.b, x)
    return PosteriorDiagnostics(
        q_pos=float(parts["q_pos"]),
        q_neg=float(parts["q_neg"]),
        mean_uncond=float(parts["mean_uncond"]),
        mean_pos=float(parts["mean_pos"]),
        mean_neg=float(parts["mean_neg"]),
    )


def score_arrays(spec, a, b, x, label=None):
    """Noised score (conditional when label given), vectorized over x."""
    pair = _pair_of(spec)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    be = np.maximum(b, B_MIN)
    if isinstance(pair, GaussianPairSpec):
        sigma2 = a * a * pair.sigma0 * pair.sigma0 + be * be
        amu = a * pair.mu
        if label is None:
            return (-x + amu * np.tanh(amu * x / sigma2)) / sigma2
        return (int(_as_label(label)) * amu - x) / sigma2
    if label is None:
        parts = posterior_parts(pair, a, be, x)
        return (a * parts["mean_uncond"] - x) / (be * be)
    poly = pair.component(label)
    _, mean = component_log_moments(poly, a, be, x)
    return (a * mean - x) / (be * be)


def exact_score_compact(spec, query: ScoreQuery) -> float:
    """Exact compact-pair score at one query via windowed quadrature."""
    pair = _pair_of(spec)
    if not isinstance(pair, CompactPairSpec):
        raise ValueError("exact_score_compact requires a compact pair")
    out = score_arrays(pair, query.point.a, query.point.b, query.x, query.label)
    return float(out)


def exact_score_gaussian(spec, query: ScoreQuery) -> float:
    """Closed-form Gaussian-pair score at one query."""
    pair = _pair_of(spec)
    if not isinstance(pair, GaussianPairSpec):
        raise ValueError("exact_score_gaussian requires a Gaussian pair")
    out = score_arrays(pair, query.point.a, query.point.b, query.x, query.label)
    return float(out)


def exact_score(spec, query: ScoreQuery) -> float:
    pair = _pair_of(spec)
    if isinstance(pair, CompactPairSpec):
        return exact_score_compact(pair, query)
    return exact_score_gaussian(pair, query)


def noised_log_density(spec, a, b, x, label=None):
    """log p_t(x) (or log p_t(x | label)), vectorized over x."""
    pair = _pair_of(spec)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.asarray(x, dtype=float)
    be = np.maximum(b, B_MIN)
    if isinstance(pair, GaussianPairSpec):
        sigma2 = a * a * pair.sigma0 * pair.sigma0 + be * be
        amu = a * pair.mu
        lp = -((x - amu) ** 2) / (2.0 * sigma2) - 0.5 * np.log(sigma2) - _LOG_SQRT_2PI
        ln_ = -((x + amu) ** 2) / (2.0 * sigma2) - 0.5 * np.log(sigma2) - _LOG_SQRT_2PI
    else:
        lp, _ = component_log_moments(pair.density_pos, a, be, x)
        ln_, _ = component_log_moments(pair.density_neg, a, be, x)
        lp = lp - np.log(be) - _LOG_SQRT_2PI
        ln_ = ln_ - np.log(be) - _LOG_SQRT_2PI
    if label is not None:
        return lp if _as_label(label) > 0 else ln_
    m = np.maximum(lp, ln_)
    both_empty = ~np.isfinite(m)
    m = np.where(both_empty, 0.0, m)
    out = m + np.log(0.5 * np.exp(lp - m) + 0.5 * np.exp(ln_ - m))
    return np.where(both_empty, -np.inf, out)


# ---------------------------------------------------------------------------
# Score field objects.


class ExactScoreField:
    """Exact conditional/unconditional scores plus posterior diagnostics."""

    def __init__(self, spec):
        self.spec = spec if isinstance(spec, MixtureSpec) else MixtureSpec(kind=spec)

    def score(self, point: SchedulePoint, x, label=None):
        return score_arrays(self.spec, point.a, point.b, x, label)

    def posterior(self, point: SchedulePoint, x) -> PosteriorDiagnostics:
        return posterior(self.spec, point, x)


@dataclass(frozen=True)
class CorruptionSpec:
    """Tail-corrupted field: -x for x >= R, the exact base field otherwise."""

    R: float
    base: ExactScoreField

    def __post_init__(self):
        if not (self.R >= 2.0):
            raise ValueError(f"corruption cutoff R={self.R!r} must be >= 2")

    def score(self, point: SchedulePoint, x, label=None):
        x_arr = np.asarray(x, dtype=float)
        exact = self.base.score(point, x_arr, label)
        out = np.where(x_arr >= self.R, -x_arr, exact)
        return out if out.ndim else float(out)


def corrupted_score(corruption: CorruptionSpec, query: ScoreQuery) -> float:
    """Corrupted score at one query; exact comparison x >= R selects -x."""
    if query.x >= corruption.R:
        return -query.x
    return float(corruption.base.score(query.point, query.x, query.label))


# ---------------------------------------------------------------------------
# Monte-Carlo estimator.


def _mc_ratio_1d(clean, a, be, x):
    """Shared-draw kernel ratio and its delta-method standard error."""
    diff = a * clean - x
    E = -(diff * diff) / (2.0 * be * be)
    S = float(np.max(E))
    K = np.exp(E - S)
    mean_k = float(np.mean(K))
    if mean_k <= 0.0 or S + math.log(mean_k) < _DEGENERATE_LOG:
        raise DegenerateDenominatorError(
            f"kernel mean underflows 1e-300 at x={x!r} (exponent scale {S:.1f})"
        )
    U = (diff / (be * be)) * K
    mean_u = float(np.mean(U))
    r = mean_u / mean_k
    n = clean.shape[0]
    du = U - mean_u
    dk = K - mean_k
    var_u = float(np.dot(du, du)) / (n - 1)
    var_k = float(np.dot(dk, dk)) / (n - 1)
    cov = float(np.dot(du, dk)) / (n - 1)
    var_r = (var_u - 2.0 * r * cov + r * r * var_k) / (n * mean_k * mean_k)
    return r, math.sqrt(max(var_r, 0.0))


def mc_score(spec, query: ScoreQuery, n: int, rng) -> MCEstimate:
    """Monte-Carlo score estimate on the class coordinate.

    One draw set of A = a X0 is shared by the kernel-mean denominator and
    the gradient-kernel numerator; the standard error comes from the delta
    method applied to that ratio.
    """
    if n < 100:
        raise ValueError(f"n={n!r} below the minimum of 100 draws")
    pair = _pair_of(spec)
    clean = mixture_sample(MixtureSpec(kind=pair), query.label, rng, n=n)
    be = max(query.point.b, B_MIN)
    value, se = _mc_ratio_1d(np.asarray(clean, dtype=float), query.point.a, be, query.x)
    return MCEstimate(value=value, std_error=se, n=n)


class MonteCarloScoreField:
    """Per-lane Monte-Carlo score field for batched flows.

    Each lane owns an independent child stream so batch composition does not
    change any lane's draws. Joint kernels are used in d dimensions.
    """

    def __init__(self, spec, n: int, seed_seq: np.random.SeedSequence, lanes: int):
        if n < 100:
            raise ValueError(f"n={n!r} below the minimum of 100 draws")
        self.spec = spec if isinstance(spec, MixtureSpec) else MixtureSpec(kind=spec)
        self.n = n
        self._gens = [np.random.default_rng(s) for s in seed_seq.spawn(lanes)]

    def score_lanes(self, a, b, x, label, lane_idx):
        """Vector score estimates, one row per active lane.

        a, b are per-lane arrays, x has shape (m, d), lane_idx maps rows to
        the owning streams.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, d = x.shape
        be = np.maximum(np.asarray(b, dtype=float), B_MIN)
        a = np.asarray(a, dtype=float)
        out = np.empty((m, d))
        for row in range(m):
            gen = self._gens[int(lane_idx[row])]
            clean = mixture_sample(self.spec, label, gen, n=self.n)
            clean = np.asarray(clean, dtype=float).reshape(self.n, d)
            diff = a[row] * clean - x[row][None, :]
            E = -np.sum(diff * diff, axis=1) / (2.0 * be[row] * be[row])
            S = float(np.max(E))
            K = np.exp(E - S)
            mean_k = float(np.mean(K))
            if mean_k <= 0.0 or S + math.log(mean_k) < _DEGENERATE_LOG:
                raise DegenerateDenominatorError(
                    f"kernel mean underflows 1e-300 at lane {int(lane_idx[row])}"
                )
            out[row] = (K[:, None] * diff).sum(axis=0) / (
                K.sum() * be[row] * be[row]
            )
        return out


# ---------------------------------------------------------------------------
# Corrupted-score L2 error.


def _clean_second_moment(pair, label=None) -> float:
    if isinstance(pair, GaussianPairSpec):
        return pair.mu * pair.mu + pair.sigma0 * pair.sigma0
    if label is None:
        return 0.5 * (pair.density_pos.moment(2) + pair.density_neg.moment(2))
    return pair.component(label).moment(2)


def _adaptive_interval(fn, lo, hi, budget):
    """Doubling Clenshaw-Curtis integral of fn over [lo, hi]."""
    n = 128
    prev = None
    while n + 1 <= budget:
        xi, wc = _clenshaw_curtis(n)
        xs = 0.5 * (lo + hi) + 0.5 * (hi - lo) * xi
        val = float(np.dot(wc, fn(xs)) * 0.5 * (hi - lo))
        if prev is not None and abs(val - prev) <= 1e-9 * max(abs(val), 1e-30) + 1e-18:
            return val
        prev = val
        n *= 2
    raise QuadratureError(
        f"interval integral over [{lo!r}, {hi!r}] did not converge within {budget} nodes"
    )


def corruption_l2_error(
    corruption: CorruptionSpec, point: SchedulePoint, quad_budget: int = 16384
) -> CorruptionL2Report:
    """Squared L2 error of the corrupted field against the exact one.

    Integrates (exact score + x)^2 over [R, R + 40 noised std] against the
    conditional noised density for error_pos and the unconditional noised
    density for error_uncond. The bound column evaluates
    10 * R * exp(-R^2 / 2) / b^4 for comparison only; only its monotone
    shape is asserted anywhere.
    """
    spec = corruption.base.spec
    pair = _pair_of(spec)
    a = point.a
    be = max(point.b, B_MIN)
    R = corruption.R

    def make_integrand(label):
        def fn(xs):
            s = score_arrays(spec, a, be, xs, label)
            logd = noised_log_density(spec, a, be, xs, label)
            return (s + xs) ** 2 * np.exp(logd)

        return fn

    def upper(label):
        m2 = _clean_second_moment(pair, label)
        return R + 40.0 * math.sqrt(a * a * m2 + be * be)

    error_pos = _adaptive_interval(make_integrand(+1), R, upper(+1), quad_budget)
    error_uncond = _adaptive_interval(make_integrand(None), R, upper(None), quad_budget)
    bound = 10.0 * R * math.exp(-0.5 * R * R) / (be ** 4)
    return CorruptionL2Report(
        error_pos=max(error_pos, 0.0),
        error_uncond=max(error_uncond, 0.0),
        bound=bound,
    )
