"""Noising schedule and time reparametrizations.

The forward process contracts the data by a = e^(t - T) and adds Gaussian
noise of scale b = sqrt(1 - a^2), so a^2 + b^2 = 1 at every time. The
variable s = a is used as the integration clock for the sampling flow:
t(s) = ln(s) + T, and s runs over [e^(-T), 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# 1/b^2 terms in drifts blow up at t = T; evaluation below this clamp is
# performed at the clamp instead (see b_safe).
B_MIN = 1e-8

DEFAULT_HORIZON = 10.0

# The flow analysis needs enough horizon for the N(0,1) initialization to
# make sense; 2 ln 2 is the minimum accepted.
MIN_HORIZON = 2.0 * math.log(2.0)


@dataclass(frozen=True)
class SchedulePoint:
    """Schedule quantities at a single time: t, horizon T, a, b and s = a."""

    t: float
    T: float
    a: float
    b: float
    s: float

    @property
    def b_safe(self) -> float:
        """b clamped from below at B_MIN, for use inside 1/b^2 expressions."""
        return max(self.b, B_MIN)


@dataclass(frozen=True)
class GaussianWidth:
    """Noised width sigma_t of a component with clean width sigma0."""

    sigma_t: float


def _check_horizon(T: float) -> None:
    if not (T >= MIN_HORIZON):
        raise ValueError(
            f"horizon T={T!r} violates T >= 2 ln 2 ({MIN_HORIZON:.6f})"
        )


def at_time(t: float, T: float = DEFAULT_HORIZON) -> SchedulePoint:
    """Schedule point at time t in [0, T]."""
    _check_horizon(T)
    if not (0.0 <= t <= T):
        raise ValueError(f"time t={t!r} outside [0, T={T!r}]")
    a = math.exp(t - T)
    b = math.sqrt(max(0.0, 1.0 - a * a))
    return SchedulePoint(t=t, T=T, a=a, b=b, s=a)


def at_s(s: float, T: float = DEFAULT_HORIZON) -> SchedulePoint:
    """Schedule point at clock value s in [e^(-T), 1]; inverse of at_time."""
    _check_horizon(T)
    s_min = math.exp(-T)
    if not (s_min <= s <= 1.0):
        raise ValueError(f"clock s={s!r} outside [e^-T={s_min!r}, 1]")
    t = math.log(s) + T
    t = min(max(t, 0.0), T)
    b = math.sqrt(max(0.0, 1.0 - s * s))
    return SchedulePoint(t=t, T=T, a=s, b=b, s=s)


def gaussian_width(point: SchedulePoint, sigma0: float) -> GaussianWidth:
    """sigma_t = sqrt(a^2 sigma0^2 + b^2); equals 1 exactly when sigma0 = 1."""
    if not (sigma0 > 0.0):
        raise ValueError(f"sigma0={sigma0!r} must be positive")
    return GaussianWidth(
        sigma_t=math.sqrt(point.a * point.a * sigma0 * sigma0 + point.b * point.b)
    )
