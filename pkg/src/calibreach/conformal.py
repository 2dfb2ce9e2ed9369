"""Rolling conformal calibration of control intervals.

A conformal parameter ``theta[k]`` per prediction offset widens (or shrinks)
the quantile-regression interval through a stretching function and is
nudged after every observation so the realized miss rate tracks ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ControlSequence


def corrected_alpha(gamma: float, n: int) -> float:
    """Per-agent level giving total miscoverage ``gamma`` over ``n`` independent agents.

    Raises:
        ValueError: if ``gamma`` is outside ``[0, 1)`` or ``n < 1``.
    """
    if not (0.0 <= gamma < 1.0):
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if int(n) != n or n < 1:
        raise ValueError(f"agent count must be an integer >= 1, got {n}")
    # expm1/log1p keep precision for small gamma
    return -math.expm1(math.log1p(-gamma) / int(n))


def stretch(theta, mode: str = "linear", c: float = 1.0):
    """Map the conformal parameter to a symmetric interval widening.

    Args:
        theta: scalar or array.
        mode: ``"linear"`` (identity) or ``"exponential"``
            (``sign(theta) * (exp(c |theta|) - 1)``).
        c: rate of the exponential mode.
    """
    theta = np.asarray(theta, dtype=float)
    if mode == "linear":
        out = theta.copy()
    elif mode == "exponential":
        out = np.sign(theta) * np.expm1(c * np.abs(theta))
    else:
        raise ValueError(f"unknown stretch mode {mode!r}")
    return float(out) if out.ndim == 0 else out


@dataclass
class ConformalState:
    """Conformal parameters, one per prediction offset.

    Attributes:
        theta: ``(h,)`` conformal parameters.
        xi: learning rate.
        alpha: target miscoverage level.
        mode: stretching mode.
        c: exponential stretching rate.
    """

    theta: np.ndarray
    xi: float
    alpha: float
    mode: str = "linear"
    c: float = 1.0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float).ravel()
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")

    @classmethod
    def initial(cls, h: int, xi: float, alpha: float, mode: str = "linear",
                c: float = 1.0) -> "ConformalState":
        return cls(np.zeros(h), xi, alpha, mode, c)

    def widening(self) -> np.ndarray:
        return np.atleast_1d(stretch(self.theta, self.mode, self.c))


@dataclass
class ControlIntervalSequence:
    """Axis-aligned control boxes per step; ``lower`` and ``upper`` are ``(h, 2)``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_2d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.shape[1] != 2:
            raise ValueError("lower and upper must both have shape (h, 2)")
        if np.any(self.lower > self.upper):
            raise ValueError("interval lower bound exceeds upper bound")

    def __len__(self) -> int:
        return self.lower.shape[0]

    def box(self, k: int) -> tuple[float, float, float, float]:
        """Return step ``k`` as ``(a1, b1, a2, b2)``."""
        return (float(self.lower[k, 0]), float(self.upper[k, 0]),
                float(self.lower[k, 1]), float(self.upper[k, 1]))

    def contains(self, u: np.ndarray) -> np.ndarray:
        """Per-step joint containment of controls ``u (h, 2)`` (bounds inclusive)."""
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.lower) & (u <= self.upper), axis=1)


def calibrated_interval(u_hat, e_lo, e_hi, cs: ConformalState) -> ControlIntervalSequence:
    """Widen the quantile interval around ``u_hat`` by ``stretch(theta[k])`` per side.

    Where the lower bound would exceed the upper one, both collapse to their
    midpoint.

    Raises:
        ValueError: on length mismatch.
    """
    u = u_hat.as_array() if isinstance(u_hat, ControlSequence) else np.asarray(u_hat, dtype=float)
    e_lo = np.asarray(e_lo, dtype=float)
    e_hi = np.asarray(e_hi, dtype=float)
    h = u.shape[0]
    if e_lo.shape != u.shape or e_hi.shape != u.shape or cs.theta.shape != (h,):
        raise ValueError("u_hat, quantiles and theta must share the prediction horizon")
    w = cs.widening()[:, None]
    lo = u + e_lo - w
    hi = u + e_hi + w
    bad = lo > hi
    if np.any(bad):
        mid = 0.5 * (lo + hi)
        lo = np.where(bad, mid, lo)
        hi = np.where(bad, mid, hi)
    return ControlIntervalSequence(lo, hi)


def interval_misses(u_obs, intervals: ControlIntervalSequence) -> np.ndarray:
    """Per-step miss indicators (1 if any control dimension is outside its box)."""
    u = u_obs.as_array() if isinstance(u_obs, ControlSequence) else np.asarray(u_obs, dtype=float)
    if u.shape != intervals.lower.shape:
        raise ValueError("observed controls and intervals are misaligned")
    return (~intervals.contains(u)).astype(float)


def rolling_update(cs: ConformalState, u_obs, i_past: ControlIntervalSequence) -> ConformalState:
    """Return the state after ``theta[k] += xi * (miss_k - alpha)`` for every offset."""
    miss = interval_misses(u_obs, i_past)
    if miss.shape != cs.theta.shape:
        raise ValueError("observation horizon does not match theta")
    return ConformalState(cs.theta + cs.xi * (miss - cs.alpha), cs.xi, cs.alpha, cs.mode, cs.c)
