"""Forecasting interface, reference forecasters and control estimation.

A forecaster maps an observed state history to a predicted control sequence
``u_hat`` of length ``h`` and a per-step uncertainty feature vector ``sigma``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_HORIZON,
    ControlSequence,
    Trajectory,
    wrap_angles,
)

DEFAULT_CONTEXT = 8
N_FEATURES = 6
_EIG_TOL = 1e-9


@dataclass
class GmmForecast:
    """Per-step Gaussian mixture over ``(u1, u2)``.

    Attributes:
        weights: ``(h, K)`` mode weights, each row summing to 1.
        means: ``(h, K, 2)`` mode means.
        covs: ``(h, K, 2, 2)`` symmetric PSD covariances.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        h, k = self.weights.shape
        if self.means.shape != (h, k, 2) or self.covs.shape != (h, k, 2, 2):
            raise ValueError("inconsistent GMM array shapes")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("GMM weights must be nonnegative and sum to 1")
        if not np.allclose(self.covs, np.swapaxes(self.covs, -1, -2), atol=1e-12):
            raise ValueError("GMM covariances must be symmetric")

    @property
    def horizon(self) -> int:
        return self.weights.shape[0]


@dataclass
class Forecast:
    """Prediction ``u_hat`` with ``sigma`` of shape ``(h, d)``."""

    u_hat: ControlSequence
    sigma: np.ndarray
    gmm: GmmForecast | None = None

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if self.sigma.shape[0] != len(self.u_hat):
            raise ValueError("u_hat and sigma must have the same number of steps")
        if not np.all(np.isfinite(self.sigma)) or np.any(self.sigma < 0):
            raise ValueError("uncertainty features must be finite and nonnegative")

    @property
    def horizon(self) -> int:
        return len(self.u_hat)


def gmm_uncertainty_features(g: GmmForecast, step: int) -> np.ndarray:
    """Six uncertainty features of the mixture at one prediction step.

    Features are ``[1, std_u1, std_u2, |cov_12|, max mean distance, weight
    entropy]`` where the (co)variances are those of the highest-weight mode
    (first one on ties).

    Raises:
        ValueError: if a covariance has an eigenvalue below ``-1e-9``.
    """
    w = g.weights[step]
    cov = g.covs[step]
    if np.linalg.eigvalsh(cov).min() < -_EIG_TOL:
        raise ValueError("degenerate covariance (negative eigenvalue)")
    top = int(np.argmax(w))
    c = cov[top]
    mu = g.means[step]
    diff = mu[:, None, :] - mu[None, :, :]
    spread = float(np.sqrt((diff**2).sum(axis=-1)).max())
    nz = w[w > 0]
    entropy = float(-(nz * np.log(nz)).sum()) + 0.0
    return np.array([
        1.0,
        math.sqrt(max(c[0, 0], 0.0)),
        math.sqrt(max(c[1, 1], 0.0)),
        abs(c[0, 1]),
        spread,
        entropy,
    ])


def estimate_controls(history: Trajectory) -> ControlSequence:
    """Finite-difference the speed and wrapped heading of a state history.

    Raises:
        ValueError: if the history has fewer than two states.
    """
    if len(history) < 2:
        raise ValueError("need at least two states to estimate controls")
    arr = history.as_array()
    u1 = np.diff(arr[:, 2]) / history.dt
    u2 = wrap_angles(np.diff(arr[:, 3])) / history.dt
    return ControlSequence.from_array(np.column_stack([u1, u2]), history.t0, history.dt)


def states_from_positions(xy, dt: float) -> np.ndarray:
    """Reconstruct ``(x, y, v, theta)`` rows from positions only.

    Speed and heading come from forward differences; the last row repeats the
    previous estimate.
    """
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) < 2:
        raise ValueError("need an (n >= 2, 2) array of positions")
    d = np.diff(xy, axis=0)
    v = np.hypot(d[:, 0], d[:, 1]) / dt
    th = np.arctan2(d[:, 1], d[:, 0])
    v = np.append(v, v[-1])
    th = wrap_angles(np.append(th, th[-1]))
    return np.column_stack([xy, v, th])


class Forecaster(ABC):
    """Base class for forecasters.

    Args:
        horizon: number of predicted steps ``h``.
        context: number of history states required.
    """

    def __init__(self, horizon: int = DEFAULT_HORIZON, context: int = DEFAULT_CONTEXT):
        if horizon < 1 or context < 2:
            raise ValueError("horizon must be >= 1 and context >= 2")
        self.horizon = horizon
        self.context = context

    @property
    def nominal_scale(self) -> float:
        """Typical control-error magnitude, used to scale default learning rates."""
        return 1.0

    def predict(self, history: Trajectory, truth: ControlSequence | None = None,
                agent_id: int = 0) -> Forecast:
        """Forecast the next ``h`` controls from ``history``.

        Raises:
            ValueError: if the history is shorter than ``context``.
        """
        if len(history) < self.context:
            raise ValueError(
                f"history has {len(history)} states, forecaster needs {self.context}")
        fc = self._predict(history, truth, agent_id)
        if len(fc.u_hat) != self.horizon:
            raise RuntimeError("forecaster returned the wrong horizon")
        return fc

    @abstractmethod
    def _predict(self, history: Trajectory, truth: ControlSequence | None,
                 agent_id: int) -> Forecast:
        ...


def _features(g: GmmForecast) -> np.ndarray:
    return np.array([gmm_uncertainty_features(g, k) for k in range(g.horizon)])


class ConstantControlGmm(Forecaster):
    """Repeat the mean of the last two estimated controls.

    The mixture has one mode per offset; the first offset should be zero so the
    top mode sits on the point prediction. Covariances grow linearly with the
    prediction step.

    Args:
        base_std: per-dimension std of every mode at step 1.
        offsets: ``(K, 2)`` mode offsets added to the repeated control.
        weights: ``(K,)`` mode weights.
    """

    def __init__(self, horizon: int = DEFAULT_HORIZON, context: int = DEFAULT_CONTEXT,
                 base_std=(0.3, 0.05), offsets=((0.0, 0.0), (0.5, 0.1), (-0.5, -0.1)),
                 weights=(0.6, 0.2, 0.2)):
        super().__init__(horizon, context)
        self.base_std = np.broadcast_to(np.asarray(base_std, dtype=float), (2,)).copy()
        self.offsets = np.asarray(offsets, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(weights, dtype=float)
        if len(self.weights) != len(self.offsets):
            raise ValueError("need one weight per offset")
        if np.any(self.base_std < 0):
            raise ValueError("base_std must be nonnegative")

    @property
    def nominal_scale(self) -> float:
        return float(self.base_std[0])

    def _predict(self, history, truth, agent_id):
        u = estimate_controls(history).as_array()
        mean = u[-2:].mean(axis=0)
        h, k = self.horizon, len(self.weights)
        steps = np.arange(1, h + 1, dtype=float)
        means = mean[None, None, :] + self.offsets[None, :, :] * np.ones((h, 1, 1))
        covs = np.zeros((h, k, 2, 2))
        covs[:, :, 0, 0] = (self.base_std[0] ** 2 * steps)[:, None]
        covs[:, :, 1, 1] = (self.base_std[1] ** 2 * steps)[:, None]
        g = GmmForecast(np.tile(self.weights, (h, 1)), means, covs)
        t_end = history.t0 + history.dt * (len(history) - 1)
        u_hat = ControlSequence.from_array(np.tile(mean, (h, 1)), t_end, history.dt)
        return Forecast(u_hat, _features(g), g)


class OracleNoise(Forecaster):
    """True future controls plus seeded Gaussian noise.

    The noise std at step ``k`` (1-based) is ``scale * (1 + growth * (k - 1))``,
    multiplied by ``shift_factor`` for predictions issued at or after
    ``shift_step``. The reported features always use the unshifted std, so a
    shift is invisible to the uncertainty vector.

    Args:
        scale: noise std at step 1.
        growth: linear growth of the std per step.
        seed: base seed; each (agent, issue step) pair gets its own stream.
        shift_step: issue-step index where the noise level changes.
        shift_factor: std multiplier after ``shift_step``.
    """

    def __init__(self, horizon: int = DEFAULT_HORIZON, context: int = DEFAULT_CONTEXT,
                 scale: float = 0.2, growth: float = 0.1, seed: int = 0,
                 shift_step: int | None = None, shift_factor: float = 1.0):
        super().__init__(horizon, context)
        if scale < 0 or growth < 0 or shift_factor < 0:
            raise ValueError("noise parameters must be nonnegative")
        self.scale = float(scale)
        self.growth = float(growth)
        self.seed = int(seed)
        self.shift_step = shift_step
        self.shift_factor = float(shift_factor)

    @property
    def nominal_scale(self) -> float:
        return self.scale

    def step_std(self) -> np.ndarray:
        return self.scale * (1.0 + self.growth * np.arange(self.horizon))

    def noise(self, agent_id: int, issue_step: int) -> np.ndarray:
        """The ``(h, 2)`` noise injected for one agent at one issue step."""
        rng = np.random.default_rng([self.seed, int(agent_id), int(issue_step)])
        std = self.step_std()
        if self.shift_step is not None and issue_step >= self.shift_step:
            std = std * self.shift_factor
        return rng.standard_normal((self.horizon, 2)) * std[:, None]

    def _predict(self, history, truth, agent_id):
        if truth is None or len(truth) < self.horizon:
            raise ValueError("oracle forecaster needs the true future controls")
        issue = int(round(history.t0 / history.dt)) + len(history) - 1
        u_true = truth.as_array()[: self.horizon]
        u_hat = u_true + self.noise(agent_id, issue)
        std = self.step_std()
        h = self.horizon
        covs = np.zeros((h, 1, 2, 2))
        covs[:, 0, 0, 0] = std**2
        covs[:, 0, 1, 1] = std**2
        g = GmmForecast(np.ones((h, 1)), u_hat[:, None, :], covs)
        t_end = history.t0 + history.dt * (len(history) - 1)
        return Forecast(ControlSequence.from_array(u_hat, t_end, history.dt), _features(g), g)


def predict(history: Trajectory, model: Forecaster, truth: ControlSequence | None = None,
            agent_id: int = 0) -> Forecast:
    """Functional wrapper around :meth:`Forecaster.predict`."""
    return model.predict(history, truth, agent_id)


def make_forecaster(name: str, horizon: int = DEFAULT_HORIZON, context: int = DEFAULT_CONTEXT,
                    **params) -> Forecaster:
    """Build a forecaster by name (``constant-gmm`` or ``oracle-noise``)."""
    if name == "constant-gmm":
        return ConstantControlGmm(horizon, context, **params)
    if name == "oracle-noise":
        return OracleNoise(horizon, context, **params)
    raise ValueError(f"unknown forecaster {name!r}")


__all__ = [
    "ConstantControlGmm",
    "Forecast",
    "Forecaster",
    "GmmForecast",
    "OracleNoise",
    "estimate_controls",
    "gmm_uncertainty_features",
    "make_forecaster",
    "predict",
    "states_from_positions",
]
