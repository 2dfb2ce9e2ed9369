"""Online linear quantile regression with pinball-loss subgradient steps."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DEFAULT_ZETA = 0.01


def pinball_loss(y: float, y_hat: float, epsilon: float) -> float:
    """Quantile (pinball) loss. The tie ``y == y_hat`` takes the ``y >= y_hat`` branch."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if y >= y_hat:
        return (y - y_hat) * epsilon
    return (y_hat - y) * (1.0 - epsilon)


@dataclass(frozen=True)
class QuantileModel:
    """Linear quantile model ``e_hat = beta @ sigma``."""

    beta: np.ndarray
    epsilon: float
    zeta: float = DEFAULT_ZETA

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).ravel()
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls, d: int, epsilon: float, zeta: float = DEFAULT_ZETA) -> "QuantileModel":
        return cls(np.zeros(d), epsilon, zeta)


def _check_dims(beta: np.ndarray, sigma: np.ndarray):
    if sigma.shape[-1] != beta.shape[-1]:
        raise ValueError(f"feature dimension {sigma.shape[-1]} != model dimension {beta.shape[-1]}")


def qr_predict(m: QuantileModel, sigma) -> float:
    """Predicted error quantile ``beta @ sigma``."""
    sigma = np.asarray(sigma, dtype=float).ravel()
    _check_dims(m.beta, sigma)
    return float(m.beta @ sigma)


def qr_update(m: QuantileModel, sigma, e: float) -> QuantileModel:
    """One subgradient step of the pinball loss at ``(y=e, y_hat=beta @ sigma)``."""
    sigma = np.asarray(sigma, dtype=float).ravel()
    _check_dims(m.beta, sigma)
    if e >= m.beta @ sigma:
        beta = m.beta + m.zeta * m.epsilon * sigma
    else:
        beta = m.beta - m.zeta * (1.0 - m.epsilon) * sigma
    return replace(m, beta=beta)


class QuantileBank:
    """Lower and upper quantile models per control dimension and prediction step.

    Weights are stored in one array of shape ``(2, h, 2, d)`` indexed by
    (control dimension, step, side) with side 0 the lower model at level
    ``alpha / 2`` and side 1 the upper model at ``1 - alpha / 2``. The update
    is the same rule as :func:`qr_update`, applied elementwise.

    Args:
        h: prediction horizon.
        d: feature dimension.
        alpha: miscoverage level splitting into the two quantile levels.
        zeta: learning rate.
        init: ``"zeros"`` or ``"random"`` (small seeded Gaussian weights).
        seed: seed for random initialization.
    """

    def __init__(self, h: int, d: int, alpha: float, zeta: float = DEFAULT_ZETA,
                 init: str = "zeros", seed: int = 0):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        if zeta <= 0:
            raise ValueError("zeta must be positive")
        self.h, self.d, self.alpha, self.zeta = h, d, alpha, zeta
        self.epsilon = np.array([alpha / 2.0, 1.0 - alpha / 2.0])
        if init == "zeros":
            self.beta = np.zeros((2, h, 2, d))
        elif init == "random":
            self.beta = 0.01 * np.random.default_rng(seed).standard_normal((2, h, 2, d))
        else:
            raise ValueError(f"unknown init {init!r}")

    def model(self, dim: int, step: int, side: int) -> QuantileModel:
        """Snapshot one model as a :class:`QuantileModel`."""
        return QuantileModel(self.beta[dim, step, side].copy(), float(self.epsilon[side]), self.zeta)

    def predict(self, sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(e_lo, e_hi)``, each ``(h, 2)``, for features ``sigma (h, d)``."""
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (self.h, self.d):
            raise ValueError(f"sigma must have shape {(self.h, self.d)}, got {sigma.shape}")
        q = np.einsum("jksd,kd->kjs", self.beta, sigma)
        return q[:, :, 0], q[:, :, 1]

    def update(self, sigma: np.ndarray, errors: np.ndarray) -> None:
        """In-place update with observed errors ``u - u_hat`` of shape ``(h, 2)``."""
        sigma = np.asarray(sigma, dtype=float)
        errors = np.asarray(errors, dtype=float)
        if errors.shape != (self.h, 2):
            raise ValueError(f"errors must have shape {(self.h, 2)}")
        pred = np.einsum("jksd,kd->jks", self.beta, sigma)
        e = errors.T[:, :, None]
        eps = self.epsilon[None, None, :]
        coef = np.where(e >= pred, self.zeta * eps, -self.zeta * (1.0 - eps))
        self.beta = self.beta + coef[..., None] * sigma[None, :, None, :]

    def copy(self) -> "QuantileBank":
        out = object.__new__(QuantileBank)
        out.__dict__.update(self.__dict__)
        out.beta = self.beta.copy()
        return out
