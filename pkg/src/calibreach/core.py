"""Shared domain types and extended Dubins car dynamics.

The state is ``(x, y, v, theta)`` and the control is ``(u1, u2)`` with

    x' = v cos(theta),  y' = v sin(theta),  v' = u1,  theta' = u2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DT = 0.5
DEFAULT_HORIZON = 6

# RK4 internal step cap (seconds). A single RK4 step over 0.5 s at turn
# rates near pi rad/s is accurate only to ~1e-2 m, so each call is split
# into equal RK4 sub-steps no longer than this.
MAX_RK4_SUBSTEP = 0.025


def wrap_angle(a: float) -> float:
    """Wrap an angle into ``(-pi, pi]``.

    Raises:
        ValueError: if ``a`` is not finite.
    """
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a}")
    if -math.pi < a <= math.pi:
        return a
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle` (no finiteness check)."""
    a = np.asarray(a, dtype=float)
    r = np.fmod(a + np.pi, 2.0 * np.pi)
    r = np.where(r <= 0.0, r + 2.0 * np.pi, r)
    return np.where((a > -np.pi) & (a <= np.pi), a, r - np.pi)


@dataclass(frozen=True)
class AgentState:
    """Extended Dubins state. ``theta`` is wrapped on construction."""

    x: float
    y: float
    v: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "v", "theta"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"state component {name} must be finite, got {val}")
            object.__setattr__(self, name, val)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "AgentState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Control:
    """Acceleration ``u1`` (m/s^2) and turn rate ``u2`` (rad/s)."""

    u1: float
    u2: float

    def __post_init__(self):
        for name in ("u1", "u2"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"control component {name} must be finite, got {val}")
            object.__setattr__(self, name, val)

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2])


@dataclass
class Trajectory:
    """Uniformly spaced sequence of states starting at ``t0``."""

    t0: float
    dt: float
    states: list[AgentState] = field(default_factory=list)

    def __post_init__(self):
        if not self.states:
            raise ValueError("trajectory must be nonempty")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def __len__(self) -> int:
        return len(self.states)

    def as_array(self) -> np.ndarray:
        """Return an ``(n, 4)`` array of states."""
        return np.array([s.as_array() for s in self.states])

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))

    @classmethod
    def from_array(cls, arr, t0: float = 0.0, dt: float = DEFAULT_DT) -> "Trajectory":
        return cls(t0, dt, [AgentState.from_array(r) for r in np.asarray(arr, dtype=float)])


@dataclass
class ControlSequence:
    """Piecewise-constant controls, ``controls[k]`` held on ``[t0+k dt, t0+(k+1) dt)``."""

    t0: float
    dt: float
    controls: list[Control] = field(default_factory=list)

    def __post_init__(self):
        if not self.controls:
            raise ValueError("control sequence must be nonempty")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def __len__(self) -> int:
        return len(self.controls)

    def as_array(self) -> np.ndarray:
        """Return an ``(n, 2)`` array of controls."""
        return np.array([c.as_array() for c in self.controls])

    @classmethod
    def from_array(cls, arr, t0: float = 0.0, dt: float = DEFAULT_DT) -> "ControlSequence":
        arr = np.asarray(arr, dtype=float).reshape(-1, 2)
        return cls(t0, dt, [Control(float(a), float(b)) for a, b in arr])


def dubins_rhs(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vector field for states ``s[..., 4]`` under controls broadcastable to ``u[..., 2]``."""
    u = np.asarray(u, dtype=float)
    out = np.empty(np.broadcast_shapes(s.shape, u.shape[:-1] + (4,)))
    out[..., 0] = s[..., 2] * np.cos(s[..., 3])
    out[..., 1] = s[..., 2] * np.sin(s[..., 3])
    out[..., 2] = u[..., 0]
    out[..., 3] = u[..., 1]
    return out


def rk4_states(s: np.ndarray, u: np.ndarray, dt: float, substeps: int | None = None) -> np.ndarray:
    """Integrate a batch of states with constant controls over ``dt``.

    ``dt`` may be negative (backward integration). Angles are not wrapped.

    Args:
        s: array ``(..., 4)``.
        u: array broadcastable to ``(..., 2)``.
        dt: integration time.
        substeps: number of equal RK4 steps; defaults to
            ``ceil(|dt| / MAX_RK4_SUBSTEP)``.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    if substeps is None:
        substeps = max(1, int(math.ceil(abs(dt) / MAX_RK4_SUBSTEP - 1e-9)))
    h = dt / substeps
    for _ in range(substeps):
        k1 = dubins_rhs(s, u)
        k2 = dubins_rhs(s + 0.5 * h * k1, u)
        k3 = dubins_rhs(s + 0.5 * h * k2, u)
        k4 = dubins_rhs(s + h * k3, u)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s


def dubins_step(s: AgentState, u: Control, dt: float) -> AgentState:
    """Advance one step of the extended Dubins car with RK4.

    With ``u = (0, 0)`` speed and heading are returned unchanged.

    Raises:
        ValueError: if ``dt <= 0`` or inputs are non-finite.
    """
    if not (math.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    if not isinstance(s, AgentState):
        s = AgentState.from_array(s)
    if not isinstance(u, Control):
        u = Control(*u)
    out = rk4_states(s.as_array(), u.as_array(), dt)
    if not np.all(np.isfinite(out)):
        raise ValueError("integration produced non-finite state")
    return AgentState.from_array(out)


def rollout(s0: AgentState, u_seq: ControlSequence) -> Trajectory:
    """Simulate ``u_seq`` from ``s0``; the result has ``len(u_seq) + 1`` states."""
    if len(u_seq.controls) == 0:
        raise ValueError("control sequence must be nonempty")
    states = [s0]
    for u in u_seq.controls:
        states.append(dubins_step(states[-1], u, u_seq.dt))
    return Trajectory(u_seq.t0, u_seq.dt, states)


def positions(states: Iterable[AgentState]) -> np.ndarray:
    """Stack the ``(x, y)`` of a state iterable into an ``(n, 2)`` array."""
    return np.array([[s.x, s.y] for s in states])
