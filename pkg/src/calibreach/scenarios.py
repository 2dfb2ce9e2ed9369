"""Seeded synthetic scenario families.

Every agent trajectory is the rollout of a recorded control sequence, so
scenes can be regenerated exactly from their controls.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .core import DEFAULT_DT, AgentState, Control, dubins_step
from .harness import Scenario

FAMILIES = ("intersection", "corridor", "random-constant-turn", "shifting-noise")
_FAMILY_CODE = {k: i for i, k in enumerate(FAMILIES)}
# First prediction index under the default history of 8 states.
_FIRST_ISSUE = 7


def _rng(kind: str, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _FAMILY_CODE[kind], int(index)])


def roll_states(s0, controls, dt: float) -> np.ndarray:
    """States ``(len(controls) + 1, 4)`` obtained by stepping the dynamics."""
    s = AgentState.from_array(s0)
    out = [s.as_array()]
    for u in np.asarray(controls, dtype=float):
        s = dubins_step(s, Control(float(u[0]), float(u[1])), dt)
        out.append(s.as_array())
    return np.array(out)


def _ar_controls(rng, n: int, std=(0.3, 0.02), rho: float = 0.7) -> np.ndarray:
    u = np.zeros((n, 2))
    prev = np.zeros(2)
    scale = np.asarray(std) * math.sqrt(1.0 - rho**2)
    for k in range(n):
        prev = rho * prev + scale * rng.standard_normal(2)
        u[k] = prev
    return u


def _keep_speed(s0, u: np.ndarray, dt: float, lo: float, hi: float) -> np.ndarray:
    # Flip acceleration whenever it would push the speed out of [lo, hi].
    u = u.copy()
    v = s0[2]
    for k in range(len(u)):
        if not lo <= v + u[k, 0] * dt <= hi:
            u[k, 0] = -u[k, 0]
        if not lo <= v + u[k, 0] * dt <= hi:
            u[k, 0] = 0.0
        v += u[k, 0] * dt
    return u


def _backdate(state_at: np.ndarray, t_at: int, dt: float) -> np.ndarray:
    # Start state that reaches state_at at index t_at under constant velocity.
    s = state_at.copy()
    s[0] -= s[2] * math.cos(s[3]) * dt * t_at
    s[1] -= s[2] * math.sin(s[3]) * dt * t_at
    return s


def _lengths(calib_steps: int, eval_steps: int, horizon: int = 6) -> tuple[int, int]:
    t_eval = _FIRST_ISSUE + calib_steps
    return t_eval, t_eval + eval_steps + horizon


def intersection(seed: int, index: int = 0, calib_steps: int = 16, eval_steps: int = 12,
                 dt: float = DEFAULT_DT) -> Scenario:
    """Ego driving east toward a crossing agent heading north.

    The crossing agent reaches the ego's lane 1.5 to 3 s into the
    evaluation segment; the recorded ego keeps a constant speed and passes
    behind it.
    """
    rng = _rng("intersection", seed, index)
    t_eval, L = _lengths(calib_steps, eval_steps)
    v_e = rng.uniform(4.0, 6.0)
    ego_at = np.array([-20.0 + rng.uniform(-2, 2), 0.0, v_e, 0.0])
    ego0 = _backdate(ego_at, t_eval, dt)
    ego = roll_states(ego0, np.zeros((L - 1, 2)), dt)

    v_a = rng.uniform(4.0, 6.0)
    x_c = rng.uniform(-3.0, 3.0)
    y_at = -v_a * rng.uniform(1.5, 3.0)
    ag0 = _backdate(np.array([x_c, y_at, v_a, math.pi / 2]), t_eval, dt)
    u_a = _keep_speed(ag0, _ar_controls(rng, L - 1, std=(0.2, 0.01)), dt, 2.0, 8.0)
    agent = roll_states(ag0, u_a, dt)
    goal = (float(rng.uniform(10.0, 15.0)), 0.0)
    return Scenario(dt, {0: ego, 1: agent}, 0, goal, calib_steps, eval_steps,
                    f"intersection-{seed}-{index:03d}",
                    controls={0: np.zeros((L - 1, 2)), 1: u_a})


def corridor(seed: int, index: int = 0, calib_steps: int = 16, eval_steps: int = 12,
             dt: float = DEFAULT_DT) -> Scenario:
    """Two-lane road: a slow leader ahead of the ego and oncoming traffic 6 m to the left.

    The recorded ego follows the leader with a proportional gap controller.
    """
    rng = _rng("corridor", seed, index)
    t_eval, L = _lengths(calib_steps, eval_steps)
    v_l = rng.uniform(2.0, 4.0)
    lead_at = np.array([rng.uniform(-8.0, -2.0), 0.0, v_l, 0.0])
    lead0 = _backdate(lead_at, t_eval, dt)
    u_l = _keep_speed(lead0, _ar_controls(rng, L - 1, std=(0.2, 0.0)), dt, 1.0, 6.0)
    lead = roll_states(lead0, u_l, dt)

    v_o = rng.uniform(4.0, 6.0)
    onc_at = np.array([rng.uniform(10.0, 30.0), 6.0, v_o, math.pi])
    onc0 = _backdate(onc_at, t_eval, dt)
    u_o = _keep_speed(onc0, _ar_controls(rng, L - 1, std=(0.2, 0.0)), dt, 2.0, 8.0)
    onc = roll_states(onc0, u_o, dt)

    # recorded ego: starts 15-20 m behind the leader and keeps a 10 m gap
    ego = np.zeros((L, 4))
    ego[0] = [lead[0, 0] - rng.uniform(15.0, 20.0), 0.0, v_l + rng.uniform(0.0, 1.0), 0.0]
    u_e = np.zeros((L - 1, 2))
    s = AgentState.from_array(ego[0])
    for k in range(L - 1):
        gap = lead[k, 0] - s.x
        u1 = float(np.clip(0.3 * (gap - 10.0) + 0.8 * (lead[k, 2] - s.v), -3.0, 1.5))
        u1 = max(u1, -s.v / dt)
        u_e[k, 0] = u1
        s = dubins_step(s, Control(u1, 0.0), dt)
        ego[k + 1] = s.as_array()
    goal = (float(ego[t_eval, 0] + 30.0), 0.0)
    return Scenario(dt, {0: ego, 1: lead, 2: onc}, 0, goal, calib_steps, eval_steps,
                    f"corridor-{seed}-{index:03d}", controls={0: u_e, 1: u_l, 2: u_o})


def random_constant_turn(seed: int, index: int = 0, n_agents: int = 5, calib_steps: int = 16,
                         eval_steps: int = 8, dt: float = DEFAULT_DT) -> Scenario:
    """Agents holding random constant accelerations and turn rates.

    Agent 0 is the ego; its goal is its own recorded position at the end of
    the evaluation segment.
    """
    rng = _rng("random-constant-turn", seed, index)
    t_eval, L = _lengths(calib_steps, eval_steps)
    agents, controls = {}, {}
    for i in range(n_agents):
        s0 = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(3.0, 8.0),
                       rng.uniform(-math.pi, math.pi)])
        u = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.15, 0.15)])
        controls[i] = np.tile(u, (L - 1, 1))
        agents[i] = roll_states(s0, controls[i], dt)
    goal = tuple(float(c) for c in agents[0][t_eval + eval_steps, :2])
    return Scenario(dt, agents, 0, goal, calib_steps, eval_steps,
                    f"random-constant-turn-{seed}-{index:03d}", controls=controls)


def shifting_noise(seed: int, index: int = 0, n_agents: int = 3, calib_steps: int = 100,
                   eval_steps: int = 400, shift_factor: float = 2.0,
                   dt: float = DEFAULT_DT) -> Scenario:
    """Wandering agents whose oracle forecast noise grows mid-evaluation.

    The noise standard deviation is multiplied by ``shift_factor`` for
    predictions issued from the middle of the evaluation segment on. There
    is no ego.
    """
    rng = _rng("shifting-noise", seed, index)
    t_eval, L = _lengths(calib_steps, eval_steps)
    agents, controls = {}, {}
    for i in range(n_agents):
        s0 = np.array([rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(3.0, 7.0),
                       rng.uniform(-math.pi, math.pi)])
        u = _keep_speed(s0, _ar_controls(rng, L - 1, std=(0.5, 0.1)), dt, 1.0, 10.0)
        controls[i] = u
        agents[i] = roll_states(s0, u, dt)
    shift = {"step": t_eval + eval_steps // 2, "factor": float(shift_factor)}
    return Scenario(dt, agents, None, None, calib_steps, eval_steps,
                    f"shifting-noise-{seed}-{index:03d}", noise_shift=shift, controls=controls)


_BUILDERS = {
    "intersection": intersection,
    "corridor": corridor,
    "random-constant-turn": random_constant_turn,
    "shifting-noise": shifting_noise,
}


def make_scenario(kind: str, seed: int, index: int = 0, **kw) -> Scenario:
    """One scene of family ``kind``.

    Raises:
        ValueError: for an unknown family.
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown scenario family {kind!r}; choose from {FAMILIES}")
    return _BUILDERS[kind](seed, index, **kw)


def generate_scenarios(kind: str, count: int, seed: int, out_dir=None, **kw) -> list:
    """Generate ``count`` scenes; write ``<scene_id>.json`` files when ``out_dir`` is given.

    Returns:
        The scenes, or the written paths when ``out_dir`` is set.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    scenes = [make_scenario(kind, seed, i, **kw) for i in range(count)]
    if out_dir is None:
        return scenes
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for sc in scenes:
        p = out / f"{sc.scene_id}.json"
        sc.save(p)
        paths.append(p)
    return paths
