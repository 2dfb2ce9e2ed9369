"""Closed-loop episode runner and evaluation metrics.

Non-ego agents replay their recorded trajectories. At every step the ``N``
agents nearest the ego are forecast, their control intervals are calibrated
and turned into forward reachable tubes, and during the evaluation segment
the ego plans against those tubes and executes one step of the plan.
Predictions issued ``h`` steps earlier are then scored and the quantile and
conformal models are updated.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .conformal import (
    ConformalState,
    ControlIntervalSequence,
    calibrated_interval,
    corrected_alpha,
    interval_misses,
    rolling_update,
)
from .core import AgentState, Trajectory
from .forecaster import (
    N_FEATURES,
    Forecaster,
    estimate_controls,
    make_forecaster,
    states_from_positions,
)
from .planner import (
    SUBPOINTS,
    ObstacleSchedule,
    Plan,
    braking_plan,
    constant_plan,
    plan_motion,
)
from .quantreg import QuantileBank
from .reachability import Grid4, SpatialSet, generate_tubes

SHARED = "shared"
# Feature columns derived from the forecast covariance.
COVARIANCE_FEATURES = (1, 2, 3)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """Recorded multi-agent scene.

    Attributes:
        dt: sampling interval in seconds.
        agents: agent id to ``(L, 4)`` recorded states ``(x, y, v, theta)``.
        ego_id: id of the controlled agent, or ``None``.
        goal: ego goal ``(x, y)``.
        calib_steps: number of calibration steps.
        eval_steps: number of evaluation steps.
        scene_id: label used in outputs.
        noise_shift: optional ``{"step": int, "factor": float}`` applied to
            the oracle-noise forecaster.
        controls: optional agent id to ``(L - 1, 2)`` controls that generated
            the recorded states.
    """

    dt: float
    agents: dict
    ego_id: int | None
    goal: tuple[float, float] | None
    calib_steps: int
    eval_steps: int
    scene_id: str = "scene"
    noise_shift: dict | None = None
    controls: dict | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.agents:
            raise ValueError("scenario has no agents")
        self.agents = {k: np.asarray(v, dtype=float) for k, v in self.agents.items()}
        lengths = {a.shape[0] for a in self.agents.values()}
        if len(lengths) != 1:
            raise ValueError("all agent trajectories must have the same length")
        for a in self.agents.values():
            if a.ndim != 2 or a.shape[1] != 4 or not np.all(np.isfinite(a)):
                raise ValueError("agent states must be finite (L, 4) arrays")
        if self.ego_id is not None and self.ego_id not in self.agents:
            raise ValueError(f"ego id {self.ego_id!r} is not among the agents")
        if self.calib_steps < 0 or self.eval_steps < 1:
            raise ValueError("need calib_steps >= 0 and eval_steps >= 1")
        if self.goal is not None:
            self.goal = (float(self.goal[0]), float(self.goal[1]))
        if self.controls is not None:
            self.controls = {k: np.asarray(v, dtype=float).reshape(-1, 2)
                             for k, v in self.controls.items()}
            for k, u in self.controls.items():
                if k not in self.agents or len(u) != self.length - 1:
                    raise ValueError(f"controls for agent {k!r} do not match its states")

    @property
    def length(self) -> int:
        return next(iter(self.agents.values())).shape[0]

    @property
    def others(self) -> list:
        return [a for a in self.agents if a != self.ego_id]

    def trajectory(self, agent_id, start: int, stop: int) -> Trajectory:
        """Recorded states ``start..stop-1`` as a :class:`Trajectory`."""
        arr = self.agents[agent_id][start:stop]
        return Trajectory.from_array(arr, start * self.dt, self.dt)

    def to_json(self) -> dict:
        out = {
            "scene_id": self.scene_id,
            "dt": self.dt,
            "agents": [self._agent_json(k) for k in self.agents],
            "ego_id": self.ego_id,
            "goal": None if self.goal is None else list(self.goal),
            "calib_steps": self.calib_steps,
            "eval_steps": self.eval_steps,
        }
        if self.noise_shift is not None:
            out["noise_shift"] = dict(self.noise_shift)
        return out

    def _agent_json(self, k) -> dict:
        d = {"id": k, "states": self.agents[k].tolist()}
        if self.controls is not None and k in self.controls:
            d["controls"] = self.controls[k].tolist()
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        try:
            dt = float(d["dt"])
            agents = {a["id"]: a["states"] if "states" in a
                      else states_from_positions(a["positions"], dt) for a in d["agents"]}
            controls = {a["id"]: a["controls"] for a in d["agents"] if "controls" in a}
            return cls(dt, agents, d.get("ego_id"), d.get("goal"),
                       int(d["calib_steps"]), int(d["eval_steps"]),
                       str(d.get("scene_id", "scene")), d.get("noise_shift"),
                       controls or None)
        except KeyError as exc:
            raise ValueError(f"scenario JSON is missing {exc}") from None

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


# ---------------------------------------------------------------------------
# Episode log
# ---------------------------------------------------------------------------

@dataclass
class AgentStep:
    """One agent's prediction at one issue time."""

    agent_id: object
    state: np.ndarray
    u_hat: np.ndarray
    sigma: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sets: list[SpatialSet] | None = None

    @property
    def intervals(self) -> ControlIntervalSequence:
        return ControlIntervalSequence(self.lower, self.upper)

    @property
    def areas(self) -> list[float] | None:
        return None if self.sets is None else [S.area for S in self.sets]


@dataclass
class Evaluation:
    """Score of the prediction issued at ``issue_t``, made at ``issue_t + h``."""

    issue_t: int
    agent_id: object
    u_obs: np.ndarray
    miss: np.ndarray


@dataclass
class StepRecord:
    """Everything produced at one timestep."""

    t: int
    phase: str
    selected: list
    agents: dict
    theta: dict
    ego_state: np.ndarray | None = None
    plan: Plan | None = None


@dataclass
class EpisodeLog:
    """Append-only record of an episode.

    ``ego_xy`` holds the ego position used at every evaluated timestep
    (``eval_start..eval_end`` inclusive): planned positions when the planner
    runs, recorded ones otherwise. ``ego_recorded`` is the recorded ego path.
    """

    scene_id: str
    dt: float
    horizon: int
    alpha: float
    calibrated: bool
    goal: tuple[float, float] | None
    ego_id: object
    agent_xy: dict
    ego_recorded: np.ndarray | None
    eval_start: int
    eval_end: int
    collision_radius: float = 4.0
    steps: list[StepRecord] = field(default_factory=list)
    evaluations: list[Evaluation] = field(default_factory=list)
    ego_xy: dict = field(default_factory=dict)
    final_ego: np.ndarray | None = None

    def append(self, rec: StepRecord) -> None:
        if self.steps and rec.t <= self.steps[-1].t:
            raise ValueError("steps must be appended in time order")
        self.steps.append(rec)

    def step(self, t: int) -> StepRecord:
        for s in self.steps:
            if s.t == t:
                return s
        raise KeyError(f"timestep {t} is not in the log")

    def theta_history(self, key=SHARED) -> np.ndarray:
        """``(n_steps, h)`` theta snapshots taken at the end of each step."""
        return np.array([s.theta[key] for s in self.steps])

    def summary(self) -> dict:
        """JSON-ready digest: per-step selections, intervals, areas, misses and plans."""
        misses = {}
        for e in self.evaluations:
            misses.setdefault(e.issue_t, {})[str(e.agent_id)] = e.miss.astype(int).tolist()
        steps = []
        for s in self.steps:
            rec = {
                "t": s.t,
                "phase": s.phase,
                "selected": [str(a) for a in s.selected],
                "theta": {str(k): v.tolist() for k, v in s.theta.items()},
                "agents": {
                    str(a.agent_id): {
                        "state": a.state.tolist(),
                        "u_hat": a.u_hat.tolist(),
                        "lower": a.lower.tolist(),
                        "upper": a.upper.tolist(),
                        "areas": a.areas,
                    } for a in s.agents.values()
                },
                "misses": misses.get(s.t, {}),
            }
            if s.ego_state is not None:
                rec["ego_state"] = s.ego_state.tolist()
            if s.plan is not None:
                rec["plan"] = {"kind": s.plan.kind, "feasible": s.plan.feasible,
                               "target_reached": s.plan.target_reached,
                               "steps": s.plan.steps,
                               "path": s.plan.positions[::SUBPOINTS].tolist()}
            steps.append(rec)
        return {
            "scene_id": self.scene_id,
            "dt": self.dt,
            "horizon": self.horizon,
            "alpha": self.alpha,
            "calibrated": self.calibrated,
            "goal": None if self.goal is None else list(self.goal),
            "eval_start": self.eval_start,
            "eval_end": self.eval_end,
            "final_ego": None if self.final_ego is None else self.final_ego.tolist(),
            "steps": steps,
        }


# ---------------------------------------------------------------------------
# Episode runner
# ---------------------------------------------------------------------------

def _stream_id(agent_id) -> int:
    if isinstance(agent_id, (int, np.integer)) and agent_id >= 0:
        return int(agent_id)
    return zlib.crc32(str(agent_id).encode())


def episode_alpha(cfg: RunConfig) -> float:
    return cfg.alpha if cfg.alpha is not None else corrected_alpha(cfg.gamma, cfg.n_agents)


def build_forecaster(cfg: RunConfig, sc: Scenario | None = None) -> Forecaster:
    """Forecaster named by ``cfg``, with the scenario's noise shift if any."""
    if cfg.forecaster == "oracle-noise":
        shift = (sc.noise_shift if sc is not None else None) or {}
        return make_forecaster("oracle-noise", cfg.horizon, cfg.history,
                               scale=cfg.noise_scale, growth=cfg.noise_growth, seed=cfg.seed,
                               shift_step=shift.get("step"),
                               shift_factor=float(shift.get("factor", 1.0)))
    return make_forecaster(
        "constant-gmm", cfg.horizon, cfg.history,
        base_std=(cfg.gmm_std_u1, cfg.gmm_std_u2),
        offsets=((0.0, 0.0), (cfg.gmm_offset_u1, cfg.gmm_offset_u2),
                 (-cfg.gmm_offset_u1, -cfg.gmm_offset_u2)))


def select_agents(positions: dict, ego_xy, n: int) -> list:
    """The ``n`` agents nearest ``ego_xy``; ties keep insertion order.

    Without an ego position the first ``n`` agents are taken.
    """
    ids = list(positions)
    if ego_xy is None:
        return ids[:n]
    d = [math.hypot(positions[a][0] - ego_xy[0], positions[a][1] - ego_xy[1]) for a in ids]
    order = sorted(range(len(ids)), key=lambda i: d[i])
    return [ids[i] for i in order[:n]]


def required_length(sc: Scenario, cfg: RunConfig) -> int:
    """Minimum scenario length: history, both segments and one horizon of truth."""
    return cfg.history - 1 + sc.calib_steps + sc.eval_steps + cfg.horizon


class _Calibrator:
    """Quantile and conformal state for one key (shared or one agent)."""

    def __init__(self, cfg: RunConfig, alpha: float, xi: float):
        self.bank = QuantileBank(cfg.horizon, N_FEATURES, alpha, cfg.zeta, cfg.beta_init, cfg.seed)
        self.cs = ConformalState.initial(cfg.horizon, xi, alpha, cfg.stretch, cfg.stretch_c)


def run_episode(sc: Scenario, cfg: RunConfig) -> EpisodeLog:
    """Run one scenario through predict, calibrate, tube, plan and update.

    Timeline (indices into the recorded arrays): the first prediction is
    issued at ``t0 = history - 1``; calibration covers
    ``t0 .. t0 + calib_steps - 1`` and evaluation the next ``eval_steps``
    steps. Predictions issued at ``t`` are scored at ``t + h``; the ones still
    pending when the loop ends are scored afterwards so every issued
    prediction has an evaluation.

    Raises:
        ValueError: if the scenario is shorter than :func:`required_length`
            or its ``dt`` differs from the config.
    """
    if not math.isclose(sc.dt, cfg.dt, rel_tol=1e-12):
        raise ValueError(f"scenario dt {sc.dt} differs from config dt {cfg.dt}")
    L = sc.length
    need = required_length(sc, cfg)
    if L < need:
        raise ValueError(f"scenario has {L} steps, needs at least {need}")

    h, H, dt = cfg.horizon, cfg.history, sc.dt
    alpha = episode_alpha(cfg)
    forecaster = build_forecaster(cfg, sc)
    xi = cfg.xi if cfg.xi is not None else 0.05 * forecaster.nominal_scale
    t_first = H - 1
    eval_start = t_first + sc.calib_steps
    eval_end = eval_start + sc.eval_steps
    plan_on = cfg.plan and sc.ego_id is not None and sc.goal is not None

    others = sc.others
    log = EpisodeLog(
        scene_id=sc.scene_id, dt=dt, horizon=h, alpha=alpha, calibrated=cfg.calibrated,
        goal=sc.goal, ego_id=sc.ego_id,
        agent_xy={a: sc.agents[a][:, :2].copy() for a in others},
        ego_recorded=None if sc.ego_id is None else sc.agents[sc.ego_id][:, :2].copy(),
        eval_start=eval_start, eval_end=eval_end,
        collision_radius=cfg.r_ego + cfg.r_agent)

    calibrators: dict = {}

    def calibrator(aid) -> _Calibrator:
        key = aid if cfg.per_agent_state else SHARED
        if key not in calibrators:
            calibrators[key] = _Calibrator(cfg, alpha, xi)
        return calibrators[key]

    if not cfg.per_agent_state:
        calibrator(None)

    pending: dict[int, dict] = {}
    ego = None if sc.ego_id is None else sc.agents[sc.ego_id][t_first].copy()

    def evaluate(issue: int) -> None:
        for aid, rec in pending.pop(issue, {}).items():
            u_obs = estimate_controls(sc.trajectory(aid, issue, issue + h + 1)).as_array()
            miss = interval_misses(u_obs, rec.intervals)
            cal = calibrator(aid)
            cal.bank.update(rec.sigma, u_obs - rec.u_hat)
            if cfg.calibrated:
                cal.cs = rolling_update(cal.cs, u_obs, rec.intervals)
            log.evaluations.append(Evaluation(issue, aid, u_obs, miss))

    for t in range(t_first, eval_end):
        phase = "calibration" if t < eval_start else "evaluation"
        planning = plan_on and phase == "evaluation"
        if ego is not None and (not planning or t == eval_start):
            ego = sc.agents[sc.ego_id][t].copy()
        positions = {a: sc.agents[a][t, :2] for a in others}
        selected = select_agents(positions, None if ego is None else ego[:2], cfg.n_agents)
        want_sets = cfg.compute_sets and t >= eval_start - (h if cfg.calibration_sets else 0)

        records = {}
        for aid in selected:
            hist = sc.trajectory(aid, t - H + 1, t + 1)
            truth = estimate_controls(sc.trajectory(aid, t, t + h + 1))
            fc = forecaster.predict(hist, truth, _stream_id(aid))
            sigma = np.array(fc.sigma, dtype=float)
            if cfg.no_covariance_features:
                sigma[:, list(COVARIANCE_FEATURES)] = 0.0
            u_hat = fc.u_hat.as_array()
            cal = calibrator(aid)
            e_lo, e_hi = cal.bank.predict(sigma)
            iv = calibrated_interval(u_hat, e_lo, e_hi, cal.cs)
            state = sc.agents[aid][t].copy()
            sets = None
            if want_sets:
                grid = Grid4.default(center=state[:2], half_width=cfg.grid_half_width,
                                     shape=cfg.grid_shape,
                                     v_range=(cfg.grid_v_min, cfg.grid_v_max))
                sets = generate_tubes(state, iv, grid, dt, interior_depth=cfg.interior_depth)
            records[aid] = AgentStep(aid, state, u_hat, sigma, iv.lower, iv.upper, sets)
        pending[t] = records

        plan = None
        ego_state = None if ego is None else ego.copy()
        if planning:
            plan = _plan_step(ego, records, sc, cfg)
            log.ego_xy[t] = ego[:2].copy()
            ego = plan.trajectory.as_array()[SUBPOINTS].copy()

        if t - h >= t_first:
            evaluate(t - h)
        log.append(StepRecord(t, phase, selected, records,
                              {k: c.cs.theta.copy() for k, c in calibrators.items()},
                              ego_state, plan))

    for issue in sorted(pending):
        evaluate(issue)

    if ego is not None:
        if not plan_on:
            ego = sc.agents[sc.ego_id][eval_end].copy()
            for t in range(eval_start, eval_end + 1):
                log.ego_xy[t] = sc.agents[sc.ego_id][t, :2].copy()
        log.ego_xy[eval_end] = ego[:2].copy()
        log.final_ego = ego.copy()
    return log


def _plan_step(ego: np.ndarray, records: dict, sc: Scenario, cfg: RunConfig) -> Plan:
    """Plan from ``ego`` and pick a plan whose first step is safe.

    Preference: the planner's plan if it passes the timing rule, then a full
    brake, then coasting, each checked over the whole horizon. If none
    passes, the brake is executed and flagged infeasible.
    """
    dt = sc.dt
    tubes = [r.sets for r in records.values() if r.sets is not None]
    obs = ObstacleSchedule.from_tubes(tubes, cfg.r_ego + cfg.r_agent, dt=dt) if tubes \
        else ObstacleSchedule.empty(cfg.horizon, dt)
    state = AgentState.from_array(ego)
    grid = Grid4.default(center=ego[:2], half_width=cfg.grid_half_width, shape=cfg.grid_shape,
                         v_range=(cfg.grid_v_min, cfg.grid_v_max))
    plan = plan_motion(state, obs, sc.goal, cfg.goal_tol, cfg.ego_box, grid)
    if plan.feasible and plan.controls is not None and len(plan.controls) >= SUBPOINTS:
        return plan
    brake = braking_plan(state, cfg.ego_box, cfg.horizon, dt, obs)
    if brake.feasible:
        if plan.feasible:
            brake.kind = "arrived"
        return brake
    coast = constant_plan(state, (0.0, 0.0), cfg.horizon, dt, obs, "coast")
    if coast.feasible:
        return coast
    brake.feasible = False
    return brake


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _evaluated_issues(log: EpisodeLog, k: int):
    if not 1 <= k <= log.horizon:
        raise ValueError(f"step offset must lie in 1..{log.horizon}")
    by_t = {s.t: s for s in log.steps}
    for t in range(log.eval_start, log.eval_end):
        s = by_t.get(t - k)
        if s is not None and s.agents:
            yield t, s


def coverage_rate(log: EpisodeLog, k: int) -> float:
    """Fraction of evaluated timesteps where every selected agent lies in its step-``k`` set.

    At evaluated timestep ``t`` the sets are those issued at ``t - k``.

    Raises:
        ValueError: if no evaluated timestep has sets for offset ``k``.
    """
    hits = []
    for t, s in _evaluated_issues(log, k):
        if any(a.sets is None for a in s.agents.values()):
            continue
        hits.append(all(bool(a.sets[k - 1].contains(*log.agent_xy[aid][t]))
                        for aid, a in s.agents.items()))
    if not hits:
        raise ValueError("log has no evaluated spatial sets")
    return float(np.mean(hits))


def interval_coverage_rate(log: EpisodeLog, k: int) -> float:
    """Like :func:`coverage_rate` but scoring the control intervals instead of the sets.

    Raises:
        ValueError: if no evaluated timestep has scored intervals.
    """
    miss = {(e.issue_t, e.agent_id): e.miss for e in log.evaluations}
    hits = []
    for t, s in _evaluated_issues(log, k):
        keys = [(s.t, aid) for aid in s.agents]
        if not all(key in miss for key in keys):
            continue
        hits.append(all(miss[key][k - 1] == 0 for key in keys))
    if not hits:
        raise ValueError("log has no evaluated intervals")
    return float(np.mean(hits))


def mean_area(log: EpisodeLog, k: int) -> float:
    """Mean step-``k`` set area over the (timestep, agent) pairs scored by :func:`coverage_rate`."""
    areas = [a.sets[k - 1].area for _, s in _evaluated_issues(log, k)
             for a in s.agents.values() if a.sets is not None]
    if not areas:
        raise ValueError("log has no evaluated spatial sets")
    return float(np.mean(areas))


def _min_distance(path: dict, agent_xy: dict) -> float:
    best = math.inf
    for t, p in path.items():
        for xy in agent_xy.values():
            best = min(best, math.hypot(p[0] - xy[t][0], p[1] - xy[t][1]))
    return best


def conservatism(log: EpisodeLog) -> float | None:
    """Planned minimum ego-agent distance over the recorded ego's minimum distance.

    Both minima run over the evaluated timesteps and all non-ego agents.
    Returns ``None`` when the recorded minimum is zero or undefined.

    Raises:
        ValueError: if the log has no recorded ego path.
    """
    if log.ego_recorded is None:
        raise ValueError("conservatism needs the recorded ego trajectory")
    planned = _min_distance(log.ego_xy, log.agent_xy)
    truth = _min_distance({t: log.ego_recorded[t] for t in log.ego_xy}, log.agent_xy)
    if truth == 0.0 or not math.isfinite(truth):
        return None
    return planned / truth


def progress(log: EpisodeLog) -> float:
    """``1 - |goal - final| / |goal - start|`` over the evaluated ego path.

    Raises:
        ValueError: if the start equals the goal or the log has no ego path.
    """
    if not log.ego_xy or log.goal is None:
        raise ValueError("progress needs an ego path and a goal")
    ts = sorted(log.ego_xy)
    start, final = log.ego_xy[ts[0]], log.ego_xy[ts[-1]]
    gx, gy = log.goal
    d0 = math.hypot(gx - start[0], gy - start[1])
    if d0 == 0.0:
        raise ValueError("start equals goal")
    return 1.0 - math.hypot(gx - final[0], gy - final[1]) / d0


def collision_check(log: EpisodeLog, radius: float | None = None) -> bool:
    """Whether the ego comes within ``radius`` (inclusive) of any non-ego agent."""
    r = log.collision_radius if radius is None else radius
    return _min_distance(log.ego_xy, log.agent_xy) <= r
