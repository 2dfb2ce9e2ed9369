"""Ego reach-avoid tubes, Hamiltonian-optimal plan extraction and fallback targets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_DT,
    AgentState,
    ControlSequence,
    Trajectory,
    rk4_states,
    rollout,
    wrap_angles,
)
from .reachability import (
    CFL_FACTOR,
    DEFAULT_INTERIOR_DEPTH,
    DEFAULT_R0,
    Grid4,
    MovingFrame,
    SpatialSet,
    ValueGrid,
    _box_tuple,
    initial_value,
    offset_grid,
    project_xy,
)

DEFAULT_EGO_BOX = (-4.0, 2.0, -0.6, 0.6)
DEFAULT_RADIUS = 2.0
# Plan controls per planner step; the safety rule is checked at these subpoints.
SUBPOINTS = 10


class InfeasibleStart(ValueError):
    """The ego starts inside an obstacle."""


class TrappedError(ValueError):
    """The ego's final reach-avoid set is empty."""


@dataclass
class ObstacleSchedule:
    """Inflated obstacle sets per planner step.

    ``steps[k - 1]`` holds the sets active during ``((k - 1) dt, k dt]``.
    """

    steps: list[list[SpatialSet]]
    dt: float = DEFAULT_DT

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @classmethod
    def empty(cls, horizon: int, dt: float = DEFAULT_DT) -> "ObstacleSchedule":
        return cls([[] for _ in range(horizon)], dt)

    @classmethod
    def from_tubes(cls, tubes, radius: float, margin: float | None = None,
                   dt: float = DEFAULT_DT) -> "ObstacleSchedule":
        """Inflate each agent's tube by ``radius + margin``.

        The default margin is one cell diagonal. Membership is decided by the
        nearest cell on both sides, which can hide up to one diagonal of true
        distance, so a mask-clear ego point is then more than ``radius`` from
        every point of the uninflated sets.

        Args:
            tubes: iterable of per-agent lists of :class:`SpatialSet`, all of
                the same length.
            radius: ego plus agent footprint radius.
            margin: extra dilation in metres.
        """
        tubes = [list(t) for t in tubes]
        h = max((len(t) for t in tubes), default=0)
        steps: list[list[SpatialSet]] = [[] for _ in range(h)]
        for t in tubes:
            if len(t) != h:
                raise ValueError("all tubes must share one horizon")
            for k, S in enumerate(t):
                m = math.hypot(S.dx, S.dy) if margin is None else margin
                steps[k].append(S.dilate(radius + m))
        return cls(steps, dt)

    def blocked(self, k: int, x, y):
        """Whether points lie in any obstacle active at step ``k`` (1-based)."""
        if k < 1 or k > self.horizon:
            return np.zeros(np.shape(x), dtype=bool) if np.ndim(x) else False
        out = np.zeros(np.shape(x), dtype=bool)
        for S in self.steps[k - 1]:
            out |= S.contains(x, y)
        return bool(out) if np.ndim(out) == 0 else out

    def blocked_grid(self, k: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.asarray(self.blocked(k, X, Y), dtype=bool)


@dataclass
class Plan:
    """Ego plan. ``trajectory`` is the rollout of ``controls`` from the start state."""

    controls: ControlSequence | None
    trajectory: Trajectory
    feasible: bool
    target_reached: bool
    steps: int = 0
    target: tuple[float, float] | None = None
    kind: str = "extracted"
    backward: np.ndarray | None = field(default=None, repr=False)

    @property
    def positions(self) -> np.ndarray:
        return self.trajectory.as_array()[:, :2]


class ReachAvoidTube(list):
    """Value snapshots at ``k dt`` for ``k = 0..h`` plus the inputs that produced them."""

    def __init__(self, snapshots, box, dt, obstacles):
        super().__init__(snapshots)
        self.box = box
        self.dt = dt
        self.obstacles = obstacles


def reach_avoid_tube(ego0, obs: ObstacleSchedule, ego_box=DEFAULT_EGO_BOX,
                     grid: Grid4 | None = None, dt: float | None = None,
                     r0: float = DEFAULT_R0, cfl: float = CFL_FACTOR,
                     interior_depth: float = DEFAULT_INTERIOR_DEPTH) -> ReachAvoidTube:
    """Forward reachable sets of the ego with obstacle states removed.

    After every substep, value at nodes whose ``(x, y)`` falls in an active
    obstacle is raised to at least +1. The propagation runs in a frame moving
    with the box-midpoint control (see :class:`MovingFrame`), so snapshots
    carry their own shifted grids.

    Raises:
        InfeasibleStart: if the start position is inside a step-1 obstacle.
    """
    s0 = ego0.as_array() if isinstance(ego0, AgentState) else np.asarray(ego0, dtype=float)
    s0 = s0.copy()
    s0[3] = float(wrap_angles(s0[3]))
    dt = obs.dt if dt is None else dt
    if grid is None:
        grid = Grid4.default(center=s0[:2])
    if not grid.contains(s0):
        raise ValueError("ego start lies outside the grid bounds")
    box = _box_tuple(ego_box)
    if obs.horizon and obs.blocked(1, s0[0], s0[1]):
        raise InfeasibleStart("ego starts inside an obstacle")
    V0 = initial_value(offset_grid(grid), np.zeros(4), r0, interior_depth).values
    frame = MovingFrame(grid, s0, V0, cfl)
    snaps = [frame.value_grid()]
    for k in range(1, obs.horizon + 1):
        frame.advance(box, dt, mask_fn=lambda X, Y, k=k: obs.blocked_grid(k, X, Y))
        snaps.append(frame.value_grid())
    return ReachAvoidTube(snaps, box, dt, obs)


def _node_positions(V: ValueGrid) -> tuple[np.ndarray, np.ndarray]:
    return V.grid.x.nodes, V.grid.y.nodes


def _goal_nodes(V: ValueGrid, goal, tol: float) -> np.ndarray:
    xs, ys = _node_positions(V)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    near = np.hypot(X - goal[0], Y - goal[1]) <= tol + 1e-12
    return near & (V.values.min(axis=(2, 3)) <= 0.0)


def _bang_bang(p: np.ndarray, box) -> np.ndarray:
    a1, b1, a2, b2 = box
    u1 = b1 if p[2] > 0 else (a1 if p[2] < 0 else 0.5 * (a1 + b1))
    u2 = b2 if p[3] > 0 else (a2 if p[3] < 0 else 0.5 * (a2 + b2))
    return np.array([u1, u2])


def _extract_from(snapshots: ReachAvoidTube, ego: AgentState, k_star: int, sel: np.ndarray,
                  goal, subpoints: int) -> Plan:
    dt = snapshots.dt
    box = snapshots.box
    V = snapshots[k_star]
    vals = np.where(sel[:, :, None, None], V.values, np.inf)
    idx = np.unravel_index(int(np.argmin(vals)), vals.shape)
    z = np.array([ax.nodes[i] for ax, i in zip(V.grid.axes, idx)])
    back = [z]
    delta = dt / subpoints
    controls = []
    for k in range(k_star, 0, -1):
        for j in range(subpoints, 0, -1):
            lam = (j - 0.5) / subpoints
            p = ((1.0 - lam) * snapshots[k - 1].gradient(z[None, :])[0]
                 + lam * snapshots[k].gradient(z[None, :])[0])
            u = _bang_bang(p, box)
            controls.append(u)
            z = rk4_states(z, u, -delta, substeps=1)
            back.append(z)
    seq = ControlSequence.from_array(np.array(controls[::-1]), 0.0, delta)
    plan = Plan(seq, rollout(ego, seq), True, True, k_star, (float(goal[0]), float(goal[1])))
    plan.backward = np.array(back[::-1])
    plan.feasible = check_plan(plan, snapshots.obstacles)
    return plan


def extract_plan(snapshots: ReachAvoidTube, ego0, goal, tol: float,
                 subpoints: int = SUBPOINTS) -> Plan:
    """Extract a plan reaching ``goal`` at the earliest possible step.

    The seed is the lowest-valued node within ``tol`` of ``goal`` in the first
    snapshot whose projection reaches it. From there the state is integrated
    backward, each sub-interval using the control that maximizes ``p . f`` for
    the costate ``p`` interpolated (linearly in time) between neighbouring
    snapshots. The reversed control list is rolled out forward from ``ego0``.

    The tube over-approximates, so the first reaching snapshot can be too
    early for the rollout to arrive. Later snapshots are then tried in turn
    and the first rollout ending within ``tol`` plus two cells of ``goal`` is
    returned, else the one ending closest.

    If no snapshot reaches the goal, the returned plan has
    ``target_reached=False`` and no controls; use :func:`fallback_target`.
    """
    ego = ego0 if isinstance(ego0, AgentState) else AgentState.from_array(ego0)
    dt = snapshots.dt
    goal_t = (float(goal[0]), float(goal[1]))
    cands = [(k, sel) for k, sel in ((k, _goal_nodes(V, goal, tol)) for k, V in enumerate(snapshots))
             if sel.any()]
    if not cands:
        return Plan(None, Trajectory(0.0, dt / subpoints, [ego]), False, False, 0, goal_t)
    if cands[0][0] == 0:
        return Plan(None, Trajectory(0.0, dt / subpoints, [ego]), True, True, 0, goal_t)
    g = snapshots[0].grid
    accept = tol + 2.0 * max(g.x.spacing, g.y.spacing)
    best, best_d = None, math.inf
    for k, sel in cands:
        plan = _extract_from(snapshots, ego, k, sel, goal, subpoints)
        end = plan.positions[-1]
        d = math.hypot(end[0] - goal_t[0], end[1] - goal_t[1])
        if d <= accept:
            return plan
        if d < best_d:
            best, best_d = plan, d
    return best


def fallback_target(snapshots: ReachAvoidTube, goal) -> tuple[float, float]:
    """Closest occupied cell of the final snapshot's projection to ``goal``.

    Ties go to the lexicographically smaller ``(x, y)``.

    Raises:
        TrappedError: if the final projection is empty.
    """
    S = project_xy(snapshots[-1])
    pts = S.occupied_points()
    if len(pts) == 0:
        raise TrappedError("final reach-avoid set is empty")
    d = np.hypot(pts[:, 0] - goal[0], pts[:, 1] - goal[1])
    best = np.flatnonzero(d == d.min())
    order = np.lexsort((pts[best, 1], pts[best, 0]))
    p = pts[best[order[0]]]
    return float(p[0]), float(p[1])


def check_plan(plan: Plan, obs: ObstacleSchedule) -> bool:
    """Timing rule: every trajectory point in ``((k-1) dt, k dt]`` avoids step-``k`` obstacles."""
    if plan.controls is None:
        return True
    pts = plan.positions
    per_step = obs.dt / plan.controls.dt
    for j in range(1, len(pts)):
        k = int(math.ceil(j / per_step - 1e-9))
        if k > obs.horizon:
            break
        if obs.blocked(k, pts[j, 0], pts[j, 1]):
            return False
    return True


def constant_plan(ego0: AgentState, u, steps: int, dt: float, obs: ObstacleSchedule | None,
                  kind: str, subpoints: int = SUBPOINTS) -> Plan:
    """Plan holding one control for ``steps`` planner steps."""
    seq = ControlSequence.from_array(np.tile(np.asarray(u, float), (steps * subpoints, 1)),
                                     0.0, dt / subpoints)
    plan = Plan(seq, rollout(ego0, seq), True, False, steps, None, kind)
    plan.feasible = check_plan(plan, obs) if obs is not None else True
    return plan


def degenerate_plan(ego0: AgentState, dt: float, kind: str, subpoints: int = SUBPOINTS) -> Plan:
    """Zero controls for one planner step, flagged infeasible."""
    plan = constant_plan(ego0, (0.0, 0.0), 1, dt, None, kind, subpoints)
    plan.feasible = False
    return plan


def braking_plan(ego0: AgentState, box, steps: int, dt: float, obs: ObstacleSchedule | None,
                 subpoints: int = SUBPOINTS) -> Plan:
    """Decelerate toward zero speed at the strongest admissible rate, heading held."""
    a1, b1, a2, b2 = box
    delta = dt / subpoints
    s = ego0
    controls = []
    for _ in range(steps * subpoints):
        u1 = float(np.clip(-s.v / delta, a1, b1))
        u2 = float(np.clip(0.0, a2, b2))
        controls.append((u1, u2))
        s = AgentState.from_array(rk4_states(s.as_array(), np.array([u1, u2]), delta))
    seq = ControlSequence.from_array(np.array(controls), 0.0, delta)
    plan = Plan(seq, rollout(ego0, seq), True, False, steps, None, "brake")
    plan.feasible = check_plan(plan, obs) if obs is not None else True
    return plan


def plan_motion(ego0: AgentState, obs: ObstacleSchedule, goal, tol: float,
                ego_box=DEFAULT_EGO_BOX, grid: Grid4 | None = None,
                subpoints: int = SUBPOINTS) -> Plan:
    """Reach-avoid planning with the nearest-reachable fallback.

    Returns a degenerate zero-control plan (``feasible=False``) when the start
    is blocked or the ego is trapped.
    """
    dt = obs.dt
    try:
        snaps = reach_avoid_tube(ego0, obs, ego_box, grid, dt)
    except InfeasibleStart:
        return degenerate_plan(ego0, dt, "blocked-start", subpoints)
    plan = extract_plan(snaps, ego0, goal, tol, subpoints)
    if plan.target_reached:
        return plan
    try:
        target = fallback_target(snaps, goal)
    except TrappedError:
        return degenerate_plan(ego0, dt, "trapped", subpoints)
    plan = extract_plan(snaps, ego0, target, 1e-6, subpoints)
    plan.target_reached = False
    plan.kind = "fallback"
    return plan
