"""Deterministic SVG renderings of scenes and coverage curves."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import EpisodeLog  # noqa: E402

_RC = {"svg.hashsalt": "calibreach", "svg.fonttype": "none", "path.simplify": False,
       "image.composite_image": False}


def _svg(fig) -> str:
    buf = io.StringIO()
    with plt.rc_context(_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def step_colors(h: int) -> list:
    """RGBA fill per step offset ``1..h``; earlier steps are more saturated."""
    cmap = plt.get_cmap("Reds")
    if h == 1:
        return [cmap(0.9)]
    return [cmap(0.9 - 0.6 * k / (h - 1)) for k in range(h)]


def render_scene(log: EpisodeLog, t: int) -> str:
    """SVG of timestep ``t``: agents, their spatial sets, the ego plan and the goal.

    Sets of step offset ``k`` are drawn with z-order ``h - k`` so earlier (smaller,
    nested) sets sit above later ones. Every artist carries a ``gid`` such as
    ``set-<agent>-<k>``, ``agent-<id>``, ``ego``, ``plan`` or ``goal``.

    Raises:
        KeyError: if ``t`` is not in the log.
    """
    rec = log.step(t)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 6))
        fills = step_colors(log.horizon)
        pts = []
        for aid, a in rec.agents.items():
            if a.sets is None:
                continue
            for k in range(log.horizon, 0, -1):
                S = a.sets[k - 1]
                if not S.mask.any():
                    continue
                rgba = np.zeros(S.mask.T.shape + (4,))
                rgba[S.mask.T] = fills[k - 1]
                nx, ny = S.mask.shape
                extent = (S.x0 - 0.5 * S.dx, S.x0 + (nx - 0.5) * S.dx,
                          S.y0 - 0.5 * S.dy, S.y0 + (ny - 0.5) * S.dy)
                im = ax.imshow(rgba, origin="lower", extent=extent, interpolation="nearest",
                               zorder=1 + log.horizon - k, aspect="auto")
                im.set_gid(f"set-{aid}-{k}")
                pts.append(S.occupied_points())
        zt = log.horizon + 2
        for aid, xy in log.agent_xy.items():
            if t < len(xy):
                m, = ax.plot(xy[t, 0], xy[t, 1], "o", color="black", ms=6, zorder=zt)
                m.set_gid(f"agent-{aid}")
                pts.append(xy[t][None, :])
        if rec.ego_state is not None:
            e, = ax.plot(rec.ego_state[0], rec.ego_state[1], "s", color="tab:blue", ms=7,
                         zorder=zt)
            e.set_gid("ego")
            pts.append(rec.ego_state[None, :2])
        if rec.plan is not None:
            p = rec.plan.positions
            line, = ax.plot(p[:, 0], p[:, 1], "-", color="tab:blue", lw=1.5, zorder=zt)
            line.set_gid("plan")
            pts.append(p)
        if log.goal is not None:
            g, = ax.plot(log.goal[0], log.goal[1], "*", color="tab:green", ms=12, zorder=zt)
            g.set_gid("goal")
            pts.append(np.array([log.goal]))
        allp = np.vstack(pts)
        lo, hi = allp.min(axis=0) - 5.0, allp.max(axis=0) + 5.0
        ax.set_xlim(lo[0], hi[0])
        ax.set_ylim(lo[1], hi[1])
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_title(f"{log.scene_id}  t = {t * log.dt:.1f} s")
        return _svg(fig)


def render_coverage(steps, coverage, target: float | None = None, label: str = "") -> str:
    """SVG line plot of per-step coverage with an optional target level."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(steps, coverage, "o-", color="tab:red", label=label or "coverage")
        if target is not None:
            ax.axhline(target, color="gray", ls="--", label="target")
        ax.set_xlabel("prediction step")
        ax.set_ylabel("coverage")
        ax.set_ylim(0.0, 1.05)
        ax.legend(loc="lower left")
        return _svg(fig)
