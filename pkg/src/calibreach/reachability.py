"""Grid-based Hamilton-Jacobi forward reachability for the extended Dubins car.

The value function ``V`` lives on a 4D grid over ``(x, y, v, theta)`` and its
zero sublevel set is the represented set. Forward reachable sets solve

    V_t + max_{u in box} grad(V) . f(z, u) = 0,

which, with :func:`hamiltonian` (a minimum over the box), reads
``V_t = H(z, -grad V)``.

Two propagators share one numba stencil kernel:

* :func:`frt_step` performs a single fixed-frame substep with tube freezing.
* :func:`generate_tubes` integrates in a frame that follows the nominal
  (box-midpoint) trajectory. Grid offsets are fixed relative to the moving
  frame centre, so the transport terms only carry the relative velocity and
  first-order smearing stays proportional to the box width rather than the
  absolute speed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numba as nb
import numpy as np
from scipy import ndimage

from .core import DEFAULT_DT, AgentState, rk4_states, wrap_angles

if "NUMBA_THREADING_LAYER" not in os.environ:
    # The TBB layer shipped with some environments is too old and warns on use.
    nb.config.THREADING_LAYER = "workqueue"

DEFAULT_SHAPE = (41, 41, 11, 25)
DEFAULT_HALF_WIDTH = 20.0
DEFAULT_V_RANGE = (-2.0, 20.0)
CFL_FACTOR = 0.8
# Seed radius in normalized cell units; equals the 4D cell diagonal sqrt(4).
DEFAULT_R0 = 2.0
# Value assigned inside the seed ball (normalized cell units). A deep interior
# keeps first-order smearing from eroding thin extremities of the set.
DEFAULT_INTERIOR_DEPTH = 4.0


# ---------------------------------------------------------------------------
# Grid types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    """Uniform axis. Periodic axes place ``n`` cell-centred nodes on ``[lo, hi)``."""

    lo: float
    hi: float
    n: int
    periodic: bool = False

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("each axis needs at least 3 nodes")
        if not self.hi > self.lo:
            raise ValueError("axis upper bound must exceed lower bound")

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.hi - self.lo) / self.n
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        if self.periodic:
            return self.lo + (np.arange(self.n) + 0.5) * self.spacing
        return np.linspace(self.lo, self.hi, self.n)

    def shifted(self, d: float) -> "Axis":
        return Axis(self.lo + d, self.hi + d, self.n, self.periodic)


@dataclass(frozen=True)
class Grid4:
    """Grid over ``(x, y, v, theta)``; theta is periodic with period ``2 pi``."""

    x: Axis
    y: Axis
    v: Axis
    theta: Axis

    def __post_init__(self):
        if not self.theta.periodic or abs(self.theta.hi - self.theta.lo - 2 * math.pi) > 1e-9:
            raise ValueError("theta axis must be periodic over 2*pi")

    @classmethod
    def default(cls, center=(0.0, 0.0), half_width: float = DEFAULT_HALF_WIDTH,
                shape: Sequence[int] = DEFAULT_SHAPE,
                v_range: Sequence[float] = DEFAULT_V_RANGE) -> "Grid4":
        """Square window of side ``2 * half_width`` centred on the lattice node nearest ``center``.

        Node coordinates are integer multiples of the cell size, so grids built
        around different centres share one lattice.
        """
        nx, ny, nv, nt = shape
        dx = 2 * half_width / (nx - 1)
        dy = 2 * half_width / (ny - 1)
        cx = round(center[0] / dx) * dx
        cy = round(center[1] / dy) * dy
        return cls(Axis(cx - half_width, cx + half_width, nx),
                   Axis(cy - half_width, cy + half_width, ny),
                   Axis(float(v_range[0]), float(v_range[1]), nv),
                   Axis(-math.pi, math.pi, nt, periodic=True))

    @property
    def axes(self) -> tuple[Axis, Axis, Axis, Axis]:
        return (self.x, self.y, self.v, self.theta)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(a.n for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a.spacing for a in self.axes])

    def contains(self, s) -> bool:
        """True if ``s`` lies within the x, y and v bounds (theta always does)."""
        a = s.as_array() if isinstance(s, AgentState) else np.asarray(s, dtype=float)
        return all(ax.lo - 1e-12 <= a[i] <= ax.hi + 1e-12 for i, ax in enumerate(self.axes[:3]))

    def offsets(self) -> tuple[np.ndarray, ...]:
        """Node offsets relative to the grid centre along each axis."""
        out = []
        for ax in self.axes:
            if ax.periodic:
                out.append(-math.pi + (np.arange(ax.n) + 0.5) * ax.spacing)
            else:
                out.append((np.arange(ax.n) - (ax.n - 1) / 2.0) * ax.spacing)
        return tuple(out)


@dataclass
class ValueGrid:
    """Value function samples on a :class:`Grid4`."""

    grid: Grid4
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value grid must be finite")

    def interpolate(self, pts) -> np.ndarray:
        """Multilinear interpolation at points ``(m, 4)``; x, y, v clamp at the boundary."""
        return _interp4(self.grid, self.values, np.atleast_2d(pts))

    def gradient_field(self) -> list[np.ndarray]:
        """Central-difference gradient arrays (one-sided on x, y, v edges, periodic theta)."""
        g = self.grid
        out = [np.gradient(self.values, g.x.spacing, axis=0),
               np.gradient(self.values, g.y.spacing, axis=1),
               np.gradient(self.values, g.v.spacing, axis=2),
               (np.roll(self.values, -1, axis=3) - np.roll(self.values, 1, axis=3))
               / (2 * g.theta.spacing)]
        return out

    def gradient(self, pts) -> np.ndarray:
        """Costate at points ``(m, 4)``.

        Equals multilinear interpolation of :meth:`gradient_field`, evaluated
        only at the 16 surrounding nodes.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        g = self.grid
        base, frac = _cell_coords(g, pts)
        bits = (np.arange(16)[:, None] >> np.arange(4)[None, :]) & 1
        idx = base[:, None, :] + bits[None, :, :]
        w = np.prod(np.where(bits[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]),
                    axis=2)
        for d, ax in enumerate(g.axes):
            if ax.periodic:
                idx[..., d] %= ax.n
        out = np.empty((len(pts), 4))
        for d, ax in enumerate(g.axes):
            hi = idx.copy()
            lo = idx.copy()
            if ax.periodic:
                hi[..., d] = (idx[..., d] + 1) % ax.n
                lo[..., d] = (idx[..., d] - 1) % ax.n
                denom = 2.0 * ax.spacing
            else:
                hi[..., d] = np.minimum(idx[..., d] + 1, ax.n - 1)
                lo[..., d] = np.maximum(idx[..., d] - 1, 0)
                denom = (hi[..., d] - lo[..., d]) * ax.spacing
            dv = (self.values[hi[..., 0], hi[..., 1], hi[..., 2], hi[..., 3]]
                  - self.values[lo[..., 0], lo[..., 1], lo[..., 2], lo[..., 3]]) / denom
            out[:, d] = (w * dv).sum(axis=1)
        return out


def _cell_coords(grid: Grid4, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Lower-corner node index and fractional offset per dimension.
    base = np.empty((len(pts), 4), dtype=int)
    frac = np.empty((len(pts), 4))
    for d, ax in enumerate(grid.axes):
        p = pts[:, d]
        if ax.periodic:
            f = (p - ax.lo) / ax.spacing - 0.5
            i0 = np.floor(f)
            frac[:, d] = f - i0
            base[:, d] = i0.astype(int) % ax.n
        else:
            f = np.clip((p - ax.lo) / ax.spacing, 0.0, ax.n - 1)
            i0 = np.minimum(np.floor(f).astype(int), ax.n - 2)
            frac[:, d] = f - i0
            base[:, d] = i0
    return base, frac


def _interp4(grid: Grid4, arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    base, frac = _cell_coords(grid, pts)
    out = np.zeros(len(pts))
    for corner in range(16):
        w = np.ones(len(pts))
        idx = []
        for d, ax in enumerate(grid.axes):
            bit = (corner >> d) & 1
            w = w * (frac[:, d] if bit else 1.0 - frac[:, d])
            i = base[:, d] + bit
            idx.append(i % ax.n if ax.periodic else i)
        out += w * arr[idx[0], idx[1], idx[2], idx[3]]
    return out


# ---------------------------------------------------------------------------
# Spatial sets
# ---------------------------------------------------------------------------

@dataclass
class SpatialSet:
    """Occupancy mask over an ``(x, y)`` lattice.

    Cell ``(i, j)`` is centred at ``(x0 + i dx, y0 + j dy)``; a point belongs to
    the set when its nearest cell centre is occupied.
    """

    mask: np.ndarray
    x0: float
    y0: float
    dx: float
    dy: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("mask must be 2D")

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def area(self) -> float:
        return float(self.mask.sum()) * self.cell_area

    @property
    def xs(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.mask.shape[0])

    @property
    def ys(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.mask.shape[1])

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        i = np.floor((np.asarray(x, dtype=float) - self.x0) / self.dx + 0.5).astype(int)
        j = np.floor((np.asarray(y, dtype=float) - self.y0) / self.dy + 0.5).astype(int)
        return i, j

    def contains(self, x, y):
        """Nearest-cell membership test for scalar or array coordinates."""
        i, j = self.cell_index(x, y)
        nx, ny = self.mask.shape
        ok = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        if np.ndim(i) == 0:
            return bool(ok and self.mask[i, j])
        res = np.zeros(np.shape(i), dtype=bool)
        res[ok] = self.mask[i[ok], j[ok]]
        return res

    def occupied_points(self) -> np.ndarray:
        """Centres of occupied cells as ``(m, 2)``, ordered by ``(x, y)``."""
        i, j = np.nonzero(self.mask)
        return np.column_stack([self.x0 + i * self.dx, self.y0 + j * self.dy])

    def dilate(self, radius: float) -> "SpatialSet":
        """Cells whose centre lies within ``radius`` of an occupied cell centre.

        The mask is padded so the dilation is never clipped by the window.
        """
        px = int(math.ceil(radius / self.dx))
        py = int(math.ceil(radius / self.dy))
        m = np.pad(self.mask, ((px, px), (py, py)))
        if m.any():
            dist = ndimage.distance_transform_edt(~m, sampling=(self.dx, self.dy))
            m = dist <= radius + 1e-9
        return SpatialSet(m, self.x0 - px * self.dx, self.y0 - py * self.dy, self.dx, self.dy)

    def is_subset(self, other: "SpatialSet") -> bool:
        """Exact mask inclusion; both sets must share a lattice."""
        pts = self.occupied_points()
        return bool(np.all(other.contains(pts[:, 0], pts[:, 1]))) if len(pts) else True

    def to_json(self) -> dict:
        """Run-length encode the row-major mask, starting with a run of empty cells."""
        flat = self.mask.ravel()
        change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = np.diff(bounds).tolist()
        if flat.size and flat[0]:
            runs = [0] + runs
        return {"shape": list(self.mask.shape), "x0": self.x0, "y0": self.y0,
                "dx": self.dx, "dy": self.dy, "runs": [int(r) for r in runs]}

    @classmethod
    def from_json(cls, d: dict) -> "SpatialSet":
        flat = np.zeros(int(np.prod(d["shape"])), dtype=bool)
        pos, val = 0, False
        for r in d["runs"]:
            flat[pos:pos + r] = val
            pos += r
            val = not val
        return cls(flat.reshape(d["shape"]), d["x0"], d["y0"], d["dx"], d["dy"])

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def project_xy(V: ValueGrid) -> SpatialSet:
    """Cells whose minimum value over ``(v, theta)`` is nonpositive."""
    g = V.grid
    return SpatialSet(V.values.min(axis=(2, 3)) <= 0.0, g.x.lo, g.y.lo, g.x.spacing, g.y.spacing)


def set_area(S: SpatialSet) -> float:
    """Occupied area in square metres."""
    return S.area


# ---------------------------------------------------------------------------
# Hamiltonian and stencil kernel
# ---------------------------------------------------------------------------

def hamiltonian(state, p, box) -> np.ndarray | float:
    """``p1 v cos(th) + p2 v sin(th) + min_u1 p3 u1 + min_u2 p4 u2`` over the box.

    Args:
        state: ``(..., 4)`` states.
        p: ``(..., 4)`` costates.
        box: ``(a1, b1, a2, b2)`` control bounds.
    """
    s = np.asarray(state, dtype=float)
    p = np.asarray(p, dtype=float)
    a1, b1, a2, b2 = box
    h = p[..., 0] * s[..., 2] * np.cos(s[..., 3]) + p[..., 1] * s[..., 2] * np.sin(s[..., 3])
    h = h + np.where(p[..., 2] > 0, p[..., 2] * a1, p[..., 2] * b1)
    h = h + np.where(p[..., 3] > 0, p[..., 3] * a2, p[..., 3] * b2)
    return float(h) if np.ndim(h) == 0 else h


@nb.njit(cache=True, inline="always")
def _box_flux(pm, pp, a, b):
    # Godunov flux of max_{u in [a, b]} p u, which is convex in p.
    if pm <= pp:
        q = min(max(0.0, pm), pp)
        return min(max(a * pm, b * pm), max(a * pp, b * pp), max(a * q, b * q))
    return max(a * pm, b * pm, a * pp, b * pp)


@nb.njit(cache=True, inline="always")
def _node_update(c, xm, xp, ym, yp, vm, vp, tm, tp, sx, spx, sy, spy, sv, spv,
                 ix, iy, iv, ith, s1, s2, a1, b1, a2, b2, sym, h):
    # Upwind transport in x and y, Godunov control terms in v and theta.
    # Edge nodes reuse the inner neighbour with a sign flip (one-sided).
    pm = sx * (c - xm) * ix
    pp = spx * (xp - c) * ix
    r = s1 * 0.5 * (pm + pp) - abs(s1) * 0.5 * (pp - pm)
    pm = sy * (c - ym) * iy
    pp = spy * (yp - c) * iy
    r += s2 * 0.5 * (pm + pp) - abs(s2) * 0.5 * (pp - pm)
    pm = sv * (c - vm) * iv
    pp = spv * (vp - c) * iv
    if sym:
        r += b1 * max(max(pm, 0.0), max(-pp, 0.0))
    else:
        r += _box_flux(pm, pp, a1, b1)
    pm = (c - tm) * ith
    pp = (tp - c) * ith
    if sym:
        r += b2 * max(max(pm, 0.0), max(-pp, 0.0))
    else:
        r += _box_flux(pm, pp, a2, b2)
    return c - h * r


@nb.njit(parallel=True, cache=True)
def _substep(V, out, P, cx, cy, dx, dy, dv, dth, a1, b1, a2, b2, h, freeze, mask, use_mask):
    nx, ny, nv, nt = V.shape
    ix, iy, iv, ith = 1.0 / dx, 1.0 / dy, 1.0 / dv, 1.0 / dth
    sym = a1 == -b1 and a2 == -b2
    for i in nb.prange(nx):
        im = i - 1 if i > 0 else i + 1
        ip = i + 1 if i < nx - 1 else i - 1
        sx = 1.0 if i > 0 else -1.0
        spx = 1.0 if i < nx - 1 else -1.0
        for j in range(ny):
            jm = j - 1 if j > 0 else j + 1
            jp = j + 1 if j < ny - 1 else j - 1
            sy = 1.0 if j > 0 else -1.0
            spy = 1.0 if j < ny - 1 else -1.0
            blocked = use_mask and mask[i, j]
            pmin = np.inf
            for k in range(nv):
                km = k - 1 if k > 0 else k + 1
                kp = k + 1 if k < nv - 1 else k - 1
                sv = 1.0 if k > 0 else -1.0
                spv = 1.0 if k < nv - 1 else -1.0
                vc = V[i, j, k]
                vxm = V[im, j, k]
                vxp = V[ip, j, k]
                vym = V[i, jm, k]
                vyp = V[i, jp, k]
                vvm = V[i, j, km]
                vvp = V[i, j, kp]
                o = out[i, j, k]
                ck = cx[k]
                dk = cy[k]
                o[0] = _node_update(vc[0], vxm[0], vxp[0], vym[0], vyp[0], vvm[0], vvp[0],
                                    vc[nt - 1], vc[1], sx, spx, sy, spy, sv, spv,
                                    ix, iy, iv, ith, ck[0], dk[0], a1, b1, a2, b2, sym, h)
                for l in range(1, nt - 1):
                    o[l] = _node_update(vc[l], vxm[l], vxp[l], vym[l], vyp[l], vvm[l], vvp[l],
                                        vc[l - 1], vc[l + 1], sx, spx, sy, spy, sv, spv,
                                        ix, iy, iv, ith, ck[l], dk[l], a1, b1, a2, b2, sym, h)
                e = nt - 1
                o[e] = _node_update(vc[e], vxm[e], vxp[e], vym[e], vyp[e], vvm[e], vvp[e],
                                    vc[e - 1], vc[0], sx, spx, sy, spy, sv, spv,
                                    ix, iy, iv, ith, ck[e], dk[e], a1, b1, a2, b2, sym, h)
                for l in range(nt):
                    val = o[l]
                    if freeze and val > vc[l]:
                        val = vc[l]
                    if blocked and val < 1.0:
                        val = 1.0
                    o[l] = val
                    if val < pmin:
                        pmin = val
            P[i, j] = pmin


_NO_MASK = np.zeros((1, 1), dtype=np.bool_)


def _run_kernel(V, W, P, cx, cy, d, box, h, freeze, mask=None):
    a1, b1, a2, b2 = (float(b) for b in box)
    use = mask is not None
    _substep(V, W, P, np.ascontiguousarray(cx), np.ascontiguousarray(cy),
             float(d[0]), float(d[1]), float(d[2]), float(d[3]),
             a1, b1, a2, b2, float(h), bool(freeze),
             np.ascontiguousarray(mask) if use else _NO_MASK, use)


def cfl_limit(grid: Grid4, box, cfl: float = CFL_FACTOR) -> float:
    """Largest stable fixed-frame substep for ``box`` on ``grid``."""
    v = grid.v.nodes[:, None]
    th = grid.theta.nodes[None, :]
    ax = np.abs(v * np.cos(th)).max()
    ay = np.abs(v * np.sin(th)).max()
    a1, b1, a2, b2 = box
    rate = (ax / grid.x.spacing + ay / grid.y.spacing
            + max(abs(a1), abs(b1)) / grid.v.spacing + max(abs(a2), abs(b2)) / grid.theta.spacing)
    return math.inf if rate == 0 else cfl / rate


def frt_step(V: ValueGrid, box, dt_pde: float, cfl: float = CFL_FACTOR) -> ValueGrid:
    """One fixed-frame upwind substep followed by the tube freeze ``min(new, old)``.

    Raises:
        ValueError: if ``dt_pde`` violates the CFL bound.
    """
    if not dt_pde > 0:
        raise ValueError("dt_pde must be positive")
    lim = cfl_limit(V.grid, box, cfl)
    if dt_pde > lim * (1 + 1e-12):
        raise ValueError(f"dt_pde={dt_pde:.4g} violates the CFL limit {lim:.4g}")
    g = V.grid
    v = g.v.nodes[:, None]
    th = g.theta.nodes[None, :]
    W = np.empty_like(V.values)
    P = np.empty(g.shape[:2])
    _run_kernel(V.values, W, P, v * np.cos(th), v * np.sin(th), g.spacing, box, dt_pde, True)
    return ValueGrid(g, W)


def initial_value(grid: Grid4, s0, r0: float = DEFAULT_R0,
                  interior_depth: float = 0.0) -> ValueGrid:
    """Normalized distance to ``s0`` minus ``r0`` (cell units); theta distance is periodic.

    With ``interior_depth > 0`` every node inside the ball is set to
    ``-interior_depth``.
    """
    s0 = s0.as_array() if isinstance(s0, AgentState) else np.asarray(s0, dtype=float)
    comps = []
    for d, ax in enumerate(grid.axes):
        diff = ax.nodes - s0[d]
        if ax.periodic:
            diff = wrap_angles(diff)
        comps.append(diff / ax.spacing)
    X, Y, Vv, T = np.meshgrid(*comps, indexing="ij", sparse=True)
    V = np.sqrt(X**2 + Y**2 + Vv**2 + T**2) - r0
    if interior_depth > 0:
        V = np.where(V <= 0.0, -interior_depth, V)
    return ValueGrid(grid, np.broadcast_to(V, grid.shape))


# ---------------------------------------------------------------------------
# Moving-frame propagation
# ---------------------------------------------------------------------------

def _box_tuple(box) -> tuple[float, float, float, float]:
    a1, b1, a2, b2 = (float(b) for b in box)
    if a1 > b1 or a2 > b2:
        raise ValueError("control box lower bound exceeds upper bound")
    return a1, b1, a2, b2


class MovingFrame:
    """Co-moving grid following the nominal state ``c`` under box-midpoint controls.

    Node ``(i, j, k, l)`` sits at ``c + (xo_i, yo_j, vo_k, tho_l)``. Because the
    offsets are constant, each substep transports ``V`` only with the velocity
    relative to ``c``; the controls enter through the half-width box
    ``[-w, w]`` around the midpoint.

    Args:
        grid: supplies node counts and spacings.
        s0: initial frame centre.
        values: initial values on the offset grid.
        cfl: Courant factor.
    """

    def __init__(self, grid: Grid4, s0, values: np.ndarray, cfl: float = CFL_FACTOR):
        self.shape = grid.shape
        self.d = grid.spacing
        self.xo, self.yo, self.vo, self.tho = grid.offsets()
        self.c = np.asarray(s0, dtype=float).copy()
        self.V = np.ascontiguousarray(values, dtype=float).copy()
        self.W = np.empty_like(self.V)
        self.P = np.empty(self.shape[:2])
        self.cfl = cfl

    def value_grid(self) -> ValueGrid:
        """The current values on an absolute grid (axes shifted by the centre)."""
        c = self.c
        th0 = float(wrap_angles(c[3]))
        g = Grid4(Axis(c[0] + self.xo[0], c[0] + self.xo[-1], self.shape[0]),
                  Axis(c[1] + self.yo[0], c[1] + self.yo[-1], self.shape[1]),
                  Axis(c[2] + self.vo[0], c[2] + self.vo[-1], self.shape[2]),
                  Axis(th0 - math.pi, th0 + math.pi, self.shape[3], periodic=True))
        return ValueGrid(g, self.V.copy())

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.c[0] + self.xo, self.c[1] + self.yo

    def n_substeps(self, box, dt: float) -> int:
        a1, b1, a2, b2 = box
        m1 = 0.5 * (a1 + b1)
        cv = max(abs(self.c[2]), abs(self.c[2] + m1 * dt))
        vrel = np.abs(self.vo).max() + 2.0 * cv
        rate = (vrel / self.d[0] + vrel / self.d[1]
                + 0.5 * (b1 - a1) / self.d[2] + 0.5 * (b2 - a2) / self.d[3])
        return max(1, int(math.ceil(dt * rate / self.cfl - 1e-9)))

    def advance(self, box, dt: float,
                mask_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                on_substep: Callable[["MovingFrame"], None] | None = None) -> None:
        """Propagate over ``dt`` with control box ``box``.

        Args:
            box: ``(a1, b1, a2, b2)``.
            dt: interval length.
            mask_fn: optional ``(node_x, node_y) -> bool (nx, ny)`` obstacle lookup;
                blocked columns are raised to at least +1 after each substep.
            on_substep: callback invoked after every substep.
        """
        a1, b1, a2, b2 = _box_tuple(box)
        m = np.array([0.5 * (a1 + b1), 0.5 * (a2 + b2)])
        w1, w2 = 0.5 * (b1 - a1), 0.5 * (b2 - a2)
        n = self.n_substeps((a1, b1, a2, b2), dt)
        h = dt / n
        for _ in range(n):
            cm = rk4_states(self.c, m, 0.5 * h, substeps=1)
            cn = rk4_states(self.c, m, h, substeps=1)
            vph = (cm[2] + self.vo)[:, None]
            tph = (cm[3] + self.tho)[None, :]
            cx = vph * np.cos(tph) - cm[2] * math.cos(cm[3])
            cy = vph * np.sin(tph) - cm[2] * math.sin(cm[3])
            self.c = cn
            mask = None
            if mask_fn is not None:
                X, Y = self.node_xy()
                mask = mask_fn(X, Y)
            _run_kernel(self.V, self.W, self.P, cx, cy, self.d, (-w1, w1, -w2, w2), h,
                        False, mask)
            self.V, self.W = self.W, self.V
            if on_substep is not None:
                on_substep(self)


def _bilinear_onto(P: np.ndarray, ox: float, oy: float, dx: float, dy: float,
                   X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # P sampled on nodes (ox + i dx, oy + j dy); points outside get +inf.
    nx, ny = P.shape
    fi = (X - ox) / dx
    fj = (Y - oy) / dy
    i0 = np.floor(fi).astype(int)
    j0 = np.floor(fj).astype(int)
    okx = (fi >= 0) & (fi <= nx - 1)
    oky = (fj >= 0) & (fj <= ny - 1)
    i0 = np.clip(i0, 0, nx - 2)
    j0 = np.clip(j0, 0, ny - 2)
    wi = np.clip((fi - i0)[:, None], 0.0, 1.0)
    wj = np.clip((fj - j0)[None, :], 0.0, 1.0)
    R = (P[np.ix_(i0, j0)] * (1 - wi) * (1 - wj) + P[np.ix_(i0 + 1, j0)] * wi * (1 - wj)
         + P[np.ix_(i0, j0 + 1)] * (1 - wi) * wj + P[np.ix_(i0 + 1, j0 + 1)] * wi * wj)
    R[~okx, :] = np.inf
    R[:, ~oky] = np.inf
    return R


def nominal_path(s0, boxes, dt: float) -> np.ndarray:
    """States reached under the box midpoints, ``(len(boxes) + 1, 4)``."""
    s = np.asarray(s0, dtype=float)
    out = [s]
    for a1, b1, a2, b2 in boxes:
        s = rk4_states(s, np.array([0.5 * (a1 + b1), 0.5 * (a2 + b2)]), dt)
        out.append(s)
    return np.array(out)


def generate_tubes(s0, intervals, grid: Grid4 | None = None, dt: float = DEFAULT_DT,
                   r0: float = DEFAULT_R0, interior_depth: float = DEFAULT_INTERIOR_DEPTH,
                   cfl: float = CFL_FACTOR) -> list[SpatialSet]:
    """Forward reachable tubes over ``len(intervals)`` steps of length ``dt``.

    The output window has the size and spacing of ``grid`` and is centred on
    the lattice node nearest the midpoint of the nominal path's bounding box.
    Each set is the union of projections over all substeps so far, so the
    returned sets are nested.

    Args:
        s0: initial state.
        intervals: :class:`ControlIntervalSequence` or a list of
            ``(a1, b1, a2, b2)`` boxes.
        grid: discretization; defaults to :meth:`Grid4.default` around ``s0``.
        dt: step length.
        r0: seed radius in normalized cell units.
        interior_depth: value inside the seed ball (see :func:`initial_value`).

    Raises:
        ValueError: if ``s0`` lies outside ``grid``.
    """
    s0 = s0.as_array() if isinstance(s0, AgentState) else np.asarray(s0, dtype=float)
    if grid is None:
        grid = Grid4.default(center=s0[:2])
    if not grid.contains(s0):
        raise ValueError("initial state lies outside the grid bounds")
    boxes = [intervals.box(k) for k in range(len(intervals))] if hasattr(intervals, "box") \
        else [_box_tuple(b) for b in intervals]
    s0 = s0.copy()
    s0[3] = float(wrap_angles(s0[3]))

    frame = MovingFrame(grid, s0, initial_value(offset_grid(grid), np.zeros(4), r0,
                                                interior_depth).values, cfl)
    path = nominal_path(s0, boxes, dt)
    mid = 0.5 * (path[:, :2].min(axis=0) + path[:, :2].max(axis=0))
    dx, dy = grid.x.spacing, grid.y.spacing
    XO = round(mid[0] / dx) * dx + frame.xo
    YO = round(mid[1] / dy) * dy + frame.yo
    acc = np.zeros(grid.shape[:2], dtype=bool)

    def collect(fr: MovingFrame):
        R = _bilinear_onto(fr.P, fr.c[0] + fr.xo[0], fr.c[1] + fr.yo[0], dx, dy, XO, YO)
        acc[:] |= R <= 0.0

    collect(frame_projection(frame))
    sets = []
    for box in boxes:
        frame.advance(box, dt, on_substep=collect)
        sets.append(SpatialSet(acc.copy(), XO[0], YO[0], dx, dy))
    return sets


def offset_grid(grid: Grid4) -> Grid4:
    """Grid with the same counts and spacings as ``grid``, centred on the origin."""
    xo, yo, vo, _ = grid.offsets()
    return Grid4(Axis(xo[0], xo[-1], len(xo)), Axis(yo[0], yo[-1], len(yo)),
                 Axis(vo[0], vo[-1], len(vo)), Axis(-math.pi, math.pi, grid.theta.n, True))


def frame_projection(frame: MovingFrame) -> MovingFrame:
    """Refresh the cached ``(x, y)`` projection of the frame's values."""
    frame.P[:] = frame.V.min(axis=(2, 3))
    return frame
