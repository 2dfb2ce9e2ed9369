import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibreach.conformal import ControlIntervalSequence
from calibreach.core import AgentState, Control, dubins_step
from calibreach.reachability import (
    Axis,
    Grid4,
    SpatialSet,
    ValueGrid,
    cfl_limit,
    frt_step,
    generate_tubes,
    hamiltonian,
    initial_value,
    project_xy,
    set_area,
)
from oracles import in_mask, mc_positions

SMALL = Grid4(Axis(-5, 5, 21), Axis(-5, 5, 21), Axis(0, 2, 11), Axis(-math.pi, math.pi, 24, True))


def _zero_width(u, h=6):
    u = np.tile(np.asarray(u, dtype=float), (h, 1))
    return ControlIntervalSequence(u, u)


def _flow(s0, u, steps, dt=0.5):
    s = AgentState.from_array(s0)
    out = []
    for _ in range(steps):
        s = dubins_step(s, Control(*u), dt)
        out.append(s)
    return out


class TestHamiltonian:
    def test_zero_costate(self):
        assert hamiltonian([1, 2, 3, 0.4], np.zeros(4), (-1, 1, -1, 1)) == 0.0

    def test_corner(self):
        assert hamiltonian([0, 0, 2, 0], [1, 0, 1, 0], (-1, 1, -1, 1)) == pytest.approx(1.0)

    def test_heading(self):
        assert hamiltonian([0, 0, 2, math.pi / 2], [1, 0, 0, 0], (-1, 1, -1, 1)) == \
            pytest.approx(0.0, abs=1e-12)

    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
           st.floats(-3, 3), st.floats(0, 2), st.floats(-1, 1), st.floats(0, 1),
           st.floats(-10, 10), st.floats(-math.pi, math.pi))
    def test_matches_brute_force(self, p, a1, w1, a2, w2, v, th):
        box = (a1, a1 + w1, a2, a2 + w2)
        u1 = np.linspace(box[0], box[1], 17)
        u2 = np.linspace(box[2], box[3], 17)
        U1, U2 = np.meshgrid(u1, u2)
        brute = (p[0] * v * math.cos(th) + p[1] * v * math.sin(th)
                 + (p[2] * U1 + p[3] * U2).min())
        assert hamiltonian([0, 0, v, th], p, box) == pytest.approx(brute, abs=1e-9)


class TestFrtStep:
    BOX = (0.0, 0.0, 0.0, 0.0)

    def test_flat_field_unchanged(self):
        V = ValueGrid(SMALL, np.full(SMALL.shape, -0.7))
        out = frt_step(V, (-1, 1, -0.5, 0.5), cfl_limit(SMALL, (-1, 1, -0.5, 0.5)))
        assert np.array_equal(out.values, V.values)

    def test_point_mass_flows(self):
        s0 = np.array([0.0, 0.0, 1.0, 0.0])
        V = initial_value(SMALL, s0)
        dt = cfl_limit(SMALL, self.BOX)
        n = math.ceil(0.5 / dt)
        for _ in range(n):
            V = frt_step(V, self.BOX, 0.5 / n)
        target = dubins_step(AgentState.from_array(s0), Control(0, 0), 0.5).as_array()
        assert V.interpolate(target[None, :])[0] <= 0.0

    def test_freeze_is_monotone(self):
        V = initial_value(SMALL, [1.0, -1.0, 1.0, 0.5])
        box = (-1, 1, -0.5, 0.5)
        out = frt_step(V, box, cfl_limit(SMALL, box))
        assert np.all(out.values <= V.values)

    def test_cfl_violation(self):
        V = initial_value(SMALL, [0, 0, 1, 0])
        box = (-1, 1, -0.5, 0.5)
        with pytest.raises(ValueError):
            frt_step(V, box, 2 * cfl_limit(SMALL, box))


class TestProjection:
    def _grid(self):
        return Grid4(Axis(0, 9, 10), Axis(0, 9, 10), Axis(0, 2, 3), Axis(-math.pi, math.pi, 4, True))

    def test_empty(self):
        g = self._grid()
        S = project_xy(ValueGrid(g, np.ones(g.shape)))
        assert S.area == 0.0 and set_area(S) == 0.0

    def test_single_column(self):
        g = self._grid()
        vals = np.ones(g.shape)
        vals[3, 4, 1, 2] = 0.0
        S = project_xy(ValueGrid(g, vals))
        assert S.area == S.cell_area == 1.0
        assert S.contains(3.0, 4.0) and not S.contains(4.0, 4.0)

    def test_block(self):
        g = self._grid()
        vals = np.ones(g.shape)
        vals[2:5, 1:5, 0, :] = -1.0
        assert project_xy(ValueGrid(g, vals)).area == pytest.approx(12.0)


class TestSpatialSet:
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1),
           st.floats(-50, 50), st.floats(0.1, 3))
    def test_json_round_trip(self, nx, ny, seed, x0, dx):
        mask = np.random.default_rng(seed).random((nx, ny)) < 0.4
        S = SpatialSet(mask, x0, -x0, dx, 2 * dx)
        R = SpatialSet.from_json(S.to_json())
        assert np.array_equal(R.mask, S.mask)
        assert R.to_json() == S.to_json()

    @given(st.integers(0, 2**31 - 1), st.floats(-3, 12), st.floats(-3, 12))
    def test_contains_matches_reference(self, seed, x, y):
        S = SpatialSet(np.random.default_rng(seed).random((6, 7)) < 0.5, 0.0, 1.0, 1.5, 1.25)
        assert S.contains(x, y) == in_mask(S, x, y)

    def test_area_invariant(self):
        S = SpatialSet(np.eye(5, dtype=bool), 0, 0, 0.5, 2.0)
        assert S.area == 5 * 1.0

    def test_dilate_distance(self):
        m = np.zeros((5, 5), dtype=bool)
        m[2, 2] = True
        D = SpatialSet(m, 0.0, 0.0, 1.0, 1.0).dilate(2.0)
        pts = D.occupied_points()
        assert np.all(np.hypot(pts[:, 0] - 2, pts[:, 1] - 2) <= 2.0 + 1e-9)
        assert len(pts) == 13


class TestGenerateTubes:
    def test_zero_width_covers_true_future(self):
        s0 = np.array([3.0, -2.0, 5.0, 0.7])
        u = (0.4, 0.15)
        sets = generate_tubes(s0, _zero_width(u))
        for S, s in zip(sets, _flow(s0, u, 6)):
            assert S.contains(s.x, s.y)

    def test_zero_width_stationary_area(self):
        # The seed ball spans two speed cells, so the sound bound grows by
        # that speed uncertainty times the elapsed time.
        s0 = np.array([0.0, 0.0, 0.0, 0.3])
        sets = generate_tubes(s0, _zero_width((0.0, 0.0)))
        g = Grid4.default()
        diag = math.hypot(g.x.spacing, g.y.spacing)
        assert sets[0].area <= math.pi * (diag + 2 * diag) ** 2
        for k, S in enumerate(sets, 1):
            assert S.area <= math.pi * (3 * diag + 2 * g.v.spacing * 0.5 * k) ** 2
            assert S.contains(0.0, 0.0)

    def test_zero_width_moving_area_within_swept_capsule(self):
        s0 = np.array([0.0, 0.0, 4.0, -0.4])
        sets = generate_tubes(s0, _zero_width((0.0, 0.0)))
        g = Grid4.default()
        diag = math.hypot(g.x.spacing, g.y.spacing)
        R = 3 * diag
        for k, S in enumerate(sets, 1):
            length = 4.0 * 0.5 * k
            assert S.area <= math.pi * R**2 + 2 * R * length

    def test_nested(self):
        iv = ControlIntervalSequence(np.tile([-1.0, -0.3], (6, 1)), np.tile([1.5, 0.2], (6, 1)))
        sets = generate_tubes([1.0, 2.0, 6.0, -2.5], iv)
        for a, b in zip(sets, sets[1:]):
            assert a.is_subset(b) and np.all(b.mask | ~a.mask)

    def test_monte_carlo_soundness(self):
        rng = np.random.default_rng(42)
        s0 = np.array([0.0, 0.0, 6.0, 1.0])
        boxes = [(-1.0, 0.5, -0.2, 0.3)] * 6
        sets = generate_tubes(s0, boxes)
        pos = mc_positions(s0, boxes, 0.5, 1000, rng)
        inside = np.mean([[S.contains(*p) for p in pos[k]] for k, S in enumerate(sets)])
        assert inside >= 0.999

    def test_refinement_does_not_grow_error(self):
        s0 = np.array([0.0, 0.0, 0.0, 0.0])
        coarse = Grid4.default(half_width=10.0, shape=(21, 21, 7, 13), v_range=(-2, 10))
        fine = Grid4.default(half_width=10.0, shape=(41, 41, 13, 26), v_range=(-2, 10))
        a = generate_tubes(s0, _zero_width((0, 0), 2), coarse)
        b = generate_tubes(s0, _zero_width((0, 0), 2), fine)
        assert all(sb.area <= sa.area for sa, sb in zip(a, b))

    def test_outside_grid_rejected(self):
        with pytest.raises(ValueError):
            generate_tubes([0.0, 0.0, 30.0, 0.0], _zero_width((0, 0)))

    def test_default_grid_timing(self):
        iv = ControlIntervalSequence(np.tile([-1.0, -0.3], (6, 1)), np.tile([1.0, 0.3], (6, 1)))
        generate_tubes([0, 0, 5, 0], iv)
        t = time.perf_counter()
        generate_tubes([0, 0, 8, 2.0], iv)
        assert time.perf_counter() - t < 5.0
