import json
import math

import numpy as np
import pytest

from calibreach.config import RunConfig
from calibreach.conformal import corrected_alpha
from calibreach.harness import (
    SHARED,
    EpisodeLog,
    Scenario,
    StepRecord,
    collision_check,
    conservatism,
    coverage_rate,
    interval_coverage_rate,
    mean_area,
    progress,
    required_length,
    run_episode,
    select_agents,
)
from calibreach.scenarios import make_scenario
from loggen import agent_step, blank_log, box_set, random_log
from oracles import collision_bf, conservatism_bf, coverage_bf, progress_bf

FAST = RunConfig(compute_sets=False, plan=False)


def _short(kind="shifting-noise", **kw):
    base = {"calib_steps": 12, "eval_steps": 10}
    base.update(kw)
    return make_scenario(kind, 3, 0, **base)


def _coverage_log(pattern):
    """Two agents, h = 1; ``pattern[t][i]`` says whether agent ``i`` is covered at ``t``."""
    T = len(pattern)
    agent_xy = {"a": np.zeros((T + 1, 2)), "b": np.zeros((T + 1, 2))}
    for t, row in enumerate(pattern, 1):
        for aid, ok in zip(("a", "b"), row):
            agent_xy[aid][t] = (0.0, 0.0) if ok else (9.0, 9.0)
    log = EpisodeLog("c", 0.5, 1, 0.05, True, None, None, agent_xy, None, 1, T + 1)
    for t in range(T + 1):
        agents = {aid: agent_step(aid, [box_set(0.0, 0.0)], 1) for aid in ("a", "b")}
        log.append(StepRecord(t, "evaluation", ["a", "b"], agents, {SHARED: np.zeros(1)}))
    return log


class TestRunEpisode:
    def test_theta_replays_update_arithmetic(self):
        sc = _short(n_agents=1)
        cfg = FAST.replace(forecaster="oracle-noise", noise_scale=0.0, noise_growth=0.0,
                           xi=0.05, n_agents=1)
        log = run_episode(sc, cfg)
        theta = np.zeros(cfg.horizon)
        by_issue = {}
        for e in log.evaluations:
            by_issue.setdefault(e.issue_t, []).append(e)
        done = set()
        for rec in log.steps:
            issue = rec.t - cfg.horizon
            if issue in by_issue:
                for e in by_issue[issue]:
                    theta = theta + cfg.xi * (e.miss - log.alpha)
                done.add(issue)
            assert np.array_equal(rec.theta[SHARED], theta)
        for issue in sorted(set(by_issue) - done):
            for e in by_issue[issue]:
                theta = theta + cfg.xi * (e.miss - log.alpha)
        expected = cfg.xi * sum(e.miss - log.alpha for e in log.evaluations)
        assert np.allclose(theta, expected, atol=1e-12)

    def test_zero_noise_first_prediction_is_exact(self):
        sc = _short(n_agents=1)
        cfg = FAST.replace(forecaster="oracle-noise", noise_scale=0.0, noise_growth=0.0,
                           xi=0.05, n_agents=1)
        log = run_episode(sc, cfg)
        first = log.evaluations[0]
        rec = log.step(first.issue_t).agents[first.agent_id]
        assert np.array_equal(rec.lower, rec.upper)
        assert np.allclose(first.u_obs, rec.u_hat, atol=1e-12)

    def test_single_agent_alpha(self):
        log = run_episode(_short(n_agents=1), FAST.replace(gamma=0.05, n_agents=1))
        assert log.alpha == 0.05

    def test_corrected_alpha_logged(self):
        log = run_episode(_short(), FAST)
        assert log.alpha == corrected_alpha(0.05, 3)

    def test_no_conformal_freezes_theta(self):
        log = run_episode(_short(), FAST.replace(no_conformal=True))
        assert not log.calibrated
        assert np.all(log.theta_history() == 0.0)
        e = log.evaluations[-1]
        assert e.miss.shape == (6,)

    def test_every_prediction_evaluated(self):
        sc = _short()
        log = run_episode(sc, FAST)
        issued = {(s.t, a) for s in log.steps for a in s.agents}
        scored = {(e.issue_t, e.agent_id) for e in log.evaluations}
        assert issued == scored
        assert [s.t for s in log.steps] == list(range(7, log.eval_end))
        assert log.eval_start == 7 + sc.calib_steps
        assert log.eval_end == log.eval_start + sc.eval_steps

    def test_miss_is_inclusive_containment(self):
        log = run_episode(_short(), FAST.replace(forecaster="oracle-noise"))
        for e in log.evaluations:
            rec = log.step(e.issue_t).agents[e.agent_id]
            inside = np.all((e.u_obs >= rec.lower) & (e.u_obs <= rec.upper), axis=1)
            assert np.array_equal(e.miss, (~inside).astype(e.miss.dtype))

    def test_deterministic(self):
        sc = make_scenario("intersection", 5, 0, calib_steps=3, eval_steps=2)
        cfg = RunConfig(calibration_sets=False)
        a, b = run_episode(sc, cfg), run_episode(sc, cfg)
        assert json.dumps(a.summary(), sort_keys=True) == json.dumps(b.summary(), sort_keys=True)
        for sa, sb in zip(a.steps, b.steps):
            for aid in sa.agents:
                x, y = sa.agents[aid], sb.agents[aid]
                assert (x.sets is None) == (y.sets is None)
                if x.sets is not None:
                    assert all(np.array_equal(p.mask, q.mask) for p, q in zip(x.sets, y.sets))
            if sa.plan is not None:
                assert np.array_equal(sa.plan.trajectory.as_array(),
                                      sb.plan.trajectory.as_array())
        assert a.ego_xy.keys() == b.ego_xy.keys()
        assert all(np.array_equal(a.ego_xy[t], b.ego_xy[t]) for t in a.ego_xy)

    def test_planned_episode_logs_ego(self):
        sc = make_scenario("intersection", 5, 0, calib_steps=3, eval_steps=2)
        log = run_episode(sc, RunConfig(calibration_sets=False))
        assert sorted(log.ego_xy) == list(range(log.eval_start, log.eval_end + 1))
        assert np.allclose(log.ego_xy[log.eval_start], sc.agents[0][log.eval_start, :2])
        for t in range(log.eval_start, log.eval_end):
            assert log.step(t).plan is not None and log.step(t).agents
            assert all(a.sets is not None for a in log.step(t).agents.values())
        assert log.final_ego is not None

    def test_closest_n_recomputed(self):
        sc = make_scenario("random-constant-turn", 2, 0, n_agents=6, calib_steps=6,
                           eval_steps=3)
        log = run_episode(sc, FAST.replace(n_agents=3))
        for rec in log.steps:
            ego = sc.agents[0][rec.t, :2]
            d = sorted((math.hypot(*(sc.agents[a][rec.t, :2] - ego)), a) for a in sc.others)
            assert sorted(rec.selected) == sorted(a for _, a in d[:3])
            assert set(rec.agents) == set(rec.selected)

    def test_all_selected_when_few(self):
        log = run_episode(_short(n_agents=2), FAST.replace(n_agents=3))
        assert all(len(s.selected) == 2 for s in log.steps)

    def test_too_short_rejected(self):
        sc = _short()
        need = required_length(sc, FAST)
        cut = Scenario(sc.dt, {a: v[:need - 1] for a, v in sc.agents.items()}, sc.ego_id,
                       sc.goal, sc.calib_steps, sc.eval_steps)
        with pytest.raises(ValueError, match="needs at least"):
            run_episode(cut, FAST)
        ok = Scenario(sc.dt, {a: v[:need] for a, v in sc.agents.items()}, sc.ego_id,
                      sc.goal, sc.calib_steps, sc.eval_steps)
        run_episode(ok, FAST)

    def test_dt_mismatch_rejected(self):
        with pytest.raises(ValueError):
            run_episode(_short(), FAST.replace(dt=0.25))

    def test_covariance_ablation(self):
        log = run_episode(_short(), FAST.replace(no_covariance_features=True))
        for s in log.steps:
            for a in s.agents.values():
                assert np.all(a.sigma[:, 1:4] == 0.0)

    def test_per_agent_state(self):
        sc = _short()
        log = run_episode(sc, FAST.replace(per_agent_state=True))
        assert set(log.steps[-1].theta) == set(sc.others)


class TestSelectAgents:
    def test_nearest(self):
        pos = {"a": (5.0, 0.0), "b": (1.0, 0.0), "c": (0.0, 3.0), "d": (-2.0, 0.0)}
        assert select_agents(pos, (0.0, 0.0), 2) == ["b", "d"]

    def test_ties_keep_order(self):
        pos = {"a": (1.0, 0.0), "b": (0.0, 1.0), "c": (-1.0, 0.0)}
        assert select_agents(pos, (0.0, 0.0), 2) == ["a", "b"]

    def test_no_ego(self):
        assert select_agents({"a": (0, 0), "b": (1, 1)}, None, 1) == ["a"]


class TestScenario:
    def test_validation(self):
        with pytest.raises(ValueError):
            Scenario(0.5, {0: np.zeros((5, 4)), 1: np.zeros((6, 4))}, None, None, 1, 1)
        with pytest.raises(ValueError):
            Scenario(0.5, {0: np.zeros((5, 4))}, 3, None, 1, 1)
        with pytest.raises(ValueError):
            Scenario(0.5, {0: np.zeros((5, 3))}, None, None, 1, 1)
        with pytest.raises(ValueError):
            Scenario(0.5, {0: np.zeros((5, 4))}, None, None, 1, 0)

    def test_json_round_trip(self):
        sc = _short()
        again = Scenario.from_json(json.loads(sc.dumps()))
        assert again.dumps() == sc.dumps()

    def test_positions_input(self):
        sc = make_scenario("random-constant-turn", 1, 0)
        d = sc.to_json()
        for a in d["agents"]:
            a["positions"] = [s[:2] for s in a.pop("states")]
            a.pop("controls", None)
        again = Scenario.from_json(d)
        for a in sc.agents:
            assert np.allclose(again.agents[a][:, :2], sc.agents[a][:, :2])

    def test_missing_key(self):
        with pytest.raises(ValueError, match="missing"):
            Scenario.from_json({"dt": 0.5, "agents": []})


class TestCoverageMetrics:
    def test_all_covered(self):
        assert coverage_rate(_coverage_log([(1, 1)] * 4), 1) == 1.0

    def test_three_of_four(self):
        assert coverage_rate(_coverage_log([(1, 1), (0, 0), (1, 1), (1, 1)]), 1) == 0.75

    def test_joint_indicator(self):
        log = _coverage_log([(1, 1), (1, 0), (1, 1), (1, 1)])
        assert coverage_rate(log, 1) == 0.75

    def test_mean_area(self):
        assert mean_area(_coverage_log([(1, 1)] * 3), 1) == 9.0

    def test_empty_rejected(self):
        log = EpisodeLog("e", 0.5, 1, 0.05, True, None, None, {}, None, 0, 3)
        with pytest.raises(ValueError):
            coverage_rate(log, 1)
        with pytest.raises(ValueError):
            interval_coverage_rate(log, 1)

    def test_bad_offset(self):
        with pytest.raises(ValueError):
            coverage_rate(_coverage_log([(1, 1)]), 2)


class TestDistanceMetrics:
    AGENT = {"a": [[0.0, 0.0]] * 3}

    def test_conservatism_identical(self):
        path = {0: (5.0, 0.0), 1: (4.0, 0.0), 2: (6.0, 0.0)}
        log = blank_log(self.AGENT, path, [p for p in path.values()])
        assert conservatism(log) == 1.0

    def test_conservatism_double(self):
        rec = [(3.0, 0.0), (2.0, 0.0), (5.0, 0.0)]
        path = {t: (2 * x, 2 * y) for t, (x, y) in enumerate(rec)}
        assert conservatism(blank_log(self.AGENT, path, rec)) == 2.0

    def test_conservatism_ratio(self):
        rec = [(5.0, 0.0)] * 3
        path = {0: (6.0, 0.0), 1: (0.0, 4.0), 2: (8.0, 0.0)}
        assert conservatism(blank_log(self.AGENT, path, rec)) == pytest.approx(0.8, abs=1e-15)

    def test_conservatism_undefined(self):
        rec = [(0.0, 0.0)] * 3
        assert conservatism(blank_log(self.AGENT, {0: (1.0, 1.0)}, rec)) is None

    def test_progress(self):
        agent = {"a": [[50.0, 50.0]] * 3}
        goal = (10.0, 0.0)
        assert progress(blank_log(agent, {0: (0, 0), 1: (10, 0)}, goal=goal)) == 1.0
        assert progress(blank_log(agent, {0: (0, 0), 1: (0, 0)}, goal=goal)) == 0.0
        assert progress(blank_log(agent, {0: (0, 0), 1: (5, 0)}, goal=goal)) == 0.5

    def test_progress_start_is_goal(self):
        with pytest.raises(ValueError):
            progress(blank_log(self.AGENT, {0: (10, 0), 1: (3, 0)}, goal=(10.0, 0.0)))

    def test_collision(self):
        far = blank_log(self.AGENT, {0: (20, 0), 1: (30, 5), 2: (-20, 9)})
        assert not collision_check(far, 4.0)
        near = blank_log(self.AGENT, {0: (20, 0), 1: (1, 0), 2: (-20, 9)})
        assert collision_check(near, 4.0)
        edge = blank_log(self.AGENT, {0: (20, 0), 1: (0, 4.0), 2: (-20, 9)})
        assert collision_check(edge, 4.0)
        assert collision_check(edge) and not collision_check(edge, 3.999)


class TestMetricOracles:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_logs(self, seed):
        log = random_log(np.random.default_rng(seed))
        for k in range(1, log.horizon + 1):
            ref = coverage_bf(log, k)
            if ref is None:
                with pytest.raises(ValueError):
                    coverage_rate(log, k)
            else:
                assert coverage_rate(log, k) == ref
        assert conservatism(log) == conservatism_bf(log)
        assert progress(log) == progress_bf(log)
        for r in (1.0, 3.0, log.collision_radius):
            assert collision_check(log, r) == collision_bf(log, r)
