import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from calibreach.cli import (
    COVERAGE_COLUMNS,
    PLANNING_COLUMNS,
    SceneResult,
    coverage_table,
    main,
    mean_se,
    planning_table,
    run_batch,
    scene_metrics,
    write_csv,
)
from calibreach.config import OUTPUT_ENV, ConfigError, RunConfig, output_dir, parse_config
from calibreach.core import AgentState, Control, dubins_step
from calibreach.harness import Scenario
from calibreach.scenarios import generate_scenarios, make_scenario
from loggen import blank_log

GOLDEN = Path(__file__).parent / "golden"
FAST = {"compute_sets": "false", "plan": "false"}


def _read(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def short_scene(tmp_path):
    sc = make_scenario("shifting-noise", 0, 0, calib_steps=10, eval_steps=8)
    p = tmp_path / "scenes" / f"{sc.scene_id}.json"
    p.parent.mkdir()
    sc.save(p)
    return p


class TestConfig:
    def test_defaults(self):
        cfg = parse_config()
        assert (cfg.gamma, cfg.n_agents, cfg.dt, cfg.horizon) == (0.05, 3, 0.5, 6)
        assert cfg == RunConfig()

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(overrides={"gamma": "1.5"})
        assert exc.value.field == "gamma"

    @pytest.mark.parametrize("key,val", [("n_agents", "0"), ("zeta", "0"), ("xi", "-1"),
                                         ("stretch", "cubic")])
    def test_range_errors_name_field(self, key, val):
        with pytest.raises(ConfigError) as exc:
            parse_config(overrides={key: val})
        assert exc.value.field == key

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(overrides={"colour": "red"})
        assert exc.value.field == "colour"

    def test_flag_overrides_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\ngamma = 0.1\nn-agents = 2\n")
        cfg = parse_config(p, {"gamma": "0.2"})
        assert cfg.gamma == 0.2 and cfg.n_agents == 2

    def test_types(self):
        cfg = parse_config(overrides={"no-conformal": "yes", "alpha": "0.1", "xi": "auto"})
        assert cfg.no_conformal is True and cfg.alpha == 0.1 and cfg.xi is None
        assert not cfg.calibrated
        with pytest.raises(ConfigError):
            parse_config(overrides={"seed": "x"})

    def test_output_dir_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "o"))
        assert output_dir() == tmp_path / "o"
        monkeypatch.delenv(OUTPUT_ENV)
        assert output_dir() == Path("results")


class TestGenerate:
    def test_intersection_layout(self, tmp_path):
        [p] = generate_scenarios("intersection", 1, 7, tmp_path)
        sc = Scenario.load(p)
        assert len(sc.agents) == 2 and sc.ego_id in sc.agents and sc.goal is not None
        ego = sc.agents[sc.ego_id]
        other = sc.agents[sc.others[0]]
        assert abs(math.cos(ego[0, 3])) > 0.9 and abs(math.sin(other[0, 3])) > 0.9

    def test_byte_identical(self, tmp_path):
        for kind in ("intersection", "corridor", "random-constant-turn", "shifting-noise"):
            a = generate_scenarios(kind, 2, 11, tmp_path / "a")
            b = generate_scenarios(kind, 2, 11, tmp_path / "b")
            assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_seed_changes_output(self, tmp_path):
        a = generate_scenarios("intersection", 1, 1, tmp_path / "a")[0].read_bytes()
        b = generate_scenarios("intersection", 1, 2, tmp_path / "b")[0].read_bytes()
        assert a != b

    def test_constant_turn_regenerable(self, tmp_path):
        [p] = generate_scenarios("random-constant-turn", 1, 3, tmp_path, n_agents=5)
        sc = Scenario.load(p)
        assert len(sc.agents) == 5
        for aid, states in sc.agents.items():
            u = sc.controls[aid]
            s = AgentState.from_array(states[0])
            for j in range(len(u)):
                s = dubins_step(s, Control(*u[j]), sc.dt)
                ref = states[j + 1]
                assert np.allclose(s.as_array()[:3], ref[:3], atol=1e-6)
                d = math.remainder(s.theta - ref[3], 2 * math.pi)
                assert abs(d) <= 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_scenario("roundabout", 0)

    def test_round_trip(self, tmp_path):
        for kind in ("corridor", "random-constant-turn"):
            [p] = generate_scenarios(kind, 1, 4, tmp_path)
            text = p.read_text()
            assert Scenario.from_json(json.loads(text)).dumps() == text


class TestTables:
    def test_mean_se(self):
        assert mean_se([0.5]) == (0.5, 0.0)
        m, se = mean_se([1.0, 2.0, 3.0, None])
        assert m == 2.0 and se == pytest.approx(1.0 / math.sqrt(3))
        assert all(math.isnan(v) for v in mean_se([]))

    def test_hand_built_logs(self, tmp_path):
        agent = {"a": [[0.0, 0.0]] * 3}
        logs = [blank_log(agent, {0: (8.0, 0.0), 1: (5.0, 0.0)}, [(4.0, 0), (2.0, 0), (9, 0)],
                          goal=(-2.0, 0.0), eval_start=0, eval_end=1),
                blank_log(agent, {0: (3.0, 0.0), 1: (1.0, 0.0)}, [(6.0, 0), (3.0, 0), (9, 0)],
                          goal=(3.0, 4.0), eval_start=0, eval_end=1)]
        results = [scene_metrics(lg) for lg in logs]
        # Progress: 1 - 7/10 and 1 - 4.1231/4; conservatism 5/2 and 1/3; collisions 0 and 1.
        p = [1 - 7 / 10, 1 - math.hypot(2.0, 4.0) / 4.0]
        c = [5.0 / 2.0, 1.0 / 3.0]
        rows = planning_table(results, True)
        assert [r["progress"] for r in rows[:2]] == pytest.approx(p, abs=1e-15)
        assert [r["conservatism"] for r in rows[:2]] == pytest.approx(c, abs=1e-15)
        assert [r["collision"] for r in rows[:2]] == [0.0, 1.0]
        assert rows[2]["progress"] == pytest.approx(sum(p) / 2)
        assert rows[3]["collision"] == pytest.approx(0.5)
        write_csv(tmp_path / "planning.csv", PLANNING_COLUMNS, rows)
        got = _read(tmp_path / "planning.csv")
        assert float(got[0]["conservatism"]) == pytest.approx(2.5)
        assert [g["scene"] for g in got] == ["hand", "hand", "mean", "se"]

    def test_golden_schema(self, tmp_path):
        res = [SceneResult("s1", [1.0, 0.5], [1.0, 0.75], [4.0, 9.0], 0.5, False, 1.25),
               SceneResult("s2", [0.5, None], [1.0, 0.5], [2.0, None], 0.25, True, None),
               SceneResult("s3", error="ValueError: broken")]
        write_csv(tmp_path / "coverage.csv", COVERAGE_COLUMNS, coverage_table(res, 2, True))
        write_csv(tmp_path / "planning.csv", PLANNING_COLUMNS, planning_table(res, True))
        for name in ("coverage.csv", "planning.csv"):
            assert (tmp_path / name).read_text() == (GOLDEN / name).read_text()


class TestRunBatch:
    def test_single_scene_se_zero(self, short_scene, tmp_path):
        cfg = parse_config(overrides=FAST)
        cov, _ = run_batch(cfg, [short_scene], tmp_path / "out", render=False)
        rows = _read(tmp_path / "out" / "coverage.csv")
        assert [int(r["step"]) for r in rows] == list(range(1, 7))
        assert all(float(r["interval_coverage_se"]) == 0.0 for r in rows)
        assert all(r["coverage_mean"] == "" for r in rows)
        assert (tmp_path / "out" / "episode-shifting-noise-0-000.json").exists()

    def test_ablation_tag(self, short_scene, tmp_path):
        cfg = parse_config(overrides={**FAST, "no_conformal": "true"})
        run_batch(cfg, [short_scene], tmp_path / "out", render=False)
        for name in ("coverage.csv", "planning.csv"):
            rows = _read(tmp_path / "out" / name)
            assert rows and all(r["calibrated"] == "false" for r in rows)

    def test_failure_recorded(self, short_scene, tmp_path):
        bad = short_scene.parent / "broken.json"
        bad.write_text('{"dt": 0.5}')
        cfg = parse_config(overrides=FAST)
        run_batch(cfg, str(short_scene.parent / "*.json"), tmp_path / "out", render=False)
        rows = {r["scene"]: r for r in _read(tmp_path / "out" / "planning.csv")}
        assert rows["broken"]["error"].startswith("load:")
        assert rows["shifting-noise-0-000"]["error"] == ""

    def test_no_match(self, tmp_path):
        with pytest.raises(ValueError):
            run_batch(RunConfig(), str(tmp_path / "none*.json"), tmp_path)

    def test_outputs_with_render(self, tmp_path):
        sc = make_scenario("intersection", 1, 0, calib_steps=2, eval_steps=2)
        p = tmp_path / "scene.json"
        sc.save(p)
        run_batch(RunConfig(calibration_sets=False), [p], tmp_path / "out")
        out = tmp_path / "out"
        t = 7 + sc.calib_steps
        assert (out / f"scene-{sc.scene_id}-t{t}.svg").exists()
        assert (out / "coverage.svg").exists()
        summary = json.loads((out / f"episode-{sc.scene_id}.json").read_text())
        assert summary["metrics"]["collision"] is False
        rows = _read(out / "coverage.csv")
        # Without calibration-time sets only offsets below eval_steps have scored sets.
        assert [r["coverage_mean"] != "" for r in rows] == [True] + [False] * 5


class TestMain:
    def test_show_config(self, capsys):
        assert main(["show-config", "--set", "gamma=0.1"]) == 0
        assert "gamma = 0.1" in capsys.readouterr().out

    def test_bad_config_exit_code(self, capsys):
        assert main(["show-config", "--set", "gamma=1.5"]) == 2
        assert "gamma" in capsys.readouterr().err

    def test_generate_and_run(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "res"))
        assert main(["generate", "shifting-noise", "--count", "2", "--seed", "5",
                     "--calib-steps", "6", "--eval-steps", "4"]) == 0
        files = sorted((tmp_path / "res" / "scenarios").glob("*.json"))
        assert len(files) == 2
        assert main(["run", str(tmp_path / "res" / "scenarios" / "*.json"), "--no-render",
                     "--set", "compute_sets=false", "--set", "plan=false"]) == 0
        assert (tmp_path / "res" / "coverage.csv").exists()
        assert "step,coverage_mean" in capsys.readouterr().out

    def test_render(self, tmp_path):
        sc = make_scenario("intersection", 1, 0, calib_steps=2, eval_steps=1)
        p = tmp_path / "s.json"
        sc.save(p)
        assert main(["render", str(p), "--out", str(tmp_path / "x.svg"),
                     "--set", "calibration_sets=false"]) == 0
        assert (tmp_path / "x.svg").read_text().startswith("<?xml")
        assert main(["render", str(p), "--t", "999", "--out", str(tmp_path / "y.svg")]) == 2
