"""Command-line front end: scenario generation, batch runs and rendering.

Batch outputs (all deterministic for a fixed config and scenario set):

``coverage.csv``
    ``step, coverage_mean, coverage_se, interval_coverage_mean,
    interval_coverage_se, area_mean, area_se, calibrated`` with one row per
    prediction step. ``coverage`` scores the spatial sets, ``interval_coverage``
    the control intervals; cells are empty when a scene set has no value.
``planning.csv``
    ``scene, progress, collision, conservatism, calibrated, error`` with one
    row per scene followed by ``mean`` and ``se`` rows.
``episode-<scene>.json``
    Episode digest with metrics.
``scene-<scene>-t<t>.svg``
    Rendering of the first evaluation step.
``coverage.svg``
    Mean per-step coverage.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, output_dir, parse_config
from .harness import (
    EpisodeLog,
    Scenario,
    collision_check,
    conservatism,
    coverage_rate,
    interval_coverage_rate,
    mean_area,
    progress,
    run_episode,
)
from .report import render_coverage, render_scene
from .scenarios import FAMILIES, generate_scenarios

log = logging.getLogger("calibreach")

COVERAGE_COLUMNS = ("step", "coverage_mean", "coverage_se", "interval_coverage_mean",
                    "interval_coverage_se", "area_mean", "area_se", "calibrated")
PLANNING_COLUMNS = ("scene", "progress", "collision", "conservatism", "calibrated", "error")


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error; a single sample has standard error 0."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    if len(v) == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return "" if math.isnan(x) else format(x, ".10g")
    return str(x)


@dataclass
class SceneResult:
    """Metrics of one episode; ``error`` is set when the episode failed."""

    scene: str
    coverage: list = field(default_factory=list)
    interval_coverage: list = field(default_factory=list)
    area: list = field(default_factory=list)
    progress: float | None = None
    collision: bool | None = None
    conservatism: float | None = None
    error: str | None = None


def _try(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return None


def scene_metrics(lg: EpisodeLog) -> SceneResult:
    """Per-step and planning metrics of one log; undefined values are ``None``."""
    ks = range(1, lg.horizon + 1)
    res = SceneResult(lg.scene_id,
                      [_try(coverage_rate, lg, k) for k in ks],
                      [_try(interval_coverage_rate, lg, k) for k in ks],
                      [_try(mean_area, lg, k) for k in ks])
    if lg.ego_xy:
        res.collision = collision_check(lg)
        res.progress = _try(progress, lg)
        res.conservatism = _try(conservatism, lg)
    return res


def coverage_table(results: list[SceneResult], horizon: int, calibrated: bool) -> list[dict]:
    ok = [r for r in results if r.error is None]
    rows = []
    for k in range(horizon):
        cm, cs = mean_se(r.coverage[k] for r in ok)
        im, is_ = mean_se(r.interval_coverage[k] for r in ok)
        am, as_ = mean_se(r.area[k] for r in ok)
        rows.append({"step": k + 1, "coverage_mean": cm, "coverage_se": cs,
                     "interval_coverage_mean": im, "interval_coverage_se": is_,
                     "area_mean": am, "area_se": as_, "calibrated": calibrated})
    return rows


def planning_table(results: list[SceneResult], calibrated: bool) -> list[dict]:
    rows = [{"scene": r.scene, "progress": r.progress,
             "collision": None if r.collision is None else float(r.collision),
             "conservatism": r.conservatism, "calibrated": calibrated, "error": r.error}
            for r in results]
    stats = {c: mean_se(r[c] for r in rows) for c in ("progress", "collision", "conservatism")}
    for i, name in enumerate(("mean", "se")):
        row = {"scene": name, "calibrated": calibrated, "error": None}
        row.update({c: stats[c][i] for c in stats})
        rows.append(row)
    return rows


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _run_one(args) -> tuple[SceneResult, dict | None, dict]:
    path, cfg, render = args
    svgs = {}
    try:
        sc = Scenario.load(path)
    except (OSError, ValueError) as exc:
        return SceneResult(Path(path).stem, error=f"load: {exc}"), None, svgs
    try:
        lg = run_episode(sc, cfg)
    except Exception as exc:  # noqa: BLE001 - recorded per scene, batch continues
        return SceneResult(sc.scene_id, error=f"{type(exc).__name__}: {exc}"), None, svgs
    res = scene_metrics(lg)
    summary = lg.summary()
    summary["metrics"] = {"coverage": res.coverage, "interval_coverage": res.interval_coverage,
                          "area": res.area, "progress": res.progress,
                          "collision": res.collision, "conservatism": res.conservatism}
    if render:
        t = lg.eval_start
        svgs[f"scene-{sc.scene_id}-t{t}.svg"] = render_scene(lg, t)
    return res, summary, svgs


def resolve_scenarios(patterns) -> list[Path]:
    """Expand glob patterns into a sorted, de-duplicated path list."""
    if isinstance(patterns, (str, Path)):
        patterns = [patterns]
    found = set()
    for p in patterns:
        matches = glob.glob(str(p))
        found.update(matches if matches else ([str(p)] if Path(p).exists() else []))
    return sorted(Path(p) for p in found)


def run_batch(cfg: RunConfig, scenarios, out_dir, render: bool = True,
              workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Run every scenario and write the batch outputs to ``out_dir``.

    Episode failures are recorded in ``planning.csv`` and the batch continues.

    Returns:
        The coverage and planning table rows.

    Raises:
        ValueError: if no scenario matches.
    """
    paths = resolve_scenarios(scenarios)
    if not paths:
        raise ValueError(f"no scenarios match {scenarios!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(p, cfg, render) for p in paths]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            outcomes = list(ex.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]

    results = []
    for res, summary, svgs in outcomes:
        results.append(res)
        if res.error:
            log.warning("scene %s failed: %s", res.scene, res.error)
        if summary is not None:
            (out / f"episode-{res.scene}.json").write_text(
                json.dumps(summary, sort_keys=True, default=_json_default) + "\n")
        for name, text in svgs.items():
            (out / name).write_text(text)

    cov = coverage_table(results, cfg.horizon, cfg.calibrated)
    plan = planning_table(results, cfg.calibrated)
    write_csv(out / "coverage.csv", COVERAGE_COLUMNS, cov)
    write_csv(out / "planning.csv", PLANNING_COLUMNS, plan)
    if render:
        ys = [r["coverage_mean"] if not math.isnan(r["coverage_mean"])
              else r["interval_coverage_mean"] for r in cov]
        tgt = 1.0 - cfg.gamma if cfg.alpha is None else 1.0 - cfg.alpha
        (out / "coverage.svg").write_text(
            render_coverage([r["step"] for r in cov], ys, tgt,
                            "calibrated" if cfg.calibrated else "uncalibrated"))
    return cov, plan


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(p, "expected key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="calibreach",
                                 description="Calibrated reachability planning experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic scenario JSON files")
    g.add_argument("kind", choices=FAMILIES)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="directory (default: <output>/scenarios)")
    g.add_argument("--calib-steps", type=int)
    g.add_argument("--eval-steps", type=int)
    g.add_argument("--n-agents", type=int, help="random-constant-turn and shifting-noise only")

    r = sub.add_parser("run", help="run a scenario batch")
    r.add_argument("scenarios", nargs="+", help="scenario files or glob patterns")
    r.add_argument("--config", help="key=value configuration file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--no-conformal", action="store_true", default=None)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default=None, help="output directory (env CALIBREACH_OUTPUT_DIR)")
    r.add_argument("--no-render", action="store_true")
    r.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("render", help="run one scenario and render a timestep")
    s.add_argument("scenario")
    s.add_argument("--t", type=int, help="timestep index (default: first evaluation step)")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", required=True, help="SVG path")

    c = sub.add_parser("show-config", help="print the resolved configuration")
    c.add_argument("--config")
    c.add_argument("--set", action="append", metavar="KEY=VALUE")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            kw = {k: v for k, v in (("calib_steps", args.calib_steps),
                                    ("eval_steps", args.eval_steps),
                                    ("n_agents", args.n_agents)) if v is not None}
            out = Path(args.out) if args.out else output_dir() / "scenarios"
            for p in generate_scenarios(args.kind, args.count, args.seed, out, **kw):
                print(p)
            return 0
        over = _overrides(args.set)
        if args.command == "run":
            if args.no_conformal:
                over["no_conformal"] = True
            if args.seed is not None:
                over["seed"] = args.seed
        cfg = parse_config(args.config, over)
        if args.command == "show-config":
            for k, v in cfg.as_dict().items():
                print(f"{k} = {v}")
            return 0
        if args.command == "run":
            out = Path(args.out) if args.out else output_dir()
            cov, plan = run_batch(cfg, args.scenarios, out, not args.no_render, args.workers)
            print((out / "coverage.csv").read_text(), end="")
            print((out / "planning.csv").read_text(), end="")
            return 0
        sc = Scenario.load(args.scenario)
        lg = run_episode(sc, cfg)
        t = lg.eval_start if args.t is None else args.t
        Path(args.out).write_text(render_scene(lg, t))
        print(args.out)
        return 0
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
