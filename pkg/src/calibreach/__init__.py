"""Calibrated forward reachability for multi-agent motion planning.

Forecast control sequences of nearby agents, calibrate per-step control
intervals online with quantile regression and a rolling conformal
parameter, turn them into forward reachable tubes on a grid, and plan the
ego vehicle through the remaining free space.
"""

from .config import ConfigError, RunConfig, parse_config
from .conformal import (
    ConformalState,
    ControlIntervalSequence,
    calibrated_interval,
    corrected_alpha,
    rolling_update,
    stretch,
)
from .core import AgentState, Control, ControlSequence, Trajectory, dubins_step, rollout
from .forecaster import ConstantControlGmm, Forecast, Forecaster, OracleNoise, make_forecaster
from .harness import (
    EpisodeLog,
    Scenario,
    collision_check,
    conservatism,
    coverage_rate,
    interval_coverage_rate,
    progress,
    run_episode,
)
from .planner import ObstacleSchedule, Plan, plan_motion
from .quantreg import QuantileBank, QuantileModel, pinball_loss, qr_predict, qr_update
from .reachability import Grid4, SpatialSet, ValueGrid, generate_tubes, project_xy
from .report import render_coverage, render_scene
from .scenarios import generate_scenarios, make_scenario

__version__ = "0.1.0"

__all__ = [
    "AgentState", "ConfigError", "ConformalState", "ConstantControlGmm", "Control",
    "ControlIntervalSequence", "ControlSequence", "EpisodeLog", "Forecast", "Forecaster",
    "Grid4", "ObstacleSchedule", "OracleNoise", "Plan", "QuantileBank", "QuantileModel",
    "RunConfig", "Scenario", "SpatialSet", "Trajectory", "ValueGrid", "calibrated_interval",
    "collision_check", "conservatism", "corrected_alpha", "coverage_rate", "dubins_step",
    "generate_scenarios", "generate_tubes", "interval_coverage_rate", "make_forecaster",
    "make_scenario", "parse_config",
    "pinball_loss", "plan_motion", "progress", "project_xy", "qr_predict", "qr_update",
    "render_coverage", "render_scene", "rollout", "rolling_update", "run_episode", "stretch",
]
