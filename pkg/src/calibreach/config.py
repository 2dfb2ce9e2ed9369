"""Run configuration: defaults, validation and ``key=value`` parsing."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

OUTPUT_ENV = "CALIBREACH_OUTPUT_DIR"

_FORECASTERS = ("constant-gmm", "oracle-noise")
_STRETCH = ("linear", "exponential")
_INIT = ("zeros", "random")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    """All tunable parameters of a run.

    ``alpha`` and ``xi`` default to ``None``: alpha is then derived from
    ``gamma`` and ``n_agents`` and xi is ``0.05`` times the forecaster's
    nominal error scale.
    """

    gamma: float = 0.05
    n_agents: int = 3
    alpha: float | None = None
    xi: float | None = None
    zeta: float = 0.01
    beta_init: str = "zeros"
    stretch: str = "linear"
    stretch_c: float = 1.0
    forecaster: str = "constant-gmm"
    noise_scale: float = 0.2
    noise_growth: float = 0.1
    gmm_std_u1: float = 0.3
    gmm_std_u2: float = 0.05
    gmm_offset_u1: float = 0.5
    gmm_offset_u2: float = 0.1
    history: int = 8
    horizon: int = 6
    dt: float = 0.5
    grid_nx: int = 41
    grid_ny: int = 41
    grid_nv: int = 11
    grid_ntheta: int = 25
    grid_half_width: float = 20.0
    grid_v_min: float = -2.0
    grid_v_max: float = 20.0
    interior_depth: float = 4.0
    ego_u1_min: float = -4.0
    ego_u1_max: float = 2.0
    ego_u2_min: float = -0.6
    ego_u2_max: float = 0.6
    r_ego: float = 2.0
    r_agent: float = 2.0
    goal_tol: float = 1.5
    no_conformal: bool = False
    no_covariance_features: bool = False
    per_agent_state: bool = False
    compute_sets: bool = True
    calibration_sets: bool = True
    plan: bool = True
    seed: int = 0

    def __post_init__(self):
        validate(self)

    @property
    def ego_box(self) -> tuple[float, float, float, float]:
        return (self.ego_u1_min, self.ego_u1_max, self.ego_u2_min, self.ego_u2_max)

    @property
    def grid_shape(self) -> tuple[int, int, int, int]:
        return (self.grid_nx, self.grid_ny, self.grid_nv, self.grid_ntheta)

    @property
    def calibrated(self) -> bool:
        return not self.no_conformal

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _check(cond: bool, field: str, msg: str):
    if not cond:
        raise ConfigError(field, msg)


def validate(c: RunConfig) -> None:
    """Raise :class:`ConfigError` naming the first out-of-range field."""
    _check(0.0 <= c.gamma < 1.0, "gamma", "must lie in [0, 1)")
    _check(c.n_agents >= 1, "n_agents", "must be >= 1")
    _check(c.alpha is None or 0.0 < c.alpha < 1.0, "alpha", "must lie in (0, 1)")
    _check(c.xi is None or c.xi > 0, "xi", "must be > 0")
    _check(c.zeta > 0, "zeta", "must be > 0")
    _check(c.beta_init in _INIT, "beta_init", f"must be one of {_INIT}")
    _check(c.stretch in _STRETCH, "stretch", f"must be one of {_STRETCH}")
    _check(c.stretch_c > 0, "stretch_c", "must be > 0")
    _check(c.forecaster in _FORECASTERS, "forecaster", f"must be one of {_FORECASTERS}")
    for name in ("noise_scale", "noise_growth", "gmm_std_u1", "gmm_std_u2",
                 "interior_depth", "r_ego", "r_agent"):
        _check(getattr(c, name) >= 0, name, "must be >= 0")
    _check(c.history >= 2, "history", "must be >= 2")
    _check(c.horizon >= 1, "horizon", "must be >= 1")
    _check(c.dt > 0, "dt", "must be > 0")
    for name in ("grid_nx", "grid_ny", "grid_nv", "grid_ntheta"):
        _check(getattr(c, name) >= 3, name, "must be >= 3")
    _check(c.grid_half_width > 0, "grid_half_width", "must be > 0")
    _check(c.grid_v_max > c.grid_v_min, "grid_v_max", "must exceed grid_v_min")
    _check(c.ego_u1_max >= c.ego_u1_min, "ego_u1_max", "must be >= ego_u1_min")
    _check(c.ego_u2_max >= c.ego_u2_min, "ego_u2_max", "must be >= ego_u2_min")
    _check(c.goal_tol > 0, "goal_tol", "must be > 0")
    _check(c.seed >= 0, "seed", "must be >= 0")


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: Any) -> Any:
    typ = str(_TYPES[key])
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if "None" in typ and text.lower() in ("", "none", "auto"):
            return None
        if typ.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ}") from None
    return text


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected key=value, got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def parse_config(path: str | os.PathLike | None = None,
                 overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Build a validated config from an optional file plus overrides.

    Override values win over file values. Unknown keys and out-of-range
    values raise :class:`ConfigError` naming the field.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        raw.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k.replace("-", "_")] = v
    values = {}
    for key, val in raw.items():
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _convert(key, val)
    return RunConfig(**values)


def output_dir(default: str | os.PathLike = "results") -> Path:
    """Output directory from ``CALIBREACH_OUTPUT_DIR`` or ``default``."""
    return Path(os.environ.get(OUTPUT_ENV) or default)
