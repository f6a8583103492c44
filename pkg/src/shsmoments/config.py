"""Scenario configuration: a single INI-style file validated up front.

Every experiment the CLI can run is described by sections [model], [init],
[propagation], [mc], [filter], [output]; all numeric fields are checked
against module preconditions before any compute starts, and errors carry
the offending field path.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .filtering import FilterConfig, MeasurementModel, position_measurement_model
from .mcref import McConfig
from .model import (
    BouncingBallParams,
    BoxDomain,
    GuardFacet,
    ShsModel,
    bouncing_ball_model,
)
from .polyalg import Polynomial, parse_polynomial

_KNOWN_KEYS = {
    "model": {
        "kind", "gravity", "drag", "noise", "restitution",
        "domain_lower", "domain_upper", "dimension", "drift", "diffusion",
        "guard_axis", "guard_level", "guard_normal_sign", "guard_bounds",
        "reset_a", "reset_b",
    },
    "init": {"mean", "std"},
    "propagation": {"order", "dt", "t_start", "t_end", "refit_every",
                    "state_points", "guard_points"},
    "mc": {"trajectories", "dt", "record_stride", "batch_size"},
    "filter": {"order", "residual_order", "noise_bias", "noise_sigma",
               "measurement_interval", "t_start", "t_end", "dt",
               "state_points", "guard_points", "map_grid", "output_stride",
               "schedule_csv", "truth_dt", "snapshot_times"},
    "output": {"directory", "stride", "seed"},
}


def _get(parser, section, key, cast, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"{section}.{key}: required field missing")
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except ConfigError:
        raise
    except Exception as err:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({err})") from err


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in raw.split(",") if p.strip())


def _positive(name):
    def cast(raw):
        v = float(raw)
        if v <= 0:
            raise ConfigError(f"{name}: must be positive, got {v}")
        return v
    return cast


@dataclass
class PropagationSettings:
    order: int = 4
    dt: float = 1e-3
    t_start: float = 0.0
    t_end: float = 3.0
    refit_every: int = 1
    state_points: int = 64
    guard_points: int = 64


@dataclass
class FilterSettings:
    order: int = 4
    residual_order: int = 4
    noise_bias: float = 0.05
    noise_sigma: float = 0.1
    measurement_interval: float = 0.1
    t_start: float = 0.0
    t_end: float = 2.0
    dt: float = 1e-3
    state_points: int = 128
    guard_points: int = 96
    map_grid: int = 200
    output_stride: int = 10
    schedule_csv: Optional[str] = None
    truth_dt: float = 1e-4
    snapshot_times: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)


@dataclass
class OutputSettings:
    directory: str = "out"
    stride: int = 10
    seed: int = 20240817


@dataclass
class ScenarioConfig:
    """Validated scenario: model plus per-command settings."""

    model: ShsModel
    initial_mean: tuple[float, ...]
    initial_std: tuple[float, ...]
    propagation: PropagationSettings
    mc: McConfig
    filter: FilterSettings
    output: OutputSettings
    source_fields: dict = field(default_factory=dict)

    def measurement_model(self) -> MeasurementModel:
        return position_measurement_model(
            self.model.dimension,
            self.filter.noise_bias,
            self.filter.noise_sigma,
            order=self.filter.residual_order,
        )

    def filter_config(self) -> FilterConfig:
        f = self.filter
        return FilterConfig(
            measurement=self.measurement_model(),
            t_span=(f.t_start, f.t_end),
            dt=f.dt,
            state_points=f.state_points,
            guard_points=f.guard_points,
            output_stride=f.output_stride,
            map_grid=f.map_grid,
        )


def _build_generic_model(parser) -> ShsModel:
    n = _get(parser, "model", "dimension", int, required=True)
    drift_raw = _get(parser, "model", "drift", str, required=True)
    drift = tuple(parse_polynomial(p.strip(), n) for p in drift_raw.split(";"))
    if len(drift) != n:
        raise ConfigError(f"model.drift: expected {n} entries, got {len(drift)}")
    diff_raw = _get(parser, "model", "diffusion", str, required=True)
    rows = [r.strip() for r in diff_raw.split(";")]
    if len(rows) != n:
        raise ConfigError(f"model.diffusion: expected {n} rows, got {len(rows)}")
    diffusion = tuple(
        tuple(parse_polynomial(p.strip(), n) for p in row.split("|")) for row in rows
    )
    lower = _get(parser, "model", "domain_lower", _floats, required=True)
    upper = _get(parser, "model", "domain_upper", _floats, required=True)
    domain = BoxDomain(np.array(lower), np.array(upper))

    guard = None
    if parser.has_option("model", "guard_axis"):
        axis = _get(parser, "model", "guard_axis", int)
        level = _get(parser, "model", "guard_level", float, default=0.0)
        sign = _get(parser, "model", "guard_normal_sign", float, default=-1.0)
        bounds_raw = _get(parser, "model", "guard_bounds", str, default="")
        halfspace = []
        if bounds_raw:
            for part in bounds_raw.split(";"):
                lo, hi = (float(v) for v in part.split(","))
                halfspace.append((lo, hi))
        else:
            halfspace = [(-np.inf, np.inf)] * (n - 1)
        normal = np.zeros(n)
        normal[axis] = np.sign(sign)
        guard = GuardFacet(axis=axis, level=level, halfspace=tuple(halfspace),
                           outward_normal=normal)
    reset_a_raw = _get(parser, "model", "reset_a", str, default=None)
    if reset_a_raw is not None:
        reset_A = np.array([[float(v) for v in row.split(",")]
                            for row in reset_a_raw.split(";")])
    else:
        reset_A = np.eye(n)
    reset_b = np.array(_get(parser, "model", "reset_b", _floats,
                            default=(0.0,) * n))
    return ShsModel(dimension=n, drift=drift, diffusion=diffusion, guard=guard,
                    reset_A=reset_A, reset_b=reset_b, domain=domain)


def load_config(path: str) -> ScenarioConfig:
    # ';' separates list entries in polynomial/matrix fields, so only '#'
    # starts an inline comment.
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"{section}: unknown section")
        for key in parser.options(section):
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"{section}.{key}: unknown field")

    kind = _get(parser, "model", "kind", str, default="bouncing_ball")
    if kind == "bouncing_ball":
        kwargs = {}
        for name, key in (("gravity", "gravity"), ("drag", "drag"),
                          ("noise", "noise"), ("restitution", "restitution")):
            value = _get(parser, "model", key, float)
            if value is not None:
                kwargs[name] = value
        lower = _get(parser, "model", "domain_lower", _floats)
        upper = _get(parser, "model", "domain_upper", _floats)
        if lower is not None:
            kwargs["domain_lower"] = lower
        if upper is not None:
            kwargs["domain_upper"] = upper
        try:
            params = BouncingBallParams(**kwargs)
        except ValueError as err:
            raise ConfigError(f"model: {err}") from err
        model = bouncing_ball_model(params)
    elif kind == "generic":
        model = _build_generic_model(parser)
    else:
        raise ConfigError(f"model.kind: unknown kind {kind!r}")

    n = model.dimension
    mean = _get(parser, "init", "mean", _floats, default=(1.5, 0.0)[:n])
    std = _get(parser, "init", "std", _floats, default=(0.12, 0.3)[:n])
    if len(mean) != n or len(std) != n:
        raise ConfigError("init.mean/std: dimension mismatch with model")
    if any(s < 0 for s in std):
        raise ConfigError("init.std: must be non-negative")

    prop = PropagationSettings(
        order=_get(parser, "propagation", "order", int, default=4),
        dt=_get(parser, "propagation", "dt", _positive("propagation.dt"), default=1e-3),
        t_start=_get(parser, "propagation", "t_start", float, default=0.0),
        t_end=_get(parser, "propagation", "t_end", float, default=3.0),
        refit_every=_get(parser, "propagation", "refit_every", int, default=1),
        state_points=_get(parser, "propagation", "state_points", int, default=64),
        guard_points=_get(parser, "propagation", "guard_points", int, default=64),
    )
    if prop.order < 1:
        raise ConfigError("propagation.order: must be >= 1")
    if prop.t_end <= prop.t_start:
        raise ConfigError("propagation.t_end: must exceed t_start")
    if prop.refit_every < 1:
        raise ConfigError("propagation.refit_every: must be >= 1")

    out = OutputSettings(
        directory=_get(parser, "output", "directory", str, default="out"),
        stride=_get(parser, "output", "stride", int, default=10),
        seed=_get(parser, "output", "seed", int, default=20240817),
    )
    if out.stride < 1:
        raise ConfigError("output.stride: must be >= 1")

    mc = McConfig(
        trajectories=_get(parser, "mc", "trajectories", int, default=200000),
        dt=_get(parser, "mc", "dt", _positive("mc.dt"), default=1e-4),
        seed=out.seed,
        initial_mean=mean,
        initial_std=std,
        t_span=(prop.t_start, prop.t_end),
        record_stride=_get(parser, "mc", "record_stride", int, default=100),
        batch_size=_get(parser, "mc", "batch_size", int, default=32768),
    )

    filt = FilterSettings(
        order=_get(parser, "filter", "order", int, default=4),
        residual_order=_get(parser, "filter", "residual_order", int, default=4),
        noise_bias=_get(parser, "filter", "noise_bias", float, default=0.05),
        noise_sigma=_get(parser, "filter", "noise_sigma", float, default=0.1),
        measurement_interval=_get(parser, "filter", "measurement_interval",
                                  _positive("filter.measurement_interval"), default=0.1),
        t_start=_get(parser, "filter", "t_start", float, default=0.0),
        t_end=_get(parser, "filter", "t_end", float, default=2.0),
        dt=_get(parser, "filter", "dt", _positive("filter.dt"), default=1e-3),
        state_points=_get(parser, "filter", "state_points", int, default=128),
        guard_points=_get(parser, "filter", "guard_points", int, default=96),
        map_grid=_get(parser, "filter", "map_grid", int, default=200),
        output_stride=_get(parser, "filter", "output_stride", int, default=10),
        schedule_csv=_get(parser, "filter", "schedule_csv", str, default=None),
        truth_dt=_get(parser, "filter", "truth_dt", _positive("filter.truth_dt"),
                      default=1e-4),
        snapshot_times=_get(parser, "filter", "snapshot_times", _floats,
                            default=(0.5, 1.0, 1.5, 2.0)),
    )
    if filt.t_end <= filt.t_start:
        raise ConfigError("filter.t_end: must exceed t_start")
    if filt.noise_sigma < 0:
        raise ConfigError("filter.noise_sigma: must be non-negative")
    if filt.residual_order > 8:
        raise ConfigError("filter.residual_order: capped at 8")

    fields = {}
    for section in parser.sections():
        for key in parser.options(section):
            fields[f"{section}.{key}"] = parser.get(section, key)

    return ScenarioConfig(
        model=model,
        initial_mean=mean,
        initial_std=std,
        propagation=prop,
        mc=mc,
        filter=filt,
        output=out,
        source_fields=fields,
    )
