"""Command-line entry point: scenario experiments with deterministic,
machine-readable outputs.

Commands: propagate (moment prediction), mc (Monte Carlo reference),
compare (normalized rollout-error heat map), filter (full estimation run),
map (point estimates from MED checkpoints). Exit codes: 0 success,
2 configuration/schema error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import platform
import sys
import time
from typing import Optional

import numpy as np

from . import __version__, io
from .config import ScenarioConfig, load_config
from .errors import (
    ClosureViolationError,
    ConfigError,
    DegenerateUpdateError,
    IntegrationError,
    NonRealizableError,
    SchemaError,
    ShsError,
)
from .filtering import MeasurementRecord, run_filter
from .mcref import ensemble_moments, normalized_rollout_error, simulate_path, trajectory_generator
from .polyalg import gaussian_product_moments
from .propagate import propagate
from .quad import tensor_rule

# Reserved per-seed substreams; ordinary Monte Carlo trajectories use
# indices 0..N-1, so these never collide.
TRUTH_STREAM = 2**32
NOISE_STREAM = 2**32 + 1


def _write_manifest(out_dir: str, command: str, fields: dict, seed: int,
                    status: str, error: Optional[str], wall: float) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "seed": seed,
        "status": status,
    }
    if error:
        manifest["error"] = error.replace("\n", " ")
    for key, value in sorted(fields.items()):
        manifest[f"config.{key}"] = value
    manifest["wall_time_s"] = f"{wall:.3f}"
    io.atomic_write(os.path.join(out_dir, "manifest.txt"), io.manifest_text(manifest))


def _run_command(command: str, out_dir: str, fields: dict, seed: int, worker) -> None:
    """Run a command body and always leave a manifest, even on failure."""
    t0 = time.time()
    try:
        worker()
    except BaseException as err:
        _write_manifest(out_dir, command, fields, seed, "error",
                        f"{type(err).__name__}: {err}", time.time() - t0)
        raise
    _write_manifest(out_dir, command, fields, seed, "ok", None, time.time() - t0)


def _initial_moments(cfg: ScenarioConfig, order: int):
    return gaussian_product_moments(cfg.initial_mean, cfg.initial_std, order)


def cmd_propagate(cfg: ScenarioConfig, out_dir: str, quiet: bool = False) -> None:
    prop = cfg.propagation

    def worker():
        m0 = _initial_moments(cfg, prop.order)
        rule = tensor_rule(cfg.model.domain, prop.state_points)
        traj = propagate(cfg.model, m0, (prop.t_start, prop.t_end), prop.dt,
                         refit_every=prop.refit_every, state_rule=rule,
                         guard_points=prop.guard_points)
        stride = cfg.output.stride
        io.atomic_write(os.path.join(out_dir, "moments.csv"),
                        io.trajectory_to_csv(traj, stride))
        io.atomic_write(os.path.join(out_dir, "flux.csv"),
                        io.flux_to_csv(traj, stride))
        picked = sorted(set(list(range(0, len(traj.times), stride)) + [len(traj.times) - 1]))
        io.atomic_write(
            os.path.join(out_dir, "checkpoints.med"),
            io.checkpoints_to_text((float(traj.times[i]), traj.med[i]) for i in picked),
        )
        if not quiet:
            print(f"propagate: {len(traj.times)} steps, "
                  f"{int(traj.fit_failed.sum())} refit fallbacks -> {out_dir}")

    _run_command("propagate", out_dir, cfg.source_fields, cfg.output.seed, worker)


def cmd_mc(cfg: ScenarioConfig, out_dir: str, quiet: bool = False) -> None:
    def worker():
        ens = ensemble_moments(cfg.model, cfg.mc, cfg.propagation.order)
        io.atomic_write(os.path.join(out_dir, "ensemble.csv"), io.ensemble_to_csv(ens))
        io.atomic_write(os.path.join(out_dir, "excess_mass.csv"),
                        io.excess_mass_to_csv(ens))
        if not quiet:
            print(f"mc: {cfg.mc.trajectories} paths, max excess mass "
                  f"{float(ens.excess_mass_fraction.max()):.2e} -> {out_dir}")

    _run_command("mc", out_dir, cfg.source_fields, cfg.mc.seed, worker)


def cmd_compare(prop_csv: str, mc_csv: str, out_dir: str, quiet: bool = False) -> None:
    fields = {"propagated": prop_csv, "reference": mc_csv}

    def worker():
        with open(prop_csv) as fh:
            prop = io.read_moment_csv(fh.read())
        with open(mc_csv) as fh:
            ref = io.read_moment_csv(fh.read())
        if prop.indices != ref.indices:
            raise SchemaError(
                f"moment columns differ: {len(prop.indices)} vs {len(ref.indices)} "
                "(orders must match)"
            )
        err = normalized_rollout_error(prop, ref)
        io.atomic_write(os.path.join(out_dir, "heatmap.csv"), io.heatmap_to_csv(err))
        io.atomic_write(os.path.join(out_dir, "compare_summary.txt"),
                        io.compare_summary(err))
        if not quiet:
            print(f"compare: max={err.max_defined():.4f} mean={err.mean_defined():.4f} "
                  f"-> {out_dir}")

    _run_command("compare", out_dir, fields, 0, worker)


def build_filter_scenario(cfg: ScenarioConfig, seed: int):
    """Ground-truth path plus measurement schedule for the filter command.

    The truth path and its measurement noise draw from reserved
    counter-based substreams of the run seed, so scenarios are reproducible
    and independent of the Monte Carlo ensemble streams.
    """
    f = cfg.filter
    n = cfg.model.dimension
    rng_truth = trajectory_generator(seed, TRUTH_STREAM)
    x0 = np.array(cfg.initial_mean) + np.array(cfg.initial_std) * rng_truth.standard_normal(n)
    truth = simulate_path(cfg.model, x0, (f.t_start, f.t_end), f.truth_dt,
                          rng_stream=rng_truth, record_stride=10)
    if f.schedule_csv:
        with open(f.schedule_csv) as fh:
            schedule = io.read_schedule_csv(fh.read())
        for rec in schedule:
            if not f.t_start < rec.time <= f.t_end + 1e-12:
                raise ConfigError(
                    f"filter.schedule_csv: measurement at t={rec.time} outside span"
                )
    else:
        rng_noise = trajectory_generator(seed, NOISE_STREAM)
        schedule = []
        k = 1
        while True:
            t = f.t_start + k * f.measurement_interval
            if t > f.t_end + 1e-12:
                break
            i = int(np.argmin(np.abs(truth.times - t)))
            flip = 1.0 if rng_noise.random() < 0.5 else -1.0
            noise = f.noise_bias * flip + f.noise_sigma * rng_noise.standard_normal()
            schedule.append(MeasurementRecord(min(t, f.t_end), float(truth.states[i, 0] + noise)))
            k += 1
    return truth, schedule


def cmd_filter(cfg: ScenarioConfig, out_dir: str, quiet: bool = False) -> None:
    def worker():
        f = cfg.filter
        truth, schedule = build_filter_scenario(cfg, cfg.output.seed)
        m0 = _initial_moments(cfg, f.order)
        run = run_filter(cfg.model, m0, schedule, cfg.filter_config(),
                         truth=(truth.times, truth.states))
        io.atomic_write(os.path.join(out_dir, "filter.csv"),
                        io.filter_run_to_csv(run, truth=(truth.times, truth.states)))
        io.atomic_write(os.path.join(out_dir, "measurements.csv"),
                        io.schedule_to_csv(schedule))
        io.atomic_write(os.path.join(out_dir, "truth.csv"),
                        io.truth_path_to_csv(truth.times, truth.states))
        io.atomic_write(os.path.join(out_dir, "rmse_summary.txt"), io.rmse_summary(run))
        entries = []
        for t_snap in f.snapshot_times:
            i = int(np.argmin(np.abs(run.times - t_snap)))
            entries.append((float(run.times[i]), run.med[i]))
        io.atomic_write(os.path.join(out_dir, "checkpoints.med"),
                        io.checkpoints_to_text(entries))
        if not quiet:
            print(f"filter: pos_rmse={run.position_rmse:.4f} "
                  f"vel_rmse={run.velocity_rmse:.4f} -> {out_dir}")

    _run_command("filter", out_dir, cfg.source_fields, cfg.output.seed, worker)


def cmd_map(checkpoint_path: str, out_dir: str, at_time: Optional[float] = None,
            grid_points: int = 200, quiet: bool = False) -> None:
    from .filtering import map_estimate

    fields = {"checkpoint": checkpoint_path}
    if at_time is not None:
        fields["time"] = at_time

    def worker():
        with open(checkpoint_path) as fh:
            records = io.read_checkpoints(fh.read())
        if not records:
            raise SchemaError("checkpoint file holds no records")
        if at_time is not None:
            records = [min(records, key=lambda r: abs(r[0] - at_time))]
        n = records[0][1].dimension
        lines = ["time," + ",".join(f"x{i + 1}" for i in range(n))
                 + ",exponent_value,degenerate_flat"]
        for t, lam in records:
            est = map_estimate(lam, grid_points=grid_points)
            lines.append(
                repr(float(t)) + ","
                + ",".join(repr(float(v)) for v in est.point)
                + f",{est.exponent_value!r},{int(est.degenerate_flat)}"
            )
        io.atomic_write(os.path.join(out_dir, "map.csv"), "\n".join(lines) + "\n")
        if not quiet:
            print(f"map: {len(records)} estimates -> {out_dir}")

    _run_command("map", out_dir, fields, 0, worker)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shsmom",
        description="Moment propagation and max-entropy filtering for "
                    "stochastic hybrid systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="scenario configuration file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--quiet", action="store_true")

    common(sub.add_parser("propagate", help="moment prediction run"))
    common(sub.add_parser("mc", help="Monte Carlo reference ensemble"))
    p = sub.add_parser("compare", help="normalized rollout-error heat map")
    p.add_argument("propagated_csv")
    p.add_argument("reference_csv")
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true")
    common(sub.add_parser("filter", help="full filtering run"))
    p = sub.add_parser("map", help="point estimates from MED checkpoints")
    p.add_argument("checkpoint")
    p.add_argument("--time", type=float, default=None)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true")
    return parser


def _apply_overrides(cfg: ScenarioConfig, seed: Optional[int]) -> ScenarioConfig:
    if seed is None:
        return cfg
    out = dataclasses.replace(cfg.output, seed=seed)
    mc = dataclasses.replace(cfg.mc, seed=seed)
    return dataclasses.replace(cfg, output=out, mc=mc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("propagate", "mc", "filter"):
            cfg = _apply_overrides(load_config(args.config), args.seed)
            out_dir = args.out or cfg.output.directory
            worker = {"propagate": cmd_propagate, "mc": cmd_mc, "filter": cmd_filter}
            worker[args.command](cfg, out_dir, quiet=args.quiet)
        elif args.command == "compare":
            cmd_compare(args.propagated_csv, args.reference_csv,
                        args.out or "out", quiet=args.quiet)
        elif args.command == "map":
            cmd_map(args.checkpoint, args.out or "out", at_time=args.time,
                    grid_points=args.grid, quiet=args.quiet)
        return 0
    except (ConfigError, SchemaError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (NonRealizableError, DegenerateUpdateError, ClosureViolationError,
            IntegrationError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except ShsError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
