"""Monte Carlo oracle: Euler-Maruyama simulation of the hybrid SDE with
guard detection and resets, ensemble moment estimation, and rollout-error
metrics.

Each trajectory draws from its own counter-based stream keyed by
(seed, trajectory index), so any path is reproducible in isolation and the
ensemble is bit-identical for a fixed configuration regardless of how the
work is batched in time. Reductions run in a fixed order.
"""

from __future__ import annotations

import os

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import SchemaError
from .model import ShsModel
from .polyalg import (
    MomentVector,
    MultiIndex,
    enumerate_multiindices,
    poly_eval_many,
)

# Steps per pre-drawn noise block; the normal stream is identical however it
# is chunked, this only bounds memory.
_NOISE_CHUNK = 2048

_REST_SPEED = 1e-6

# Fixed entropy for the template bit generator; per-trajectory identity is
# installed by overwriting the Philox key, so construction never touches
# OS entropy.
_TEMPLATE_SEED = np.random.SeedSequence(entropy=0)


@dataclass(frozen=True)
class McConfig:
    """Ensemble simulation settings.

    `workers` = 0 picks one process per available core (capped at 4);
    results are bit-identical for any worker count because batches are
    fixed by `batch_size` and reduced in index order.
    """

    trajectories: int
    dt: float
    seed: int
    initial_mean: tuple[float, ...]
    initial_std: tuple[float, ...]
    t_span: tuple[float, float]
    record_stride: int = 100
    batch_size: int = 32768
    workers: int = 0

    def __post_init__(self):
        if self.trajectories < 1:
            raise ValueError("need at least one trajectory")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.record_stride < 1 or self.batch_size < 1:
            raise ValueError("stride and batch size must be positive")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")


@dataclass
class EnsembleMoments:
    """Empirical moments over the ensemble, with per-moment standard errors
    and the fraction of paths observed outside the truncation box."""

    order: int
    indices: tuple[MultiIndex, ...]
    times: np.ndarray
    moments: np.ndarray           # (T, n_indices)
    standard_errors: np.ndarray   # (T, n_indices)
    excess_mass_fraction: np.ndarray  # (T,)
    trajectories: int

    def moment_vector(self, i: int) -> MomentVector:
        n = self.indices[0].dimension
        return MomentVector.from_array(self.order, n, self.moments[i], float(self.times[i]))

    def series(self, alpha: MultiIndex) -> np.ndarray:
        return self.moments[:, self.indices.index(alpha)]

    def se_series(self, alpha: MultiIndex) -> np.ndarray:
        return self.standard_errors[:, self.indices.index(alpha)]

    def truncate(self, order: int) -> "EnsembleMoments":
        if order > self.order:
            raise ValueError("cannot truncate upward")
        keep = [i for i, a in enumerate(self.indices) if a.degree <= order]
        return EnsembleMoments(
            order=order,
            indices=tuple(self.indices[i] for i in keep),
            times=self.times,
            moments=self.moments[:, keep],
            standard_errors=self.standard_errors[:, keep],
            excess_mass_fraction=self.excess_mass_fraction,
            trajectories=self.trajectories,
        )


@dataclass
class McPath:
    """One simulated hybrid sample path."""

    times: np.ndarray
    states: np.ndarray  # (T, n)
    impact_times: list[float] = field(default_factory=list)


def trajectory_generator(seed: int, traj_index: int) -> np.random.Generator:
    """Counter-based stream for one trajectory: Philox keyed by
    (seed, trajectory index), counter starting at zero."""
    ph = np.random.Philox(seed=_TEMPLATE_SEED)
    state = ph.state
    state["state"]["key"] = np.array(
        [np.uint64(seed & (2**64 - 1)), np.uint64(traj_index)], dtype=np.uint64
    )
    state["state"]["counter"] = np.zeros(4, dtype=np.uint64)
    ph.state = state
    return np.random.Generator(ph)


class _CompiledModel:
    """Model pieces needed per step, with structure-specialized fast paths:
    affine drift becomes one small matmul, constant diffusion one broadcast."""

    def __init__(self, model: ShsModel):
        self.model = model
        self.n = model.dimension
        self.n_w = model.noise_dimension
        self.diffusion_zero = all(
            p.is_zero() for row in model.diffusion for p in row
        )
        g = model.guard
        if g is not None:
            self.guard_axis = g.axis
            self.guard_level = g.level
            self.guard_sign = g.normal_sign
        self.reset_A = model.reset_A
        self.reset_b = model.reset_b

        self.drift_affine = all(p.degree <= 1 for p in model.drift)
        if self.drift_affine:
            A = np.zeros((self.n, self.n))
            b = np.zeros(self.n)
            for i, p in enumerate(model.drift):
                for alpha, c in p.terms.items():
                    if alpha.degree == 0:
                        b[i] = c
                    else:
                        A[i, alpha.exponents.index(1)] = c
            self.drift_matrix_T = A.T.copy()
            self.drift_offset = b
        self.diffusion_constant = all(
            p.degree == 0 for row in model.diffusion for p in row
        )
        if self.diffusion_constant:
            self.diffusion_values = np.array(
                [[model.diffusion[i][k].coefficient(MultiIndex((0,) * self.n))
                  for k in range(self.n_w)] for i in range(self.n)]
            )

    def drift(self, x: np.ndarray) -> np.ndarray:
        if self.drift_affine:
            return x @ self.drift_matrix_T + self.drift_offset
        return np.column_stack([poly_eval_many(p, x) for p in self.model.drift])

    def noise_term(self, x: np.ndarray, xi: np.ndarray, sqrt_dt: float) -> np.ndarray:
        if self.diffusion_constant:
            return (xi * sqrt_dt) @ self.diffusion_values.T
        out = np.zeros_like(x)
        for k in range(self.n_w):
            col = np.column_stack(
                [poly_eval_many(self.model.diffusion[i][k], x) for i in range(self.n)]
            )
            out += col * (xi[:, k] * sqrt_dt)[:, None]
        return out


def _resolve_crossings(cm: _CompiledModel, x: np.ndarray, prop: np.ndarray,
                       dt: float, resting: np.ndarray, t_base: float,
                       impacts: Optional[list[float]]) -> np.ndarray:
    """Locate in-step guard crossings by linear interpolation, apply the
    reset, and integrate the leftover fraction with drift only. Repeated
    recrossings are resolved up to a small iteration cap; with zero
    diffusion, post-impact speeds under the rest threshold pin the path to
    the guard (Zeno mitigation)."""
    a, level, sign = cm.guard_axis, cm.guard_level, cm.guard_sign
    crossed = (
        (sign * (prop[:, a] - level) > 0)
        & (sign * (x[:, a] - level) <= 0)
    )
    if resting is not None:
        crossed &= ~resting
    if not crossed.any():
        return prop
    idx = np.nonzero(crossed)[0]
    sub_from = x[idx]
    sub_prop = prop[idx]
    sub_dt = np.full(len(idx), dt)
    elapsed = np.zeros(len(idx))

    for _ in range(5):
        denom = sub_prop[:, a] - sub_from[:, a]
        theta = np.clip((level - sub_from[:, a]) / denom, 0.0, 1.0)
        xc = sub_from + theta[:, None] * (sub_prop - sub_from)
        xc[:, a] = level
        if impacts is not None:
            impacts.extend((t_base + elapsed + theta * sub_dt).tolist())
        xr = xc @ cm.reset_A.T + cm.reset_b
        remaining = (1.0 - theta) * sub_dt
        drift_r = cm.drift(xr)
        nxt = xr + drift_r * remaining[:, None]

        pinned = np.zeros(len(idx), dtype=bool)
        if cm.diffusion_zero and resting is not None:
            pinned = np.abs(drift_r[:, a]) < _REST_SPEED
            if pinned.any():
                nxt[pinned] = xr[pinned]
                nxt[pinned, a] = level
                resting[idx[pinned]] = True
        prop[idx] = nxt

        again = (sign * (nxt[:, a] - level) > 0) & ~pinned
        if not again.any():
            return prop
        elapsed = (elapsed + theta * sub_dt)[again]
        idx = idx[again]
        sub_from = xr[again]
        sub_prop = nxt[again]
        sub_dt = remaining[again]

    # Iteration cap reached: park the stragglers on the guard.
    prop[idx, a] = level
    return prop


def _advance(cm: _CompiledModel, states: np.ndarray,
             gens: Sequence[np.random.Generator], n_steps: int, dt: float,
             t0: float, on_record, record_steps: np.ndarray,
             impacts: Optional[list[float]] = None) -> None:
    """Advance a batch of paths in place, invoking on_record(k, states) at
    each recorded step index (step 0 is the caller's responsibility)."""
    has_guard = cm.model.guard is not None
    sqrt_dt = float(np.sqrt(dt))
    # Rest pinning exists only in the zero-diffusion regime; noisy runs
    # skip the bookkeeping entirely.
    resting = np.zeros(states.shape[0], dtype=bool) if cm.diffusion_zero else None
    any_resting = False
    record_set = set(int(s) for s in record_steps)
    fast = cm.drift_affine and (cm.diffusion_constant or cm.diffusion_zero)
    if fast:
        drift_dt_T = cm.drift_matrix_T * dt
        offset_dt = cm.drift_offset * dt
        prop = np.empty_like(states)
        nbuf = np.empty_like(states)
        if cm.diffusion_constant:
            diff_sq_T = cm.diffusion_values.T * sqrt_dt
    step = 0
    while step < n_steps:
        chunk = min(_NOISE_CHUNK, n_steps - step)
        noise = np.empty((states.shape[0], chunk, cm.n_w))
        for b, gen in enumerate(gens):
            noise[b] = gen.standard_normal((chunk, cm.n_w))
        for local in range(chunk):
            t_base = t0 + (step + local) * dt
            x = states
            if fast:
                np.matmul(x, drift_dt_T, out=prop)
                prop += offset_dt
                prop += x
                if not cm.diffusion_zero:
                    np.matmul(noise[:, local, :], diff_sq_T, out=nbuf)
                    prop += nbuf
            else:
                prop = x + cm.drift(x) * dt
                if not cm.diffusion_zero:
                    prop += cm.noise_term(x, noise[:, local, :], sqrt_dt)
            if any_resting:
                prop[resting] = x[resting]
            if has_guard:
                prop = _resolve_crossings(cm, x, prop, dt, resting, t_base, impacts)
                if resting is not None:
                    any_resting = bool(resting.any())
            states[...] = prop
            k = step + local + 1
            if k in record_set:
                on_record(k, states)
        step += chunk


def _plan_steps(t_span: tuple[float, float], dt: float) -> tuple[int, float]:
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 <= t0:
        raise ValueError("t_span must be increasing")
    n_steps = max(1, int(np.ceil((t1 - t0) / dt - 1e-12)))
    return n_steps, (t1 - t0) / n_steps


def simulate_path(model: ShsModel, x0: Sequence[float], t_span: tuple[float, float],
                  dt: float, rng_stream: Optional[np.random.Generator] = None,
                  seed: int = 0, traj_index: int = 0,
                  record_stride: int = 1) -> McPath:
    """Simulate one hybrid path with Euler-Maruyama stepping and in-step
    guard resolution; bit-identical to the matching ensemble member when
    given the same (seed, traj_index)."""
    cm = _CompiledModel(model)
    n_steps, h = _plan_steps(t_span, dt)
    gen = rng_stream if rng_stream is not None else trajectory_generator(seed, traj_index)
    states = np.array([x0], dtype=float)
    record_steps = np.arange(0, n_steps + 1, record_stride)
    if record_steps[-1] != n_steps:
        record_steps = np.append(record_steps, n_steps)
    out_states = np.empty((len(record_steps), model.dimension))
    out_states[0] = states[0]
    slots = {int(k): i for i, k in enumerate(record_steps)}
    impacts: list[float] = []

    def on_record(k, s):
        out_states[slots[k]] = s[0]

    _advance(cm, states, [gen], n_steps, h, float(t_span[0]),
             on_record, record_steps[1:], impacts=impacts)
    times = float(t_span[0]) + record_steps * h
    return McPath(times=times, states=out_states, impact_times=impacts)


def _ensemble_batch(model: ShsModel, cfg: McConfig, order: int, start: int,
                    count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moment accumulators over trajectories [start, start+count)."""
    cm = _CompiledModel(model)
    n = model.dimension
    n_steps, h = _plan_steps(cfg.t_span, cfg.dt)
    record_steps = np.arange(0, n_steps + 1, cfg.record_stride)
    if record_steps[-1] != n_steps:
        record_steps = np.append(record_steps, n_steps)
    indices = enumerate_multiindices(n, order)
    slots = {int(k): i for i, k in enumerate(record_steps)}
    sums = np.zeros((len(record_steps), len(indices)))
    sumsq = np.zeros_like(sums)
    outside = np.zeros(len(record_steps))
    mean = np.asarray(cfg.initial_mean, dtype=float)
    std = np.asarray(cfg.initial_std, dtype=float)
    max_deg = [max(a[ax] for a in indices) for ax in range(n)]

    gens = [trajectory_generator(cfg.seed, start + i) for i in range(count)]
    states = np.empty((count, n))
    for b, gen in enumerate(gens):
        states[b] = mean + std * gen.standard_normal(n)

    def on_record(k, s):
        i = slots[k]
        pows = []
        for ax in range(n):
            row = [np.ones(s.shape[0])]
            for _ in range(max_deg[ax]):
                row.append(row[-1] * s[:, ax])
            pows.append(row)
        for j, alpha in enumerate(indices):
            col = pows[0][alpha[0]]
            for ax in range(1, n):
                e = alpha[ax]
                if e:
                    col = col * pows[ax][e]
            sums[i, j] += float(col.sum())
            sumsq[i, j] += float(np.dot(col, col))
        outside[i] += float(np.count_nonzero(~model.domain.contains(s)))

    on_record(0, states)
    _advance(cm, states, gens, n_steps, h, float(cfg.t_span[0]),
             on_record, record_steps[1:])
    return sums, sumsq, outside


def ensemble_moments(model: ShsModel, cfg: McConfig, order: int) -> EnsembleMoments:
    """Empirical moments of an N-path ensemble at each recorded time.

    Initial states are Gaussian per axis, drawn from each trajectory's own
    stream before its noise sequence. Standard errors are sample standard
    deviations over the ensemble divided by sqrt(N). Batches may run in
    parallel processes; the reduction over batches is always in index
    order, so outputs do not depend on scheduling.
    """
    n = model.dimension
    n_steps, h = _plan_steps(cfg.t_span, cfg.dt)
    record_steps = np.arange(0, n_steps + 1, cfg.record_stride)
    if record_steps[-1] != n_steps:
        record_steps = np.append(record_steps, n_steps)
    indices = enumerate_multiindices(n, order)

    tasks = []
    done = 0
    while done < cfg.trajectories:
        count = min(cfg.batch_size, cfg.trajectories - done)
        tasks.append((done, count))
        done += count

    workers = cfg.workers if cfg.workers else min(4, os.cpu_count() or 1)
    workers = min(workers, len(tasks))
    if workers > 1:
        import multiprocessing

        with multiprocessing.get_context("fork").Pool(workers) as pool:
            parts = pool.starmap(
                _ensemble_batch,
                [(model, cfg, order, start, count) for start, count in tasks],
            )
    else:
        parts = [_ensemble_batch(model, cfg, order, start, count)
                 for start, count in tasks]

    sums = np.zeros((len(record_steps), len(indices)))
    sumsq = np.zeros_like(sums)
    outside = np.zeros(len(record_steps))
    for batch_sums, batch_sumsq, batch_outside in parts:
        sums += batch_sums
        sumsq += batch_sumsq
        outside += batch_outside

    N = float(cfg.trajectories)
    moments = sums / N
    var = np.maximum(sumsq - sums * sums / N, 0.0) / max(N - 1.0, 1.0)
    ses = np.sqrt(var / N)
    moments[:, 0] = 1.0
    ses[:, 0] = 0.0
    times = float(cfg.t_span[0]) + record_steps * h
    return EnsembleMoments(
        order=order,
        indices=indices,
        times=times,
        moments=moments,
        standard_errors=ses,
        excess_mass_fraction=outside / N,
        trajectories=cfg.trajectories,
    )


# ---------------------------------------------------------------------------
# Rollout metrics
# ---------------------------------------------------------------------------


@dataclass
class RolloutError:
    """Normalized rollout errors per moment index; entries whose reference
    magnitude vanishes are flagged undefined rather than fabricated."""

    order: int
    entries: dict[MultiIndex, float]
    undefined: set[MultiIndex]

    def max_defined(self) -> float:
        vals = [v for a, v in self.entries.items() if a.degree >= 1]
        return max(vals) if vals else 0.0

    def mean_defined(self) -> float:
        vals = [v for a, v in self.entries.items() if a.degree >= 1]
        return float(np.mean(vals)) if vals else 0.0


def normalized_rollout_error(propagated, reference: EnsembleMoments) -> RolloutError:
    """RMS over time of the |alpha|-th root of the moment error, divided by
    the same functional of the Monte Carlo magnitude; 0 for the mass entry.

    The reference is linearly interpolated onto the propagated time grid
    when the strides differ."""
    prop_indices = tuple(propagated.indices)
    ref_pos = {a: i for i, a in enumerate(reference.indices)}
    missing = [a for a in prop_indices if a not in ref_pos]
    if missing:
        raise SchemaError(f"reference lacks moment indices {missing[:3]}")
    t = np.asarray(propagated.times, dtype=float)
    entries: dict[MultiIndex, float] = {}
    undefined: set[MultiIndex] = set()
    for j, alpha in enumerate(prop_indices):
        if alpha.degree == 0:
            entries[alpha] = 0.0
            continue
        ref = np.interp(t, reference.times, reference.moments[:, ref_pos[alpha]])
        p = 1.0 / alpha.degree
        num = float(np.sqrt(np.mean(np.abs(propagated.moments[:, j] - ref) ** (2 * p))))
        den = float(np.sqrt(np.mean(np.abs(ref) ** (2 * p))))
        if den < 1e-12:
            undefined.add(alpha)
        else:
            entries[alpha] = num / den
    return RolloutError(order=propagated.order, entries=entries, undefined=undefined)


def rollout_rmse(estimate_times: np.ndarray, estimate_states: np.ndarray,
                 truth_times: np.ndarray, truth_states: np.ndarray) -> tuple[float, ...]:
    """Componentwise root-mean-square estimate-truth error; the truth path
    is interpolated onto the estimate grid."""
    est_t = np.asarray(estimate_times, dtype=float)
    est = np.atleast_2d(np.asarray(estimate_states, dtype=float))
    tru_t = np.asarray(truth_times, dtype=float)
    tru = np.atleast_2d(np.asarray(truth_states, dtype=float))
    out = []
    for c in range(est.shape[1]):
        ref = np.interp(est_t, tru_t, tru[:, c])
        out.append(float(np.sqrt(np.mean((est[:, c] - ref) ** 2))))
    return tuple(out)
