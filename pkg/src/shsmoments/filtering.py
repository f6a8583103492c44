"""Measurement fusion and state estimation.

Measurement noise is modeled by a maximum-entropy density fitted to
prescribed residual moments; substituting the polynomial measurement
function turns it into a polynomial-exponent likelihood over the state.
Updates happen at the moment level (stabilized quadrature ratios), the
posterior belief is refit from the updated moments, and point estimates
minimize the posterior exponent over the feasible box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateUpdateError, NonRealizableError, ShsError
from .maxent import (
    MedParams,
    _workspace,
    fit_med,
    reference_rule,
)
from .mcref import rollout_rmse
from .model import BoxDomain, ShsModel
from .polyalg import (
    MomentVector,
    MultiIndex,
    Polynomial,
    enumerate_multiindices,
    monomial_design_matrix,
    poly_affine_substitute,
    poly_eval_many,
    poly_mul,
)
from .propagate import MomentStepper
from .quad import QuadratureRule


@dataclass(frozen=True)
class MeasurementModel:
    """Polynomial measurement channel v = g(y, x) with prescribed residual
    moments. The residual map lives in dimension n+1 with variable x1
    playing the role of the measured value y."""

    residual_map: Polynomial
    residual_order: int
    residual_moments: MomentVector
    residual_domain: BoxDomain

    def __post_init__(self):
        if self.residual_moments.dimension != 1 or self.residual_domain.dimension != 1:
            raise ShsError("residual space must be one-dimensional")
        if abs(self.residual_moments[MultiIndex((0,))] - 1.0) > 1e-9:
            raise ShsError("residual moments must have unit mass entry")

    @property
    def state_dimension(self) -> int:
        return self.residual_map.dimension - 1


@dataclass(frozen=True)
class MeasurementRecord:
    time: float
    value: float


def residual_noise_moments(bias: float, p_bias: float, sigma: float,
                           order: int) -> MomentVector:
    """Exact moments of v = B + eps with B = +-bias (probability p_bias of
    +bias) and independent Gaussian eps of standard deviation sigma."""
    if order > 8:
        raise ValueError("residual moment order capped at 8")
    bias_moments = [
        p_bias * bias ** j + (1.0 - p_bias) * (-bias) ** j for j in range(order + 1)
    ]
    gauss = [1.0, 0.0]
    for k in range(2, order + 1):
        gauss.append((k - 1) * sigma * sigma * gauss[k - 2])
    values = {}
    for k in range(order + 1):
        values[MultiIndex((k,))] = sum(
            comb(k, j) * bias_moments[j] * gauss[k - j] for j in range(k + 1)
        )
    return MomentVector(order, values)


def position_measurement_model(state_dimension: int, bias: float, sigma: float,
                               order: int = 4, axis: int = 0,
                               domain_stds: float = 8.0) -> MeasurementModel:
    """Default channel y = x_axis + v with the mixture noise model; the
    residual box spans +-domain_stds noise standard deviations."""
    n = state_dimension
    e_y = (1,) + (0,) * n
    e_x = (0,) + tuple(1 if i == axis else 0 for i in range(n))
    gmap = Polynomial(n + 1, {MultiIndex(e_y): 1.0, MultiIndex(e_x): -1.0})
    moments = residual_noise_moments(bias, 0.5, sigma, order)
    spread = float(np.sqrt(moments[MultiIndex((2,))]))
    half = domain_stds * spread
    domain = BoxDomain(np.array([-half]), np.array([half]))
    return MeasurementModel(
        residual_map=gmap,
        residual_order=order,
        residual_moments=moments,
        residual_domain=domain,
    )


def fit_residual_med(residual_moments: MomentVector, residual_domain: BoxDomain,
                     rule: Optional[QuadratureRule] = None) -> MedParams:
    """Fit the 1-D residual maximum-entropy density."""
    fitted, _ = fit_med(residual_moments, residual_domain, rule=rule)
    return fitted


def _exponent_raw_poly(lam: MedParams) -> Polynomial:
    """Exponent polynomial re-expressed in raw coordinates."""
    n = lam.dimension
    scaled = Polynomial(n, dict(lam.multipliers)) + lam.offset
    A = np.diag(1.0 / lam.domain.halfwidth)
    b = -lam.domain.center / lam.domain.halfwidth
    return poly_affine_substitute(scaled, A, b)


def induced_likelihood_coeffs(mu: MedParams, residual_map: Polynomial,
                              y: float) -> dict[MultiIndex, float]:
    """Expand the residual exponent through v = g(y, x) at a fixed
    measurement value; returns coefficients over state monomials (the
    constant is carried along and absorbed by the update normalization)."""
    n = residual_map.dimension - 1
    q_v = _exponent_raw_poly(mu)
    # Pin y: (y, x) -> (y_value, x).
    A = np.zeros((n + 1, n))
    A[1:, :] = np.eye(n)
    b = np.zeros(n + 1)
    b[0] = y
    g_x = poly_affine_substitute(residual_map, A, b)
    # Horner composition of the 1-D exponent with the state polynomial.
    degree = q_v.degree
    coeffs = [q_v.coefficient(MultiIndex((k,))) for k in range(degree + 1)]
    result = Polynomial.constant(n, coeffs[degree]) if degree >= 0 else Polynomial.zero(n)
    for k in range(degree - 1, -1, -1):
        result = poly_mul(result, g_x) + coeffs[k]
    return dict(result.terms)


def _coeffs_to_poly(nu: dict[MultiIndex, float], dimension: int) -> Polynomial:
    return Polynomial(dimension, dict(nu))


def moment_update(lam_minus: MedParams, nu: dict[MultiIndex, float],
                  rule: QuadratureRule, time: float = 0.0) -> MomentVector:
    """Posterior moments: ratio of stabilized quadratures of the prior
    density times exp(-nu(x)); the mass entry is exactly 1."""
    ws = _workspace(rule, lam_minus.domain, lam_minus.order)
    q_prior = ws.exponent_values(lam_minus.multiplier_array()) + lam_minus.offset
    nu_poly = _coeffs_to_poly(nu, lam_minus.dimension)
    q_nu = poly_eval_many(nu_poly, rule.nodes) if not nu_poly.is_zero() else 0.0
    exponent = -(q_prior + q_nu)
    if not np.all(np.isfinite(exponent)):
        raise DegenerateUpdateError("non-finite posterior exponent at a quadrature node")
    shift = float(np.max(exponent))
    masses = rule.weights * np.exp(exponent - shift)
    total = float(masses.sum())
    if not np.isfinite(total) or total < 1e-300:
        raise DegenerateUpdateError(
            "posterior normalization underflowed: measurement inconsistent with prior support"
        )
    rho = masses / total
    values = ws.phi_x_full.T @ rho
    values[0] = 1.0
    return MomentVector.from_array(lam_minus.order, lam_minus.dimension, values, time)


def posterior_refit(m_plus: MomentVector, lam_minus: MedParams,
                    nu: Optional[dict[MultiIndex, float]] = None,
                    rule: Optional[QuadratureRule] = None) -> MedParams:
    """Refit the posterior belief, warm-started at the prior multipliers
    plus the likelihood exponent when the latter fits the truncation
    degree (there the refit agrees with the direct exponential-family
    composition)."""
    warm = lam_minus
    if nu:
        nu_poly = _coeffs_to_poly(nu, lam_minus.dimension)
        if nu_poly.degree <= lam_minus.order:
            A = np.diag(lam_minus.domain.halfwidth)
            b = lam_minus.domain.center.copy()
            scaled = poly_affine_substitute(nu_poly, A, b)
            combined = dict(lam_minus.multipliers)
            zero = MultiIndex((0,) * lam_minus.dimension)
            for alpha, c in scaled.terms.items():
                if alpha == zero:
                    continue
                combined[alpha] = combined.get(alpha, 0.0) + c
            warm = MedParams(order=lam_minus.order, domain=lam_minus.domain,
                             multipliers=combined)
    fitted, _ = fit_med(m_plus, lam_minus.domain, init=warm, rule=rule)
    return fitted


# ---------------------------------------------------------------------------
# MAP estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MapEstimate:
    point: np.ndarray
    exponent_value: float
    degenerate_flat: bool = False


class _ScalarExponent:
    """Plain-Python evaluator for the exponent polynomial and its gradient
    in scaled coordinates; avoids array ceremony in the tight descent loop."""

    def __init__(self, lam: MedParams):
        self.n = lam.dimension
        self.terms = [(alpha.exponents, c) for alpha, c in lam.multipliers.items()]
        grads: list[list[tuple[tuple[int, ...], float]]] = [[] for _ in range(self.n)]
        for alpha, c in lam.multipliers.items():
            for axis in range(self.n):
                e = alpha[axis]
                if e:
                    grads[axis].append((alpha.decrement(axis).exponents, c * e))
        self.grad_terms = grads

    @staticmethod
    def _eval(terms, u) -> float:
        total = 0.0
        for exps, c in terms:
            v = c
            for e, ui in zip(exps, u):
                if e:
                    v *= ui ** e
            total += v
        return total

    def value(self, u) -> float:
        # Offset-free: the argmin is invariant under exponent shifts and
        # omitting the constant keeps that invariance exact in floats.
        return self._eval(self.terms, u)

    def gradient(self, u) -> list[float]:
        return [self._eval(g, u) for g in self.grad_terms]


def map_estimate(lam: MedParams, domain: Optional[BoxDomain] = None,
                 grid_points: int = 200, descent_iters: int = 100) -> MapEstimate:
    """Minimize the exponent polynomial over the box: coarse grid scan
    followed by projected gradient descent with backtracking. Flat
    exponents return the first grid node and are flagged."""
    box = domain if domain is not None else lam.domain
    n = lam.dimension
    u_lo = np.clip((box.lower - lam.domain.center) / lam.domain.halfwidth, -1.0, 1.0)
    u_hi = np.clip((box.upper - lam.domain.center) / lam.domain.halfwidth, -1.0, 1.0)
    axes = [np.linspace(u_lo[i], u_hi[i], grid_points) for i in range(n)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids])
    mult = lam.multiplier_array()
    indices = lam.indices
    q = monomial_design_matrix(pts, indices) @ mult

    spread = float(np.max(q) - np.min(q))
    if spread <= 1e-12 * max(1.0, float(np.max(np.abs(q)))):
        u0 = pts[0]
        x0 = lam.domain.center + lam.domain.halfwidth * u0
        return MapEstimate(point=x0, exponent_value=float(q[0]) + lam.offset,
                           degenerate_flat=True)

    best = int(np.argmin(q))
    u = [float(v) for v in pts[best]]
    value = float(q[best])
    fn = _ScalarExponent(lam)
    lo = [float(v) for v in u_lo]
    hi = [float(v) for v in u_hi]

    for _ in range(descent_iters):
        grad = fn.gradient(u)
        gnorm = math.sqrt(sum(g * g for g in grad))
        if gnorm < 1e-14:
            break
        step = 1.0 / max(gnorm, 1.0)
        moved = False
        while step * gnorm >= 1e-12:
            cand = [min(max(ui - step * gi, li), hi_i)
                    for ui, gi, li, hi_i in zip(u, grad, lo, hi)]
            cval = fn.value(cand)
            decrease = sum(gi * (ui - ci) for gi, ui, ci in zip(grad, u, cand))
            if cval <= value - 1e-4 * decrease and cval < value:
                displacement = math.sqrt(sum((ui - ci) ** 2 for ui, ci in zip(u, cand)))
                u, value = cand, cval
                moved = displacement >= 1e-11
                break
            step *= 0.5
        if not moved:
            break

    x = lam.domain.center + lam.domain.halfwidth * np.array(u)
    return MapEstimate(point=x, exponent_value=value + lam.offset, degenerate_flat=False)


# ---------------------------------------------------------------------------
# Full filter loop
# ---------------------------------------------------------------------------


@dataclass
class FilterConfig:
    """Settings of one filtering run."""

    measurement: MeasurementModel
    t_span: tuple[float, float]
    dt: float = 1e-3
    refit_every: int = 1
    state_points: int = 64
    guard_points: int = 64
    output_stride: int = 10
    map_grid: int = 200
    map_descent_iters: int = 100


@dataclass
class FilterRun:
    """Record of one filtering run: prior/posterior moments, beliefs, MAP
    estimates per output stride, and RMSE summaries when ground truth is
    supplied."""

    order: int
    indices: tuple[MultiIndex, ...]
    times: np.ndarray
    prior_moments: np.ndarray
    post_moments: np.ndarray
    med: list[MedParams]
    measurement_values: np.ndarray  # nan where no measurement at that record
    map_times: np.ndarray
    map_states: np.ndarray
    map_flags: np.ndarray
    schedule: tuple[MeasurementRecord, ...]
    refit_fallback_times: tuple[float, ...] = ()
    position_rmse: Optional[float] = None
    velocity_rmse: Optional[float] = None

    def posterior_vector(self, i: int) -> MomentVector:
        n = self.indices[0].dimension
        return MomentVector.from_array(self.order, n, self.post_moments[i],
                                       float(self.times[i]))


def run_filter(model: ShsModel, m0: MomentVector,
               schedule: Sequence[MeasurementRecord], config: FilterConfig,
               truth: Optional[tuple[np.ndarray, np.ndarray]] = None) -> FilterRun:
    """Interleave moment prediction with measurement updates (Algorithm-1
    style loop): between measurements the moments follow the generator plus
    boundary flux; at each measurement time the induced likelihood updates
    the moments and the belief is refit.

    Substeps are chosen to land exactly on every measurement time (dt is
    only ever shrunk). MAP estimates are recorded every `output_stride`
    substeps and at measurement times; when `truth` is given as
    (times, states), position/velocity rollout RMSEs over the MAP grid are
    attached to the run.
    """
    t0, t1 = float(config.t_span[0]), float(config.t_span[1])
    events = sorted(schedule, key=lambda r: r.time)
    for a, b in zip(events, events[1:]):
        if not a.time < b.time:
            raise ShsError("measurement times must be strictly increasing")
    if events and (events[0].time <= t0 or events[-1].time > t1 + 1e-12):
        raise ShsError("measurement schedule must lie inside the time span")

    state_rule = reference_rule(model.domain, config.state_points)
    stepper = MomentStepper(model, m0.order, state_rule=state_rule,
                            guard_points=config.guard_points)
    residual_med = fit_residual_med(config.measurement.residual_moments,
                                    config.measurement.residual_domain)

    med, _ = fit_med(m0, model.domain, rule=state_rule)
    m = m0.as_array()
    n_idx = len(stepper.table.indices)

    rec_times: list[float] = [t0]
    rec_prior: list[np.ndarray] = [m.copy()]
    rec_post: list[np.ndarray] = [m.copy()]
    rec_med: list[MedParams] = [med]
    rec_y: list[float] = [np.nan]
    map_times: list[float] = []
    map_states: list[np.ndarray] = []
    map_flags: list[bool] = []

    def record_map(t: float, belief: MedParams):
        est = map_estimate(belief, model.domain, grid_points=config.map_grid,
                           descent_iters=config.map_descent_iters)
        map_times.append(t)
        map_states.append(est.point)
        map_flags.append(est.degenerate_flat)

    record_map(t0, med)

    boundaries = [t0] + [e.time for e in events] + [t1]
    event_at_boundary: list[Optional[MeasurementRecord]] = (
        [None] + list(events) + [None]
    )
    if events and abs(events[-1].time - t1) < 1e-12:
        boundaries = boundaries[:-1]
        event_at_boundary = event_at_boundary[:-1]

    global_step = 0
    consecutive_fallbacks = 0
    fallback_times: list[float] = []
    t = t0
    for seg in range(1, len(boundaries)):
        t_end = boundaries[seg]
        event = event_at_boundary[seg]
        span = t_end - t
        n_sub = max(1, int(np.ceil(span / config.dt - 1e-12)))
        h = span / n_sub
        seg_start = t
        for j in range(n_sub):
            flux_vec = stepper.flux_vector(med)
            m = stepper.rk4(m, flux_vec, h)
            t = seg_start + (j + 1) * h
            global_step += 1
            if global_step % config.refit_every == 0:
                # Prediction refits fall back to the last good belief, as in
                # the propagation loop; only persistent failure aborts.
                try:
                    med, _ = stepper.fit(m, warm=med, time=t)
                    consecutive_fallbacks = 0
                except NonRealizableError as err:
                    consecutive_fallbacks += 1
                    fallback_times.append(t)
                    if consecutive_fallbacks > 10:
                        raise NonRealizableError(
                            f"prediction refit failed persistently at t={t:.6f}: {err}"
                        ) from err
            is_boundary = j == n_sub - 1
            if (global_step % config.output_stride == 0) and not (is_boundary and event):
                rec_times.append(t)
                rec_prior.append(m.copy())
                rec_post.append(m.copy())
                rec_med.append(med)
                rec_y.append(np.nan)
                record_map(t, med)
        if event is not None:
            prior = m.copy()
            nu = induced_likelihood_coeffs(residual_med,
                                           config.measurement.residual_map,
                                           event.value)
            try:
                posterior = moment_update(med, nu, state_rule, time=t)
                med = posterior_refit(posterior, med, nu=nu, rule=state_rule)
            except (DegenerateUpdateError, NonRealizableError) as err:
                raise type(err)(f"measurement update failed at t={t:.6f}: {err}") from err
            m = posterior.as_array()
            rec_times.append(t)
            rec_prior.append(prior)
            rec_post.append(m.copy())
            rec_med.append(med)
            rec_y.append(event.value)
            record_map(t, med)

    if rec_times[-1] < t - 1e-15 or len(rec_times) == 1:
        rec_times.append(t)
        rec_prior.append(m.copy())
        rec_post.append(m.copy())
        rec_med.append(med)
        rec_y.append(np.nan)
        record_map(t, med)

    run = FilterRun(
        order=m0.order,
        indices=stepper.table.indices,
        times=np.array(rec_times),
        prior_moments=np.vstack(rec_prior),
        post_moments=np.vstack(rec_post),
        med=rec_med,
        measurement_values=np.array(rec_y),
        map_times=np.array(map_times),
        map_states=np.vstack(map_states),
        map_flags=np.array(map_flags, dtype=bool),
        schedule=tuple(events),
        refit_fallback_times=tuple(fallback_times),
    )
    if truth is not None:
        truth_times, truth_states = truth
        rmse = rollout_rmse(run.map_times, run.map_states, truth_times, truth_states)
        run.position_rmse = rmse[0]
        run.velocity_rmse = rmse[1] if len(rmse) > 1 else None
    return run
