"""Moment prediction: generator table, guard boundary-flux correction, and
fixed-step time integration.

For a closed model the generator contribution is a constant matrix acting
on the moment vector; the reset contribution is a state-dependent flux
through the guard facet, evaluated on the current maximum-entropy belief
and frozen over each integration step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ClosureViolationError, NonRealizableError
from .maxent import MedParams, fit_med, reference_rule
from .model import BoxDomain, ShsModel, diffusion_matrix, generator_apply
from .polyalg import (
    MomentVector,
    MultiIndex,
    Polynomial,
    enumerate_multiindices,
    monomial_design_matrix,
    poly_diff,
    poly_eval_many,
)
from .quad import QuadratureRule, guard_rule

DEFAULT_GUARD_POINTS = 64


@dataclass(frozen=True)
class GeneratorTable:
    """Expected generator action per tracked monomial, as a linear map on
    the moment vector."""

    order: int
    indices: tuple[MultiIndex, ...]
    rows: dict[MultiIndex, dict[MultiIndex, float]]
    matrix: np.ndarray


def build_generator_table(model: ShsModel, order: int) -> GeneratorTable:
    """Expand A(x^alpha) for every |alpha| <= order into moment coordinates.

    Raises ClosureViolationError when some image exceeds the truncation
    degree (the model is outside the closed class)."""
    indices = enumerate_multiindices(model.dimension, order)
    pos = {a: i for i, a in enumerate(indices)}
    rows: dict[MultiIndex, dict[MultiIndex, float]] = {}
    matrix = np.zeros((len(indices), len(indices)))
    for i, alpha in enumerate(indices):
        image = generator_apply(model, Polynomial.monomial(alpha))
        if image.degree > order:
            raise ClosureViolationError(
                f"A(x^{alpha.exponents}) has degree {image.degree} > {order}; "
                "the truncated moment system is not closed"
            )
        rows[alpha] = dict(image.terms)
        for beta, c in image.terms.items():
            matrix[i, pos[beta]] = c
    return GeneratorTable(order=order, indices=indices, rows=rows, matrix=matrix)


class FluxEvaluator:
    """Evaluates the guard boundary-flux vector for a belief.

    Precomputes, per guard node: jump values of every tracked monomial
    under the reset, drift and diffusion coefficients entering the normal
    probability current, and the scaled monomial bases used to evaluate
    the belief density and its gradient.
    """

    def __init__(self, model: ShsModel, order: int, med_domain: BoxDomain,
                 grule: QuadratureRule,
                 indices: Optional[Sequence[MultiIndex]] = None):
        if model.guard is None:
            raise ValueError("model has no guard facet")
        n = model.dimension
        self.model = model
        self.order = order
        self.med_domain = med_domain
        self.indices = tuple(indices) if indices is not None else enumerate_multiindices(n, order)
        nodes = grule.nodes
        self.weights = grule.weights
        phi_reset = monomial_design_matrix(model.reset_apply(nodes), self.indices)
        phi_node = monomial_design_matrix(nodes, self.indices)
        self.jump = (phi_reset - phi_node).T  # (n_indices, n_nodes)

        a = model.guard.axis
        self.normal_sign = model.guard.normal_sign
        self.drift_a = poly_eval_many(model.drift[a], nodes)
        H = diffusion_matrix(model)
        self.h_a = [poly_eval_many(H[a][j], nodes) for j in range(n)]
        self.dh_a = [poly_eval_many(poly_diff(H[a][j], j), nodes) for j in range(n)]

        u = (nodes - med_domain.center) / med_domain.halfwidth
        mult = enumerate_multiindices(n, order)[1:]
        self.mult_indices = mult
        self.phi_u = monomial_design_matrix(u, mult)
        self.dphi_u = []
        for axis in range(n):
            cols = np.zeros((nodes.shape[0], len(mult)))
            reduced = [(j, alpha) for j, alpha in enumerate(mult) if alpha[axis] > 0]
            if reduced:
                dmat = monomial_design_matrix(u, [alpha.decrement(axis) for _, alpha in reduced])
                for k, (j, alpha) in enumerate(reduced):
                    cols[:, j] = alpha[axis] * dmat[:, k]
            self.dphi_u.append(cols)
        self.halfwidth = med_domain.halfwidth

    def current_normal_positive(self, med: MedParams) -> np.ndarray:
        """(J . n)_+ at the guard nodes for this belief."""
        if med.order != self.order or med.domain.key() != self.med_domain.key():
            raise ValueError("belief order/domain does not match the flux evaluator")
        lamv = med.multiplier_array()
        q = self.phi_u @ lamv + med.offset
        p = np.exp(-q - med._cached_log_partition())
        n = self.model.dimension
        current_a = self.drift_a * p
        for j in range(n):
            dq_j = (self.dphi_u[j] @ lamv) / self.halfwidth[j]
            grad_p_j = -p * dq_j
            current_a = current_a - (self.dh_a[j] * p + self.h_a[j] * grad_p_j)
        return np.maximum(self.normal_sign * current_a, 0.0)

    def evaluate(self, med: MedParams) -> np.ndarray:
        """Boundary-flux vector over the tracked indices."""
        outflow = self.current_normal_positive(med)
        return self.jump @ (self.weights * outflow)


def boundary_flux(model: ShsModel, med: MedParams, alpha: MultiIndex,
                  grule: QuadratureRule) -> float:
    """Flux correction for one moment index on the current belief."""
    ev = FluxEvaluator(model, med.order, med.domain, grule, indices=(alpha,))
    return float(ev.evaluate(med)[0])


def moment_rhs(model: ShsModel, table: GeneratorTable, m: MomentVector,
               med: MedParams, grule: Optional[QuadratureRule] = None,
               evaluator: Optional[FluxEvaluator] = None) -> np.ndarray:
    """Time derivative of the moment vector: generator term plus flux."""
    if m.order != table.order:
        raise ValueError("moment vector and generator table orders differ")
    rhs = table.matrix @ m.as_array()
    if model.guard is not None:
        if evaluator is None:
            if grule is None:
                grule = guard_rule(model.guard, model.domain, DEFAULT_GUARD_POINTS)
            evaluator = FluxEvaluator(model, table.order, med.domain, grule)
        rhs = rhs + evaluator.evaluate(med)
    return rhs


@dataclass
class MomentTrajectory:
    """Propagation record: moments, beliefs, and flux vectors per time."""

    order: int
    indices: tuple[MultiIndex, ...]
    times: np.ndarray
    moments: np.ndarray          # (T, n_indices)
    med: list[MedParams]
    flux_log: np.ndarray         # (T, n_indices)
    fit_failed: np.ndarray       # (T,) bool; True where the refit fell back

    def moment_vector(self, i: int) -> MomentVector:
        return MomentVector.from_array(
            self.order, self.indices[0].dimension, self.moments[i], float(self.times[i])
        )

    def series(self, alpha: MultiIndex) -> np.ndarray:
        j = self.indices.index(alpha)
        return self.moments[:, j]


class MomentStepper:
    """Shared fixed-step integrator: generator matrix plus frozen flux,
    advanced with the classical 4-stage Runge-Kutta scheme."""

    def __init__(self, model: ShsModel, order: int,
                 state_rule: Optional[QuadratureRule] = None,
                 guard_points: int = DEFAULT_GUARD_POINTS,
                 grad_tol: float = 1e-9):
        self.model = model
        self.order = order
        self.domain = model.domain
        self.state_rule = state_rule if state_rule is not None else reference_rule(model.domain)
        self.table = build_generator_table(model, order)
        self.grad_tol = grad_tol
        if model.guard is not None:
            grule = guard_rule(model.guard, model.domain, guard_points)
            self.flux = FluxEvaluator(model, order, model.domain, grule)
        else:
            self.flux = None

    def flux_vector(self, med: MedParams) -> np.ndarray:
        if self.flux is None:
            return np.zeros(len(self.table.indices))
        return self.flux.evaluate(med)

    def rk4(self, m: np.ndarray, flux_vec: np.ndarray, dt: float) -> np.ndarray:
        T = self.table.matrix
        k1 = T @ m + flux_vec
        k2 = T @ (m + 0.5 * dt * k1) + flux_vec
        k3 = T @ (m + 0.5 * dt * k2) + flux_vec
        k4 = T @ (m + dt * k3) + flux_vec
        return m + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def fit(self, m: np.ndarray, warm: Optional[MedParams], time: float = 0.0):
        mv = MomentVector.from_array(self.order, self.model.dimension, m, time)
        return fit_med(mv, self.domain, init=warm, rule=self.state_rule,
                       grad_tol=self.grad_tol)


def propagate(model: ShsModel, m0: MomentVector, t_span: tuple[float, float],
              dt: float, refit_every: int = 1,
              state_rule: Optional[QuadratureRule] = None,
              guard_points: int = DEFAULT_GUARD_POINTS,
              init: Optional[MedParams] = None,
              max_consecutive_failures: int = 10) -> MomentTrajectory:
    """Integrate the moment system over t_span with the flux frozen at each
    step-start belief and the belief refit every `refit_every` steps.

    The initial moment vector must be realizable (the first fit must
    succeed). Later refit failures fall back to the last good belief and
    are flagged in the trajectory; more than `max_consecutive_failures` in
    a row aborts the run.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if refit_every < 1:
        raise ValueError("refit_every must be >= 1")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 <= t0:
        raise ValueError("t_span must be increasing")
    n_steps = max(1, int(np.ceil((t1 - t0) / dt - 1e-12)))
    h = (t1 - t0) / n_steps

    stepper = MomentStepper(model, m0.order, state_rule=state_rule,
                            guard_points=guard_points)
    med, _ = fit_med(m0, model.domain, init=init, rule=stepper.state_rule)

    n_idx = len(stepper.table.indices)
    times = t0 + h * np.arange(n_steps + 1)
    moments = np.empty((n_steps + 1, n_idx))
    flux_log = np.empty((n_steps + 1, n_idx))
    fit_failed = np.zeros(n_steps + 1, dtype=bool)
    meds: list[MedParams] = [med]

    m = m0.as_array()
    moments[0] = m
    flux_log[0] = stepper.flux_vector(med)

    consecutive = 0
    for k in range(n_steps):
        m = stepper.rk4(m, flux_log[k], h)
        if (k + 1) % refit_every == 0:
            try:
                med, _ = stepper.fit(m, warm=med, time=times[k + 1])
                consecutive = 0
            except NonRealizableError:
                consecutive += 1
                fit_failed[k + 1] = True
                if consecutive > max_consecutive_failures:
                    raise NonRealizableError(
                        f"{consecutive} consecutive refit failures at t={times[k + 1]:.6f}"
                    )
        moments[k + 1] = m
        flux_log[k + 1] = stepper.flux_vector(med)
        meds.append(med)

    return MomentTrajectory(
        order=m0.order,
        indices=stepper.table.indices,
        times=times,
        moments=moments,
        med=meds,
        flux_log=flux_log,
        fit_failed=fit_failed,
    )
