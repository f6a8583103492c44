"""Moment-constrained maximum-entropy densities on box domains.

A belief of order r is the exponential-family density

    p(x) = exp(-q(u(x))) / Z,   q(u) = offset + sum_{1<=|a|<=r} lambda_a u^a,

where u(x) maps the domain affinely onto [-1,1]^n. Multipliers live in the
scaled coordinates: raw monomials up to degree 4 on boxes like [-6,6]
produce Hessian condition numbers that defeat double precision, scaled
ones do not. The constant `offset` carries exponent shifts introduced when
importing raw-coordinate exponents, so partition values round-trip exactly;
fits always return offset 0.

Multipliers solve the convex dual problem: minimize the potential

    Gamma(lambda) = log Z(lambda) + sum_a lambda_a m~_a,

whose gradient is the moment mismatch and whose Hessian is the covariance
of the monomial statistics. Newton with Armijo backtracking and
Levenberg-style regularization handles the minimization; all integrals use
a fixed tensor Gauss-Legendre rule with max-shift stabilization, so
log Z is finite for every finite multiplier vector.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonRealizableError, ShsError
from .model import BoxDomain
from .polyalg import (
    MomentVector,
    MultiIndex,
    Polynomial,
    enumerate_multiindices,
    monomial_design_matrix,
    poly_affine_substitute,
)
from .quad import QuadratureRule, tensor_rule

DEFAULT_POINTS_PER_AXIS = 64

_reference_rules: dict[tuple, QuadratureRule] = {}


def reference_rule(domain: BoxDomain, points_per_axis: int = DEFAULT_POINTS_PER_AXIS) -> QuadratureRule:
    """The module's reference quadrature for a domain (cached)."""
    key = (domain.key(), points_per_axis)
    rule = _reference_rules.get(key)
    if rule is None:
        rule = tensor_rule(domain, points_per_axis)
        _reference_rules[key] = rule
    return rule


@dataclass(frozen=True)
class MedParams:
    """Multipliers of a fitted maximum-entropy density.

    `multipliers` maps scaled-coordinate multi-indices (1 <= |alpha| <= order)
    to coefficients; the normalization lives in the cached log-partition
    value, computed on demand when not supplied.
    """

    order: int
    domain: BoxDomain
    multipliers: dict[MultiIndex, float]
    offset: float = 0.0
    log_partition: Optional[float] = None

    def __post_init__(self):
        n = self.domain.dimension
        for alpha in self.multipliers:
            if alpha.dimension != n:
                raise ShsError(f"multiplier index {alpha} has wrong dimension")
            if not 1 <= alpha.degree <= self.order:
                raise ShsError(f"multiplier index {alpha} outside 1 <= |a| <= {self.order}")
            if not np.isfinite(self.multipliers[alpha]):
                raise ShsError(f"non-finite multiplier at {alpha}")

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def indices(self) -> tuple[MultiIndex, ...]:
        """Multiplier layout: graded-lex over 1 <= |alpha| <= order."""
        return enumerate_multiindices(self.dimension, self.order)[1:]

    def multiplier_array(self) -> np.ndarray:
        return np.array([self.multipliers.get(a, 0.0) for a in self.indices])

    def scale(self, x: np.ndarray) -> np.ndarray:
        """Map state points into the [-1,1]^n fitting coordinates."""
        return (np.asarray(x, dtype=float) - self.domain.center) / self.domain.halfwidth

    def exponent_at(self, x: np.ndarray) -> np.ndarray:
        """q(u(x)) at points of shape (N, n), without the normalization."""
        u = np.atleast_2d(self.scale(x))
        phi = monomial_design_matrix(u, self.indices)
        return phi @ self.multiplier_array() + self.offset

    def _cached_log_partition(self, rule: Optional[QuadratureRule] = None) -> float:
        if self.log_partition is None:
            value = log_partition(self, rule or reference_rule(self.domain))
            object.__setattr__(self, "log_partition", value)
        return self.log_partition


@dataclass(frozen=True)
class FitReport:
    """Diagnostics of one Newton fit."""

    iterations: int
    grad_norm: float
    potential_value: float
    hessian_condition: float
    converged: bool


# ---------------------------------------------------------------------------
# Cached geometry: design matrices and moment-conversion maps
# ---------------------------------------------------------------------------


class _Workspace:
    """Per-(rule, domain, order) evaluation geometry shared by every dual
    evaluation; built once and cached on the rule object.

    Tensor-product rules get a factored fast path: the exponent on the
    grid and all raw moments up to degree 2r reduce to small per-axis
    contractions, which is what makes per-step refitting affordable at
    fine resolutions. Other rules fall back to dense design matrices.
    """

    def __init__(self, rule: QuadratureRule, domain: BoxDomain, order: int):
        n = domain.dimension
        self.rule = rule
        self.domain = domain
        self.order = order
        self.weights = rule.weights
        full = enumerate_multiindices(n, order)
        twice = enumerate_multiindices(n, 2 * order)
        self.indices_full = full
        self.mult_indices = full[1:]
        pos = {a: i for i, a in enumerate(twice)}
        self.first_order_pos = np.array([pos[a] for a in self.mult_indices])
        k = len(self.mult_indices)
        self.pair_pos = np.empty((k, k), dtype=int)
        for i, a in enumerate(self.mult_indices):
            for j, b in enumerate(self.mult_indices):
                self.pair_pos[i, j] = pos[a + b]

        self.tensor = rule.is_tensor_grid
        self._phi_mult = None
        self._phi_twice = None
        self._phi_x_full = None
        if self.tensor:
            d_r, d_2r = order + 1, 2 * order + 1
            self.grid_shape = tuple(len(a) for a in rule.axes_nodes)
            self.pw_r = []
            self.pw_2r = []
            for i in range(n):
                u_axis = (np.asarray(rule.axes_nodes[i]) - domain.center[i]) / domain.halfwidth[i]
                powers = np.ones((len(u_axis), d_2r))
                for kk in range(1, d_2r):
                    powers[:, kk] = powers[:, kk - 1] * u_axis
                self.pw_2r.append(powers)
                self.pw_r.append(powers[:, :d_r])
            node_letters = "ijklmn"[:n]
            deg_letters = "abcdef"[:n]
            axis_terms = ",".join(node_letters[i] + deg_letters[i] for i in range(n))
            self.exp_expr = f"{axis_terms},{deg_letters}->{node_letters}"
            self.mom_expr = f"{axis_terms},{node_letters}->{deg_letters}"
            r_strides = np.array([d_r ** (n - 1 - i) for i in range(n)])
            t_strides = np.array([d_2r ** (n - 1 - i) for i in range(n)])
            self.mult_cube_pos = np.array(
                [int(np.dot(a.exponents, r_strides)) for a in self.mult_indices]
            )
            self.twice_cube_pos = np.array(
                [int(np.dot(a.exponents, t_strides)) for a in twice]
            )
            self.coeff_cube_shape = (d_r,) * n

    # Dense design matrices, built on first use (cold paths only).
    @property
    def phi_mult(self) -> np.ndarray:
        if self._phi_mult is None:
            u = (self.rule.nodes - self.domain.center) / self.domain.halfwidth
            self._phi_mult = monomial_design_matrix(u, self.mult_indices)
        return self._phi_mult

    @property
    def phi_twice(self) -> np.ndarray:
        if self._phi_twice is None:
            u = (self.rule.nodes - self.domain.center) / self.domain.halfwidth
            self._phi_twice = monomial_design_matrix(
                u, enumerate_multiindices(self.domain.dimension, 2 * self.order)
            )
        return self._phi_twice

    @property
    def phi_x_full(self) -> np.ndarray:
        if self._phi_x_full is None:
            self._phi_x_full = monomial_design_matrix(self.rule.nodes, self.indices_full)
        return self._phi_x_full

    def exponent_values(self, mult_vector: np.ndarray) -> np.ndarray:
        """Exponent polynomial at every node (offset excluded)."""
        if not self.tensor:
            return self.phi_mult @ mult_vector
        n = len(self.grid_shape)
        cube = np.zeros(self.coeff_cube_shape)
        cube.ravel()[self.mult_cube_pos] = mult_vector
        if n == 1:
            return self.pw_r[0] @ cube
        if n == 2:
            return (self.pw_r[0] @ cube @ self.pw_r[1].T).ravel()
        grid = np.einsum(self.exp_expr, *self.pw_r, cube, optimize="greedy")
        return grid.ravel()

    def raw_moments_twice(self, rho: np.ndarray) -> np.ndarray:
        """E[u^gamma] under node masses rho, for all |gamma| <= 2*order in
        graded-lex order."""
        if not self.tensor:
            return self.phi_twice.T @ rho
        n = len(self.grid_shape)
        if n == 1:
            cube = self.pw_2r[0].T @ rho
        elif n == 2:
            cube = self.pw_2r[0].T @ rho.reshape(self.grid_shape) @ self.pw_2r[1]
        else:
            cube = np.einsum(self.mom_expr, *self.pw_2r,
                             rho.reshape(self.grid_shape), optimize="greedy")
        return cube.ravel()[self.twice_cube_pos]


_workspaces: "weakref.WeakKeyDictionary[QuadratureRule, dict]" = weakref.WeakKeyDictionary()


def _workspace(rule: QuadratureRule, domain: BoxDomain, order: int) -> _Workspace:
    per_rule = _workspaces.setdefault(rule, {})
    key = (order, domain.key())
    ws = per_rule.get(key)
    if ws is None:
        ws = _Workspace(rule, domain, order)
        per_rule[key] = ws
    return ws


_conversion_cache: dict[tuple, np.ndarray] = {}


def _x_to_u_moment_matrix(domain: BoxDomain, order: int) -> np.ndarray:
    """Linear map from x-space moment vectors to scaled-coordinate ones."""
    key = ("x2u", domain.key(), order)
    T = _conversion_cache.get(key)
    if T is not None:
        return T
    n = domain.dimension
    full = enumerate_multiindices(n, order)
    pos = {a: i for i, a in enumerate(full)}
    A = np.diag(1.0 / domain.halfwidth)
    b = -domain.center / domain.halfwidth
    T = np.zeros((len(full), len(full)))
    for i, alpha in enumerate(full):
        expanded = poly_affine_substitute(Polynomial.monomial(alpha), A, b)
        for beta, c in expanded.terms.items():
            T[i, pos[beta]] = c
    _conversion_cache[key] = T
    return T


def _check_rule(lam_domain: BoxDomain, rule: QuadratureRule):
    if rule.domain.key() != lam_domain.key():
        raise ShsError("quadrature rule does not cover the multiplier domain")


def _stabilized_log_sum(weights: np.ndarray, exponent: np.ndarray) -> tuple[float, np.ndarray]:
    """log sum w_i exp(exponent_i) via max shift; also returns the
    normalized node masses (they sum to 1)."""
    m = float(np.max(exponent))
    s = weights * np.exp(exponent - m)
    total = float(s.sum())
    return m + np.log(total), s / total


# ---------------------------------------------------------------------------
# Dual objective and derivatives
# ---------------------------------------------------------------------------


def log_partition(lam: MedParams, rule: QuadratureRule) -> float:
    """log integral of exp(-q) over the domain, stable for any finite q."""
    _check_rule(lam.domain, rule)
    ws = _workspace(rule, lam.domain, lam.order)
    q = ws.exponent_values(lam.multiplier_array()) + lam.offset
    value, _ = _stabilized_log_sum(ws.weights, -q)
    return value


def _scaled_targets(lam: MedParams, m: MomentVector) -> np.ndarray:
    if m.order != lam.order:
        raise ShsError(f"moment order {m.order} != multiplier order {lam.order}")
    return _x_to_u_moment_matrix(lam.domain, lam.order) @ m.as_array()


def potential(lam: MedParams, m: MomentVector, rule: QuadratureRule) -> float:
    """Dual potential Gamma = log Z + <multipliers, scaled moments>."""
    mu = _scaled_targets(lam, m)
    return log_partition(lam, rule) + float(lam.multiplier_array() @ mu[1:]) + lam.offset * mu[0]


def potential_grad(lam: MedParams, m: MomentVector, rule: QuadratureRule) -> np.ndarray:
    """Gradient of Gamma: target moments minus current density moments,
    in the scaled coordinates; zero exactly at a matched fit."""
    _check_rule(lam.domain, rule)
    ws = _workspace(rule, lam.domain, lam.order)
    mu = _scaled_targets(lam, m)
    q = ws.exponent_values(lam.multiplier_array()) + lam.offset
    _, rho = _stabilized_log_sum(ws.weights, -q)
    current = ws.raw_moments_twice(rho)[ws.first_order_pos]
    return mu[1:] - current


def potential_hess(lam: MedParams, rule: QuadratureRule) -> np.ndarray:
    """Hessian of Gamma: covariance of the monomial statistics under the
    current density; symmetric positive semidefinite."""
    _check_rule(lam.domain, rule)
    ws = _workspace(rule, lam.domain, lam.order)
    q = ws.exponent_values(lam.multiplier_array()) + lam.offset
    _, rho = _stabilized_log_sum(ws.weights, -q)
    raw = ws.raw_moments_twice(rho)
    first = raw[ws.first_order_pos]
    return raw[ws.pair_pos] - np.outer(first, first)


# ---------------------------------------------------------------------------
# Newton fit
# ---------------------------------------------------------------------------


def fit_med(
    m: MomentVector,
    domain: BoxDomain,
    init: Optional[MedParams] = None,
    rule: Optional[QuadratureRule] = None,
    grad_tol: float = 1e-9,
    max_iter: int = 200,
) -> tuple[MedParams, FitReport]:
    """Fit multipliers to a moment vector by minimizing the dual potential.

    Newton steps use Armijo backtracking (factor 0.5, slope 1e-4) and
    Levenberg regularization escalating from 1e-10 on factorization
    failure. The loop polishes past `grad_tol` toward 1e-12 while progress
    lasts, so converting back to raw-coordinate moments stays within the
    1e-7 round-trip contract despite the conditioning map's amplification.

    Raises NonRealizableError when the gradient stalls above `grad_tol`.
    """
    if rule is None:
        rule = reference_rule(domain)
    _check_rule(domain, rule)
    mass = m.as_array()[0]
    if abs(mass - 1.0) > 1e-6:
        raise ShsError(f"mass entry must be 1, got {mass}")
    ws = _workspace(rule, domain, m.order)
    target = (_x_to_u_moment_matrix(domain, m.order) @ m.as_array())[1:]
    if not np.all(np.isfinite(target)):
        raise ShsError("non-finite moment vector")

    k = len(ws.mult_indices)
    if init is not None and init.order == m.order and init.domain.key() == domain.key():
        lam = init.multiplier_array()
    else:
        lam = np.zeros(k)

    polish_tol = min(grad_tol, 1e-12)
    w = ws.weights

    def parts(vec):
        q = ws.exponent_values(vec)
        logz, rho = _stabilized_log_sum(w, -q)
        return logz, rho

    logz, rho = parts(lam)
    gamma = logz + float(lam @ target)
    hess = np.zeros((k, k))
    iterations = 0
    ginf = np.inf
    best_ginf = np.inf
    no_improve = 0
    stalled = False

    for iterations in range(1, max_iter + 1):
        raw = ws.raw_moments_twice(rho)
        current = raw[ws.first_order_pos]
        grad = target - current
        ginf = float(np.max(np.abs(grad))) if k else 0.0
        if ginf <= polish_tol or k == 0:
            break
        # Stop once the gradient stops shrinking: the iterate is at the
        # floating-point floor for this conditioning.
        if ginf > 0.9 * best_ginf:
            no_improve += 1
            if no_improve >= 4:
                break
        else:
            no_improve = 0
        best_ginf = min(best_ginf, ginf)
        hess = raw[ws.pair_pos] - np.outer(current, current)

        tau = 0.0
        scale = float(np.trace(hess)) / k if k else 1.0
        direction = None
        for _ in range(25):
            try:
                chol = np.linalg.cholesky(hess + tau * np.eye(k))
                direction = -np.linalg.solve(
                    chol.T, np.linalg.solve(chol, grad)
                )
                break
            except np.linalg.LinAlgError:
                tau = 1e-10 * max(scale, 1.0) if tau == 0.0 else tau * 10.0
        if direction is None:
            stalled = True
            break

        slope = float(grad @ direction)
        if slope >= 0:
            stalled = True
            break
        step = 1.0
        accepted = False
        while step >= 2.0 ** -40:
            cand = lam + step * direction
            logz_c, rho_c = parts(cand)
            gamma_c = logz_c + float(cand @ target)
            if gamma_c <= gamma + 1e-4 * step * slope:
                lam, logz, rho, gamma = cand, logz_c, rho_c, gamma_c
                accepted = True
                break
            step *= 0.5
        if not accepted:
            stalled = True
            break

    cond = float(np.linalg.cond(hess)) if k and iterations > 1 else 1.0
    converged = ginf <= grad_tol
    report = FitReport(
        iterations=iterations,
        grad_norm=ginf,
        potential_value=gamma,
        hessian_condition=cond,
        converged=converged,
    )
    if not converged:
        # A stall slightly above tolerance is the floating-point floor of
        # the line search under ill conditioning, not infeasibility; hand
        # the fit back with converged=False. Realizability failures stall
        # with a grossly unmatched moment vector.
        if ginf > 1e3 * grad_tol:
            reason = "stalled" if stalled else "iteration limit"
            raise NonRealizableError(
                f"maximum-entropy fit {reason} with gradient norm {ginf:.3e} "
                f"(tolerance {grad_tol:.1e}, Hessian condition {cond:.3e}); "
                "the moment vector is not realizable on this domain at this order",
                report=report,
            )

    multipliers = {
        a: float(v) for a, v in zip(ws.mult_indices, lam) if v != 0.0
    }
    fitted = MedParams(
        order=m.order,
        domain=domain,
        multipliers=multipliers,
        offset=0.0,
        log_partition=float(logz),
    )
    return fitted, report


# ---------------------------------------------------------------------------
# Density evaluation and moments
# ---------------------------------------------------------------------------


def med_density(lam: MedParams, x: np.ndarray,
                rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """Normalized density at points of shape (..., n); zero outside the
    domain, matching the reference measure's support."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts2 = np.atleast_2d(pts)
    logz = lam._cached_log_partition(rule)
    q = lam.exponent_at(pts2)
    p = np.exp(-q - logz)
    p = np.where(lam.domain.contains(pts2), p, 0.0)
    return float(p[0]) if single else p


def med_density_grad(lam: MedParams, x: np.ndarray,
                     rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """Spatial gradient of the density: -p * grad q, chained through the
    conditioning map."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts2 = np.atleast_2d(pts)
    n = lam.dimension
    p = np.atleast_1d(med_density(lam, pts2, rule))
    u = lam.scale(pts2)
    grad_q = np.zeros_like(pts2)
    for axis in range(n):
        reduced = []
        coeffs = []
        for alpha, c in lam.multipliers.items():
            e = alpha[axis]
            if e:
                reduced.append(alpha.decrement(axis))
                coeffs.append(c * e)
        if reduced:
            phi = monomial_design_matrix(u, reduced)
            grad_q[:, axis] = (phi @ np.array(coeffs)) / lam.domain.halfwidth[axis]
    out = -p[:, None] * grad_q
    return out[0] if single else out


def med_moments(lam: MedParams, order: int, rule: QuadratureRule,
                time: float = 0.0) -> MomentVector:
    """Quadrature moments of the density up to `order` (which may exceed the
    fit order). Computed as ratios against the quadrature mass, so the mass
    entry is exactly 1."""
    _check_rule(lam.domain, rule)
    n = lam.dimension
    ws = _workspace(rule, lam.domain, lam.order)
    q = ws.exponent_values(lam.multiplier_array()) + lam.offset
    _, rho = _stabilized_log_sum(ws.weights, -q)
    if order == lam.order:
        phi_x = ws.phi_x_full
    else:
        phi_x = monomial_design_matrix(rule.nodes, enumerate_multiindices(n, order))
    values = phi_x.T @ rho
    values[0] = 1.0
    return MomentVector.from_array(order, n, values, time)


# ---------------------------------------------------------------------------
# Construction from raw exponents and text serialization
# ---------------------------------------------------------------------------


def med_from_exponent(domain: BoxDomain, exponent: Polynomial, order: Optional[int] = None,
                      rule: Optional[QuadratureRule] = None) -> MedParams:
    """Build MedParams from an exponent polynomial in raw state coordinates.

    The polynomial is re-expressed in the scaled coordinates; its constant
    term lands in `offset`, so partition values match the raw exponent
    exactly.
    """
    n = domain.dimension
    if exponent.dimension != n:
        raise ShsError("exponent dimension does not match domain")
    A = np.diag(domain.halfwidth)
    b = domain.center.copy()
    scaled = poly_affine_substitute(exponent, A, b)
    order = order if order is not None else max(scaled.degree, 1)
    zero = MultiIndex((0,) * n)
    offset = scaled.coefficient(zero)
    multipliers = {a: c for a, c in scaled.terms.items() if a != zero}
    lam = MedParams(order=order, domain=domain, multipliers=multipliers, offset=offset)
    if rule is not None:
        object.__setattr__(lam, "log_partition", log_partition(lam, rule))
    return lam


def med_to_record(lam: MedParams) -> str:
    """Serialize to a line-based text record; floats use repr so decimal
    values round-trip at full double precision."""
    lines = [
        f"order={lam.order}",
        "lower=" + ",".join(repr(v) for v in lam.domain.lower.tolist()),
        "upper=" + ",".join(repr(v) for v in lam.domain.upper.tolist()),
        "center=" + ",".join(repr(v) for v in lam.domain.center.tolist()),
        "halfwidth=" + ",".join(repr(v) for v in lam.domain.halfwidth.tolist()),
        f"offset={lam.offset!r}",
        f"log_partition={'' if lam.log_partition is None else repr(lam.log_partition)}",
    ]
    for alpha in sorted(lam.multipliers, key=lambda a: a.exponents):
        name = "_".join(str(e) for e in alpha.exponents)
        lines.append(f"lam_{name}={lam.multipliers[alpha]!r}")
    return "\n".join(lines)


def med_from_record(text: str) -> MedParams:
    """Inverse of med_to_record."""
    fields: dict[str, str] = {}
    multipliers: dict[MultiIndex, float] = {}
    for line in text.strip().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key.startswith("lam_"):
            alpha = MultiIndex(tuple(int(p) for p in key[4:].split("_")))
            multipliers[alpha] = float(value)
        else:
            fields[key] = value
    domain = BoxDomain(
        np.array([float(v) for v in fields["lower"].split(",")]),
        np.array([float(v) for v in fields["upper"].split(",")]),
    )
    logz = fields.get("log_partition", "")
    return MedParams(
        order=int(fields["order"]),
        domain=domain,
        multipliers=multipliers,
        offset=float(fields.get("offset", "0.0")),
        log_partition=float(logz) if logz else None,
    )
