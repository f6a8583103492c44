"""Stochastic hybrid system declaration and its action on polynomial
observables: interior generator, reset pullback, and the bouncing-ball
instance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError
from .polyalg import MultiIndex, Polynomial, poly_affine_substitute, poly_diff, poly_mul


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box; the reference measure everywhere in the package is
    Lebesgue measure restricted to this box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("domain bounds must be finite")
        if not np.all(lo < hi):
            raise ValueError(f"need lower < upper per axis, got {lo} / {hi}")

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Pointwise membership test; x has shape (..., n)."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def key(self) -> tuple:
        return (tuple(self.lower.tolist()), tuple(self.upper.tolist()))


@dataclass(frozen=True)
class GuardFacet:
    """Axis-aligned facet triggering resets: {x_axis = level} intersected
    with per-remaining-axis interval constraints.

    `halfspace` lists (lo, hi) bounds for each non-pinned axis in
    increasing axis order; +-inf entries mean unconstrained. The outward
    unit normal is supported on `axis` only.
    """

    axis: int
    level: float
    halfspace: tuple[tuple[float, float], ...]
    outward_normal: np.ndarray

    def __post_init__(self):
        nvec = np.asarray(self.outward_normal, dtype=float)
        object.__setattr__(self, "outward_normal", nvec)
        if abs(np.linalg.norm(nvec) - 1.0) > 1e-12:
            raise ValueError("outward normal must have unit norm")
        support = np.nonzero(nvec)[0]
        if len(support) != 1 or support[0] != self.axis:
            raise ValueError("outward normal must be supported on the guard axis only")

    @property
    def normal_sign(self) -> float:
        return float(np.sign(self.outward_normal[self.axis]))


@dataclass(frozen=True)
class ShsModel:
    """Single-mode stochastic hybrid system with polynomial drift/diffusion,
    one axis-aligned guard facet, and an affine reset x+ = A x- + b.

    `guard=None` declares a pure diffusion with no reset mechanism (used by
    linear benchmark scenarios)."""

    dimension: int
    drift: tuple[Polynomial, ...]
    diffusion: tuple[tuple[Polynomial, ...], ...]  # n rows, n_w columns
    guard: Optional[GuardFacet]
    reset_A: np.ndarray
    reset_b: np.ndarray
    domain: BoxDomain

    def __post_init__(self):
        n = self.dimension
        if len(self.drift) != n or any(p.dimension != n for p in self.drift):
            raise DimensionMismatchError("drift must have n entries of dimension n")
        if len(self.diffusion) != n or any(
            p.dimension != n for row in self.diffusion for p in row
        ):
            raise DimensionMismatchError("diffusion rows must match the state dimension")
        widths = {len(row) for row in self.diffusion}
        if len(widths) != 1:
            raise DimensionMismatchError("diffusion rows must share a column count")
        A = np.asarray(self.reset_A, dtype=float)
        b = np.asarray(self.reset_b, dtype=float)
        object.__setattr__(self, "reset_A", A)
        object.__setattr__(self, "reset_b", b)
        if A.shape != (n, n) or b.shape != (n,):
            raise DimensionMismatchError("reset map must be n x n plus length-n offset")
        if self.domain.dimension != n:
            raise DimensionMismatchError("domain dimension mismatch")

    @property
    def noise_dimension(self) -> int:
        return len(self.diffusion[0])

    def reset_apply(self, x: np.ndarray) -> np.ndarray:
        """Apply the affine reset to points of shape (..., n)."""
        x = np.asarray(x, dtype=float)
        return x @ self.reset_A.T + self.reset_b


def diffusion_matrix(model: ShsModel) -> list[list[Polynomial]]:
    """Second-order coefficient H = (1/2) h h^T as an n x n polynomial matrix."""
    n, nw = model.dimension, model.noise_dimension
    H: list[list[Polynomial]] = []
    for i in range(n):
        row = []
        for j in range(n):
            acc = Polynomial.zero(n)
            for k in range(nw):
                acc = acc + poly_mul(model.diffusion[i][k], model.diffusion[j][k])
            row.append(0.5 * acc)
        H.append(row)
    return H


def generator_apply(model: ShsModel, f: Polynomial) -> Polynomial:
    """Interior generator: Af = grad(f) . X + Tr(H hess(f))."""
    if f.dimension != model.dimension:
        raise DimensionMismatchError(
            f"observable dimension {f.dimension} != model dimension {model.dimension}"
        )
    n = model.dimension
    out = Polynomial.zero(n)
    grads = [poly_diff(f, i) for i in range(n)]
    for i in range(n):
        out = out + poly_mul(grads[i], model.drift[i])
    H = diffusion_matrix(model)
    for i in range(n):
        for j in range(n):
            if H[i][j].is_zero():
                continue
            out = out + poly_mul(H[i][j], poly_diff(grads[i], j))
    return out


def reset_jump_polynomial(model: ShsModel, f: Polynomial) -> Polynomial:
    """Jump of an observable across the reset, restricted to the guard facet.

    Returns f(Delta(x)) - f(x) with the pinned coordinate substituted by the
    guard level, expressed in the n-1 free coordinates of the facet.
    """
    if model.guard is None:
        raise ValueError("model has no guard facet")
    if f.dimension != model.dimension:
        raise DimensionMismatchError("observable dimension mismatch")
    n = model.dimension
    pulled = poly_affine_substitute(f, model.reset_A, model.reset_b)
    jump = pulled - f
    # Embed facet coordinates: x = E y + level * e_axis.
    free_axes = [i for i in range(n) if i != model.guard.axis]
    E = np.zeros((n, n - 1))
    for k, i in enumerate(free_axes):
        E[i, k] = 1.0
    shift = np.zeros(n)
    shift[model.guard.axis] = model.guard.level
    return poly_affine_substitute(jump, E, shift)


@dataclass(frozen=True)
class BouncingBallParams:
    """Physical constants of the stochastic bouncing ball.

    gravity > 0; drag >= 0 and noise >= 0 (zero gives the deterministic or
    undamped limits used by analytic oracles); restitution in [0, 1].
    """

    gravity: float = 9.81
    drag: float = 0.1
    noise: float = 0.5
    restitution: float = 0.8
    domain_lower: tuple[float, float] = (0.0, -6.0)
    domain_upper: tuple[float, float] = (3.0, 6.0)

    def __post_init__(self):
        if not self.gravity > 0:
            raise ValueError(f"gravity must be > 0, got {self.gravity}")
        if self.drag < 0:
            raise ValueError(f"drag must be >= 0, got {self.drag}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError(f"restitution must be in [0, 1], got {self.restitution}")


def bouncing_ball_model(params: BouncingBallParams) -> ShsModel:
    """Height/velocity ball: dx1 = x2 dt, dx2 = (-g - nu*x2) dt + sigma dW,
    reset (0, x2) -> (0, -c*x2) on the facet {x1 = 0, x2 < 0}."""
    n = 2
    x2 = Polynomial.variable(n, 1)
    drift = (x2, Polynomial.constant(n, -params.gravity) - params.drag * x2)
    diffusion = (
        (Polynomial.zero(n),),
        (Polynomial.constant(n, params.noise),),
    )
    guard = GuardFacet(
        axis=0,
        level=0.0,
        halfspace=((-np.inf, 0.0),),
        outward_normal=np.array([-1.0, 0.0]),
    )
    reset_A = np.array([[1.0, 0.0], [0.0, -params.restitution]])
    domain = BoxDomain(np.array(params.domain_lower), np.array(params.domain_upper))
    return ShsModel(
        dimension=n,
        drift=drift,
        diffusion=diffusion,
        guard=guard,
        reset_A=reset_A,
        reset_b=np.zeros(2),
        domain=domain,
    )
