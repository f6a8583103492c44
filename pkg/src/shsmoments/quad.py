"""Tensor-product Gauss-Legendre quadrature on boxes and guard facets.

Fixed rules (no adaptivity) keep every run bit-reproducible; the
integrands here are smooth exponentials of low-degree polynomials on
compact boxes, so modest point counts are exact in practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError
from .model import BoxDomain, GuardFacet


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes/weights over a box; weights are positive and sum to its volume.

    Rules built as tensor products carry their per-axis factors in
    `axes_nodes`/`axes_weights` (nodes enumerated row-major over the grid),
    which downstream code exploits for factored evaluations. For
    guard-facet rules the nodes are embedded in the full state space
    (pinned coordinate set to the guard level) while `domain` is the
    lower-dimensional box of free coordinates.
    """

    nodes: np.ndarray   # (N, n_embed)
    weights: np.ndarray  # (N,)
    domain: BoxDomain
    axes_nodes: tuple = ()
    axes_weights: tuple = ()

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be strictly positive")
        vol = self.domain.volume()
        if abs(float(self.weights.sum()) - vol) > 1e-12 * max(vol, 1.0):
            raise ValueError("weight sum does not match domain volume")

    def __len__(self) -> int:
        return self.nodes.shape[0]

    @property
    def is_tensor_grid(self) -> bool:
        return len(self.axes_nodes) == self.nodes.shape[1]


def gauss_legendre_nodes(points_per_axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard 1-D Gauss-Legendre rule on [-1, 1].

    Exact for polynomials of degree <= 2*points_per_axis - 1.
    """
    if not 1 <= points_per_axis <= 256:
        raise ValueError(f"points_per_axis must be in [1, 256], got {points_per_axis}")
    nodes, weights = np.polynomial.legendre.leggauss(points_per_axis)
    return nodes, weights


def tensor_rule(domain: BoxDomain, points_per_axis) -> QuadratureRule:
    """Affinely mapped tensor product of 1-D Gauss-Legendre rules."""
    n = domain.dimension
    if isinstance(points_per_axis, int):
        points_per_axis = [points_per_axis] * n
    if len(points_per_axis) != n:
        raise ValueError("need one point count per axis")
    axes_nodes, axes_weights = [], []
    for i, p in enumerate(points_per_axis):
        x, w = gauss_legendre_nodes(p)
        lo, hi = domain.lower[i], domain.upper[i]
        half = 0.5 * (hi - lo)
        axes_nodes.append(half * x + 0.5 * (hi + lo))
        axes_weights.append(half * w)
    grids = np.meshgrid(*axes_nodes, indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*axes_weights, indexing="ij")
    weights = np.ones(nodes.shape[0])
    for wg in wgrids:
        weights = weights * wg.ravel()
    return QuadratureRule(nodes=nodes, weights=weights, domain=domain,
                          axes_nodes=tuple(axes_nodes),
                          axes_weights=tuple(axes_weights))


def integrate(f, rule: QuadratureRule) -> float:
    """Sum w_i f(x_i) with compensated summation (deterministic order).

    `f` may be a callable taking an (N, n) array or a precomputed array of
    node values.
    """
    values = f(rule.nodes) if callable(f) else np.asarray(f, dtype=float)
    if values.shape != (len(rule),):
        raise ValueError(f"expected {len(rule)} node values, got shape {values.shape}")
    bad = ~np.isfinite(values)
    if np.any(bad):
        where = int(np.argmax(bad))
        raise IntegrationError(
            f"integrand is not finite at node {rule.nodes[where]}",
            node=rule.nodes[where],
        )
    return math.fsum((rule.weights * values).tolist())


def guard_rule(guard: GuardFacet, domain: BoxDomain, points: int) -> QuadratureRule:
    """Quadrature over a guard facet, embedded back into the full space.

    Free coordinates range over the guard's halfspace constraints
    intersected with the domain; the pinned coordinate sits exactly at the
    guard level.
    """
    n = domain.dimension
    free_axes = [i for i in range(n) if i != guard.axis]
    lows, highs = [], []
    for k, i in enumerate(free_axes):
        lo = max(domain.lower[i], guard.halfspace[k][0])
        hi = min(domain.upper[i], guard.halfspace[k][1])
        if not lo < hi:
            raise ValueError(
                f"guard facet is empty on axis {i}: [{lo}, {hi}]"
            )
        lows.append(lo)
        highs.append(hi)
    facet_box = BoxDomain(np.array(lows), np.array(highs))
    base = tensor_rule(facet_box, [points] * len(free_axes))
    embedded = np.empty((len(base), n))
    embedded[:, guard.axis] = guard.level
    for k, i in enumerate(free_axes):
        embedded[:, i] = base.nodes[:, k]
    return QuadratureRule(nodes=embedded, weights=base.weights, domain=facet_box)
