"""Sparse multi-index and polynomial algebra over R^n.

Monomials are keyed by exponent multi-indices; polynomials are immutable
term maps. The graded-lexicographic enumeration defined here fixes the
layout of every moment vector and multiplier vector in the package.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatchError, ShsError

# Coefficients smaller than this are dropped after arithmetic; prevents
# term-count blowup from cancellation noise.
PRUNE_TOL = 1e-14


@dataclass(frozen=True)
class MultiIndex:
    """Exponent vector of a monomial x^alpha."""

    exponents: tuple[int, ...]

    def __post_init__(self):
        if any(e < 0 for e in self.exponents):
            raise ValueError(f"negative exponent in {self.exponents}")

    @property
    def dimension(self) -> int:
        return len(self.exponents)

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def __getitem__(self, i: int) -> int:
        return self.exponents[i]

    def decrement(self, axis: int) -> "MultiIndex":
        """Lower the exponent on one axis by 1 (axis exponent must be > 0)."""
        e = list(self.exponents)
        e[axis] -= 1
        return MultiIndex(tuple(e))

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a + b for a, b in zip(self.exponents, other.exponents)))

    def __repr__(self) -> str:
        return f"MultiIndex{self.exponents}"


def graded_lex_key(alpha: MultiIndex) -> tuple:
    """Sort key: by total degree, then lexicographically with higher leading
    exponents first, so (1,0) precedes (0,1)."""
    return (alpha.degree, tuple(-e for e in alpha.exponents))


@lru_cache(maxsize=None)
def enumerate_multiindices(n: int, r: int) -> tuple[MultiIndex, ...]:
    """All multi-indices with |alpha| <= r in graded-lex order.

    The result has C(n+r, r) entries and the order is stable across calls;
    it defines the vector layout of moments and multipliers everywhere.
    """
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    if r < 0:
        raise ValueError(f"max degree must be >= 0, got {r}")

    def compositions(total: int, length: int):
        if length == 1:
            yield (total,)
            return
        for head in range(total, -1, -1):
            for tail in compositions(total - head, length - 1):
                yield (head,) + tail

    out = []
    for deg in range(r + 1):
        out.extend(MultiIndex(e) for e in compositions(deg, n))
    assert len(out) == comb(n + r, r)
    return tuple(out)


def _normalize_terms(n: int, terms: Mapping[MultiIndex, float]) -> dict[MultiIndex, float]:
    clean: dict[MultiIndex, float] = {}
    for alpha, c in terms.items():
        if alpha.dimension != n:
            raise DimensionMismatchError(
                f"term {alpha} has dimension {alpha.dimension}, polynomial has {n}"
            )
        c = float(c)
        if abs(c) > PRUNE_TOL:
            clean[alpha] = c
    return clean


@dataclass(frozen=True)
class Polynomial:
    """Immutable sparse polynomial: map from MultiIndex to coefficient."""

    dimension: int
    terms: dict[MultiIndex, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", _normalize_terms(self.dimension, self.terms))

    @staticmethod
    def zero(n: int) -> "Polynomial":
        return Polynomial(n, {})

    @staticmethod
    def constant(n: int, value: float) -> "Polynomial":
        return Polynomial(n, {MultiIndex((0,) * n): float(value)})

    @staticmethod
    def variable(n: int, axis: int) -> "Polynomial":
        if not 0 <= axis < n:
            raise ValueError(f"axis {axis} out of range for dimension {n}")
        e = [0] * n
        e[axis] = 1
        return Polynomial(n, {MultiIndex(tuple(e)): 1.0})

    @staticmethod
    def monomial(alpha: MultiIndex, coeff: float = 1.0) -> "Polynomial":
        return Polynomial(alpha.dimension, {alpha: float(coeff)})

    @property
    def degree(self) -> int:
        """Total degree; 0 for the zero polynomial."""
        return max((a.degree for a in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, alpha: MultiIndex) -> float:
        return self.terms.get(alpha, 0.0)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.dimension, other)
        if other.dimension != self.dimension:
            raise DimensionMismatchError("polynomial dimensions differ")
        out = dict(self.terms)
        for alpha, c in other.terms.items():
            out[alpha] = out.get(alpha, 0.0) + c
        return Polynomial(self.dimension, out)

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Polynomial(self.dimension, {a: -c for a, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.dimension, other)
        return self.__add__(-other)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.dimension, {a: c * other for a, c in self.terms.items()})
        return poly_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __repr__(self) -> str:
        return f"Polynomial({format_polynomial(self)!r})"


def poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    """Coefficient-wise convolution of two polynomials."""
    if a.dimension != b.dimension:
        raise DimensionMismatchError(
            f"cannot multiply dimension {a.dimension} by {b.dimension}"
        )
    out: dict[MultiIndex, float] = {}
    for alpha, ca in a.terms.items():
        for beta, cb in b.terms.items():
            gamma = alpha + beta
            out[gamma] = out.get(gamma, 0.0) + ca * cb
    return Polynomial(a.dimension, out)


def poly_diff(p: Polynomial, axis: int) -> Polynomial:
    """Formal partial derivative along one axis."""
    if not 0 <= axis < p.dimension:
        raise ValueError(f"axis {axis} out of range for dimension {p.dimension}")
    out: dict[MultiIndex, float] = {}
    for alpha, c in p.terms.items():
        k = alpha[axis]
        if k == 0:
            continue
        beta = alpha.decrement(axis)
        out[beta] = out.get(beta, 0.0) + c * k
    return Polynomial(p.dimension, out)


def poly_eval(p: Polynomial, x: Sequence[float]) -> float:
    """Evaluate at a single point."""
    if len(x) != p.dimension:
        raise DimensionMismatchError(
            f"point has dimension {len(x)}, polynomial has {p.dimension}"
        )
    total = 0.0
    for alpha, c in p.terms.items():
        term = c
        for e, xi in zip(alpha.exponents, x):
            if e:
                term *= float(xi) ** e
        total += term
    return total


def poly_eval_many(p: Polynomial, points: np.ndarray) -> np.ndarray:
    """Evaluate at an (N, n) array of points; returns shape (N,)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[1] != p.dimension:
        raise DimensionMismatchError(
            f"points have dimension {pts.shape[1]}, polynomial has {p.dimension}"
        )
    out = np.zeros(pts.shape[0])
    for alpha, c in p.terms.items():
        term = np.full(pts.shape[0], c)
        for axis, e in enumerate(alpha.exponents):
            if e:
                term *= pts[:, axis] ** e
        out += term
    return out


def poly_affine_substitute(p: Polynomial, A: np.ndarray, b: np.ndarray) -> Polynomial:
    """Substitute x -> A y + b into p(x); returns q(y) = p(A y + b).

    p has dimension m, A is (m, n), b has length m; the result lives in
    dimension n. Degree never increases under an affine substitution.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != p.dimension or b.shape != (p.dimension,):
        raise DimensionMismatchError(
            f"substitution shapes {A.shape}, {b.shape} do not match dimension {p.dimension}"
        )
    n_out = A.shape[1]
    # Linear image of each input axis, as a polynomial in the output variables.
    axis_polys = []
    for i in range(p.dimension):
        terms: dict[MultiIndex, float] = {MultiIndex((0,) * n_out): float(b[i])}
        for j in range(n_out):
            e = [0] * n_out
            e[j] = 1
            terms[MultiIndex(tuple(e))] = float(A[i, j])
        axis_polys.append(Polynomial(n_out, terms))

    # Cache powers of each axis image up to the degree actually used.
    max_pow = [0] * p.dimension
    for alpha in p.terms:
        for i, e in enumerate(alpha.exponents):
            max_pow[i] = max(max_pow[i], e)
    powers: list[list[Polynomial]] = []
    for i in range(p.dimension):
        row = [Polynomial.constant(n_out, 1.0)]
        for _ in range(max_pow[i]):
            row.append(poly_mul(row[-1], axis_polys[i]))
        powers.append(row)

    result = Polynomial.zero(n_out)
    for alpha, c in p.terms.items():
        term = Polynomial.constant(n_out, c)
        for i, e in enumerate(alpha.exponents):
            if e:
                term = poly_mul(term, powers[i][e])
        result = result + term
    return result


# ---------------------------------------------------------------------------
# Moment vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentVector:
    """Truncated moment vector: m_alpha for all |alpha| <= order.

    The mass entry m_0 must stay within 1e-6 of 1 structurally; contexts
    with tighter requirements (fitting, updates) check their own bounds.
    """

    order: int
    values: dict[MultiIndex, float]
    time: float = 0.0

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if not self.values:
            raise ValueError("empty moment vector")
        n = next(iter(self.values)).dimension
        expected = set(enumerate_multiindices(n, self.order))
        got = set(self.values)
        if got != expected:
            missing = sorted(expected - got, key=graded_lex_key)[:3]
            extra = sorted(got - expected, key=graded_lex_key)[:3]
            raise ValueError(
                f"moment vector must contain exactly all |alpha| <= {self.order}; "
                f"missing={missing} extra={extra}"
            )
        mass = self.values[MultiIndex((0,) * n)]
        if not np.isfinite(mass) or abs(mass - 1.0) > 1e-6:
            raise ValueError(f"mass entry m_0 = {mass!r} is not 1 within 1e-6")

    @property
    def dimension(self) -> int:
        return next(iter(self.values)).dimension

    @property
    def indices(self) -> tuple[MultiIndex, ...]:
        return enumerate_multiindices(self.dimension, self.order)

    def __getitem__(self, alpha) -> float:
        if not isinstance(alpha, MultiIndex):
            alpha = MultiIndex(tuple(alpha))
        return self.values[alpha]

    def as_array(self) -> np.ndarray:
        return np.array([self.values[a] for a in self.indices])

    @staticmethod
    def from_array(order: int, dimension: int, data: Iterable[float],
                   time: float = 0.0) -> "MomentVector":
        idx = enumerate_multiindices(dimension, order)
        data = list(data)
        if len(data) != len(idx):
            raise ValueError(f"expected {len(idx)} entries, got {len(data)}")
        return MomentVector(order, dict(zip(idx, map(float, data))), time)

    def truncate(self, order: int) -> "MomentVector":
        """Restrict to |alpha| <= order (order must not exceed self.order)."""
        if order > self.order:
            raise ValueError("cannot truncate upward")
        keep = {a: v for a, v in self.values.items() if a.degree <= order}
        return MomentVector(order, keep, self.time)


def gaussian_moments_1d(mean: float, std: float, order: int) -> list[float]:
    """Raw moments E[X^k], k = 0..order, of a scalar Gaussian.

    Recurrence M_k = mean*M_{k-1} + (k-1)*std^2*M_{k-2}.
    """
    ms = [1.0, float(mean)]
    for k in range(2, order + 1):
        ms.append(mean * ms[k - 1] + (k - 1) * std * std * ms[k - 2])
    return ms[: order + 1]


def gaussian_product_moments(means: Sequence[float], stds: Sequence[float],
                             order: int, time: float = 0.0) -> MomentVector:
    """Moment vector of an axis-aligned Gaussian (independent coordinates)."""
    n = len(means)
    per_axis = [gaussian_moments_1d(means[i], stds[i], order) for i in range(n)]
    values = {}
    for alpha in enumerate_multiindices(n, order):
        v = 1.0
        for i, e in enumerate(alpha.exponents):
            v *= per_axis[i][e]
        values[alpha] = v
    return MomentVector(order, values, time)


def monomial_design_matrix(points: np.ndarray, indices: Sequence[MultiIndex]) -> np.ndarray:
    """Matrix of monomial values: entry (i, j) = points[i]^indices[j].

    Built from per-axis power tables; the workhorse behind quadrature
    moments and exponent evaluation.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[1]
    max_deg = [0] * n
    for alpha in indices:
        for i, e in enumerate(alpha.exponents):
            max_deg[i] = max(max_deg[i], e)
    # powers[i][k] = pts[:, i] ** k
    powers = []
    for i in range(n):
        row = [np.ones(pts.shape[0])]
        for _ in range(max_deg[i]):
            row.append(row[-1] * pts[:, i])
        powers.append(row)
    cols = []
    for alpha in indices:
        col = powers[0][alpha[0]].copy()
        for i in range(1, n):
            e = alpha[i]
            if e:
                col = col * powers[i][e]
        cols.append(col)
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Text form: "3*x1^2*x2 - 9.81" with variables x1..xn
# ---------------------------------------------------------------------------

_FACTOR_RE = re.compile(r"^(?:x(\d+)(?:\^(\d+))?|([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?))$")


def format_polynomial(p: Polynomial) -> str:
    """Render in the text form accepted by parse_polynomial; round-trips
    double-precision coefficients exactly."""
    if p.is_zero():
        return "0"
    parts = []
    # Highest degree first; within a degree block, graded-lex order.
    display_key = lambda a: (-a.degree,) + tuple(-e for e in a.exponents)
    for alpha in sorted(p.terms, key=display_key):
        c = p.terms[alpha]
        vars_txt = "*".join(
            f"x{i + 1}^{e}" if e > 1 else f"x{i + 1}"
            for i, e in enumerate(alpha.exponents) if e
        )
        mag = abs(c)
        if vars_txt:
            body = vars_txt if mag == 1.0 else f"{mag!r}*{vars_txt}"
        else:
            body = repr(mag)
        if not parts:
            parts.append(body if c >= 0 else f"-{body}")
        else:
            parts.append(f"+ {body}" if c >= 0 else f"- {body}")
    return " ".join(parts)


def _split_terms(text: str) -> list[str]:
    """Split on top-level +/- signs, keeping signs attached; exponent signs
    inside literals like 1e-05 are not split points."""
    terms = []
    current = ""
    for ch in text:
        if ch in "+-" and current and current[-1] not in "eE*^+-":
            terms.append(current)
            current = ch
        else:
            current += ch
    if current:
        terms.append(current)
    return [t for t in terms if t.strip("+ ")]


def parse_polynomial(text: str, dimension: int | None = None) -> Polynomial:
    """Parse the text form; variables are x1..xn.

    If `dimension` is omitted it is inferred from the highest variable
    index present (at least 1).
    """
    compact = text.replace(" ", "")
    if compact in ("", "0", "+0", "-0", "0.0"):
        return Polynomial.zero(dimension or 1)
    raw_terms = _split_terms(compact)
    if not raw_terms:
        raise ShsError(f"cannot parse polynomial {text!r}")

    parsed: list[tuple[float, dict[int, int]]] = []
    max_var = 0
    for raw in raw_terms:
        sign = 1.0
        while raw and raw[0] in "+-":
            if raw[0] == "-":
                sign = -sign
            raw = raw[1:]
        coeff = sign
        exps: dict[int, int] = {}
        for factor in raw.split("*"):
            m = _FACTOR_RE.match(factor)
            if not m:
                raise ShsError(f"cannot parse factor {factor!r} in polynomial {text!r}")
            if m.group(1) is not None:
                idx = int(m.group(1))
                if idx < 1:
                    raise ShsError(f"variable index must be >= 1 in {factor!r}")
                power = int(m.group(2)) if m.group(2) else 1
                exps[idx - 1] = exps.get(idx - 1, 0) + power
                max_var = max(max_var, idx)
            else:
                coeff *= float(m.group(3))
        parsed.append((coeff, exps))

    n = dimension if dimension is not None else max(max_var, 1)
    if max_var > n:
        raise ShsError(f"polynomial {text!r} uses x{max_var} but dimension is {n}")
    terms: dict[MultiIndex, float] = {}
    for coeff, exps in parsed:
        e = [0] * n
        for axis, power in exps.items():
            e[axis] = power
        alpha = MultiIndex(tuple(e))
        terms[alpha] = terms.get(alpha, 0.0) + coeff
    return Polynomial(n, terms)
