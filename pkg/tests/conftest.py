import numpy as np
import pytest

from shsmoments import MultiIndex, Polynomial, enumerate_multiindices


def random_polynomial(rng: np.random.Generator, n: int, degree: int,
                      density: float = 0.6, scale: float = 2.0) -> Polynomial:
    """Random sparse polynomial for property tests."""
    terms = {}
    for alpha in enumerate_multiindices(n, degree):
        if rng.random() < density:
            terms[alpha] = float(rng.uniform(-scale, scale))
    if not terms:
        terms[MultiIndex((0,) * n)] = 1.0
    return Polynomial(n, terms)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
