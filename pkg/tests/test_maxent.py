import math

import numpy as np
import pytest

from shsmoments import (
    BoxDomain,
    MedParams,
    MomentVector,
    MultiIndex,
    Polynomial,
    enumerate_multiindices,
    fit_med,
    gaussian_product_moments,
    log_partition,
    med_density,
    med_density_grad,
    med_from_exponent,
    med_from_record,
    med_moments,
    med_to_record,
    potential,
    potential_grad,
    potential_hess,
    reference_rule,
    tensor_rule,
)
from shsmoments.errors import NonRealizableError

from test_polyalg import mi


BALL_BOX = BoxDomain(np.array([0.0, -6.0]), np.array([3.0, 6.0]))
SYM_1D = BoxDomain(np.array([-6.0]), np.array([6.0]))


def uniform_moments(domain: BoxDomain, order: int) -> MomentVector:
    """Independent oracle: exact moments of the uniform density on a box."""
    values = {}
    for alpha in enumerate_multiindices(domain.dimension, order):
        v = 1.0
        for i, k in enumerate(alpha.exponents):
            lo, hi = domain.lower[i], domain.upper[i]
            v *= (hi ** (k + 1) - lo ** (k + 1)) / ((k + 1) * (hi - lo))
        values[alpha] = v
    return MomentVector(order, values)


def random_med(rng, domain: BoxDomain, order: int, scale: float = 1.5) -> MedParams:
    idx = enumerate_multiindices(domain.dimension, order)[1:]
    multipliers = {a: float(rng.uniform(-scale, scale)) for a in idx}
    return MedParams(order=order, domain=domain, multipliers=multipliers)


class TestLogPartition:
    def test_uniform_is_log_volume(self):
        lam = MedParams(order=2, domain=BALL_BOX, multipliers={})
        assert log_partition(lam, reference_rule(BALL_BOX)) == pytest.approx(
            math.log(36.0), abs=1e-12
        )

    def test_gaussian_integral(self):
        lam = med_from_exponent(SYM_1D, Polynomial(1, {mi(2): 0.5}))
        value = log_partition(lam, reference_rule(SYM_1D))
        assert value == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-8)

    def test_exponential_integral(self):
        box = BoxDomain(np.array([0.0]), np.array([1.0]))
        lam = med_from_exponent(box, Polynomial(1, {mi(1): 1.0}))
        value = log_partition(lam, reference_rule(box))
        assert value == pytest.approx(math.log(1 - math.exp(-1)), abs=1e-12)

    def test_shift_invariance(self, rng):
        lam = random_med(rng, BALL_BOX, 3)
        rule = reference_rule(BALL_BOX)
        base = log_partition(lam, rule)
        shifted = MedParams(order=lam.order, domain=lam.domain,
                            multipliers=lam.multipliers, offset=lam.offset + 2.75)
        assert log_partition(shifted, rule) == pytest.approx(base - 2.75, abs=1e-12)

    def test_refinement_stability(self, rng):
        lam = random_med(rng, BALL_BOX, 4, scale=1.0)
        coarse = log_partition(lam, tensor_rule(BALL_BOX, 64))
        fine = log_partition(lam, tensor_rule(BALL_BOX, 128))
        assert abs(coarse - fine) < 1e-8


class TestPotential:
    def test_uniform_value(self):
        lam = MedParams(order=2, domain=BALL_BOX, multipliers={})
        m = uniform_moments(BALL_BOX, 2)
        assert potential(lam, m, reference_rule(BALL_BOX)) == pytest.approx(
            math.log(36.0), abs=1e-12
        )

    def test_value_at_gaussian_optimum(self):
        # Gamma = log sqrt(2 pi) + 0.5 at the standard-normal optimum.
        lam = med_from_exponent(SYM_1D, Polynomial(1, {mi(2): 0.5}))
        m = gaussian_product_moments([0.0], [1.0], 2)
        value = potential(lam, m, reference_rule(SYM_1D))
        assert value == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, abs=1e-8)

    def test_optimum_is_minimum(self, rng):
        m = gaussian_product_moments([1.4, 0.3], [0.25, 0.9], 2)
        rule = reference_rule(BALL_BOX)
        lam, _ = fit_med(m, BALL_BOX, rule=rule)
        base = potential(lam, m, rule)
        arr = lam.multiplier_array()
        for _ in range(50):
            perturbed = arr + rng.uniform(-0.3, 0.3, size=arr.shape)
            cand = MedParams(order=lam.order, domain=lam.domain,
                             multipliers=dict(zip(lam.indices, perturbed)))
            assert potential(cand, m, rule) >= base - 1e-9

    def test_convexity_probe(self, rng):
        rule = reference_rule(BALL_BOX)
        m = uniform_moments(BALL_BOX, 3)
        for _ in range(10):
            lam1 = random_med(rng, BALL_BOX, 3)
            lam2 = random_med(rng, BALL_BOX, 3)
            theta = float(rng.uniform(0.05, 0.95))
            mix = theta * lam1.multiplier_array() + (1 - theta) * lam2.multiplier_array()
            lam_mix = MedParams(order=3, domain=BALL_BOX,
                                multipliers=dict(zip(lam1.indices, mix)))
            lhs = potential(lam_mix, m, rule)
            rhs = theta * potential(lam1, m, rule) + (1 - theta) * potential(lam2, m, rule)
            assert lhs <= rhs + 1e-9


class TestDerivatives:
    def test_gradient_zero_for_matched_uniform(self):
        lam = MedParams(order=1, domain=BALL_BOX, multipliers={})
        m = uniform_moments(BALL_BOX, 1)
        g = potential_grad(lam, m, reference_rule(BALL_BOX))
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_gradient_matches_finite_differences(self, rng):
        rule = reference_rule(BALL_BOX)
        m = gaussian_product_moments([1.5, 0.0], [0.4, 1.5], 3)
        for _ in range(5):
            lam = random_med(rng, BALL_BOX, 3, scale=1.0)
            g = potential_grad(lam, m, rule)
            arr = lam.multiplier_array()
            h = 1e-5
            for j in range(len(arr)):
                up, dn = arr.copy(), arr.copy()
                up[j] += h
                dn[j] -= h
                gp = potential(MedParams(3, BALL_BOX, dict(zip(lam.indices, up))), m, rule)
                gm = potential(MedParams(3, BALL_BOX, dict(zip(lam.indices, dn))), m, rule)
                fd = (gp - gm) / (2 * h)
                assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_hessian_uniform_variance(self):
        box = BoxDomain(np.array([-1.0]), np.array([1.0]))
        lam = MedParams(order=1, domain=box, multipliers={})
        H = potential_hess(lam, reference_rule(box))
        assert H.shape == (1, 1)
        assert H[0, 0] == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_hessian_symmetric_and_matches_fd(self, rng):
        rule = reference_rule(BALL_BOX)
        m = uniform_moments(BALL_BOX, 2)
        lam = random_med(rng, BALL_BOX, 2, scale=1.0)
        H = potential_hess(lam, rule)
        np.testing.assert_array_equal(H, H.T)
        arr = lam.multiplier_array()
        h = 1e-5
        for j in range(len(arr)):
            up, dn = arr.copy(), arr.copy()
            up[j] += h
            dn[j] -= h
            gp = potential_grad(MedParams(2, BALL_BOX, dict(zip(lam.indices, up))), m, rule)
            gm = potential_grad(MedParams(2, BALL_BOX, dict(zip(lam.indices, dn))), m, rule)
            fd_col = (gp - gm) / (2 * h)
            np.testing.assert_allclose(H[:, j], fd_col, rtol=1e-5, atol=1e-7)

    def test_hessian_cholesky_factorable(self, rng):
        rule = reference_rule(BALL_BOX)
        m = gaussian_product_moments([1.5, 0.0], [0.3, 1.0], 4)
        lam, _ = fit_med(m, BALL_BOX, rule=rule)
        H = potential_hess(lam, rule)
        np.linalg.cholesky(H)  # must not raise


class TestFit:
    def test_gaussian_closure_r2(self):
        rule = reference_rule(BALL_BOX)
        m = gaussian_product_moments([1.5, 0.0], [0.2, 0.5], 2)
        lam, report = fit_med(m, BALL_BOX, rule=rule)
        assert report.converged
        fitted = med_moments(lam, 2, rule)
        mean = (fitted[mi(1, 0)], fitted[mi(0, 1)])
        assert mean[0] == pytest.approx(1.5, abs=1e-6)
        assert mean[1] == pytest.approx(0.0, abs=1e-6)
        var1 = fitted[mi(2, 0)] - mean[0] ** 2
        var2 = fitted[mi(0, 2)] - mean[1] ** 2
        assert var1 == pytest.approx(0.04, abs=1e-6)
        assert var2 == pytest.approx(0.25, abs=1e-6)

    def test_uniform_from_uniform_moments(self):
        rule = reference_rule(BALL_BOX)
        lam, report = fit_med(uniform_moments(BALL_BOX, 2), BALL_BOX, rule=rule)
        assert report.converged
        np.testing.assert_allclose(lam.multiplier_array(), 0.0, atol=1e-9)
        assert lam.log_partition == pytest.approx(math.log(36.0), abs=1e-9)

    def test_round_trip_random_meds(self, rng):
        rule = reference_rule(BALL_BOX)
        for _ in range(8):
            truth = random_med(rng, BALL_BOX, 3, scale=1.2)
            m = med_moments(truth, 3, rule)
            lam, report = fit_med(m, BALL_BOX, rule=rule)
            assert report.converged
            refit = med_moments(lam, 3, rule)
            np.testing.assert_allclose(refit.as_array(), m.as_array(), atol=1e-7)

    def test_warm_start_converges_fast(self):
        rule = reference_rule(BALL_BOX)
        m1 = gaussian_product_moments([1.5, 0.0], [0.3, 1.0], 3)
        lam1, _ = fit_med(m1, BALL_BOX, rule=rule)
        m2 = gaussian_product_moments([1.48, 0.05], [0.31, 1.02], 3)
        _, report = fit_med(m2, BALL_BOX, init=lam1, rule=rule)
        assert report.iterations <= 6

    def test_non_realizable_rejected(self):
        box = BoxDomain(np.array([-1.0]), np.array([1.0]))
        # Variance would be 0.2 - 0.25 < 0: no density has these moments.
        values = {mi(0): 1.0, mi(1): 0.5, mi(2): 0.2}
        with pytest.raises(NonRealizableError):
            fit_med(MomentVector(2, values), box)


class TestDensity:
    def test_uniform_density_value(self):
        lam = MedParams(order=2, domain=BALL_BOX, multipliers={})
        inside = med_density(lam, np.array([1.0, 0.0]))
        assert inside == pytest.approx(1.0 / 36.0, rel=1e-12)
        outside = med_density(lam, np.array([5.0, 0.0]))
        assert outside == 0.0

    def test_gradient_zero_at_mode(self):
        rule = reference_rule(BALL_BOX)
        m = gaussian_product_moments([1.5, 0.0], [0.2, 0.5], 2)
        lam, _ = fit_med(m, BALL_BOX, rule=rule)
        grad = med_density_grad(lam, np.array([1.5, 0.0]))
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_gradient_matches_finite_differences(self, rng):
        lam = random_med(rng, BALL_BOX, 3, scale=0.8)
        x = np.array([1.2, -2.0])
        g = med_density_grad(lam, x)
        h = 1e-6
        for i in range(2):
            up, dn = x.copy(), x.copy()
            up[i] += h
            dn[i] -= h
            fd = (med_density(lam, up) - med_density(lam, dn)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-6, abs=1e-12)

    def test_normalization(self, rng):
        rule = reference_rule(BALL_BOX)
        lam = random_med(rng, BALL_BOX, 4, scale=1.0)
        p = med_density(lam, rule.nodes)
        assert float(np.sum(rule.weights * p)) == pytest.approx(1.0, abs=1e-8)


class TestMedMoments:
    def test_uniform_box_moments(self):
        rule = reference_rule(BALL_BOX)
        lam = MedParams(order=2, domain=BALL_BOX, multipliers={})
        m = med_moments(lam, 2, rule)
        assert m[mi(1, 0)] == pytest.approx(1.5, rel=1e-12)
        assert m[mi(0, 1)] == pytest.approx(0.0, abs=1e-12)
        assert m[mi(0, 2)] == pytest.approx(12.0, rel=1e-12)

    def test_gaussian_moments_match(self):
        rule = reference_rule(BALL_BOX)
        m = gaussian_product_moments([1.5, 0.0], [0.2, 0.5], 2)
        lam, _ = fit_med(m, BALL_BOX, rule=rule)
        out = med_moments(lam, 2, rule)
        np.testing.assert_allclose(out.as_array(), m.as_array(), atol=1e-6)


class TestSerialization:
    def test_record_round_trip(self, rng):
        lam = random_med(rng, BALL_BOX, 4, scale=2.0)
        lam, _ = (lam, None)
        text = med_to_record(lam)
        back = med_from_record(text)
        assert back.order == lam.order
        assert back.domain.key() == lam.domain.key()
        assert back.multipliers == lam.multipliers
        assert back.offset == lam.offset

    def test_fitted_round_trip_preserves_partition(self):
        rule = reference_rule(BALL_BOX)
        m = gaussian_product_moments([1.5, 0.0], [0.3, 1.0], 2)
        lam, _ = fit_med(m, BALL_BOX, rule=rule)
        back = med_from_record(med_to_record(lam))
        assert back.log_partition == lam.log_partition
        x = np.array([1.2, 0.4])
        assert med_density(back, x) == med_density(lam, x)
