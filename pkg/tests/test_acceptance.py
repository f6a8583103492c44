"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The expensive shared inputs (the N=200000 Monte Carlo reference and the
default propagation runs) are session fixtures; their data also lands in
artifacts/acceptance/ through the production CSV writers so the plotting
package can regenerate the figures from real outputs.
"""

import math
import os
import time

import numpy as np
import pytest

from shsmoments import (
    BouncingBallParams,
    BoxDomain,
    FilterConfig,
    MedParams,
    MomentVector,
    MultiIndex,
    bouncing_ball_model,
    boundary_flux,
    enumerate_multiindices,
    fit_med,
    gaussian_product_moments,
    generator_apply,
    guard_rule,
    integrate,
    med_moments,
    normalized_rollout_error,
    poly_eval_many,
    position_measurement_model,
    potential,
    potential_grad,
    potential_hess,
    propagate,
    reference_rule,
    run_filter,
    tensor_rule,
)
from shsmoments import io
from shsmoments.cli import build_filter_scenario, main as cli_main
from shsmoments.config import load_config
from shsmoments.mcref import McConfig, ensemble_moments
from shsmoments.polyalg import Polynomial

from conftest import random_polynomial
from test_filtering import continuous_discrete_kalman, damped_oscillator_model
from test_model import paper_generator_image
from test_polyalg import assert_poly_close, mi
from test_propagate import ou_mean_position, ou_mean_velocity
from test_quad import analytic_box_integral

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ARTIFACTS = os.path.join(REPO, "artifacts", "acceptance")
SMOKE_CFG = os.path.join(REPO, "configs", "smoke.cfg")

# Default physical scenario shared by criteria 6, 7, 9.
NOISE = 0.3
INIT_MEAN = (1.5, 0.0)
INIT_STD = (0.12, 0.3)
MC_SEED = 20240817
T_SPAN = (0.0, 3.0)


def report(criterion: int, passed: bool, detail: str) -> None:
    print(f"[criterion {criterion:02d}] {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def ball_model():
    return bouncing_ball_model(BouncingBallParams(noise=NOISE))


@pytest.fixture(scope="session")
def mc_reference(ball_model):
    """N = 2e5 Monte Carlo reference, recorded to order 6 so skewness
    standard errors are available via the delta method."""
    cfg = McConfig(
        trajectories=200000, dt=1e-4, seed=MC_SEED,
        initial_mean=INIT_MEAN, initial_std=INIT_STD,
        t_span=T_SPAN, record_stride=100,
    )
    t0 = time.time()
    ens = ensemble_moments(ball_model, cfg, 6)
    ens.wall_time = time.time() - t0
    return ens


@pytest.fixture(scope="session")
def prop_r4(ball_model):
    m0 = gaussian_product_moments(INIT_MEAN, INIT_STD, 4)
    t0 = time.time()
    traj = propagate(ball_model, m0, T_SPAN, dt=1e-3)
    traj.wall_time = time.time() - t0
    return traj


@pytest.fixture(scope="session")
def prop_r2(ball_model):
    m0 = gaussian_product_moments(INIT_MEAN, INIT_STD, 2)
    return propagate(ball_model, m0, T_SPAN, dt=1e-3)


def test_criterion_01_quadrature_exactness(rng):
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 4))
        degree = int(rng.integers(0, 8))
        points = (degree + 1 + 1) // 2 + int(rng.integers(0, 3))
        points = max(points, 1)
        lo = rng.uniform(-3, 0, size=n)
        hi = lo + rng.uniform(0.5, 4, size=n)
        box = BoxDomain(lo, hi)
        poly = random_polynomial(rng, n, degree)
        rule = tensor_rule(box, points)
        numeric = integrate(lambda x: poly_eval_many(poly, x), rule)
        exact = analytic_box_integral(poly, box)
        err = abs(numeric - exact) / max(abs(exact), 1e-12)
        worst = max(worst, err)
    passed = worst < 1e-12
    report(1, passed, f"200 random polynomial integrals, worst rel err {worst:.2e}")
    assert passed


def test_criterion_02_maxent_dual(rng):
    box = BoxDomain(np.array([0.0, -6.0]), np.array([3.0, 6.0]))
    rule = reference_rule(box)
    m_probe = gaussian_product_moments([1.5, 0.0], [0.4, 1.5], 4)
    worst_grad = worst_hess = 0.0
    for _ in range(50):
        order = int(rng.integers(2, 5))
        idx = enumerate_multiindices(2, order)[1:]
        lam = MedParams(order=order, domain=box,
                        multipliers={a: float(rng.uniform(-1.2, 1.2)) for a in idx})
        m = m_probe.truncate(order)
        g = potential_grad(lam, m, rule)
        H = potential_hess(lam, rule)
        arr = lam.multiplier_array()
        h = 1e-5
        for j in range(len(arr)):
            up, dn = arr.copy(), arr.copy()
            up[j] += h
            dn[j] -= h
            lam_up = MedParams(order, box, dict(zip(idx, up)))
            lam_dn = MedParams(order, box, dict(zip(idx, dn)))
            fd = (potential(lam_up, m, rule) - potential(lam_dn, m, rule)) / (2 * h)
            scale = max(abs(fd), 1e-7 / 1e-5)
            worst_grad = max(worst_grad, abs(g[j] - fd) / scale)
            fd_col = (potential_grad(lam_up, m, rule) - potential_grad(lam_dn, m, rule)) / (2 * h)
            col_scale = np.maximum(np.abs(fd_col), 1e-2)
            worst_hess = max(worst_hess, float(np.max(np.abs(H[:, j] - fd_col) / col_scale)))
    grad_ok = worst_grad < 1e-5
    hess_ok = worst_hess < 1e-5

    worst_rt = 0.0
    for _ in range(20):
        order = int(rng.integers(2, 5))
        idx = enumerate_multiindices(2, order)[1:]
        truth = MedParams(order=order, domain=box,
                          multipliers={a: float(rng.uniform(-1.5, 1.5)) for a in idx})
        m = med_moments(truth, order, rule)
        lam, rep = fit_med(m, box, rule=rule)
        refit = med_moments(lam, order, rule)
        worst_rt = max(worst_rt, float(np.max(np.abs(refit.as_array() - m.as_array()))))
    rt_ok = worst_rt < 1e-7
    passed = grad_ok and hess_ok and rt_ok
    report(2, passed, f"FD grad {worst_grad:.2e}, FD hess {worst_hess:.2e} (tol 1e-5); "
                      f"fit round-trip {worst_rt:.2e} (tol 1e-7)")
    assert passed


def test_criterion_03_generator_closed_form(ball_model):
    worst = 0.0
    for alpha in enumerate_multiindices(2, 6):
        image = generator_apply(ball_model, Polynomial.monomial(alpha))
        expected = paper_generator_image(alpha.exponents, g=9.81, nu=0.1, sigma=NOISE)
        assert_poly_close(image, expected, tol=1e-12)
        keys = set(image.terms) | set(expected.terms)
        for k in keys:
            worst = max(worst, abs(image.coefficient(k) - expected.coefficient(k)))
    report(3, True, f"all |alpha| <= 6 images match the closed form, "
                    f"worst coefficient gap {worst:.2e}")


def test_criterion_04_pre_impact_analytic(ball_model):
    m0 = gaussian_product_moments([2.5, 0.0], [0.1, 0.2], 2)
    traj = propagate(ball_model, m0, (0.0, 0.3), dt=1e-3)
    flux_max = float(np.max(np.abs(traj.flux_log)))
    v = traj.series(mi(0, 1))
    x = traj.series(mi(1, 0))
    err_v = max(abs(v[i] - ou_mean_velocity(t, 0.0)) for i, t in enumerate(traj.times))
    err_x = max(abs(x[i] - ou_mean_position(t, 2.5, 0.0)) for i, t in enumerate(traj.times))
    passed = flux_max < 1e-10 and err_v < 1e-6 and err_x < 1e-6
    report(4, passed, f"flux {flux_max:.2e} (<1e-10), velocity-mean err {err_v:.2e}, "
                      f"position-mean err {err_x:.2e} (tol 1e-6)")
    assert passed


def test_criterion_05_jump_structure(ball_model):
    from shsmoments import med_from_exponent

    grule = guard_rule(ball_model.guard, ball_model.domain, 64)
    q = Polynomial(2, {mi(2, 0): 1 / (2 * 0.3**2), mi(1, 0): -0.3 / 0.3**2,
                       mi(0, 2): 1 / 2.0, mi(0, 1): 2.0})
    med = med_from_exponent(ball_model.domain, q, order=4,
                            rule=reference_rule(ball_model.domain))
    scale = abs(boundary_flux(ball_model, med, mi(0, 1), grule))
    assert scale > 0
    worst = 0.0
    for alpha in enumerate_multiindices(2, 4):
        if alpha[0] >= 1:
            worst = max(worst, abs(boundary_flux(ball_model, med, alpha, grule)))
    height_ok = worst < 1e-14 * scale

    elastic = bouncing_ball_model(BouncingBallParams(noise=NOISE, restitution=1.0))
    med_e = med_from_exponent(elastic.domain, q, order=4,
                              rule=reference_rule(elastic.domain))
    even = [abs(boundary_flux(elastic, med_e, mi(0, k), grule)) for k in (2, 4)]
    elastic_ok = max(even) == 0.0
    passed = height_ok and elastic_ok
    report(5, passed, f"height-moment flux {worst:.2e} (< 1e-14 x {scale:.2e}); "
                      f"elastic even-moment flux {max(even):.2e}")
    assert passed


def _write_criterion6_artifacts(prop_r4, mc4, err):
    out = os.path.join(ARTIFACTS, "propagate")
    io.atomic_write(os.path.join(out, "moments.csv"), io.trajectory_to_csv(prop_r4, 10))
    io.atomic_write(os.path.join(out, "flux.csv"), io.flux_to_csv(prop_r4, 10))
    picked = sorted(set(list(range(0, len(prop_r4.times), 50)) + [len(prop_r4.times) - 1]))
    io.atomic_write(
        os.path.join(out, "checkpoints.med"),
        io.checkpoints_to_text(
            (float(prop_r4.times[i]), prop_r4.med[i]) for i in picked
        ),
    )
    out = os.path.join(ARTIFACTS, "mc")
    io.atomic_write(os.path.join(out, "ensemble.csv"), io.ensemble_to_csv(mc4))
    io.atomic_write(os.path.join(out, "excess_mass.csv"), io.excess_mass_to_csv(mc4))
    out = os.path.join(ARTIFACTS, "compare")
    io.atomic_write(os.path.join(out, "heatmap.csv"), io.heatmap_to_csv(err))
    io.atomic_write(os.path.join(out, "compare_summary.txt"), io.compare_summary(err))


def test_criterion_06_propagation_vs_mc(ball_model, prop_r4, mc_reference):
    t0 = time.time()
    mc4 = mc_reference.truncate(4)
    err = normalized_rollout_error(prop_r4, mc4)
    _write_criterion6_artifacts(prop_r4, mc4, err)

    failures = []
    excess = float(np.max(mc_reference.excess_mass_fraction))
    if excess >= 1e-3:
        failures.append(f"excess mass {excess:.2e} >= 1e-3")

    entry_fail = {a: v for a, v in err.entries.items() if a.degree >= 1 and v >= 0.1}
    for a, v in sorted(entry_fail.items(), key=lambda kv: kv[1], reverse=True):
        failures.append(f"rollout entry {a.exponents} = {v:.3f} >= 0.1")

    band_fail = []
    for alpha in [a for a in prop_r4.indices if 1 <= a.degree <= 2]:
        prop = np.interp(mc4.times, prop_r4.times, prop_r4.series(alpha))
        ref = mc4.series(alpha)
        se = mc4.se_series(alpha)
        band = np.maximum(0.05 * np.abs(ref), 4 * se)
        bad = np.abs(prop - ref) > band
        if bad.any():
            first = float(mc4.times[bad][0])
            band_fail.append(f"{alpha.exponents} at {int(bad.sum())} times (first t={first:.2f})")
    if band_fail:
        failures.append("pointwise band exceeded for " + "; ".join(band_fail))

    wall = mc_reference.wall_time + prop_r4.wall_time + (time.time() - t0)
    detail = (f"max entry {err.max_defined():.3f}, mean {err.mean_defined():.3f}, "
              f"excess {excess:.1e}, wall {wall:.0f}s")
    if failures:
        report(6, False, detail + " | " + " | ".join(failures))
    else:
        report(6, True, detail)
    assert not failures, "; ".join(failures)


def test_criterion_07_non_gaussian_capture(ball_model, prop_r4, prop_r2, mc_reference):
    # Snapshot just after the first-impact window (impacts cluster near
    # t = 0.55 for the default drop height).
    t_snap = 0.65
    i_mc = int(np.argmin(np.abs(mc_reference.times - t_snap)))
    mk = [1.0] + [float(mc_reference.series(MultiIndex((0, k)))[i_mc]) for k in range(1, 7)]
    m1, m2, m3 = mk[1], mk[2], mk[3]
    mu2, mu3 = m2 - m1**2, m3 - 3 * m1 * m2 + 2 * m1**3
    skew_mc = mu3 / mu2**1.5
    d_mu2 = np.array([-2 * m1, 1.0, 0.0])
    d_mu3 = np.array([-3 * m2 + 6 * m1**2, -3 * m1, 1.0])
    dg = d_mu3 / mu2**1.5 - 1.5 * mu3 / mu2**2.5 * d_mu2
    cov = np.empty((3, 3))
    for a in range(1, 4):
        for b in range(1, 4):
            cov[a - 1, b - 1] = (mk[a + b] - mk[a] * mk[b]) / mc_reference.trajectories
    se_mc = float(np.sqrt(dg @ cov @ dg))

    rule = reference_rule(ball_model.domain)

    def med_velocity_skew(traj):
        i = int(np.argmin(np.abs(traj.times - t_snap)))
        mm = med_moments(traj.med[i], 3, rule)
        a1, a2, a3 = (mm[MultiIndex((0, k))] for k in (1, 2, 3))
        c2, c3 = a2 - a1**2, a3 - 3 * a1 * a2 + 2 * a1**3
        return c3 / c2**1.5

    skew_r4 = med_velocity_skew(prop_r4)
    skew_r2 = med_velocity_skew(prop_r2)

    significant = abs(skew_r4) > 3 * se_mc
    sign_ok = np.sign(skew_r4) == np.sign(skew_mc)
    # The r=2 exponent is quadratic, so its reconstruction carries no
    # skewness of its own; what remains is box truncation, an order of
    # magnitude below the captured signal.
    contrast_ok = abs(skew_r2) <= 0.15 * abs(skew_r4)
    passed = significant and sign_ok and contrast_ok
    report(7, passed, f"MC skew {skew_mc:+.3f} +- {se_mc:.3f}, r=4 MED {skew_r4:+.3f}, "
                      f"r=2 MED {skew_r2:+.3f}")
    assert passed


def test_criterion_08_kalman_cross_check():
    from shsmoments import MeasurementRecord, simulate_path

    model = damped_oscillator_model(noise=0.3, half=3.0)
    mean0, std0 = [1.0, 0.0], [0.3, 0.4]
    m0 = gaussian_product_moments(mean0, std0, 2)
    sigma_m = 0.3
    meas = position_measurement_model(2, 0.0, sigma_m, order=2)
    rng = np.random.default_rng(2024)
    truth = simulate_path(model, (1.05, -0.1), (0.0, 2.0), 1e-3, seed=99)
    records = []
    for k in range(1, 21):
        t = 0.1 * k
        i = int(np.argmin(np.abs(truth.times - t)))
        records.append(MeasurementRecord(t, float(
            truth.states[i, 0] + sigma_m * rng.standard_normal()
        )))
    config = FilterConfig(measurement=meas, t_span=(0.0, 2.0), dt=1e-3,
                          output_stride=100, state_points=96)
    run = run_filter(model, m0, records, config)

    A = np.array([[0.0, 1.0], [-1.0, -1.0]])
    Q = np.array([[0.0, 0.0], [0.0, 0.3**2]])
    C = np.array([[1.0, 0.0]])
    oracle = continuous_discrete_kalman(A, np.zeros(2), Q, C, sigma_m**2,
                                        mean0, np.diag(np.array(std0) ** 2),
                                        records, 0.0)
    worst = 0.0
    for t_k, mean_k, cov_k in oracle:
        i = int(np.argmin(np.abs(run.times - t_k)))
        post = run.posterior_vector(i)
        worst = max(worst, abs(post[mi(1, 0)] - mean_k[0]))
        worst = max(worst, abs(post[mi(0, 1)] - mean_k[1]))
        worst = max(worst, abs(post[mi(2, 0)] - post[mi(1, 0)] ** 2 - cov_k[0, 0]))
        worst = max(worst, abs(post[mi(0, 2)] - post[mi(0, 1)] ** 2 - cov_k[1, 1]))
    passed = worst < 1e-3
    report(8, passed, f"20 updates over 2 s, worst mean/variance gap vs exact "
                      f"continuous-discrete recursion {worst:.2e} (tol 1e-3)")
    assert passed


def test_criterion_09_filtering_rmse(ball_model):
    cfg = load_config(os.path.join(REPO, "configs", "bouncing_ball_filter.cfg"))
    t0 = time.time()
    pos, vel = [], []
    for k, seed in enumerate(range(101, 111)):
        truth, schedule = build_filter_scenario(cfg, seed)
        m0 = gaussian_product_moments(cfg.initial_mean, cfg.initial_std, cfg.filter.order)
        run = run_filter(cfg.model, m0, schedule, cfg.filter_config(),
                         truth=(truth.times, truth.states))
        pos.append(run.position_rmse)
        vel.append(run.velocity_rmse)
        assert np.all(np.abs(run.post_moments[:, 0] - 1.0) < 1e-6)
        if k == 0:
            out = os.path.join(ARTIFACTS, "filter")
            io.atomic_write(os.path.join(out, "filter.csv"),
                            io.filter_run_to_csv(run, truth=(truth.times, truth.states)))
            io.atomic_write(os.path.join(out, "measurements.csv"),
                            io.schedule_to_csv(schedule))
            io.atomic_write(os.path.join(out, "rmse_summary.txt"), io.rmse_summary(run))
            entries = []
            for t_snap in cfg.filter.snapshot_times:
                i = int(np.argmin(np.abs(run.times - t_snap)))
                entries.append((float(run.times[i]), run.med[i]))
            io.atomic_write(os.path.join(out, "checkpoints.med"),
                            io.checkpoints_to_text(entries))
    mean_pos = float(np.mean(pos))
    mean_vel = float(np.mean(vel))
    wall = time.time() - t0
    passed = mean_pos <= 0.1 and mean_vel <= 1.5
    report(9, passed, f"10 seeds: position RMSE {mean_pos:.4f} m (<= 0.1, noise floor "
                      f"~0.112), velocity RMSE {mean_vel:.3f} m/s (<= 1.5), wall {wall:.0f}s")
    assert passed


def test_criterion_10_conservation_and_determinism(prop_r4, tmp_path):
    drift = float(np.max(np.abs(prop_r4.moments[:, 0] - 1.0)))
    span = float(prop_r4.times[-1] - prop_r4.times[0])
    mass_ok = drift < 1e-8 * span

    identical = True
    for command in ("propagate", "mc", "filter"):
        a = str(tmp_path / f"{command}_a")
        b = str(tmp_path / f"{command}_b")
        assert cli_main([command, "--config", SMOKE_CFG, "--out", a, "--quiet"]) == 0
        assert cli_main([command, "--config", SMOKE_CFG, "--out", b, "--quiet"]) == 0
        for name in sorted(os.listdir(a)):
            if not name.endswith(".csv") and not name.endswith(".med"):
                continue
            with open(os.path.join(a, name), "rb") as fa, \
                 open(os.path.join(b, name), "rb") as fb:
                if fa.read() != fb.read():
                    identical = False
    passed = mass_ok and identical
    report(10, passed, f"mass drift {drift:.2e} over {span:.0f}s (< 1e-8/s); "
                       f"seeded reruns byte-identical: {identical}")
    assert passed
