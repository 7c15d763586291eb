import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from truncllt.decomp import (BallSpec, DecompositionError, MixtureDecomposition, NuSpec, audit_moments,
                             bernoulli_rate, bernoulli_tail_bound, calibrated_pareto_scale, compose, eps_kappa,
                             mixture_rate_base, moment_matched, psi, psi_grad, rho_vector, sample_ball,
                             sample_noise, sample_noise_batch, standard_decompositions, theta_batch,
                             theta_indicator, varsigma)

# independent high-precision evaluation (mpmath, 30 digits)
PSI_HALF_QUARTER = 0.877382675301661640546
RHO_HALF_QUARTER = 0.065406017970568479565


def test_psi_center_and_boundary():
    ball = BallSpec(np.array([0.3, -1.0]), 1.7)
    assert psi(ball.center, ball) == pytest.approx(1.7**2)
    edge = ball.center + np.array([1.7, 0.0])
    assert psi(edge, ball) == pytest.approx(0.0, abs=1e-12)


def test_psi_gradient_matches_finite_differences():
    ball = BallSpec(np.array([0.2, 0.5, -0.1]), 2.0)
    x = np.array([0.7, -0.3, 0.4])
    h = 1e-6
    fd = np.array([(psi(x + h * e, ball) - psi(x - h * e, ball)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(psi_grad(x, ball), fd, rtol=1e-7)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2 * math.pi))
def test_psi_rotation_invariant(a, b, angle):
    ball = BallSpec(np.array([0.5, -0.25]), 1.5)
    v = np.array([a, b])
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    assert psi(ball.center + rot @ v, ball) == pytest.approx(psi(ball.center + v, ball), abs=1e-9)


def test_alpha_one_always_selects_eta():
    decomp = MixtureDecomposition(1.0, BallSpec(np.zeros(2), 2.0))
    batch = sample_noise_batch(decomp, np.random.default_rng(1), 200, 5)
    assert batch.eps.all()
    np.testing.assert_array_equal(batch.xi, batch.eta)
    draw = sample_noise(decomp, np.random.default_rng(2))
    assert draw.eps == 1
    np.testing.assert_array_equal(draw.xi, draw.eta)


@pytest.mark.parametrize("name", ["uniform", "heavy", "matched"])
def test_composition_identity_exact(name):
    decomp = standard_decompositions(2)[name]
    batch = sample_noise_batch(decomp, np.random.default_rng(3), 500, 4)
    eps = batch.eps[..., None].astype(float)
    np.testing.assert_array_equal(batch.xi - (eps * batch.eta + (1 - eps) * batch.zeta), 0.0)


def test_selection_frequency_within_four_sigma():
    alpha, N = 0.7, 200_000
    decomp = MixtureDecomposition(alpha, BallSpec(np.zeros(1), 1.0), NuSpec("point", {"at": 0.0}))
    eps = sample_noise_batch(decomp, np.random.default_rng(4), N, 1).eps
    assert abs(eps.mean() - alpha) <= 4 * math.sqrt(alpha * (1 - alpha) / N)


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("name", ["uniform", "heavy", "matched"])
def test_shipped_decompositions_are_standardized(d, name):
    decomp = standard_decompositions(d)[name]
    mean, cov = decomp.moments()
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(cov, np.eye(d), atol=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["uniform", "matched"])
def test_moment_audit_million_draws(name):
    audit = audit_moments(standard_decompositions(2)[name], np.random.default_rng(5), draws=10**6)
    assert audit.passed


def test_moment_matched_fourth_moment_is_gaussian():
    # E xi_1^4 = 3 for a standard normal coordinate
    decomp = moment_matched(0.95, 2)
    a, s2 = decomp.ball.radius**2, decomp.nu.params["radius"] ** 2
    d = 2
    # radial moments: ball E|eta|^4 = a^2 d/(d+4); sphere |zeta|^4 = s^4; coordinate factor 3/(d(d+2))
    radial4 = 0.95 * a**2 * d / (d + 4) + 0.05 * s2**2
    assert radial4 * 3 / (d * (d + 2)) == pytest.approx(3.0, rel=1e-10)


def test_theta_threshold_kappa_four():
    assert varsigma(4) == pytest.approx(0.3)
    n = 64
    assert theta_indicator(np.zeros((n, 2)), n, 4) == 1
    zetas = np.zeros((n, 1))
    zetas[7] = 2 * n**0.3
    assert theta_indicator(zetas, n, 4) == 0


def test_theta_batch_matches_indicator():
    decomp = standard_decompositions(1)["heavy"]
    batch = sample_noise_batch(decomp, np.random.default_rng(6), 300, 32)
    vec = theta_batch(batch.zeta, decomp)
    loop = [theta_indicator(batch.zeta[i], 32, decomp.kappa) for i in range(300)]
    np.testing.assert_array_equal(vec, np.array(loop, dtype=bool))


def test_rho_vector_examples():
    ball = BallSpec(np.zeros(1), 1.0)
    np.testing.assert_allclose(rho_vector([[0.5], [-0.25]], 1, ball), [-1.0, 0.5])
    np.testing.assert_array_equal(rho_vector([[0.5], [-0.25]], 0, ball), 0.0)
    centre = BallSpec(np.array([0.3, 0.1]), 2.0)
    np.testing.assert_array_equal(rho_vector([centre.center] * 3, 1, centre), 0.0)


def test_bernoulli_tail_constants():
    assert mixture_rate_base(0.5, 0.25) == pytest.approx(PSI_HALF_QUARTER, rel=1e-12)
    assert bernoulli_rate(0.5, 0.25) == pytest.approx(RHO_HALF_QUARTER, rel=1e-12)
    assert bernoulli_tail_bound(0.5, 0.25, 0) == 1.0
    assert bernoulli_rate(1.0, 0.5) == math.inf


def test_rate_base_below_one_on_grid():
    for alpha in np.linspace(0.02, 0.98, 49):
        for c in np.linspace(0.01, alpha - 0.01, 15):
            if 0 < c < alpha:
                assert mixture_rate_base(alpha, c) < 1.0


def test_rate_base_rejects_c_outside_range():
    with pytest.raises(DecompositionError, match="0, alpha"):
        mixture_rate_base(0.5, 0.5)


@pytest.mark.parametrize("k", [16, 64, 256])
def test_bernoulli_tail_bound_dominates_empirical(k):
    alpha, c, trials = 0.5, 0.25, 100_000
    rng = np.random.default_rng(k)
    counts = rng.binomial(k, alpha, size=trials)
    p = np.mean(counts < c * k)
    se = math.sqrt(max(p * (1 - p), 1.0 / trials) / trials)
    assert p <= bernoulli_tail_bound(alpha, c, k) + 3 * se


def test_eps_kappa_values():
    assert eps_kappa(4) == pytest.approx(0.2)
    assert eps_kappa(6) == pytest.approx(8 / 7)


def test_ball_samples_stay_inside():
    ball = BallSpec(np.array([1.0, -2.0, 0.5]), 0.7)
    pts = sample_ball(np.random.default_rng(7), ball, (5000,))
    assert np.all(np.linalg.norm(pts - ball.center, axis=-1) < ball.radius)


def test_pareto_calibration_gives_unit_variance():
    ball = BallSpec(np.zeros(1), 1.0)
    scale = calibrated_pareto_scale(0.5, ball, 4.5)
    decomp = MixtureDecomposition(0.5, ball, NuSpec("pareto", {"scale": scale, "exponent": 4.5}))
    assert decomp.moments()[1][0, 0] == pytest.approx(1.0)


def test_invalid_decompositions_rejected():
    ball = BallSpec(np.zeros(1), 1.0)
    with pytest.raises(DecompositionError):
        MixtureDecomposition(0.5, ball)
    with pytest.raises(DecompositionError):
        MixtureDecomposition(1.0, ball, kappa=3)
    with pytest.raises(DecompositionError):
        BallSpec(np.zeros(1), -1.0)


def test_compose_selects_by_eps():
    eta = np.array([[[1.0], [2.0]]])
    zeta = np.array([[[-1.0], [-2.0]]])
    np.testing.assert_array_equal(compose(eta, np.array([[True, False]]), zeta), [[[1.0], [-2.0]]])


@settings(max_examples=30)
@given(st.integers(1, 4), st.floats(0.1, 5.0))
def test_sphere_samples_have_fixed_radius(d, radius):
    nu = NuSpec("sphere", {"radius": radius})
    pts = nu.sample(np.random.default_rng(0), (50,), d)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=-1), radius, rtol=1e-12)
