import math

import numpy as np
import pytest

from truncllt.decomp import standard_decompositions
from truncllt.model import catalog_entry
from truncllt.parallel import chunk_rng
from truncllt.scheme import simulate_batch, truncation_batch
from truncllt.tape import PathContext, relative_gap
from truncllt.weights import (WeightError, affine_coefficients, compute_weights, derivative_recursion, malliavin_matrix,
                              norm_diagnostics, sigma_from_exponent, stochastic_exponent, tape_state,
                              weight_ladder)


def _batch(name, d, n, paths, preset="uniform", seed=0, **kw):
    entry = catalog_entry(name, d, **kw)
    decomp = standard_decompositions(d)[preset]
    batch = simulate_batch(entry.spec, decomp, np.zeros(d), n, paths, chunk_rng(seed, 0, 0))
    return entry.spec, decomp, batch


def test_iid_first_derivative_formula():
    spec, decomp, batch = _batch("iid", 1, 12, 20, preset="heavy")
    rec = derivative_recursion(batch, spec, 1.0, 2, decomp.ball)
    psi = decomp.ball.radius**2 - batch.noise.eta[..., 0] ** 2
    expect = batch.theta[:, None] * psi * batch.noise.eps / math.sqrt(12)
    np.testing.assert_allclose(rec.Y[..., 0], expect, atol=1e-15)
    # second derivatives only live within a step
    off = rec.Y2[..., 0] * (1 - np.eye(12))
    assert not off.any()


@pytest.mark.parametrize("d", [1, 2])
def test_recursion_matches_tape(d):
    spec, decomp, batch = _batch("trig", d, 6, 8, preset="heavy", seed=d)
    rec = derivative_recursion(batch, spec, 1.0, 3, decomp.ball)
    tape, _ = tape_state(batch, spec, 1.0, 3, decomp.ball)
    assert relative_gap(rec.element(), tape) <= 1e-11


def test_recursion_matches_tape_between_knots():
    spec, decomp, batch = _batch("ou_bounded", 1, 8, 8, seed=3)
    rec = derivative_recursion(batch, spec, 0.6, 2, decomp.ball)
    tape, _ = tape_state(batch, spec, 0.6, 2, decomp.ball)
    assert relative_gap(rec.element(), tape) <= 1e-11


def test_exponent_cocycle_and_inverse():
    spec, decomp, batch = _batch("trig", 2, 10, 5)
    ex = stochastic_exponent(batch, spec, decomp)
    np.testing.assert_allclose(ex.between(3, 9) @ ex.between(0, 3), ex.between(0, 9), atol=1e-12)
    np.testing.assert_allclose(ex.inverse_between(2, 7) @ ex.between(2, 7),
                               np.broadcast_to(np.eye(2), (5, 2, 2)), atol=1e-12)
    np.testing.assert_allclose(ex.to_step(10)[:, 4], ex.between(4, 10), atol=1e-12)


def test_censored_exponent_drops_large_singular_draws():
    spec, decomp, batch = _batch("trig", 1, 32, 200, preset="heavy")
    plain = stochastic_exponent(batch, spec, decomp, check=False)
    tilde = stochastic_exponent(batch, spec, decomp, tilde=True, check=False)
    big = np.abs(batch.noise.zeta[..., 0]) > decomp.theta_threshold(32)
    same = np.all(np.isclose(plain.factors, tilde.factors), axis=(2, 3))
    np.testing.assert_array_equal(same | big, True)


def test_iid_sigma_formula():
    spec, decomp, batch = _batch("iid", 1, 16, 30, preset="heavy")
    sigma = sigma_from_exponent(batch, spec, decomp.ball, 16)
    psi = decomp.ball.radius**2 - batch.noise.eta[..., 0] ** 2
    expect = batch.theta * np.sum(batch.noise.eps * psi**2, axis=1) / 16
    np.testing.assert_allclose(sigma[:, 0, 0], expect)


def test_sigma_at_center_is_r_to_the_fourth():
    spec, decomp, batch = _batch("iid", 1, 4, 1)
    batch.noise.eta[:] = 0.0
    sigma = sigma_from_exponent(batch, spec, decomp.ball, 4)
    assert sigma[0, 0, 0] == pytest.approx(decomp.ball.radius**4)


def test_exponent_sigma_matches_gradient_gram_matrix():
    spec, decomp, batch = _batch("trig", 2, 8, 6, seed=5)
    rec = derivative_recursion(batch, spec, 1.0, 1, decomp.ball)
    direct = malliavin_matrix(rec, batch.theta).sigma.value
    np.testing.assert_allclose(sigma_from_exponent(batch, spec, decomp.ball, 8), direct, rtol=1e-11, atol=1e-14)


def test_weights_vanish_off_truncation_set():
    spec, decomp, batch = _batch("trig", 1, 8, 10)
    on = np.arange(10) % 2 == 0
    out = compute_weights(batch, spec, decomp.ball, 1.0, on)
    assert not out["Upsilon"][~on].any()
    assert np.all(out["Upsilon"][on] != 0)


@pytest.mark.parametrize("d,gradient", [(1, False), (2, False), (1, True)])
def test_affine_closed_form_matches_ladder(d, gradient):
    spec, decomp, batch = _batch("constant", d, 5, 12, preset="heavy", seed=d, a0=0.3)
    on = batch.theta & (batch.noise.eps.sum(axis=1) >= 2)
    fast = compute_weights(batch, spec, decomp.ball, 1.0, on, gradient, method="affine")
    slow = compute_weights(batch, spec, decomp.ball, 1.0, on, gradient, method="dense")
    np.testing.assert_allclose(fast["Upsilon"], slow["Upsilon"], rtol=1e-9, atol=1e-12)
    if gradient:
        np.testing.assert_allclose(fast["Upsilon_i"], slow["Upsilon_i"], rtol=1e-9, atol=1e-12)


def test_one_step_weight_closed_form():
    # n = 1: Df = w, so the weight is delta(1/w)
    spec, decomp, batch = _batch("iid", 1, 1, 50)
    # -rho/w = 2 eta/w and -X(1/w) = -2 eta/w cancel
    expect = np.zeros(50)
    out = compute_weights(batch, spec, decomp.ball, 1.0, np.ones(50, dtype=bool), method="dense")
    np.testing.assert_allclose(out["Upsilon"], expect, atol=1e-12)


def test_truncated_integration_by_parts():
    # E[phi'(F) 1_Xi] = E[phi(F) Upsilon] for phi = sin
    spec, decomp, batch = _batch("ou_bounded", 1, 16, 100_000, preset="heavy", seed=9)
    on = truncation_batch(batch, 1.0, 0.25, 1)
    out = compute_weights(batch, spec, decomp.ball, 1.0, on)
    f = out["value"][:, 0]
    diff = np.cos(f) * on - np.sin(f) * out["Upsilon"]
    se = diff.std(ddof=1) / math.sqrt(len(diff))
    assert abs(diff.mean()) <= 3 * se


def test_ladder_rejects_low_order():
    spec, decomp, batch = _batch("trig", 2, 4, 3)
    rec = derivative_recursion(batch, spec, 1.0, 2, decomp.ball)
    ctx = PathContext(batch.noise.eta, batch.theta.astype(float), decomp.ball)
    with pytest.raises(WeightError, match="order 3"):
        weight_ladder(malliavin_matrix(rec, batch.theta), rec, ctx)


def test_unsupported_regimes_raise():
    spec, decomp, batch = _batch("trig", 2, 4, 3)
    with pytest.raises(WeightError):
        compute_weights(batch, spec, decomp.ball, 1.0, batch.theta, gradient=True)
    with pytest.raises(WeightError):
        derivative_recursion(batch, spec, 1.0, 4, decomp.ball)


def test_norm_diagnostics_paths():
    spec, decomp, batch = _batch("constant", 1, 8, 50)
    coef = affine_coefficients(batch, spec, 1.0)
    out = norm_diagnostics(coef, batch.noise.eta, batch.theta.astype(float), decomp.ball,
                           rho_inv=np.ones((50, 1, 1)))
    assert out["orders"] == 4 and out["N_d"] > 0 and out["K_d"] > 0
    with pytest.raises(WeightError):
        norm_diagnostics()
