import numpy as np
import pytest

from truncllt.checks import per_sample_identities
from truncllt.decomp import BallSpec
from truncllt.tape import (PathContext, ScalarMap, TapeError, apply_elementwise, b_operator, bilinear, chain,
                           commutator_correction, divergence, inverse_with_derivative, lift_constant,
                           lift_coordinate, multiply, relative_gap, set_partitions)


def _ctx(d, n, B=5, seed=0, radius=1.5, theta=1.0):
    rng = np.random.default_rng(seed)
    ball = BallSpec(np.zeros(d), radius)
    # stay well inside the ball so psi > 0
    eta = rng.uniform(-0.5, 0.5, size=(B, n, d))
    return PathContext(eta, theta, ball)


def _square_map():
    def jet(x, q):
        B = x.shape[0]
        if q == 0:
            return x[:, 0] ** 2
        if q == 1:
            return 2 * x
        if q == 2:
            return np.full((B, 1, 1), 2.0)
        return np.zeros((B,) + (1,) * q)
    return ScalarMap(lambda x: x[:, 0] ** 2, jet)


def test_lifted_constant_has_zero_derivatives():
    el = lift_constant(np.ones((3, 2)), 3, 4)
    assert el.order == 3
    for t in el.tensors:
        assert not t.any()
    assert el.tensors[1].shape == (3, 4, 4, 2)


def test_coordinate_gradient_at_center_is_theta_r_squared():
    d, n, r = 2, 3, 1.5
    ctx = PathContext(np.zeros((2, n, d)), 0.7, BallSpec(np.zeros(d), r))
    el = lift_coordinate(ctx, 1, 0, 2)
    expect = np.zeros(ctx.H)
    expect[1 * d + 0] = 0.7 * r**2
    np.testing.assert_allclose(el.tensors[0][0], expect)


def test_coordinate_tensors_match_finite_differences():
    # T_2[a, b] = w_a d/d eta_a T_1[b]
    ctx = _ctx(2, 2, B=1, seed=3)
    m = 3
    f = multiply(apply_elementwise(lift_coordinate(ctx, 0, 0, m),
                                   [np.sin(ctx.eta[:, 0, 0]), np.cos(ctx.eta[:, 0, 0]),
                                    -np.sin(ctx.eta[:, 0, 0]), -np.cos(ctx.eta[:, 0, 0])]),
                 lift_coordinate(ctx, 1, 1, m))

    def first(eta):
        c = PathContext(eta, ctx.theta, ctx.ball)
        g = multiply(apply_elementwise(lift_coordinate(c, 0, 0, 1),
                                       [np.sin(c.eta[:, 0, 0]), np.cos(c.eta[:, 0, 0])]),
                     lift_coordinate(c, 1, 1, 1))
        return g.tensors[0][0]

    h = 1e-6
    w = np.repeat(ctx.weights[0], ctx.d)
    for a in range(ctx.H):
        step = np.zeros(ctx.H)
        step[a] = h
        up = first(ctx.eta + step.reshape(ctx.eta.shape[1:]))
        dn = first(ctx.eta - step.reshape(ctx.eta.shape[1:]))
        np.testing.assert_allclose(f.tensors[1][0, a], w[a] * (up - dn) / (2 * h), atol=1e-7)


def test_chain_square_equals_product():
    ctx = _ctx(1, 3, seed=1)
    x = lift_coordinate(ctx, 1, 0, 3)
    via_chain = chain(_square_map(), [x])
    assert relative_gap(via_chain, multiply(x, x)) <= 1e-13


def test_chain_rejects_mixed_orders():
    ctx = _ctx(1, 2)
    with pytest.raises(TapeError):
        chain(_square_map(), [lift_coordinate(ctx, 0, 0, 2), lift_coordinate(ctx, 1, 0, 3)])


def test_divergence_of_constant_family():
    ctx = _ctx(2, 2, seed=4)
    g = np.random.default_rng(0).normal(size=(ctx.batch, ctx.H))
    div = divergence(lift_constant(g, 1, ctx.H), ctx)
    np.testing.assert_allclose(div.value, -np.sum(ctx.rho * g, axis=1))


def test_b_operator_at_center():
    d, n, r, theta = 2, 2, 1.5, 0.8
    ctx = PathContext(np.zeros((1, n, d)), theta, BallSpec(np.zeros(d), r))
    out = b_operator(lift_constant(np.ones((1, ctx.H)), 1, ctx.H), ctx)
    np.testing.assert_allclose(out.value, 2 * theta**2 * r**2)


def test_commutator_vanishes_in_one_dimension():
    ctx = _ctx(1, 3, seed=5)
    g = bilinear(lift_constant(np.ones((ctx.batch, ctx.H, 1)), 2, ctx.H),
                 ctx.coordinates(2).reshape_v((ctx.H,)), "hk,h->h")
    assert not np.any(commutator_correction(g, ctx).value)


def test_inverse_of_scaled_identity():
    sigma = lift_constant(np.broadcast_to(3.0 * np.eye(2), (4, 2, 2)), 2, 3)
    inv = inverse_with_derivative(sigma, np.ones(4, dtype=bool))
    np.testing.assert_allclose(inv.value, np.broadcast_to(np.eye(2) / 3, (4, 2, 2)))
    assert not inv.tensors[0].any()


def test_inverse_matches_reciprocal_chain_in_one_dimension():
    ctx = _ctx(1, 2, seed=6)
    x = lift_coordinate(ctx, 0, 0, 3) + 2.0
    v = x.value
    recip = apply_elementwise(x, [1 / v, -1 / v**2, 2 / v**3, -6 / v**4])
    inv = inverse_with_derivative(x.reshape_v((1, 1)), np.ones(ctx.batch, dtype=bool))
    assert relative_gap(inv.reshape_v(()), recip) <= 1e-12


def test_inverse_is_zero_off_truncation_set():
    sigma = lift_constant(np.broadcast_to(np.eye(2), (3, 2, 2)), 1, 2)
    inv = inverse_with_derivative(sigma, np.array([True, False, True]))
    assert not inv.value[1].any()


def test_singular_matrix_raises():
    sigma = lift_constant(np.zeros((2, 2, 2)), 1, 2)
    with pytest.raises(TapeError, match="singular"):
        inverse_with_derivative(sigma, np.ones(2, dtype=bool))


def test_sparsity_past_horizon():
    ctx = _ctx(2, 5, seed=7)
    el = lift_coordinate(ctx, 2, 1, 3)
    assert el.active_horizon(ctx.d) == 3


def test_set_partition_counts_are_bell_numbers():
    assert [len(set_partitions(m)) for m in range(6)] == [1, 1, 2, 5, 15, 52]


def test_per_sample_identities_hold():
    for result in per_sample_identities(samples=200, seed=1):
        assert result.passed, result.line()
