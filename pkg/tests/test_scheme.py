import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from truncllt.decomp import BallSpec, MixtureDecomposition, standard_decompositions
from truncllt.model import catalog_entry, model_from_callables
from truncllt.parallel import chunk_rng
from truncllt.scheme import (SchemeError, active_steps, euler_step, gates_open, grid_position, interpolate,
                             interpolate_states, n_star, replay_states, simulate_batch, simulate_path,
                             truncation_batch, truncation_witness)


def _const(dim, drift, diffusion, **kw):
    a = np.asarray(drift, dtype=float)
    b = np.asarray(diffusion, dtype=float).reshape(dim, dim)
    return model_from_callables(dim, lambda x: np.broadcast_to(a, x.shape).copy(),
                                lambda x: np.broadcast_to(b, (x.shape[0], dim, dim)).copy(), **kw)


def test_euler_step_examples():
    iid = catalog_entry("iid", 1).spec
    assert euler_step([0.0], [1.0], iid, 4)[0] == pytest.approx(0.5)
    assert euler_step([0.3], [0.0], iid, 9)[0] == 0.3
    spec = _const(1, [1.0], [2.0])
    assert euler_step([0.0], [1.0], spec, 4)[0] == pytest.approx(1.25)


def test_deterministic_drift_reaches_x0_plus_one():
    spec = _const(1, [1.0], [0.0], drift_grad_sup=0.0, diffusion_grad_sup=0.0)
    decomp = standard_decompositions(1)["uniform"]
    path = simulate_path(spec, decomp, [0.25], 16, np.random.default_rng(0))
    assert path.states[-1, 0] == pytest.approx(1.25, abs=1e-14)


def test_states_start_at_x0_and_replay_exactly():
    entry = catalog_entry("trig", 2)
    decomp = standard_decompositions(2)["heavy"]
    batch = simulate_batch(entry.spec, decomp, [0.1, -0.2], 24, 50, chunk_rng(1, 0, 0))
    np.testing.assert_array_equal(batch.states[:, 0], np.broadcast_to([0.1, -0.2], (50, 2)))
    np.testing.assert_array_equal(replay_states(entry.spec, batch.x0, batch.noise.xi), batch.states)


def test_same_stream_gives_identical_serialization():
    entry = catalog_entry("ou_bounded", 1)
    decomp = standard_decompositions(1)["heavy"]
    a = simulate_path(entry.spec, decomp, [0.0], 32, chunk_rng(7, 0, 3), seed_tag=(7, 0, 3))
    b = simulate_path(entry.spec, decomp, [0.0], 32, chunk_rng(7, 0, 3), seed_tag=(7, 0, 3))
    assert a.serialize() == b.serialize()
    c = simulate_path(entry.spec, decomp, [0.0], 32, chunk_rng(7, 0, 4))
    assert a.serialize() != c.serialize()


def test_clt_normalization_variance():
    spec = catalog_entry("iid", 1).spec
    decomp = standard_decompositions(1)["uniform"]
    end = simulate_batch(spec, decomp, [0.0], 32, 100_000, np.random.default_rng(11)).states[:, -1, 0]
    var = end.var(ddof=1)
    # SE of the sample variance from the fourth moment
    se = math.sqrt((np.mean(end**4) - var**2) / len(end))
    assert abs(var - 1.0) <= 3 * se


def test_interpolation_knots_and_midpoints():
    states = np.array([[0.0], [1.0], [4.0]])
    assert interpolate_states(states, 0.5)[0] == 1.0
    assert interpolate_states(states, 0.75)[0] == pytest.approx(2.5)
    assert interpolate_states(states, 0.3)[0] == pytest.approx(0.6)


@given(st.integers(1, 200), st.integers(0, 200))
def test_grid_position_on_knots(n, k):
    k = min(k, n)
    pos, frac = grid_position(k / n, n)
    assert (pos, frac) == (k, 0.0)
    assert active_steps(k / n, n) == k


def test_grid_position_rejects_outside_unit_interval():
    with pytest.raises(SchemeError):
        grid_position(1.5, 4)


def test_interpolate_path_object():
    entry = catalog_entry("iid", 1)
    path = simulate_path(entry.spec, standard_decompositions(1)["uniform"], [0.0], 8, np.random.default_rng(2))
    mid = interpolate(path, 3.5 / 8)
    assert mid[0] == pytest.approx(0.5 * (path.states[3, 0] + path.states[4, 0]))


def test_truncation_witness_rules():
    spec = catalog_entry("iid", 1).spec
    decomp = standard_decompositions(1)["uniform"]
    path = simulate_path(spec, decomp, [0.0], 64, np.random.default_rng(3))
    assert truncation_witness(path, 1.0, 0.5, 1) == 1
    # [tn] = 64 <= (2p+1)/c = 66 for p = 16 closes the gate whatever the path
    assert truncation_witness(path, 1.0, 0.5, 16) == 0
    assert not gates_open(64, 1.0, 0.5, 16, 1)
    path.theta = 0
    assert truncation_witness(path, 1.0, 0.5, 1) == 0


def test_truncation_batch_respects_selection_count():
    spec = catalog_entry("iid", 1).spec
    decomp = MixtureDecomposition(0.5, BallSpec(np.zeros(1), 1.0),
                                  standard_decompositions(1)["heavy"].nu)
    batch = simulate_batch(spec, decomp, [0.0], 64, 2000, np.random.default_rng(4))
    on = truncation_batch(batch, 1.0, 0.25, 1)
    expect = batch.theta & (batch.noise.eps.sum(axis=1) >= 16)
    np.testing.assert_array_equal(on, expect & gates_open(64, 1.0, 0.25, 1, batch.n_star))


def test_n_star_examples():
    decomp = standard_decompositions(1)["uniform"]
    assert n_star(catalog_entry("constant", 1).spec, decomp) == 1
    spec = _const(1, [0.0], [1.0], drift_grad_sup=4.0, diffusion_grad_sup=0.0)
    assert n_star(spec, decomp) == 8


def test_n_star_monotone_in_diffusion_gradient():
    decomp = standard_decompositions(1)["uniform"]
    values = [n_star(_const(1, [0.0], [1.0], drift_grad_sup=0.5, diffusion_grad_sup=g), decomp)
              for g in (0.0, 0.1, 0.2, 0.4, 0.8)]
    assert values == sorted(values)


def test_missing_certificates_make_truncation_set_empty():
    spec = model_from_callables(1, lambda x: np.sin(x), lambda x: np.ones((x.shape[0], 1, 1)))
    decomp = standard_decompositions(1)["uniform"]
    batch = simulate_batch(spec, decomp, [0.0], 32, 10, np.random.default_rng(0))
    assert not truncation_batch(batch, 1.0, 0.5, 1).any()


def test_dimension_mismatch_rejected():
    with pytest.raises(SchemeError):
        simulate_batch(catalog_entry("iid", 2).spec, standard_decompositions(1)["uniform"], [0.0, 0.0], 4, 1,
                       np.random.default_rng(0))


def test_non_finite_step_reported():
    spec = _const(1, [np.inf], [1.0])
    with pytest.raises(SchemeError, match="non-finite"):
        euler_step([0.0], [0.0], spec, 4)
