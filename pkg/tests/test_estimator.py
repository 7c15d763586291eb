import math

import numpy as np
import pytest

from truncllt.decomp import standard_decompositions
from truncllt.estimator import (BaselineStore, Ensemble, EstimatorError, density_all_orthants, density_estimate,
                                density_gradient_estimate, linear_fit, mgf_probe, orthant_select, remainder_mass,
                                tail_probe)
from truncllt.model import catalog_entry
from truncllt.parallel import Accumulator

# independent values: phi(1) and 1 - Phi(2)
PHI_AT_ONE = 0.241970724519143349797
UPPER_TAIL_TWO = 0.022750131948179207200


def _iid(d=1, preset="uniform", n=16, paths=100_000, **kw):
    return Ensemble(catalog_entry("iid", d).spec, standard_decompositions(d)[preset], np.zeros(d), n,
                    paths=paths, p=1, **kw)


def test_orthant_select_picks_rarest_side():
    pilot = np.random.default_rng(0).normal(size=(2000, 2))
    assert orthant_select(pilot[:, :1], [2.0]) == (0,)
    assert orthant_select(pilot[:, :1], [-2.0]) == (1,)
    assert orthant_select(pilot, [2.0, -2.0]) == (0, 1)


def test_orthant_select_tie_goes_to_first_pattern():
    assert orthant_select(np.zeros((100, 1)), [5.0], on_xi=np.zeros(100, dtype=bool)) == (0,)


def test_orthant_select_needs_pilot_of_one_hundred():
    with pytest.raises(ValueError):
        orthant_select(np.zeros((50, 1)), [0.0])


def test_orthant_patterns_agree():
    out = density_all_orthants(_iid(), [[0.5], [-1.0]])
    gap = np.abs(out["q_hat"][:, 0] - out["q_hat"][:, 1])
    assert np.all(gap <= 4 * (out["se"][:, 0] + out["se"][:, 1]))


def test_gradient_estimates():
    ens = _iid(paths=200_000)
    at0, at1 = density_gradient_estimate(ens, [[0.0], [1.0]])
    assert abs(at0.q_hat) <= 3 * at0.se
    # the n = 16 sum is close to Gaussian; allow a small discretization bias
    assert abs(at1.q_hat + PHI_AT_ONE) <= 3 * at1.se + 0.01


def test_unit_weight_gives_orthant_probability_not_density():
    ens = _iid()
    weighted = density_estimate(ens, [[2.0]])[0]
    control = density_estimate(ens, [[2.0]], unit_weight=True)[0]
    assert abs(control.q_hat - UPPER_TAIL_TWO) <= 3 * control.se + 0.005
    assert abs(weighted.q_hat - control.q_hat) > 10 * (weighted.se + control.se)


def test_worker_count_does_not_change_estimates():
    ens = _iid(paths=20_000, chunk=3000)
    one = density_estimate(ens, [[0.3]], orthant=[0])[0]
    three = density_estimate(ens.with_(workers=3), [[0.3]], orthant=[0])[0]
    assert (one.q_hat, one.se) == (three.q_hat, three.se)


def test_closed_gate_raises():
    ens = _iid(paths=500).with_(p=None)
    with pytest.raises(EstimatorError):
        density_estimate(ens, [[0.0]])


def test_remainder_vanishes_without_singular_part():
    out = remainder_mass(_iid(paths=5000))
    assert out["remainder_hat"] == 0.0
    assert out["rho_used"] == math.inf


def test_tail_at_zero_is_theta_probability():
    ens = _iid(preset="heavy", paths=20_000)
    out = tail_probe(ens, [0.0, 1.0])

    def theta_rate(batch):
        return Accumulator(()).add(batch.theta.astype(float))

    assert out["prob"][0] == ens.map_chunks(theta_rate).mean()
    assert out["prob"][1] < out["prob"][0]


def test_mgf_at_zero_is_one_without_censoring():
    out = mgf_probe(_iid(paths=5000), [[0.0], [0.5]])
    assert out["mgf"][0] == 1.0
    assert not out["overflow"].any()


def test_linear_fit_exact_line():
    fit = linear_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert fit["slope"] == pytest.approx(2.0)
    assert fit["intercept"] == pytest.approx(1.0)
    assert fit["r2"] == pytest.approx(1.0)


def test_baseline_store_records_then_compares(tmp_path):
    store = BaselineStore(tmp_path / "b.json", tolerance=0.2)
    assert store.check("D", 0.5) == (True, "recorded")
    again = BaselineStore(tmp_path / "b.json", tolerance=0.2)
    assert again.check("D", 0.55)[0]
    assert not again.check("D", 0.7)[0]
