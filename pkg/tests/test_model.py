import dataclasses
import math

import numpy as np
import pytest

from truncllt.model import (ModelError, catalog_entry, custom_model, derivative_consistency, ellipticity_check,
                            gaussian_density, model_from_callables, parse_expression, recurrence_check)


def test_identity_diffusion_ellipticity():
    assert ellipticity_check(catalog_entry("iid", 3).spec, 200)["min_eigenvalue"] == pytest.approx(1.0)


def test_scalar_diffusion_two_gives_four():
    spec = catalog_entry("constant", 1, b0=2.0).spec
    out = ellipticity_check(spec, 100)
    assert out["min_eigenvalue"] == pytest.approx(4.0)
    assert out["pass"]


def test_diagonal_diffusion_ellipticity():
    spec = catalog_entry("constant", 2, b0=[1.0, 0.5]).spec
    assert ellipticity_check(spec, 100)["min_eigenvalue"] == pytest.approx(0.25)


@pytest.mark.parametrize("name", ["iid", "constant", "ou_bounded", "trig"])
def test_compliant_catalog_entries_are_elliptic(name):
    entry = catalog_entry(name, 2)
    assert entry.compliance["B1"]
    assert ellipticity_check(entry.spec, 500)["pass"]
    assert math.isfinite(entry.spec.drift_grad_sup) and math.isfinite(entry.spec.diffusion_grad_sup)


def test_recurrence_linear_pullback_margin_is_radius():
    spec = model_from_callables(2, lambda x: -x, lambda x: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)))
    out = recurrence_check(spec, 1.5, 300)
    assert out["min_margin"] == pytest.approx(1.5)
    assert out["pass"]


def test_recurrence_zero_drift_fails():
    assert not recurrence_check(catalog_entry("iid", 2).spec, 1.0, 100)["pass"]


def test_recurrence_unit_pullback():
    def drift(x):
        r = np.linalg.norm(x, axis=1, keepdims=True)
        return -x / np.maximum(r, 1.0)

    spec = model_from_callables(2, drift, lambda x: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)))
    assert recurrence_check(spec, 2.0, 300)["min_margin"] == pytest.approx(1.0)


def test_ou_bounded_satisfies_recurrence():
    assert recurrence_check(catalog_entry("ou_bounded", 2, lam=1.0).spec, 2.0, 500)["pass"]


def test_constant_coefficients_have_exact_derivatives():
    assert derivative_consistency(catalog_entry("constant", 2, a0=[1.0, -1.0]).spec, 3, 20) == 0.0


def test_sine_drift_derivative_consistency():
    spec = custom_model(["sin(x1)"], [["1"]])
    assert derivative_consistency(spec, 1, 50, step=1e-5) <= 1e-5


@pytest.mark.parametrize("name", ["ou_bounded", "trig"])
def test_catalog_jets_consistent(name):
    assert derivative_consistency(catalog_entry(name, 2).spec, 3, 30) <= 1e-5


def test_corrupted_gradient_is_detected():
    spec = custom_model(["sin(x1)"], [["1"]])
    good = spec.drift_derivs

    def corrupted(x, q):
        out = good(x, q)
        return out * 1.5 if q == 1 else out

    bad = dataclasses.replace(spec, drift_derivs=corrupted)
    assert derivative_consistency(bad, 1, 50) >= 0.1


def test_constant_oracle_integrates_to_one():
    entry = catalog_entry("constant", 1, a0=0.7, b0=1.3)
    mean, cov = entry.oracle_moments(np.zeros(1), 0.5)
    sd = math.sqrt(cov[0, 0])
    ys = mean[0] + sd * np.linspace(-6, 6, 2001)
    assert np.trapezoid(entry.oracle(np.zeros(1), ys[:, None], 0.5), ys) == pytest.approx(1.0, abs=1e-3)


def test_constant_oracle_integrates_to_one_2d():
    entry = catalog_entry("constant", 2, a0=[0.5, -0.5], b0=[[1.0, 0.0], [0.4, 0.8]])
    mean, cov = entry.oracle_moments(np.zeros(2), 1.0)
    sd = np.sqrt(np.diag(cov))
    ax = [mean[i] + sd[i] * np.linspace(-6, 6, 241) for i in range(2)]
    g = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, 2)
    q = entry.oracle(np.zeros(2), g, 1.0).reshape(241, 241)
    total = np.trapezoid(np.trapezoid(q, ax[1], axis=1), ax[0])
    assert total == pytest.approx(1.0, abs=1e-3)


def test_iid_oracle_is_standard_normal():
    entry = catalog_entry("iid", 1)
    ys = np.linspace(-3, 3, 13)[:, None]
    np.testing.assert_allclose(entry.oracle(np.zeros(1), ys, 1.0), np.exp(-ys[:, 0] ** 2 / 2) / math.sqrt(2 * math.pi))


def test_gaussian_density_matches_scipy():
    from scipy import stats
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    y = np.array([[0.1, -0.4], [1.0, 2.0]])
    np.testing.assert_allclose(gaussian_density(y, np.zeros(2), cov),
                               stats.multivariate_normal(np.zeros(2), cov).pdf(y))


def test_expression_grammar():
    expr = parse_expression("0.5 * sin(x1) - x2 / 2 + pi", 2)
    assert float(expr.subs({"x1": 0.0, "x2": 1.0})) == pytest.approx(math.pi - 0.5)
    with pytest.raises(ModelError):
        parse_expression("__import__('os')", 1)
    with pytest.raises(ModelError):
        parse_expression("x3", 2)


def test_custom_affine_detection():
    assert custom_model(["-x1 + 1"], [["2"]]).affine
    assert not custom_model(["sin(x1)"], [["1"]]).affine


def test_unknown_catalog_name():
    with pytest.raises(ModelError):
        catalog_entry("nope")


def test_derivative_order_limit():
    spec = catalog_entry("trig", 1).spec
    with pytest.raises(ModelError):
        spec.drift_jet(np.zeros((1, 1)), spec.max_order + 1)
