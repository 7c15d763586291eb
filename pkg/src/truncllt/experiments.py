"""End-to-end desk-scale experiments on top of the estimators.

Orchestration here is sequential; parallelism happens inside each ensemble.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats

from .decomp import MixtureDecomposition, bernoulli_rate, bernoulli_tail_bound, psi, sample_ball
from .estimator import Ensemble, density_estimate, linear_fit, path_weights
from .model import ModelCatalogEntry, catalog_entry, gaussian_density
from .parallel import Accumulator, chunk_rng
from .scheme import grid_position
from .weights import affine_coefficients, derivative_recursion, norm_diagnostics


class ExperimentError(RuntimeError):
    """An experiment precondition failed (for instance a W-measure condition)."""


def standard_normal(ys: np.ndarray) -> np.ndarray:
    ys = np.atleast_2d(ys)
    return gaussian_density(ys, np.zeros(ys.shape[1]), np.eye(ys.shape[1]))


def product_grid(axes: list) -> np.ndarray:
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def default_llt_grid(d: int) -> np.ndarray:
    axis = np.arange(-3.0, 3.0 + 1e-9, 0.5)
    return product_grid([axis] * d) if d > 1 else axis[:, None]


def _gap_summary(est, oracle: np.ndarray) -> dict:
    q = np.array([e.q_hat for e in est])
    se = np.array([e.se for e in est])
    gaps = np.abs(q - oracle)
    i = int(np.argmax(gaps))
    return {"q_hat": q, "se": se, "oracle": oracle, "gaps": gaps, "sup_gap": float(gaps[i]),
            "se_at_sup": float(se[i]), "max_se": float(se.max())}


def non_increasing_within(values, errors, z: float = 3.0) -> bool:
    """Each value exceeds its predecessor by at most ``z`` combined standard errors."""
    return all(values[k + 1] <= values[k] + z * math.hypot(errors[k], errors[k + 1])
               for k in range(len(values) - 1))


# -- i.i.d. local limit theorem ------------------------------------------------

def iid_llt_run(decomp: MixtureDecomposition, n_ladder, paths: int, ys=None, **ensemble) -> dict:
    """Sup-gap between the truncated density of normalized sums and the standard normal."""
    d = decomp.dim
    entry = catalog_entry("iid", d)
    ys = default_llt_grid(d) if ys is None else np.asarray(ys, dtype=float).reshape(-1, d)
    oracle = standard_normal(ys)
    rows = []
    for n in n_ladder:
        ens = Ensemble(entry.spec, decomp, np.zeros(d), n, 1.0, paths, **ensemble)
        est = density_estimate(ens, ys)
        summary = _gap_summary(est, oracle)
        k, _ = grid_position(1.0, n)
        rate = bernoulli_rate(decomp.alpha, ens.c_value)
        rows.append({"n": n, "sup_gap": summary["sup_gap"], "se_at_sup": summary["se_at_sup"],
                     "max_se": summary["max_se"], "remainder_hat": est[0].remainder_hat,
                     "bernoulli_bound": bernoulli_tail_bound(decomp.alpha, ens.c_value, k),
                     "exp_bound": 0.0 if math.isinf(rate) else math.exp(-rate * n),
                     "detail": summary})
    trend = non_increasing_within([r["sup_gap"] for r in rows], [r["max_se"] for r in rows])
    return {"rows": rows, "non_increasing": trend, "ys": ys}


def decomposition_invariance(decomp_a: MixtureDecomposition, decomp_b: MixtureDecomposition,
                             n: int, paths: int, ys, **ensemble) -> dict:
    """Truncated densities of the same innovation law under two decompositions."""
    d = decomp_a.dim
    entry = catalog_entry("iid", d)
    ys = np.asarray(ys, dtype=float).reshape(-1, d)
    est = []
    for decomp in (decomp_a, decomp_b):
        ens = Ensemble(entry.spec, decomp, np.zeros(d), n, 1.0, paths, **ensemble)
        est.append(density_estimate(ens, ys))
    qa, qb = (np.array([e.q_hat for e in es]) for es in est)
    sa, sb = (np.array([e.se for e in es]) for es in est)
    z = np.abs(qa - qb) / np.hypot(sa, sb)
    return {"q_a": qa, "q_b": qb, "z": z, "max_z": float(z.max())}


# -- Gaussian oracle for constant coefficients --------------------------------

def gaussian_oracle_run(entry: ModelCatalogEntry, ens: Ensemble, t_grid=(0.25, 0.5, 1.0),
                        offsets=None) -> dict:
    """Compare the estimated density with the exact Gaussian law on a grid scaled with sqrt(t)."""
    if entry.oracle is None:
        raise ExperimentError(f"model {entry.name!r} has no closed-form oracle")
    d = ens.dim
    if offsets is None:
        axis = np.linspace(-3, 3, 13) if d == 1 else np.arange(-2.0, 2.0 + 1e-9, 1.0)
        offsets = product_grid([axis] * d)
    offsets = np.asarray(offsets, dtype=float).reshape(-1, d)
    if not np.any(np.all(offsets == 0, axis=1)):
        offsets = np.vstack([np.zeros((1, d)), offsets])
    centre = int(np.flatnonzero(np.all(offsets == 0, axis=1))[0])
    rows, peaks = [], []
    for t in t_grid:
        mean, cov = entry.oracle_moments(ens.x0, t)
        ys = mean + offsets @ np.linalg.cholesky(cov).T
        run = ens.with_(t=t)
        summary = _gap_summary(density_estimate(run, ys), entry.oracle(ens.x0, ys, t))
        peaks.append(summary["q_hat"][centre])
        rows.append({"t": t, "ys": ys, **summary})
    fit = linear_fit(np.log(t_grid), np.log(peaks))
    sup = max(rows, key=lambda r: r["sup_gap"])
    return {"rows": rows, "sup_gap": sup["sup_gap"], "se_at_sup": sup["se_at_sup"],
            "peak_heights": np.array(peaks), "peak_slope": fit["slope"], "peak_fit": fit}


def fitted_gaussian(ys, q) -> dict:
    """Mass, mean and variance of a one-dimensional density sampled on a grid."""
    ys = np.asarray(ys, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float)
    mass = integrate.trapezoid(q, ys)
    mean = integrate.trapezoid(ys * q, ys) / mass
    var = integrate.trapezoid((ys - mean) ** 2 * q, ys) / mass
    return {"mass": float(mass), "mean": float(mean), "variance": float(var)}


# -- W-measures and the local time --------------------------------------------

def w_kernel(d: int, r):
    """Green-kernel weight: r in d=1, max(-ln r, 1) in d=2, r^(2-d) above."""
    r = np.asarray(r, dtype=float)
    if d == 1:
        return r
    if d == 2:
        with np.errstate(divide="ignore"):
            return np.maximum(-np.log(r), 1.0)
    with np.errstate(divide="ignore"):
        return r ** (2.0 - d)


@dataclass
class WMeasureSpec:
    """Densities ``F_n`` approximating a target measure.

    ``density(y, n)`` evaluates F_n on (..., d) points; its support lies in the ball
    of radius ``support(n)``.  ``target_integral(h)`` integrates a test function
    against the limit measure and ``characteristic(x, u)`` is the Brownian
    expectation of the limit functional over [0, u] started at x.
    """

    name: str
    dim: int
    density: Callable[[np.ndarray, int], np.ndarray]
    support: Callable[[int], float]
    target_integral: Callable[[Callable], float]
    characteristic: Callable[[float, float], float] | None = None
    antiderivative: Callable[[np.ndarray, int], np.ndarray] | None = None


def delta_bump(d: int = 1) -> WMeasureSpec:
    """Triangular (d=1) or conical bumps of width n^(-1/2) and unit mass, tending to a point mass."""
    if d == 1:
        def density(y, n):
            r = math.sqrt(n)
            return r * np.maximum(0.0, 1.0 - r * np.abs(np.asarray(y)[..., 0]))

        def antiderivative(y, n):
            u = np.clip(math.sqrt(n) * np.asarray(y, dtype=float)[..., 0], -1.0, 1.0)
            return np.where(u < 0, 0.5 * (1 + u) ** 2, 1 - 0.5 * (1 - u) ** 2)

        def characteristic(x, u):
            if u <= 0:
                return 0.0
            return integrate.quad(lambda s: math.exp(-x * x / (2 * s)) / math.sqrt(2 * math.pi * s), 0, u)[0]
    else:
        antiderivative = characteristic = None

        def density(y, n):
            h = n ** -0.5
            r = np.linalg.norm(np.asarray(y), axis=-1)
            # cone of height 3 / (pi h^2) has unit mass in the plane
            return 3.0 / (math.pi * h * h) * np.maximum(0.0, 1.0 - r / h)

    return WMeasureSpec(f"delta_bump_{d}d", d, density, lambda n: n ** -0.5,
                        lambda h: float(h(np.zeros((1, d)))[0]), characteristic, antiderivative)


def lebesgue_box(half_width: float = 1.0) -> WMeasureSpec:
    """Lebesgue measure on [-h, h] in one dimension, the same density for every n."""
    h = half_width

    def density(y, n):
        return (np.abs(np.asarray(y)[..., 0]) <= h).astype(float)

    def antiderivative(y, n):
        return np.clip(np.asarray(y, dtype=float)[..., 0] + h, 0.0, 2 * h)

    def characteristic(x, u):
        if u <= 0:
            return 0.0
        f = lambda s: stats.norm.cdf((h - x) / math.sqrt(s)) - stats.norm.cdf((-h - x) / math.sqrt(s))
        return integrate.quad(f, 0, u)[0]

    def target(fn):
        return integrate.quad(lambda y: float(fn(np.array([[y]]))[0]), -h, h)[0]

    return WMeasureSpec(f"lebesgue_box_{h:g}", 1, density, lambda n: h, target, characteristic, antiderivative)


def _ball_integral(wspec: WMeasureSpec, n: int, x: np.ndarray, delta: float, nodes: int = 401) -> float:
    """Integral of w_d(|y - x|) F_n(y) over |y - x| <= delta."""
    d = wspec.dim
    if d == 1:
        r = np.linspace(0.0, delta, nodes)
        vals = w_kernel(1, r) * (wspec.density((x + r)[:, None], n) + wspec.density((x - r)[:, None], n))
        return float(integrate.trapezoid(vals, r))
    if d == 2:
        # midpoint rule in r avoids the logarithmic endpoint
        edges = np.linspace(0.0, delta, nodes)
        r = 0.5 * (edges[1:] + edges[:-1])
        phi = np.linspace(0.0, 2 * math.pi, 64, endpoint=False)
        pts = x + r[:, None, None] * np.stack([np.cos(phi), np.sin(phi)], axis=-1)[None]
        ring = wspec.density(pts, n).mean(axis=1) * 2 * math.pi * r
        return float(np.sum(w_kernel(2, r) * ring) * (edges[1] - edges[0]))
    raise ExperimentError("w_measure_check supports d <= 2")


def w_measure_check(wspec: WMeasureSpec, delta_ladder=(0.5, 0.25, 0.1, 0.05, 0.02),
                    n_ladder=(16, 64, 256, 1024), probes: int | None = None) -> dict:
    """Numerical reports for the nonnegativity/sup condition, weak convergence and the kernel condition."""
    d = wspec.dim
    n_ladder = list(n_ladder)
    probes = (41 if d == 1 else 7) if probes is None else probes
    # nonnegativity and (1/n) sup F_n decreasing to zero
    sup_scaled, negative = [], False
    for n in n_ladder:
        s = wspec.support(n)
        pts = product_grid([np.linspace(-1.5 * s, 1.5 * s, 201)] * d)
        vals = wspec.density(pts, n)
        negative |= bool(np.any(vals < 0))
        sup_scaled.append(float(vals.max()) / n)
    b6 = (not negative and all(b <= a + 1e-15 for a, b in zip(sup_scaled, sup_scaled[1:]))
          and sup_scaled[-1] <= 0.5 * sup_scaled[0])
    # weak convergence against smooth test functions
    tests = [lambda y: np.ones(len(y)), lambda y: np.cos(y.sum(axis=-1)), lambda y: np.exp(-0.5 * (y**2).sum(axis=-1))]
    errors = []
    for n in n_ladder:
        s = wspec.support(n)
        axis = np.linspace(-s, s, 401)
        pts = product_grid([axis] * d)
        vals = wspec.density(pts, n)
        row = []
        for h in tests:
            integrand = (vals * h(pts)).reshape((len(axis),) * d)
            approx = integrand
            for _ in range(d):
                approx = integrate.trapezoid(approx, axis, axis=0)
            row.append(abs(float(approx) - wspec.target_integral(h)))
        errors.append(max(row))
    b7 = errors[-1] <= max(1e-3, 0.25 * errors[0])
    # kernel condition: sup over x of the delta-ball integrals, lim sup over n
    table = np.zeros((len(delta_ladder), len(n_ladder)))
    for j, n in enumerate(n_ladder):
        s = wspec.support(n)
        xs = product_grid([np.linspace(-s - 0.1, s + 0.1, probes)] * d)
        xs = np.vstack([xs, np.zeros((1, d))])
        for i, delta in enumerate(delta_ladder):
            table[i, j] = max(_ball_integral(wspec, n, x, delta) for x in xs)
    limsup = table[:, -2:].max(axis=1)
    b8 = bool(np.all(np.isfinite(limsup)) and np.all(np.diff(limsup) <= 1e-12)
              and limsup[-1] <= 0.25 * limsup[0])
    return {"B6": {"passed": bool(b6), "sup_over_n": sup_scaled, "nonnegative": not negative},
            "B7": {"passed": bool(b7), "weak_errors": errors},
            "B8": {"passed": b8, "table": table, "limsup": limsup, "deltas": list(delta_ladder)},
            "n_ladder": n_ladder, "passed": bool(b6 and b7 and b8)}


def local_time_values(states: np.ndarray, wspec: WMeasureSpec, n: int) -> np.ndarray:
    """Per-step contributions ``F_n(X_n(k/n)) / n`` for k = 0..n, shape (B, n+1)."""
    return wspec.density(states, n) / n


def phi_between(contrib: np.ndarray, n: int, s: float, t: float) -> np.ndarray:
    """Sum of contributions over grid points with s <= k/n < t."""
    ks = np.arange(contrib.shape[1])
    keep = (ks >= s * n - 1e-9) & (ks < t * n - 1e-9)
    return contrib[:, keep].sum(axis=1)


def broken_line(contrib: np.ndarray, n: int, s: float, t: float) -> np.ndarray:
    """Continuous interpolation ``L(t) - L(s)`` of the cumulative functional."""
    cum = np.concatenate([np.zeros((contrib.shape[0], 1)), np.cumsum(contrib, axis=1)], axis=1)

    def level(u):
        k = min(int(math.floor(u * n + 1e-9)), contrib.shape[1] - 1)
        return cum[:, k] + (u * n - k) * contrib[:, k]

    return level(t) - level(s)


def local_time_run(wspec: WMeasureSpec, ens: Ensemble, check: dict | None = None) -> dict:
    """Monte Carlo mean of the broken-line functional over [0, 1] against the limit characteristic."""
    report = w_measure_check(wspec) if check is None else check
    for key in ("B6", "B7", "B8"):
        if not report[key]["passed"]:
            raise ExperimentError(f"W-measure condition {key} fails for {wspec.name}")
    if wspec.characteristic is None:
        raise ExperimentError(f"{wspec.name} has no closed-form characteristic")
    n = ens.n

    def visit(batch):
        contrib = local_time_values(batch.states, wspec, n)
        whole = broken_line(contrib, n, 0.0, 1.0)
        split = phi_between(contrib, n, 0.0, 0.5) + phi_between(contrib, n, 0.5, 1.0)
        acc = Accumulator((2,)).add(np.stack([whole, np.abs(split - phi_between(contrib, n, 0.0, 1.0))], 1))
        return acc

    acc = ens.map_chunks(visit)
    mean, se = acc.mean(), acc.standard_error()
    target = wspec.characteristic(float(ens.x0[0]), 1.0)
    return {"psi_mean": float(mean[0]), "se": float(se[0]), "target": target,
            "relative_gap": abs(mean[0] - target) / target, "additivity_defect": float(acc.maxima[1]),
            "conditions": report}


def characteristic_probe(wspec: WMeasureSpec, ens: Ensemble, horizons=(0.5, 1.0), starts=(0.0, 0.5)) -> list:
    """Expected functional over [0, u] from x, rebuilt from truncated densities plus remainder mass.

    Each step contributes ``E[G(X_k) Upsilon_k] + E[F(X_k) 1{off the truncation set}]``
    with G the antiderivative of F_n; this is compared with the direct mean and with
    the limit characteristic.
    """
    if wspec.dim != 1 or wspec.antiderivative is None:
        raise ExperimentError("the characteristic probe needs d = 1 and an antiderivative")
    n = ens.n
    rows = []
    for x in starts:
        base = ens.with_(x0=np.array([x]))
        for u in horizons:
            steps = [k for k in range(1, n + 1) if k < u * n - 1e-9]

            def visit(batch):
                dens = np.zeros(batch.size)
                direct = np.full(batch.size, wspec.density(np.array([[x]]), n)[0] / n)
                for k in steps:
                    w = path_weights(base.with_(t=k / n), batch)
                    f = w["value"]
                    dens += (wspec.antiderivative(f, n) * w["Upsilon"]
                             + wspec.density(f, n) * (~w["on_xi"])) / n
                    direct += wspec.density(f, n) / n
                dens += wspec.density(np.array([[x]]), n)[0] / n
                return Accumulator((2,)).add(np.stack([dens, direct], axis=1))

            acc = base.map_chunks(visit)
            mean, se = acc.mean(), acc.standard_error()
            target = wspec.characteristic(x, u)
            rows.append({"x": x, "u": u, "f_n_density": float(mean[0]), "se_density": float(se[0]),
                         "f_n_direct": float(mean[1]), "se_direct": float(se[1]), "f_limit": target,
                         "gap": abs(mean[0] - target)})
    return rows


# -- Doeblin overlap ------------------------------------------------------------

def gaussian_overlap(delta, cov) -> float:
    """Overlap of two Gaussians with equal covariance whose means differ by ``delta``."""
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    maha = math.sqrt(float(delta @ np.linalg.solve(np.atleast_2d(cov), delta)))
    return 2.0 * stats.norm.cdf(-maha / 2.0)


def _grid_integral(values: np.ndarray, axes: list) -> float:
    out = values.reshape([len(a) for a in axes])
    for a in axes:
        out = integrate.trapezoid(out, a, axis=0)
    return float(out)


def doeblin_overlap(ens: Ensemble, x, x_prime, axes: list | None = None,
                    entry: ModelCatalogEntry | None = None) -> dict:
    """Grid integral of the minimum of two estimated truncated densities."""
    d = ens.dim
    if d > 2:
        raise ExperimentError("Doeblin overlap supports d <= 2")
    x, x_prime = (np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy() for v in (x, x_prime))
    if axes is None:
        lo = np.minimum(x, x_prime) - 6 * math.sqrt(ens.t)
        hi = np.maximum(x, x_prime) + 6 * math.sqrt(ens.t)
        axes = [np.linspace(lo[i], hi[i], 121 if d == 1 else 41) for i in range(d)]
    ys = product_grid(axes)
    qa = density_estimate(ens.with_(x0=x), ys)
    qb = density_estimate(ens.with_(x0=x_prime), ys)
    va, vb = np.array([e.q_hat for e in qa]), np.array([e.q_hat for e in qb])
    sa, sb = np.array([e.se for e in qa]), np.array([e.se for e in qb])
    gamma = _grid_integral(np.minimum(va, vb), axes)
    # errors are correlated across the grid, so bound the integral error by the integral of SEs
    se_bound = _grid_integral(np.maximum(sa, sb), axes)
    out = {"gamma_hat": gamma, "se_bound": se_bound, "ys": ys, "q_x": va, "q_x_prime": vb,
           "mass_x": _grid_integral(va, axes), "oracle": None, "grid_bound": None}
    if entry is not None and entry.oracle is not None:
        _, cov = entry.oracle_moments(x, ens.t)
        exact = gaussian_overlap(x - x_prime, cov)
        on_grid = _grid_integral(np.minimum(entry.oracle(x, ys, ens.t), entry.oracle(x_prime, ys, ens.t)), axes)
        out.update(oracle=exact, grid_bound=abs(on_grid - exact))
    return out


def overlap_ladder(ens: Ensemble, x, offsets, entry: ModelCatalogEntry | None = None) -> dict:
    """Overlap against starting points ``x + offset * e_1``; non-increasing within error bars."""
    d = ens.dim
    x = np.broadcast_to(np.asarray(x, dtype=float), (d,))
    runs = []
    for off in offsets:
        shifted = x.copy()
        shifted[0] += off
        runs.append(doeblin_overlap(ens, x, shifted, entry=entry))
    gammas = [r["gamma_hat"] for r in runs]
    errors = [r["se_bound"] for r in runs]
    return {"offsets": list(offsets), "gammas": gammas, "errors": errors, "runs": runs,
            "monotone": non_increasing_within(gammas, errors, z=1.0)}


# -- scaling laws -----------------------------------------------------------------

def small_ball_moment(decomp: MixtureDecomposition, ks=(32, 64, 128, 256), p: int = 2,
                      c: float | None = None, trials: int = 100_000, seed: int = 0) -> dict:
    """``E (sum psi^2 over selected steps)^-p`` on the event of enough selections, against k."""
    c = decomp.alpha / 2 if c is None else c
    ball = decomp.ball
    means, ses = [], []
    for k in ks:
        rng = chunk_rng(seed, 7, k)
        acc = Accumulator(())
        left = trials
        while left > 0:
            m = min(left, 20_000)
            left -= m
            eta = sample_ball(rng, ball, (m, k))
            eps = rng.random((m, k)) < decomp.alpha
            total = np.sum(psi(eta, ball) ** 2 * eps, axis=1)
            good = eps.sum(axis=1) >= c * k
            vals = np.zeros(m)
            vals[good] = total[good] ** (-float(p))
            acc.add(vals)
        means.append(float(acc.mean()))
        ses.append(float(acc.standard_error()))
    fit = linear_fit(np.log(ks), np.log(means))
    return {"ks": list(ks), "means": means, "se": ses, "slope": fit["slope"], "fit": fit, "p": p}


def derivative_moment_scaling(entry: ModelCatalogEntry, decomp: MixtureDecomposition,
                              t_grid=(0.25, 0.5, 1.0), n_grid=(32, 64, 128), paths: int = 4000,
                              seed: int = 0) -> dict:
    """``E |D X_n(t)|^2 / t`` over a (t, n) grid; the max/min ratio should stay small."""
    table = np.zeros((len(t_grid), len(n_grid)))
    for j, n in enumerate(n_grid):
        ens = Ensemble(entry.spec, decomp, np.zeros(entry.spec.dim), n, 1.0, paths, seed=seed)
        batch = ens.batch(0, j, paths)
        for i, t in enumerate(t_grid):
            rec = derivative_recursion(batch, entry.spec, t, 1, decomp.ball)
            table[i, j] = np.mean(np.sum(rec.Y.reshape(paths, -1) ** 2, axis=1)) / t
    return {"table": table, "ratio": float(table.max() / table.min()), "t_grid": list(t_grid),
            "n_grid": list(n_grid)}


def norm_scaling(entry: ModelCatalogEntry, decomp: MixtureDecomposition, n: int,
                 t_grid=(0.25, 0.5, 1.0), paths: int = 4000, seed: int = 0) -> dict:
    """N_d(X_n(t)) across t for an affine model, with its log-log slope."""
    if not entry.spec.affine:
        raise ExperimentError("norm_scaling uses the affine block structure")
    ens = Ensemble(entry.spec, decomp, np.zeros(entry.spec.dim), n, 1.0, paths, seed=seed)
    batch = ens.batch(0, 0, paths)
    values = []
    for t in t_grid:
        coef = affine_coefficients(batch, entry.spec, t)
        diag = norm_diagnostics(coef=coef, eta=batch.noise.eta, theta=batch.theta.astype(float),
                                ball=decomp.ball)
        values.append(diag["N_d"])
    fit = linear_fit(np.log(t_grid), np.log(values))
    return {"t_grid": list(t_grid), "N_d": values, "slope": fit["slope"], "fit": fit}
