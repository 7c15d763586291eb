"""Identity suite: exact per-sample calculus identities, Monte Carlo duality and finite differences."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .decomp import BallSpec, MixtureDecomposition, NoiseBatch, NuSpec, sample_ball
from .model import ModelSpec, catalog_entry
from .parallel import chunk_rng
from .scheme import PathBatch, replay_states, simulate_batch
from .tape import (PathContext, SobolevElement, apply_elementwise, b_operator, bilinear,
                   commutator_correction, divergence, grad, inner_family, inverse_with_derivative,
                   lift_constant, relative_gap, transpose_gradient)
from .weights import derivative_recursion, tape_state


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.measured:.3g} (tolerance {self.tolerance:.3g})"


def _relative(name: str, gap: float, tol: float, **detail) -> CheckResult:
    return CheckResult(name, gap, tol, bool(gap <= tol), detail)


# -- random smooth inputs --------------------------------------------------------

def _random_family(ctx: PathContext, rng: np.random.Generator, m: int) -> SobolevElement:
    """``g_h = sin(sum_k C[h, k] eta_k + b_h)`` with per-sample random C and b."""
    H, B = ctx.H, ctx.batch
    coords = ctx.coordinates(m).reshape_v((H,))
    mix = lift_constant(rng.normal(size=(B, H, H)) / math.sqrt(H), m, H)
    lin = bilinear(mix, coords, "hk,k->h") + lift_constant(rng.normal(size=(B, H)), m, H)
    v = lin.value
    return apply_elementwise(lin, [np.sin(v), np.cos(v), -np.sin(v), -np.cos(v), np.sin(v), np.cos(v)][: m + 1])


def _random_scalar(ctx: PathContext, rng: np.random.Generator, m: int) -> SobolevElement:
    H, B = ctx.H, ctx.batch
    coords = ctx.coordinates(m).reshape_v((H,))
    lin = bilinear(lift_constant(rng.normal(size=(B, H)) / math.sqrt(H), m, H), coords, "h,h->")
    v = 0.5 * lin.value
    return apply_elementwise(lin * 0.5, [np.exp(v) * 0.5 ** j for j in range(m + 1)])


def _context(rng, d: int, n: int, B: int) -> PathContext:
    ball = BallSpec(rng.normal(size=d) * 0.3, 1.0 + rng.random())
    eta = sample_ball(rng, ball, (B, n))
    return PathContext(eta, np.ones(B), ball)


def _sample_size(el: SobolevElement) -> np.ndarray:
    return np.max([np.abs(t.reshape(el.batch, -1)).max(axis=1) for t in [el.value] + el.tensors], axis=0)


def per_sample_identities(samples: int = 1000, seed: int = 0, tol: float = 1e-10) -> list[CheckResult]:
    """Product rule for the divergence, commutation of D with it, the paired form, and the inverse rule."""
    rng = chunk_rng(seed, 11, 0)
    configs = [(1, 2), (1, 3), (2, 2), (2, 3)]
    per = max(1, samples // len(configs))
    worst = {"product": 0.0, "commutation": 0.0, "paired": 0.0, "inverse": 0.0, "raw_d2": 0.0}
    for d, n in configs:
        ctx = _context(rng, d, n, per)
        m = 4
        g1, g2 = _random_family(ctx, rng, m), _random_family(ctx, rng, m)
        f = _random_scalar(ctx, rng, m)
        # delta(f g) = f delta(g) - (Df, g)
        lhs = divergence(bilinear(f, g1, ",h->h"), ctx)
        rhs = bilinear(f.truncate(m - 1), divergence(g1, ctx), ",->") - inner_family(grad(f), g1.truncate(m - 1))
        worst["product"] = max(worst["product"], relative_gap(lhs, rhs))
        # D delta(g) = B g + delta([Dg]*) (+ step commutators when d >= 2)
        left = grad(divergence(g1, ctx))
        right = b_operator(g1, ctx).truncate(m - 2) + divergence(transpose_gradient(g1), ctx)
        corr = commutator_correction(g1, ctx)
        if d >= 2:
            worst["raw_d2"] = max(worst["raw_d2"], relative_gap(left, right))
        worst["commutation"] = max(worst["commutation"], relative_gap(left, right + corr))
        # (D delta(g1), g2) = (B g1, g2) + delta((Dg1, g2)) + ([Dg1]*, Dg2) (+ commutators)
        g2c = g2.truncate(m - 2)
        lhs3 = bilinear(left, g2c, "j,j->")
        rhs3 = (bilinear(b_operator(g1, ctx).truncate(m - 2), g2c, "j,j->")
                + divergence(bilinear(grad(g1), g2.truncate(m - 1), "ji,j->i"), ctx)
                + bilinear(grad(g1), grad(g2), "ji,ij->").truncate(m - 2)
                + bilinear(corr, g2c, "j,j->"))
        worst["paired"] = max(worst["paired"], relative_gap(lhs3, rhs3))
        # inverse of a Malliavin-type matrix: sigma rho = I and D rho = -rho (D sigma) rho
        lin = bilinear(lift_constant(rng.normal(size=(per, d, ctx.H)), m, ctx.H), g1, "ih,h->i")
        G = grad(lin)
        sigma = bilinear(G, G, "hi,hj->ij")
        rho = inverse_with_derivative(sigma, np.ones(per, dtype=bool))
        eye = bilinear(sigma, rho, "ij,jk->ik")
        # residuals relative to the per-sample size of the factors
        scale = _sample_size(sigma) * _sample_size(rho)
        resid = np.max([np.abs((eye.value - np.eye(d)).reshape(per, -1)).max(axis=1)]
                       + [np.abs(t.reshape(per, -1)).max(axis=1) for t in eye.tensors], axis=0)
        id_gap = float(np.max(resid / scale))
        d_rho = grad(rho)
        formula = -bilinear(rho.truncate(rho.order - 1), bilinear(grad(sigma), rho.truncate(rho.order - 1),
                                                                  "hjk,kl->hjl"), "ij,hjl->hil")
        worst["inverse"] = max(worst["inverse"], id_gap, relative_gap(d_rho.truncate(0), formula.truncate(0)))
    total = per * len(configs)
    return [
        _relative("divergence product rule", worst["product"], tol, samples=total),
        _relative("gradient of divergence (with step commutators for d >= 2)", worst["commutation"], tol,
                  raw_gap_without_commutators_d2=worst["raw_d2"], samples=total),
        _relative("paired commutation form", worst["paired"], tol, samples=total),
        _relative("inverse matrix derivative", worst["inverse"], tol, samples=total),
    ]


# -- Monte Carlo duality -----------------------------------------------------------

def _mean_within(name: str, diff: np.ndarray, z: float = 3.0, **detail) -> CheckResult:
    mean = float(diff.mean())
    se = float(diff.std(ddof=1) / math.sqrt(len(diff)))
    return CheckResult(name, abs(mean) / se if se > 0 else 0.0, z, bool(abs(mean) <= z * se + 1e-15),
                       {"mean": mean, "se": se, **detail})


def duality_checks(samples: int = 100_000, seed: int = 0, n: int = 4) -> list[CheckResult]:
    """``E (Df, g) = E f delta(g)`` and ``E (Df, h) = -E (rho, h) f`` for f = sin(X_n(1)) of the trig model."""
    spec = catalog_entry("trig", 1).spec
    ball = BallSpec(np.zeros(1), math.sqrt(3.0))
    decomp = MixtureDecomposition(0.7, ball, NuSpec("uniform", {"center": 0.0, "half_width": 1.0}))
    rng = chunk_rng(seed, 12, 0)
    batch = simulate_batch(spec, decomp, np.array([0.2]), n, samples, rng)
    x, ctx = tape_state(batch, spec, 1.0, 1, ball)
    xv = x.take(0)
    f = apply_elementwise(xv, [np.sin(xv.value), np.cos(xv.value)])
    coords = ctx.coordinates(1).reshape_v((ctx.H,))
    g = apply_elementwise(coords, [np.cos(coords.value) + 0.5, -np.sin(coords.value)])
    df = grad(f)
    lhs = inner_family(df, g.truncate(0)).value
    rhs = f.value * divergence(g, ctx).value
    h = np.linspace(1.0, -0.5, ctx.H)
    ibp = df.value @ h + (ctx.rho @ h) * f.value
    return [_mean_within("duality E(Df,g) = E f delta(g)", lhs - rhs, samples=samples),
            _mean_within("integration by parts E(Df,h) = -E(rho,h) f", ibp, samples=samples)]


# -- finite differences --------------------------------------------------------------

def _replayed(batch: PathBatch, spec: ModelSpec, eta: np.ndarray) -> PathBatch:
    noise = NoiseBatch(eta, batch.noise.eps, batch.noise.zeta)
    return PathBatch(batch.n, batch.x0, replay_states(spec, batch.x0, noise.xi), noise, batch.theta,
                     batch.n_star, batch.seed_tag)


def finite_difference_check(spec: ModelSpec, decomp: MixtureDecomposition, n: int = 16, t: float = 1.0,
                            paths: int = 3, step: float = 1e-6, seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """First and second derivatives of X_n(t) from the tape and the recursion against central differences.

    The first order differences the simulated value; the second order differences
    the first derivative, so every difference quotient stays first order in ``step``.
    """
    rng = chunk_rng(seed, 13, 0)
    batch = simulate_batch(spec, decomp, np.full(spec.dim, 0.3), n, paths, rng)
    d, ball = spec.dim, decomp.ball
    rec = derivative_recursion(batch, spec, t, 2, ball)
    tape, _ = tape_state(batch, spec, t, 2, ball)
    H = rec.Y.shape[1]
    fd1 = np.zeros_like(rec.Y)
    fd2 = np.zeros_like(rec.Y2)
    for a in range(H):
        k, r = divmod(a, d)
        up, down = batch.noise.eta.copy(), batch.noise.eta.copy()
        up[:, k, r] += step
        down[:, k, r] -= step
        b_up, b_down = _replayed(batch, spec, up), _replayed(batch, spec, down)
        w = rec.weights[:, k]
        fd1[:, a] = w[:, None] * (b_up.value_at(t) - b_down.value_at(t)) / (2 * step)
        y_up = derivative_recursion(b_up, spec, t, 1, ball).Y
        y_down = derivative_recursion(b_down, spec, t, 1, ball).Y
        fd2[:, a] = w[:, None, None] * (y_up - y_down) / (2 * step)

    def rel(x, y):
        return float(np.abs(x - y).max() / max(np.abs(y).max(), 1e-300))

    out = []
    for label, Y1, Y2 in (("recursion", rec.Y, rec.Y2), ("tape", tape.tensor(1), tape.tensor(2))):
        out.append(_relative(f"{label} first derivative vs finite differences", rel(Y1, fd1), tol, step=step))
        out.append(_relative(f"{label} second derivative vs finite differences", rel(Y2, fd2), tol, step=step))
    return out


def identity_suite(samples: int = 1000, duality_samples: int = 100_000, seed: int = 0,
                   fd_paths: int = 3) -> dict:
    """Run every check; returns results and the elapsed time."""
    start = time.perf_counter()
    results = per_sample_identities(samples, seed)
    results += duality_checks(duality_samples, seed)
    ball = BallSpec(np.zeros(2), 2.0)
    decomp = MixtureDecomposition(0.7, ball, NuSpec("point", {"at": [-0.2, -0.2]}))
    results += finite_difference_check(catalog_entry("trig", 2).spec, decomp, 16, 1.0, fd_paths, seed=seed)
    return {"results": results, "elapsed": time.perf_counter() - start,
            "passed": all(r.passed for r in results)}
