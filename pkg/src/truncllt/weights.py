"""Malliavin matrix, stochastic exponent and the weight ladder for X_n(t).

Two independent routes produce the derivative tensors of ``f = X_n(t)``:

* :func:`derivative_recursion` differentiates the Euler recursion by hand
  (explicit product and chain rule terms up to order three);
* :func:`tape_state` replays the scheme on the generic tape.

Weights come either from the generic ladder (repeated tape divergence) or,
for affine models where ``f`` is affine in eta, from a closed form that costs
O(n d^3) per path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decomp import BallSpec
from .model import ModelSpec
from .scheme import PathBatch, active_steps, grid_position
from .tape import (
    PathContext, SobolevElement, apply_map, bilinear, divergence, grad,
    inverse_with_derivative, lift_constant, multiply,
)


class WeightError(RuntimeError):
    """Unsupported regime or insufficient derivative order."""


@dataclass
class DerivativeRecord:
    """Weighted derivative tensors of ``X_n(t)`` over the first ``steps`` steps."""

    t: float
    n: int
    steps: int
    value: np.ndarray
    tensors: list
    weights: np.ndarray
    rho: np.ndarray
    theta: np.ndarray
    plain: np.ndarray | None = None

    @property
    def Y(self) -> np.ndarray:
        return self.tensors[0]

    @property
    def Y2(self) -> np.ndarray | None:
        return self.tensors[1] if len(self.tensors) > 1 else None

    @property
    def Y3(self) -> np.ndarray | None:
        return self.tensors[2] if len(self.tensors) > 2 else None

    @property
    def order(self) -> int:
        return len(self.tensors)

    def element(self, m: int | None = None) -> SobolevElement:
        m = self.order if m is None else m
        if m > self.order:
            raise WeightError(f"record holds order {self.order}, {m} requested")
        return SobolevElement(self.value, self.tensors[:m], self.tensors[0].shape[1])


def _eta_jets(w: np.ndarray, rho: np.ndarray, eps: np.ndarray, k: int, H: int, d: int, order: int):
    """Weighted jets of ``eps_k * eta_k`` on H (zeta carries no derivative).

    ``X_a eta_r = w delta_ar``, ``X_a X_b eta_r = w rho_a delta_br`` and
    ``X_a X_b X_c eta_r = w (rho_a rho_b - 2 w delta_ab) delta_cr`` with all
    indices in step k.
    """
    B = w.shape[0]
    sl = slice(k * d, (k + 1) * d)
    wk = (w[:, k] * eps[:, k])[:, None]
    rk = rho[:, k]
    eye = np.eye(d)
    jets = []
    if order >= 1:
        j1 = np.zeros((B, H, d))
        j1[:, sl, :] = wk[:, :, None] * eye
        jets.append(j1)
    if order >= 2:
        j2 = np.zeros((B, H, H, d))
        j2[:, sl, sl, :] = (wk[:, :, None, None] * rk[:, :, None, None]) * eye
        jets.append(j2)
    if order >= 3:
        j3 = np.zeros((B, H, H, H, d))
        inner = rk[:, :, None] * rk[:, None, :] - 2.0 * w[:, k, None, None] * eye
        j3[:, sl, sl, sl, :] = (wk[:, :, None, None, None] * inner[:, :, :, None, None]) * eye
        jets.append(j3)
    return jets


def _compose_jets(F, X):
    """Faa di Bruno terms for a map with derivative tables F[q] (B, *out, d^q) at state jets X."""
    X1 = X[1] if len(X) > 1 else None
    X2 = X[2] if len(X) > 2 else None
    X3 = X[3] if len(X) > 3 else None
    out = []
    if X1 is not None:
        out.append(np.einsum("b...j,bAj->bA...", F[1], X1))
    if X2 is not None:
        t = np.einsum("b...jk,bAj,bBk->bAB...", F[2], X1, X1, optimize=True)
        t = t + np.einsum("b...j,bABj->bAB...", F[1], X2)
        out.append(t)
    if X3 is not None:
        t = np.einsum("b...jkl,bAj,bBk,bCl->bABC...", F[3], X1, X1, X1, optimize=True)
        t = t + np.einsum("b...jk,bABj,bCk->bABC...", F[2], X2, X1, optimize=True)
        t = t + np.einsum("b...jk,bACj,bBk->bABC...", F[2], X2, X1, optimize=True)
        t = t + np.einsum("b...jk,bAj,bBCk->bABC...", F[2], X1, X2, optimize=True)
        t = t + np.einsum("b...j,bABCj->bABC...", F[1], X3)
        out.append(t)
    return out


def _diffusion_times_noise(G, xi0, Xi):
    """Leibniz terms for ``b(X) xi``: G are jets of b(X) (B, ..., d, d), Xi jets of xi."""
    out = [np.einsum("bir,br->bi", G[0], xi0)]
    if len(G) > 1:
        out.append(np.einsum("bAir,br->bAi", G[1], xi0) + np.einsum("bir,bAr->bAi", G[0], Xi[0]))
    if len(G) > 2:
        t = np.einsum("bABir,br->bABi", G[2], xi0)
        t = t + np.einsum("bAir,bBr->bABi", G[1], Xi[0]) + np.einsum("bBir,bAr->bABi", G[1], Xi[0])
        t = t + np.einsum("bir,bABr->bABi", G[0], Xi[1])
        out.append(t)
    if len(G) > 3:
        t = np.einsum("bABCir,br->bABCi", G[3], xi0)
        t = t + np.einsum("bABir,bCr->bABCi", G[2], Xi[0])
        t = t + np.einsum("bACir,bBr->bABCi", G[2], Xi[0])
        t = t + np.einsum("bBCir,bAr->bABCi", G[2], Xi[0])
        t = t + np.einsum("bAir,bBCr->bABCi", G[1], Xi[1])
        t = t + np.einsum("bBir,bACr->bABCi", G[1], Xi[1])
        t = t + np.einsum("bCir,bABr->bABCi", G[1], Xi[1])
        t = t + np.einsum("bir,bABCr->bABCi", G[0], Xi[2])
        out.append(t)
    return out


def derivative_recursion(batch: PathBatch, spec: ModelSpec, t: float, max_order: int,
                         ball: BallSpec) -> DerivativeRecord:
    """Weighted derivatives of ``X_n(t)`` by differentiating the Euler recursion."""
    if not 1 <= max_order <= 3:
        raise WeightError("derivative recursion supports orders 1 to 3")
    if max_order > spec.max_order:
        raise WeightError(f"model provides derivatives up to {spec.max_order}, need {max_order}")
    if not 0 < t <= 1:
        raise WeightError("t must lie in (0, 1]")
    n, d, B = batch.n, batch.dim, batch.size
    steps = active_steps(t, n)
    k_floor, frac = grid_position(t, n)
    H = steps * d
    theta = batch.theta.astype(float)
    eta = batch.noise.eta[:, :steps]
    eps = batch.noise.eps[:, :steps].astype(float)
    xi = batch.noise.xi[:, :steps]
    w = theta[:, None] * (ball.radius**2 - np.sum((eta - ball.center) ** 2, axis=-1))
    rho = theta[:, None, None] * -2.0 * (eta - ball.center)
    sqn = math.sqrt(n)

    jets = [batch.states[:, 0].copy()] + [np.zeros((B,) + (H,) * j + (d,)) for j in range(1, max_order + 1)]
    at_floor = [j.copy() for j in jets] if k_floor == 0 else None
    for k in range(steps):
        x = jets[0]
        A = [spec.drift_jet(x, q) for q in range(max_order + 1)]
        Bt = [spec.diffusion_jet(x, q) for q in range(max_order + 1)]
        Ga = _compose_jets(A, jets)
        Gb = [Bt[0]] + _compose_jets(Bt, jets)
        Xi = _eta_jets(w, rho.reshape(B, steps, d), eps, k, H, d, max_order)
        P = _diffusion_times_noise(Gb, xi[:, k], Xi)
        new = [x + A[0] / n + P[0] / sqn]
        for j in range(1, max_order + 1):
            new.append(jets[j] + Ga[j - 1] / n + P[j] / sqn)
        jets = new
        if k + 1 == k_floor:
            at_floor = [j.copy() for j in jets]
    if frac > 0:
        jets = [a + frac * (b - a) for a, b in zip(at_floor, jets)]

    plain = None
    if spec.affine:
        plain = affine_coefficients(batch, spec, t)
    return DerivativeRecord(t, n, steps, jets[0], jets[1:], w, rho.reshape(B, H), theta, plain)


def affine_coefficients(batch: PathBatch, spec: ModelSpec, t: float) -> np.ndarray:
    """Plain partials ``C_k[i, r] = d f_i / d eta_kr`` for models affine in the state."""
    n, d, B = batch.n, batch.dim, batch.size
    steps = active_steps(t, n)
    k_floor, frac = grid_position(t, n)
    x = batch.states[:, 0]
    A = spec.drift_jet(x, 1)
    b = spec.diffusion_jet(x, 0)
    factor = np.eye(d) + A / n
    inject = batch.noise.eps[:, :steps, None, None] * b[:, None] / math.sqrt(n)
    coef = np.zeros((B, steps, d, d))
    prop = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    # coefficients at step k_floor, then at k_floor + 1 for interpolation
    for k in range(k_floor - 1, -1, -1):
        coef[:, k] = prop @ inject[:, k]
        prop = prop @ factor
    if frac > 0:
        prop = np.broadcast_to(np.eye(d), (B, d, d)).copy()
        upper = np.zeros_like(coef)
        for k in range(steps - 1, -1, -1):
            upper[:, k] = prop @ inject[:, k]
            prop = prop @ factor
        coef = coef + frac * (upper - coef)
    return coef


def tape_state(batch: PathBatch, spec: ModelSpec, t: float, m: int, ball: BallSpec) -> tuple:
    """Build ``X_n(t)`` from scratch on the tape; returns ``(element, context)``."""
    n = batch.n
    steps = active_steps(t, n)
    k_floor, frac = grid_position(t, n)
    ctx = PathContext(batch.noise.eta, batch.theta.astype(float), ball, steps)
    eta = ctx.coordinates(m)
    H = ctx.H
    x = lift_constant(batch.states[:, 0], m, H)
    floor_state = x if k_floor == 0 else None
    sqn = math.sqrt(n)
    for k in range(steps):
        eps = batch.noise.eps[:, k].astype(float)
        xi = eta.take(k).scale(eps) + lift_constant((1 - eps)[:, None] * batch.noise.zeta[:, k], m, H)
        drift = apply_map(lambda q, v=x.value: spec.drift_jet(v, q), x, 1)
        diff = apply_map(lambda q, v=x.value: spec.diffusion_jet(v, q), x, 2)
        x = x + drift * (1.0 / n) + bilinear(diff, xi, "ir,r->i") * (1.0 / sqn)
        if k + 1 == k_floor:
            floor_state = x
    if frac > 0:
        x = floor_state + (x - floor_state) * frac
    return x, ctx


# -- stochastic exponent -----------------------------------------------------

@dataclass
class StochasticExponent:
    """Factors ``I + grad a / n + sum_r grad b_r xi_r / sqrt n`` of the linearized scheme."""

    factors: np.ndarray

    @property
    def n(self) -> int:
        return self.factors.shape[1]

    def between(self, i: int, j: int) -> np.ndarray:
        """``E_{i,j}`` = F_j ... F_{i+1} (identity when i = j)."""
        B, _, d, _ = self.factors.shape
        out = np.broadcast_to(np.eye(d), (B, d, d)).copy()
        for step in range(i, j):
            out = self.factors[:, step] @ out
        return out

    def to_step(self, m: int) -> np.ndarray:
        """All ``E_{j,m}`` for j = 0..m as (B, m+1, d, d)."""
        B, _, d, _ = self.factors.shape
        out = np.empty((B, m + 1, d, d))
        out[:, m] = np.eye(d)
        for j in range(m - 1, -1, -1):
            out[:, j] = out[:, j + 1] @ self.factors[:, j]
        return out

    def inverse_between(self, i: int, j: int) -> np.ndarray:
        B, _, d, _ = self.factors.shape
        out = np.broadcast_to(np.eye(d), (B, d, d)).copy()
        for step in range(i, j):
            out = out @ np.linalg.inv(self.factors[:, step])
        return out


def stochastic_exponent(batch: PathBatch, spec: ModelSpec, decomp=None, tilde: bool = False,
                        check: bool = True) -> StochasticExponent:
    n, d = batch.n, batch.dim
    xi = batch.noise.xi
    if tilde:
        if decomp is None:
            raise WeightError("the censored exponent needs the decomposition")
        keep = np.linalg.norm(batch.noise.zeta, axis=-1) <= decomp.theta_threshold(n)
        xi = xi * keep[..., None]
    B = batch.size
    factors = np.empty((B, n, d, d))
    for k in range(n):
        x = batch.states[:, k]
        gb = spec.diffusion_jet(x, 1)
        factors[:, k] = np.eye(d) + spec.drift_jet(x, 1) / n + np.einsum("birj,br->bij", gb, xi[:, k]) / math.sqrt(n)
    if check and decomp is not None and n >= batch.n_star:
        dev = np.linalg.norm(factors - np.eye(d), ord=2, axis=(2, 3)).max(axis=1)
        bad = batch.theta & (dev > 0.5)
        if np.any(bad):
            raise WeightError("exponent factor farther than 1/2 from identity with theta = 1 and n >= n_star")
    return StochasticExponent(factors)


def sigma_from_exponent(batch: PathBatch, spec: ModelSpec, ball: BallSpec, m: int,
                        exponent: StochasticExponent | None = None) -> np.ndarray:
    """``(theta/n) sum_j psi^2(eta_j) 1{eps_j} E_{j,m} (b b*)(X_{j-1}) E_{j,m}*``."""
    exponent = stochastic_exponent(batch, spec) if exponent is None else exponent
    props = exponent.to_step(m)
    eta = batch.noise.eta[:, :m]
    psi2 = (ball.radius**2 - np.sum((eta - ball.center) ** 2, axis=-1)) ** 2
    coef = batch.theta[:, None] * batch.noise.eps[:, :m] * psi2 / batch.n
    total = 0.0
    for j in range(1, m + 1):
        b = spec.diffusion_jet(batch.states[:, j - 1], 0)
        bb = b @ np.swapaxes(b, 1, 2)
        e = props[:, j]
        total = total + coef[:, j - 1, None, None] * (e @ bb @ np.swapaxes(e, 1, 2))
    return total


# -- Malliavin matrix and the ladder -----------------------------------------

@dataclass
class MalliavinState:
    sigma: SobolevElement
    rho_inv: SobolevElement
    on_xi: np.ndarray
    exponent: StochasticExponent | None = None

    @property
    def det(self) -> np.ndarray:
        return np.linalg.det(self.sigma.value)

    @property
    def inverse_norm(self) -> np.ndarray:
        return np.linalg.norm(self.rho_inv.value, ord=2, axis=(1, 2))


def malliavin_matrix(f: SobolevElement | DerivativeRecord, on_xi: np.ndarray,
                     exponent: StochasticExponent | None = None) -> MalliavinState:
    if isinstance(f, DerivativeRecord):
        f = f.element()
    g = grad(f)
    sigma = bilinear(g, g, "hi,hj->ij")
    return MalliavinState(sigma, inverse_with_derivative(sigma, on_xi), np.asarray(on_xi, bool), exponent)


def weight_ladder(state: MalliavinState, f: SobolevElement | DerivativeRecord, ctx: PathContext,
                  gradient: bool = False) -> dict:
    """Iterated divergences ``u_{l+1} = delta(u_l theta_l)`` on the tape."""
    if isinstance(f, DerivativeRecord):
        f = f.element()
    d = f.vshape[0]
    need = d + 2 if gradient else d + 1
    if f.order < need:
        raise WeightError(f"ladder needs derivative order {need}, element has {f.order}")
    if gradient and d != 1:
        raise WeightError("gradient weights are supported for d = 1 only")
    g = grad(f)
    vartheta = bilinear(g, state.rho_inv, "hk,ki->hi")
    ups = lift_constant(np.ones(f.batch), vartheta.order, f.H)
    for coord in range(d):
        ups = divergence(multiply(ups, vartheta.take((slice(None), coord))), ctx)
    out = {"Upsilon": ups.value.copy()}
    if gradient:
        out["Upsilon_i"] = np.stack([divergence(multiply(ups, vartheta.take((slice(None), i)).truncate(ups.order)),
                                                ctx).value for i in range(d)], axis=-1)
    return out


def affine_weights(coef: np.ndarray, w: np.ndarray, rho: np.ndarray, on_xi: np.ndarray,
                   gradient: bool = False) -> dict:
    """Closed-form ladder when ``f`` is affine in eta.

    With ``Df = sum_k w_k C_k e_k`` the divergence of ``theta_i`` reduces to
    ``u = -2 rho_inv P + 2 rho_inv Q`` where ``P = sum w_k C_k rho_k`` and
    ``Q = sum w_k^3 A_k rho_inv C_k rho_k`` (``A_k = C_k C_k^T``).  The second
    ladder step needs ``X_{kr} u``, assembled below from the derivatives of
    ``rho_inv``, P and Q.
    """
    B, n, d, _ = coef.shape
    on_xi = np.asarray(on_xi, dtype=bool)
    rho = rho.reshape(B, n, d)
    w = np.where(on_xi[:, None], w, 0.0)
    A = np.einsum("bkir,bkjr->bkij", coef, coef)
    sigma = np.einsum("bk,bkij->bij", w**2, A)
    safe = np.where(on_xi[:, None, None], sigma, np.eye(d))
    inv = np.linalg.inv(safe)
    inv = np.where(on_xi[:, None, None], inv, 0.0)
    M = np.einsum("bij,bkjr->bkir", inv, coef)
    v = np.einsum("bkir,bkr->bki", M, rho)
    Crho = np.einsum("bkir,bkr->bki", coef, rho)
    P = np.einsum("bk,bki->bi", w, Crho)
    Av = np.einsum("bkij,bkj->bki", A, v)
    Q = np.einsum("bk,bki->bi", w**3, Av)
    u = -2.0 * np.einsum("bij,bj->bi", inv, P) + 2.0 * np.einsum("bij,bj->bi", inv, Q)
    out = {"Upsilon": None, "sigma": sigma, "inv": inv}
    if d == 1 and not gradient:
        out["Upsilon"] = u[:, 0]
        return out
    if d > 2 or (gradient and d != 1):
        raise WeightError("closed-form weights cover d <= 2 (density) and d = 1 (gradient)")

    # X_{kr} u, shape (B, k, r, i)
    G = np.einsum("bij,bkjl,blm->bkim", inv, A, inv)
    GP = np.einsum("bkij,bj->bki", G, P)
    GQ = np.einsum("bkij,bj->bki", G, Q)
    w2rho = (w**2)[:, :, None] * rho
    RP = -2.0 * w2rho[..., None] * GP[:, :, None, :]
    RQ = -2.0 * w2rho[..., None] * GQ[:, :, None, :]
    wrho = w[:, :, None] * rho
    XP = wrho[..., None] * Crho[:, :, None, :] - 2.0 * (w**2)[:, :, None, None] * np.swapaxes(coef, 2, 3)
    T = np.einsum("bj,bjac,bje->bace", w**3, A, v)
    invA = np.einsum("bij,bkjl->bkil", inv, A)
    S = np.einsum("bace,bkce->bka", T, invA)
    AM = np.einsum("bkij,bkjr->bkir", A, M)
    XQ = 3.0 * (w**3)[:, :, None, None] * rho[..., None] * Av[:, :, None, :] \
        - 2.0 * (w**4)[:, :, None, None] * np.swapaxes(AM, 2, 3) \
        - 2.0 * w2rho[..., None] * S[:, :, None, :]
    Xu = -2.0 * RP - 2.0 * np.einsum("bij,bkrj->bkri", inv, XP) \
        + 2.0 * RQ + 2.0 * np.einsum("bij,bkrj->bkri", inv, XQ)
    # vartheta_{i,(k,r)} = w_k M_k[i, r]
    wM = w[:, :, None, None] * M
    if gradient:
        ups = u[:, 0]
        corr = np.einsum("bkr,bkr->b", Xu[..., 0], wM[:, :, 0, :])
        out["Upsilon"] = ups
        out["Upsilon_i"] = (ups * u[:, 0] - corr)[:, None]
        return out
    corr = np.einsum("bkr,bkr->b", Xu[..., 0], wM[:, :, 1, :])
    out["Upsilon"] = u[:, 0] * u[:, 1] - corr
    return out


def compute_weights(batch: PathBatch, spec: ModelSpec, ball: BallSpec, t: float, on_xi: np.ndarray,
                    gradient: bool = False, method: str = "auto") -> dict:
    """Per-path weights and diagnostics for ``f = X_n(t)``."""
    d = batch.dim
    if d > 2 or (gradient and d != 1):
        raise WeightError("supported regimes: density for d <= 2, gradient for d = 1")
    if method == "auto":
        method = "affine" if spec.affine else "dense"
    on_xi = np.asarray(on_xi, dtype=bool)
    steps = active_steps(t, batch.n)
    if method == "affine":
        coef = affine_coefficients(batch, spec, t)
        ctx = PathContext(batch.noise.eta, batch.theta.astype(float), ball, steps)
        out = affine_weights(coef, ctx.weights, ctx.rho, on_xi, gradient)
        out["value"] = batch.value_at(t)
        return out
    order = d + 2 if gradient else d + 1
    record = derivative_recursion(batch, spec, t, order, ball)
    ctx = PathContext(batch.noise.eta, batch.theta.astype(float), ball, steps)
    state = malliavin_matrix(record, on_xi)
    out = weight_ladder(state, record, ctx, gradient)
    out.update(sigma=state.sigma.value, inv=state.rho_inv.value, value=record.value)
    return out


# -- norm diagnostics --------------------------------------------------------

def _block_weight_norms(eta: np.ndarray, theta: np.ndarray, ball: BallSpec, max_order: int) -> list:
    """Squared Frobenius norms of ``D^j w_k`` within each step, j = 0..max_order."""
    B, n, d = eta.shape
    flat = eta.reshape(B * n, 1, d)
    ctx = PathContext(flat, np.repeat(theta, n), ball)
    w = ctx.weight_element(max_order)
    return [np.sum(w.tensor(j).reshape(B * n, -1) ** 2, axis=1).reshape(B, n) for j in range(max_order + 1)]


def norm_diagnostics(coef: np.ndarray | None = None, eta: np.ndarray | None = None,
                     theta: np.ndarray | None = None, ball: BallSpec | None = None,
                     record: DerivativeRecord | None = None, rho_inv: np.ndarray | None = None,
                     d: int | None = None) -> dict:
    """Monte Carlo N_d and K_d (unknown constant set to 1).

    Affine inputs (``coef``, ``eta``, ``theta``, ``ball``) use the block
    structure ``D^m f_i = C_k[i, r] D^(m-1) w_k`` and reach all orders up to
    ``(d+1)^2``; a dense ``record`` covers the orders it stores.
    """
    if coef is not None:
        B, n, dd, _ = coef.shape
        d = dd if d is None else d
        top = (d + 1) ** 2
        wn = _block_weight_norms(eta[:, :n], theta, ball, top - 1)
        row = np.sum(coef**2, axis=3)                      # (B, n, i)
        norms = [np.sqrt(np.einsum("bk,bki->bi", wn[m - 1], row)) for m in range(1, top + 1)]
    elif record is not None:
        d = record.value.shape[1] if d is None else d
        norms = [np.sqrt(np.sum(t.reshape(t.shape[0], -1, t.shape[-1]) ** 2, axis=1)) for t in record.tensors]
    else:
        raise WeightError("norm_diagnostics needs affine coefficients or a derivative record")
    power = 2 * (d + 1) * (d + 2)
    per_order = np.array([np.mean(nm**power, axis=0) ** (1.0 / power) for nm in norms])  # (orders, d)
    N = float(per_order.max())
    out = {"N_d": N, "per_order": per_order.max(axis=1), "orders": len(norms)}
    if rho_inv is not None:
        opn = np.linalg.norm(rho_inv, ord=2, axis=(1, 2))
        out["K_d"] = float(sum(N ** (d + 2 * M) * np.mean(opn ** (4 * (M + d))) ** 0.25 for M in range(d + 1)))
    return out
