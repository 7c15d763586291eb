"""Euler difference scheme on the uniform grid of [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decomp import MixtureDecomposition, NoiseBatch, NoiseDraw, compose, sample_noise_batch, theta_batch
from .model import ModelSpec


class SchemeError(RuntimeError):
    """Non-finite state or invalid time argument."""


# n_star used when no finite threshold exists; the truncation set is then empty.
UNREACHABLE = 1 << 62


def euler_step(x, xi, spec: ModelSpec, n: int) -> np.ndarray:
    """One step ``x + a(x)/n + b(x) xi / sqrt(n)``; accepts (d,) or (B, d) inputs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    single = x.ndim == 1
    xb, xib = np.atleast_2d(x), np.atleast_2d(xi)
    out = xb + spec.drift(xb) / n + np.einsum("bir,br->bi", spec.diffusion(xb), xib) / math.sqrt(n)
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out), axis=1)))
        raise SchemeError(f"non-finite Euler step from x = {xb[bad].tolist()} with xi = {xib[bad].tolist()}")
    return out[0] if single else out


def grid_position(t: float, n: int) -> tuple[int, float]:
    """Return ``([tn], tn - [tn])`` with knots snapped against rounding noise."""
    if not (0.0 <= t <= 1.0):
        raise SchemeError(f"time {t} outside [0, 1]")
    tn = t * n
    k = math.floor(tn + 1e-9)
    frac = max(tn - k, 0.0)
    if frac < 1e-9:
        frac = 0.0
    return min(k, n), frac


def active_steps(t: float, n: int) -> int:
    """Number of innovations that influence ``X_n(t)``, i.e. ``ceil(tn)``."""
    k, frac = grid_position(t, n)
    return k + (1 if frac > 0 else 0)


def interpolate_states(states: np.ndarray, t: float) -> np.ndarray:
    """Piecewise-linear interpolation of (..., n+1, d) grid states at time t."""
    n = states.shape[-2] - 1
    k, frac = grid_position(t, n)
    if frac == 0.0:
        return states[..., k, :].copy()
    return states[..., k, :] + frac * (states[..., k + 1, :] - states[..., k, :])


def replay_states(spec: ModelSpec, x0, xi: np.ndarray) -> np.ndarray:
    """States (B, n+1, d) driven by innovations xi of shape (B, n, d)."""
    B, n, d = xi.shape
    states = np.empty((B, n + 1, d))
    states[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (B, d))
    for k in range(n):
        states[:, k + 1] = euler_step(states[:, k], xi[:, k], spec, n)
    return states


@dataclass
class GridPath:
    n: int
    x0: np.ndarray
    states: np.ndarray
    eta: np.ndarray
    eps: np.ndarray
    zeta: np.ndarray
    theta: int
    n_star: int
    seed_tag: tuple

    @property
    def noise(self) -> list[NoiseDraw]:
        xi = compose(self.eta, self.eps, self.zeta)
        return [NoiseDraw(self.eta[k], int(self.eps[k]), self.zeta[k], xi[k]) for k in range(self.n)]

    @property
    def xi(self) -> np.ndarray:
        return compose(self.eta, self.eps, self.zeta)

    def eps_count_at(self, t: float) -> int:
        k, _ = grid_position(t, self.n)
        return int(np.sum(self.eps[:k]))

    def as_batch(self) -> "PathBatch":
        return PathBatch(self.n, self.x0, self.states[None], NoiseBatch(self.eta[None], self.eps[None],
                         self.zeta[None]), np.array([bool(self.theta)]), self.n_star, self.seed_tag)

    def serialize(self) -> bytes:
        parts = [np.asarray(v, dtype=float).tobytes() for v in (self.x0, self.states, self.eta, self.zeta)]
        parts.append(np.asarray(self.eps, dtype=np.uint8).tobytes())
        return b"".join(parts) + bytes([self.theta])


@dataclass
class PathBatch:
    """Paths simulated together; arrays carry a leading path axis."""

    n: int
    x0: np.ndarray
    states: np.ndarray
    noise: NoiseBatch
    theta: np.ndarray
    n_star: int
    seed_tag: tuple

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def eps_count_at(self, t: float) -> np.ndarray:
        k, _ = grid_position(t, self.n)
        return self.noise.eps[:, :k].sum(axis=1)

    def value_at(self, t: float) -> np.ndarray:
        return interpolate_states(self.states, t)

    def path(self, i: int) -> GridPath:
        return GridPath(self.n, self.x0, self.states[i], self.noise.eta[i], self.noise.eps[i],
                        self.noise.zeta[i], int(self.theta[i]), self.n_star, self.seed_tag + (i,))


def simulate_batch(spec: ModelSpec, decomp: MixtureDecomposition, x0, n: int, paths: int,
                   rng: np.random.Generator, seed_tag: tuple = ()) -> PathBatch:
    if n < 1:
        raise ValueError("n must be >= 1")
    if decomp.dim != spec.dim:
        raise SchemeError(f"decomposition dimension {decomp.dim} != model dimension {spec.dim}")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (spec.dim,)).copy()
    noise = sample_noise_batch(decomp, rng, paths, n)
    states = replay_states(spec, x0, noise.xi)
    theta = theta_batch(noise.zeta, decomp)
    try:
        nstar = n_star(spec, decomp)
    except SchemeError:
        nstar = UNREACHABLE
    return PathBatch(n, x0, states, noise, theta, nstar, tuple(seed_tag))


def simulate_path(spec: ModelSpec, decomp: MixtureDecomposition, x0, n: int,
                  rng: np.random.Generator, seed_tag: tuple = ()) -> GridPath:
    return simulate_batch(spec, decomp, x0, n, 1, rng, seed_tag).path(0)


def interpolate(path: GridPath, t: float) -> np.ndarray:
    return interpolate_states(path.states, t)


def gates_open(n: int, t: float, c: float, p: int, nstar: int) -> bool:
    """Deterministic part of the truncation set: n >= n_star and [tn] > (2p+1)/c."""
    k, _ = grid_position(t, n)
    return n >= nstar and k > (2 * p + 1) / c


def truncation_batch(batch: PathBatch, t: float, c: float, p: int) -> np.ndarray:
    if p < 1:
        raise ValueError("p must be >= 1")
    k, _ = grid_position(t, batch.n)
    if not gates_open(batch.n, t, c, p, batch.n_star):
        return np.zeros(batch.size, dtype=bool)
    return batch.theta & (batch.eps_count_at(t) >= c * k)


def truncation_witness(path: GridPath, t: float, c: float, p: int) -> int:
    return int(truncation_batch(path.as_batch(), t, c, p)[0])


def step_perturbation_bound(spec: ModelSpec, decomp: MixtureDecomposition, n: int) -> float:
    if decomp.exp_moment:
        zeta_bound = decomp.theta_delta * math.sqrt(n)
    else:
        zeta_bound = n ** decomp.varsigma
    grad_b = spec.diffusion_grad_sup
    b_term = 0.0 if grad_b == 0 else spec.dim * grad_b * (decomp.ball.sup_norm + zeta_bound) / math.sqrt(n)
    a_term = 0.0 if spec.drift_grad_sup == 0 else spec.drift_grad_sup / n
    return a_term + b_term


def n_star(spec: ModelSpec, decomp: MixtureDecomposition, limit: int = 1 << 40) -> int:
    """Smallest n for which every Euler step is within 1/2 of the identity map."""
    if not (math.isfinite(spec.drift_grad_sup) and math.isfinite(spec.diffusion_grad_sup)):
        raise SchemeError("n_star needs finite gradient certificates")

    def ok(n):
        return step_perturbation_bound(spec, decomp, n) <= 0.5

    if ok(1):
        return 1
    hi = 2
    while not ok(hi):
        hi *= 2
        if hi > limit:
            raise SchemeError("n_star search did not terminate (exp-moment threshold too large?)")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
