"""Mixture decomposition of the innovation law.

An innovation is written as ``xi = eps * eta + (1 - eps) * zeta`` where ``eta``
is uniform on a ball ``U = B(z, r)``, ``eps`` is a Bernoulli(alpha) selector and
``zeta`` follows an arbitrary (possibly singular) law ``nu``.  Only the ``eta``
block is ever differentiated, through the weight ``psi(x) = r^2 - |x - z|^2``
that vanishes on the boundary of the ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DecompositionError(ValueError):
    """Invalid decomposition parameters."""


class SamplingError(RuntimeError):
    """A singular-part sampler produced unusable output."""


@dataclass(frozen=True)
class BallSpec:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if center.ndim != 1:
            raise DecompositionError("ball center must be a vector")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise DecompositionError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def sup_norm(self) -> float:
        """Largest Euclidean norm of a point of the ball."""
        return float(np.linalg.norm(self.center)) + self.radius


NU_KINDS = ("none", "point", "uniform", "pareto", "sphere")


@dataclass(frozen=True)
class NuSpec:
    """Sampler description for the singular part ``nu``.

    Kinds: ``point`` (params ``at``), ``uniform`` (box with ``center`` and
    ``half_width``), ``sphere`` (uniform on the sphere of ``radius``), ``pareto`` (radially symmetric, ``scale`` and ``exponent``;
    the radius has tail ``(scale / s) ** exponent``), ``none`` (only valid when
    alpha = 1).
    """

    kind: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NU_KINDS:
            raise DecompositionError(f"unknown nu kind {self.kind!r}; expected one of {NU_KINDS}")

    def sample(self, rng: np.random.Generator, shape: tuple, d: int) -> np.ndarray:
        size = tuple(shape) + (d,)
        p = self.params
        if self.kind == "none":
            raise SamplingError("nu sampler 'none' cannot be invoked (alpha < 1 requires a nu law)")
        if self.kind == "point":
            at = np.broadcast_to(np.asarray(p.get("at", np.zeros(d)), dtype=float), (d,))
            out = np.broadcast_to(at, size).copy()
        elif self.kind == "uniform":
            center = np.broadcast_to(np.asarray(p.get("center", 0.0), dtype=float), (d,))
            half = np.broadcast_to(np.asarray(p.get("half_width", 1.0), dtype=float), (d,))
            out = center + half * rng.uniform(-1.0, 1.0, size=size)
        elif self.kind == "sphere":
            out = float(p.get("radius", 1.0)) * _unit_directions(rng, tuple(shape), d)
        else:
            scale = float(p.get("scale", 1.0))
            exponent = float(p["exponent"])
            radius = scale * rng.random(size=tuple(shape)) ** (-1.0 / exponent)
            out = radius[..., None] * _unit_directions(rng, tuple(shape), d)
        if not np.all(np.isfinite(out)):
            raise SamplingError(f"nu sampler {self.kind!r} produced non-finite values")
        return out

    def moments(self, d: int) -> tuple[np.ndarray, np.ndarray] | None:
        """Exact mean and second-moment matrix when available in closed form."""
        p = self.params
        if self.kind == "point":
            at = np.broadcast_to(np.asarray(p.get("at", np.zeros(d)), dtype=float), (d,))
            return at.copy(), np.outer(at, at)
        if self.kind == "uniform":
            center = np.broadcast_to(np.asarray(p.get("center", 0.0), dtype=float), (d,))
            half = np.broadcast_to(np.asarray(p.get("half_width", 1.0), dtype=float), (d,))
            return center.copy(), np.outer(center, center) + np.diag(half**2 / 3.0)
        if self.kind == "sphere":
            radius = float(p.get("radius", 1.0))
            return np.zeros(d), np.eye(d) * radius**2 / d
        if self.kind == "pareto":
            scale, exponent = float(p.get("scale", 1.0)), float(p["exponent"])
            if exponent <= 2:
                return None
            second = scale**2 * exponent / (exponent - 2.0)
            return np.zeros(d), np.eye(d) * second / d
        return None


def _unit_directions(rng: np.random.Generator, shape: tuple, d: int) -> np.ndarray:
    if d == 1:
        return np.where(rng.random(size=shape + (1,)) < 0.5, -1.0, 1.0)
    g = rng.standard_normal(size=shape + (d,))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def sample_ball(rng: np.random.Generator, ball: BallSpec, shape: tuple) -> np.ndarray:
    """Uniform points in the open ball by the radius-power inverse transform."""
    d = ball.dim
    u = rng.random(size=tuple(shape))
    directions = _unit_directions(rng, tuple(shape), d)
    return ball.center + (ball.radius * u ** (1.0 / d))[..., None] * directions


@dataclass(frozen=True)
class MixtureDecomposition:
    alpha: float
    ball: BallSpec
    nu: NuSpec = field(default_factory=NuSpec)
    kappa: int = 4
    exp_moment: bool = False
    theta_delta: float = 1.0

    def __post_init__(self):
        problems = []
        if not (0.0 < self.alpha <= 1.0):
            problems.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if int(self.kappa) != self.kappa or self.kappa < 4:
            problems.append(f"kappa must be an integer >= 4, got {self.kappa}")
        if self.alpha < 1.0 and self.nu.kind == "none":
            problems.append("alpha < 1 requires a nu sampler")
        if self.theta_delta <= 0:
            problems.append("theta_delta must be positive")
        if problems:
            raise DecompositionError("; ".join(problems))

    @property
    def dim(self) -> int:
        return self.ball.dim

    @property
    def varsigma(self) -> float:
        return varsigma(self.kappa)

    def theta_threshold(self, n: int) -> float:
        if self.exp_moment:
            return self.theta_delta * math.sqrt(n)
        return float(n) ** self.varsigma

    def moments(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Exact mean and covariance of the composed law, if closed forms exist."""
        d, ball = self.dim, self.ball
        eta_second = np.outer(ball.center, ball.center) + np.eye(d) * ball.radius**2 / (d + 2)
        mean = self.alpha * ball.center
        second = self.alpha * eta_second
        if self.alpha < 1.0:
            nu = self.nu.moments(d)
            if nu is None:
                return None
            mean = mean + (1 - self.alpha) * nu[0]
            second = second + (1 - self.alpha) * nu[1]
        return mean, second - np.outer(mean, mean)


@dataclass(frozen=True)
class NoiseDraw:
    eta: np.ndarray
    eps: int
    zeta: np.ndarray
    xi: np.ndarray


@dataclass(frozen=True)
class NoiseBatch:
    """Noise for ``paths`` trajectories of ``n`` steps; arrays are (paths, n, d)."""

    eta: np.ndarray
    eps: np.ndarray
    zeta: np.ndarray

    @property
    def xi(self) -> np.ndarray:
        return compose(self.eta, self.eps, self.zeta)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.eta.shape

    def draw(self, path: int, step: int) -> NoiseDraw:
        eta, zeta = self.eta[path, step], self.zeta[path, step]
        eps = int(self.eps[path, step])
        return NoiseDraw(eta.copy(), eps, zeta.copy(), compose(eta, eps, zeta))


def compose(eta, eps, zeta) -> np.ndarray:
    return np.where(np.asarray(eps, dtype=bool)[..., None], eta, zeta)


def psi(x, ball: BallSpec) -> np.ndarray:
    """Ball weight ``r^2 - |x - z|^2`` evaluated over the last axis."""
    x = np.asarray(x, dtype=float)
    return ball.radius**2 - np.sum((x - ball.center) ** 2, axis=-1)


def psi_grad(x, ball: BallSpec) -> np.ndarray:
    return -2.0 * (np.asarray(x, dtype=float) - ball.center)


def sample_noise(decomp: MixtureDecomposition, rng: np.random.Generator) -> NoiseDraw:
    batch = sample_noise_batch(decomp, rng, 1, 1)
    return batch.draw(0, 0)


def sample_noise_batch(decomp: MixtureDecomposition, rng: np.random.Generator,
                       paths: int, n: int) -> NoiseBatch:
    """Draw eta, eps and zeta for every step of every path.

    eta and zeta are always drawn so that the eta block is populated on every
    coordinate; the draw order (eta, eps, zeta) is part of the replay contract.
    """
    d = decomp.dim
    eta = sample_ball(rng, decomp.ball, (paths, n))
    if decomp.alpha >= 1.0:
        eps = np.ones((paths, n), dtype=bool)
        zeta = np.zeros((paths, n, d))
    else:
        eps = rng.random(size=(paths, n)) < decomp.alpha
        zeta = decomp.nu.sample(rng, (paths, n), d)
    return NoiseBatch(eta=eta, eps=eps, zeta=zeta)


def varsigma(kappa: float) -> float:
    return (kappa - 1.0) / (2.0 * kappa + 2.0)


def eps_kappa(kappa: float) -> float:
    """Polynomial remainder exponent ``(k^2 - 3k - 2) / (2k + 2)``."""
    return (kappa * kappa - 3.0 * kappa - 2.0) / (2.0 * kappa + 2.0)


def theta_indicator(zetas, n: int, kappa: int, exp_moment: bool = False,
                    delta: float = 1.0) -> int:
    zetas = np.atleast_2d(np.asarray(zetas, dtype=float))
    if zetas.shape[0] != n:
        raise ValueError(f"expected {n} zeta vectors, got {zetas.shape[0]}")
    threshold = delta * math.sqrt(n) if exp_moment else float(n) ** varsigma(kappa)
    return int(np.max(np.linalg.norm(zetas, axis=-1)) <= threshold)


def theta_batch(zeta: np.ndarray, decomp: MixtureDecomposition, steps: int | None = None) -> np.ndarray:
    """Vectorized indicator over (paths, n, d); only the first ``steps`` steps are inspected."""
    n = zeta.shape[1]
    z = zeta if steps is None else zeta[:, :steps]
    if z.shape[1] == 0:
        return np.ones(zeta.shape[0], dtype=bool)
    return np.max(np.linalg.norm(z, axis=-1), axis=1) <= decomp.theta_threshold(n)


def rho_vector(draws, theta: int, ball: BallSpec) -> np.ndarray:
    """Logarithmic-derivative vector over H, flattened step-major as (k, r)."""
    if len(draws) and isinstance(draws[0], NoiseDraw):
        etas = np.stack([dr.eta for dr in draws])
    else:
        etas = np.asarray(draws, dtype=float).reshape(len(draws), -1)
    return (theta * psi_grad(etas, ball)).reshape(-1)


def mixture_rate_base(alpha: float, c: float) -> float:
    """``((1-a)/(1-c))^(1-c) * (a/c)^c``; strictly below 1 whenever 0 < c < a."""
    if not (0.0 < c < alpha <= 1.0):
        raise DecompositionError(f"c must lie in (0, alpha) = (0, {alpha}); got c = {c}")
    if alpha == 1.0:
        return 0.0
    return ((1 - alpha) / (1 - c)) ** (1 - c) * (alpha / c) ** c


def bernoulli_rate(alpha: float, c: float) -> float:
    base = mixture_rate_base(alpha, c)
    return math.inf if base == 0.0 else -0.5 * math.log(base)


def bernoulli_tail_bound(alpha: float, c: float, k: int) -> float:
    """Upper bound on P(sum of k Bernoulli(alpha) < c k)."""
    base = mixture_rate_base(alpha, c)
    if k == 0:
        return 1.0
    return base**k


@dataclass
class MomentAudit:
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    passed: bool


def audit_moments(decomp: MixtureDecomposition, rng: np.random.Generator,
                  draws: int = 10**6, z_score: float = 4.0) -> MomentAudit:
    """Check that the composed law is centred with identity covariance."""
    xi = sample_noise_batch(decomp, rng, draws, 1).xi[:, 0, :]
    d = xi.shape[1]
    mean = xi.mean(axis=0)
    mean_se = xi.std(axis=0, ddof=1) / math.sqrt(draws)
    prods = xi[:, :, None] * xi[:, None, :]
    cov = prods.mean(axis=0)
    cov_se = prods.std(axis=0, ddof=1) / math.sqrt(draws)
    ok = np.all(np.abs(mean) <= z_score * mean_se + 1e-15)
    ok &= np.all(np.abs(cov - np.eye(d)) <= z_score * cov_se + 1e-15)
    return MomentAudit(mean, cov, mean_se, cov_se, bool(ok))


def calibrated_pareto_scale(alpha: float, ball: BallSpec, exponent: float) -> float:
    """Pareto scale making the mixture (centred ball, radial nu) unit-covariance."""
    d = ball.dim
    eta_var = ball.radius**2 / (d + 2)
    per_coord = (1.0 - alpha * eta_var) / (1.0 - alpha)
    if per_coord <= 0:
        raise DecompositionError("ball variance already exceeds the unit budget")
    return math.sqrt(per_coord * d * (exponent - 2.0) / exponent)


def moment_matched(alpha: float, d: int) -> MixtureDecomposition:
    """Ball plus sphere mixture whose second and fourth moments equal the standard normal ones.

    Matching the fourth moment removes the leading correction to the local
    limit theorem, so short sums already sit close to the Gaussian density.
    """
    if not 0.0 < alpha < 1.0:
        raise DecompositionError("moment matching needs 0 < alpha < 1")
    m2, m4 = d / (d + 2.0), d / (d + 4.0)          # E|eta|^2 / r^2 and E|eta|^4 / r^4
    # with a = r^2: s^2 = (d - alpha m2 a) / (1 - alpha) and alpha m4 a^2 + (1 - alpha) s^4 = d (d + 2)
    qa = alpha * m4 + (alpha * m2) ** 2 / (1 - alpha)
    qb = -2.0 * d * alpha * m2 / (1 - alpha)
    qc = d * d / (1 - alpha) - d * (d + 2.0)
    disc = qb * qb - 4 * qa * qc
    if disc < 0:
        raise DecompositionError(f"no moment-matched mixture for alpha = {alpha}")
    a = (-qb - math.sqrt(disc)) / (2 * qa)
    s2 = (d - alpha * m2 * a) / (1 - alpha)
    if a <= 0 or s2 <= 0:
        raise DecompositionError(f"no moment-matched mixture for alpha = {alpha}")
    return MixtureDecomposition(alpha, BallSpec(np.zeros(d), math.sqrt(a)),
                                NuSpec("sphere", {"radius": math.sqrt(s2)}), exp_moment=True)


def standard_decompositions(d: int) -> dict[str, MixtureDecomposition]:
    """Unit-covariance decompositions used by the shipped experiments."""
    if d == 1:
        uniform = MixtureDecomposition(1.0, BallSpec(np.zeros(1), math.sqrt(3.0)))
    else:
        uniform = MixtureDecomposition(1.0, BallSpec(np.zeros(d), math.sqrt(d + 2.0)))
    ball = BallSpec(np.zeros(d), math.sqrt(d + 2.0) if d > 1 else math.sqrt(3.0))
    exponent = 4.5
    heavy = MixtureDecomposition(
        0.5, ball,
        NuSpec("pareto", {"scale": calibrated_pareto_scale(0.5, ball, exponent), "exponent": exponent}),
        kappa=4,
    )
    return {"uniform": uniform, "heavy": heavy, "matched": moment_matched(0.95, d)}
