"""Monte Carlo estimators built on the per-path weights.

Every estimate draws from one path ensemble, shared by all evaluation
points: the same chunk seeds give the same paths.  The weighted orthant
indicator estimator reads

    q_hat(y) = (-1)^{|alpha|} mean[ 1{(-1)^alpha_i (f_i - y_i) >= 0 for all i} * Upsilon ]

and the gradient estimator uses ``Upsilon_i`` with one extra sign flip.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .decomp import MixtureDecomposition, NoiseBatch, bernoulli_rate, eps_kappa
from .model import ModelSpec
from .parallel import Accumulator, chunk_rng, chunk_sizes, ordered_map, reduce_accumulators
from .scheme import PathBatch, simulate_batch, truncation_batch
from .weights import compute_weights

log = logging.getLogger(__name__)

MAIN_STREAM = 0
PILOT_STREAM = 1


class EstimatorError(RuntimeError):
    """Estimate undefined (for instance no path on the truncation set)."""


@dataclass
class Ensemble:
    """Everything needed to regenerate a path ensemble and its weights."""

    spec: ModelSpec
    decomp: MixtureDecomposition
    x0: np.ndarray
    n: int
    t: float = 1.0
    paths: int = 100_000
    c: float | None = None
    p: int | None = None
    seed: int = 0
    workers: int = 1
    chunk: int = 8192
    method: str = "auto"
    pilot: int = 2000

    def __post_init__(self):
        self.x0 = np.broadcast_to(np.asarray(self.x0, dtype=float), (self.spec.dim,)).copy()
        if self.pilot < 100:
            raise ValueError("pilot size must be >= 100")

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def c_value(self) -> float:
        return self.decomp.alpha / 2 if self.c is None else self.c

    @property
    def p_value(self) -> int:
        return 8 * (self.dim + 1) if self.p is None else self.p

    def with_(self, **changes) -> "Ensemble":
        fields = dict(self.__dict__)
        fields.update(changes)
        return Ensemble(**fields)

    def batch(self, stream: int, index: int, size: int) -> PathBatch:
        rng = chunk_rng(self.seed, stream, index)
        return simulate_batch(self.spec, self.decomp, self.x0, self.n, size, rng, (self.seed, stream, index))

    def chunks(self, paths: int | None = None) -> list[tuple[int, int]]:
        return list(enumerate(chunk_sizes(self.paths if paths is None else paths, self.chunk)))

    def map_chunks(self, fn: Callable[[PathBatch], Accumulator], stream: int = MAIN_STREAM,
                   paths: int | None = None) -> Accumulator:
        """Simulate every chunk, apply ``fn`` and reduce the accumulators in chunk order."""

        def work(item):
            index, size = item
            return fn(self.batch(stream, index, size))

        return reduce_accumulators(ordered_map(work, self.chunks(paths), self.workers))


@dataclass
class DensityEstimate:
    y: np.ndarray
    q_hat: float
    se: float
    orthant: tuple
    n_paths: int
    n_on_xi: int
    remainder_hat: float
    remainder_bound: float

    def row(self) -> dict:
        out = {f"y_{i + 1}": float(v) for i, v in enumerate(self.y)}
        out.update(q_hat=self.q_hat, se=self.se, orthant="".join(str(a) for a in self.orthant),
                   n_paths=self.n_paths, n_on_xi=self.n_on_xi, remainder_hat=self.remainder_hat,
                   remainder_bound=self.remainder_bound)
        return out


def orthant_patterns(d: int) -> list[tuple]:
    """All sign patterns, starting from the all-zero pattern."""
    return list(itertools.product((0, 1), repeat=d))


def orthant_indicator(f: np.ndarray, ys: np.ndarray, patterns) -> np.ndarray:
    """(B, K) indicators of ``(-1)^a_i (f_i - y_i) >= 0`` for paired ``ys[k]``, ``patterns[k]``."""
    f = np.asarray(f, dtype=float)
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    signs = 1.0 - 2.0 * np.asarray(patterns, dtype=float).reshape(ys.shape)
    return np.all(signs[None] * (f[:, None, :] - ys[None]) >= 0, axis=-1)


def orthant_select(pilot: np.ndarray, y, on_xi: np.ndarray | None = None) -> tuple:
    """Pattern with the smallest empirical orthant frequency; ties go to the earlier pattern."""
    pilot = np.atleast_2d(np.asarray(pilot, dtype=float))
    if pilot.shape[0] < 100:
        raise ValueError("pilot sample must hold at least 100 points")
    y = np.asarray(y, dtype=float).reshape(1, -1)
    keep = np.ones(pilot.shape[0], dtype=bool) if on_xi is None else np.asarray(on_xi, dtype=bool)
    patterns = orthant_patterns(pilot.shape[1])
    freqs = [np.mean(orthant_indicator(pilot, y, [pat])[:, 0] & keep) for pat in patterns]
    return patterns[int(np.argmin(freqs))]


def pilot_values(ens: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    batch = ens.batch(PILOT_STREAM, 0, ens.pilot)
    return batch.value_at(ens.t), truncation_batch(batch, ens.t, ens.c_value, ens.p_value)


def remainder_bound(ens: Ensemble) -> float:
    """``n^-eps(kappa) + exp(-rho n t)`` with the unknown constant set to 1."""
    rate = bernoulli_rate(ens.decomp.alpha, ens.c_value)
    exp_term = 0.0 if math.isinf(rate) else math.exp(-rate * ens.n * ens.t)
    if ens.decomp.exp_moment:
        return exp_term
    return ens.n ** (-eps_kappa(ens.decomp.kappa)) + exp_term


def _restrict(batch: PathBatch, keep: np.ndarray) -> PathBatch:
    noise = batch.noise
    return PathBatch(batch.n, batch.x0, batch.states[keep],
                     NoiseBatch(noise.eta[keep], noise.eps[keep], noise.zeta[keep]),
                     batch.theta[keep], batch.n_star, batch.seed_tag)


def path_weights(ens: Ensemble, batch: PathBatch, gradient: bool = False) -> dict:
    """Weights for a batch; paths off the truncation set get exact zeros without any work."""
    on_xi = truncation_batch(batch, ens.t, ens.c_value, ens.p_value)
    B, d = batch.size, batch.dim
    out = {"value": batch.value_at(ens.t), "on_xi": on_xi, "Upsilon": np.zeros(B),
           "det": np.zeros(B), "inv_norm": np.zeros(B)}
    if gradient:
        out["Upsilon_i"] = np.zeros((B, d))
    if not on_xi.any():
        return out
    sub = _restrict(batch, on_xi)
    w = compute_weights(sub, ens.spec, ens.decomp.ball, ens.t, np.ones(sub.size, dtype=bool),
                        gradient, ens.method)
    out["Upsilon"][on_xi] = np.asarray(w["Upsilon"]).reshape(sub.size)
    if gradient:
        out["Upsilon_i"][on_xi] = np.asarray(w["Upsilon_i"]).reshape(sub.size, d)
    sigma = np.asarray(w["sigma"]).reshape(sub.size, d, d)
    inv = np.asarray(w["inv"]).reshape(sub.size, d, d)
    out["det"][on_xi] = np.linalg.det(sigma)
    out["inv_norm"][on_xi] = np.linalg.norm(inv, 2, axis=(1, 2))
    return out


def _signed_run(ens: Ensemble, ys: np.ndarray, patterns: list, signs: np.ndarray, gradient: bool,
                coordinate: int, unit_weight: bool, record: dict | None) -> Accumulator:
    dumps = []

    def visit(batch):
        w = path_weights(ens, batch, gradient)
        if unit_weight:
            weight = w["on_xi"].astype(float)
        elif gradient:
            weight = w["Upsilon_i"][:, coordinate]
        else:
            weight = w["Upsilon"]
        ind = orthant_indicator(w["value"], ys, patterns)
        acc = Accumulator((len(ys),)).add(signs[None] * ind * weight[:, None])
        acc.tally("on_xi", int(w["on_xi"].sum()))
        if record is not None:
            dumps.append((batch.seed_tag, {k: w[k] for k in ("value", "on_xi", "Upsilon", "det", "inv_norm")},
                          batch.theta.copy()))
        return acc

    acc = ens.map_chunks(visit)
    if record is not None:
        dumps.sort(key=lambda item: item[0])
        for tag, w, theta in dumps:
            record.setdefault("chunk", []).append(np.full(len(theta), tag[2]))
            record.setdefault("theta", []).append(theta)
            for key, value in w.items():
                record.setdefault(key, []).append(value)
        for key in list(record):
            record[key] = np.concatenate(record[key])
    return acc


def _estimates(ens: Ensemble, ys, patterns, values, ses, acc) -> list[DensityEstimate]:
    n_on = acc.tallies.get("on_xi", 0)
    if n_on == 0:
        raise EstimatorError("no path landed on the truncation set; the estimate is undefined")
    rem = 1.0 - n_on / acc.count
    bound = remainder_bound(ens)
    return [DensityEstimate(np.asarray(y, dtype=float), float(v), float(s), tuple(pat), acc.count, n_on,
                            rem, bound) for y, pat, v, s in zip(ys, patterns, values, ses)]


def _as_points(ys, d: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=float)
    return ys.reshape(-1, d)


def _patterns_for(ens: Ensemble, ys: np.ndarray, orthant) -> list[tuple]:
    if orthant == "auto":
        pilot, on_xi = pilot_values(ens)
        return [orthant_select(pilot, y, on_xi) for y in ys]
    pattern = tuple(int(a) for a in orthant)
    if len(pattern) != ens.dim or any(a not in (0, 1) for a in pattern):
        raise ValueError(f"orthant must be 'auto' or {ens.dim} entries in {{0, 1}}")
    return [pattern] * len(ys)


def density_estimate(ens: Ensemble, ys, orthant="auto", unit_weight: bool = False,
                     record: dict | None = None) -> list[DensityEstimate]:
    """Truncated density estimates at every point of ``ys``.

    ``unit_weight`` replaces the weight by 1 on the truncation set, which turns the
    estimator into an orthant probability; it exists only as a negative control.
    """
    ys = _as_points(ys, ens.dim)
    patterns = _patterns_for(ens, ys, orthant)
    signs = np.array([(-1.0) ** sum(p) for p in patterns])
    acc = _signed_run(ens, ys, patterns, signs, False, 0, unit_weight, record)
    return _estimates(ens, ys, patterns, acc.mean(), acc.standard_error(), acc)


def density_gradient_estimate(ens: Ensemble, ys, coordinate: int = 0, orthant="auto",
                              record: dict | None = None) -> list[DensityEstimate]:
    if ens.dim != 1:
        raise EstimatorError("gradient weights are supported for d = 1 only")
    if not 0 <= coordinate < ens.dim:
        raise ValueError("coordinate out of range")
    ys = _as_points(ys, ens.dim)
    patterns = _patterns_for(ens, ys, orthant)
    signs = np.array([(-1.0) ** (sum(p) + p[coordinate] + 1) for p in patterns])
    acc = _signed_run(ens, ys, patterns, signs, True, coordinate, False, record)
    return _estimates(ens, ys, patterns, acc.mean(), acc.standard_error(), acc)


def density_all_orthants(ens: Ensemble, ys) -> dict:
    """Estimates at ``ys`` under every sign pattern on one ensemble, for invariance checks."""
    ys = _as_points(ys, ens.dim)
    patterns = orthant_patterns(ens.dim)
    qy = np.repeat(ys, len(patterns), axis=0)
    qp = patterns * len(ys)
    signs = np.array([(-1.0) ** sum(p) for p in qp])
    acc = _signed_run(ens, qy, qp, signs, False, 0, False, None)
    shape = (len(ys), len(patterns))
    return {"patterns": patterns, "q_hat": acc.mean().reshape(shape),
            "se": acc.standard_error().reshape(shape)}


def remainder_mass(ens: Ensemble) -> dict:
    """Fraction of paths off the truncation set, next to its theoretical shape."""

    def visit(batch):
        off = ~truncation_batch(batch, ens.t, ens.c_value, ens.p_value)
        return Accumulator(()).add(off.astype(float))

    acc = ens.map_chunks(visit)
    hat = float(acc.mean())
    bound = remainder_bound(ens)
    rate = bernoulli_rate(ens.decomp.alpha, ens.c_value)
    return {"remainder_hat": hat, "se": float(acc.standard_error()), "remainder_bound": bound,
            "rho_used": rate, "eps_kappa": eps_kappa(ens.decomp.kappa),
            "D_ratio": hat / bound if bound > 0 else (0.0 if hat == 0 else math.inf),
            "n_paths": acc.count}


def linear_fit(x, y) -> dict:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2:
        raise EstimatorError("need at least two points for a fit")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def tail_probe(ens: Ensemble, levels, fit_window: tuple | None = None) -> dict:
    """Empirical ``P(|X_n(t) - x| >= y, theta = 1)`` with a fit of ``-log P`` against ``y^2 / t``."""
    levels = np.asarray(levels, dtype=float)
    if np.any(levels < 0):
        raise ValueError("levels must be non-negative")

    def visit(batch):
        dist = np.linalg.norm(batch.value_at(ens.t) - ens.x0, axis=1)
        hits = (dist[:, None] >= levels[None]) & batch.theta[:, None]
        return Accumulator((len(levels),)).add(hits.astype(float))

    acc = ens.map_chunks(visit)
    prob, se = acc.mean(), acc.standard_error()
    lo, hi = fit_window if fit_window is not None else (levels.min(), levels.max())
    use = (levels >= lo) & (levels <= hi) & (prob > 0) & (levels > 0)
    fit = linear_fit(levels[use] ** 2 / ens.t, -np.log(prob[use])) if use.sum() >= 2 else None
    return {"levels": levels, "prob": prob, "se": se, "fit": fit}


def mgf_probe(ens: Ensemble, lambdas) -> dict:
    """``E exp(<lambda, X_n(t) - x>) 1{theta = 1}`` and the growth coefficient of its log in ``|lambda|^2``."""
    lambdas = np.asarray(lambdas, dtype=float).reshape(-1, ens.dim)
    limit = math.log(np.finfo(float).max) - 10.0

    def visit(batch):
        expo = (batch.value_at(ens.t) - ens.x0) @ lambdas.T
        acc = Accumulator((len(lambdas),))
        over = np.any(expo > limit, axis=0)
        vals = np.exp(np.minimum(expo, limit)) * batch.theta[:, None]
        vals[:, over] = np.nan
        for k in np.flatnonzero(over):
            acc.tally(("overflow", int(k)), 1)
        return acc.add(vals)

    acc = ens.map_chunks(visit)
    overflow = np.array([acc.tallies.get(("overflow", k), 0) > 0 for k in range(len(lambdas))])
    mgf, se = acc.mean(), acc.standard_error()
    sq = np.sum(lambdas**2, axis=1)
    use = ~overflow & (sq > 0) & (mgf > 0)
    fit = linear_fit(sq[use], np.log(mgf[use])) if use.sum() >= 2 else None
    ratio = np.where(use, np.log(np.where(mgf > 0, mgf, 1.0)) / np.where(sq > 0, sq, 1.0), np.nan)
    return {"lambdas": lambdas, "mgf": mgf, "se": se, "overflow": overflow, "fit": fit,
            "log_ratio": ratio}


# -- fitted-constant baselines -----------------------------------------------

DEFAULT_BASELINES = Path(__file__).with_name("data") / "baselines.json"


@dataclass
class BaselineStore:
    """Fitted constants frozen on first sight and compared with a relative drift tolerance."""

    path: Path = DEFAULT_BASELINES
    tolerance: float = 0.2
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.path = Path(self.path)
        if self.path.exists():
            self.values = json.loads(self.path.read_text())

    def check(self, key: str, value: float) -> tuple[bool, str]:
        if key not in self.values:
            self.values[key] = float(value)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.values, indent=2, sort_keys=True) + "\n")
            return True, "recorded"
        ref = self.values[key]
        drift = abs(value - ref) / max(abs(ref), 1e-300)
        return drift <= self.tolerance, f"baseline {ref:.6g}, drift {drift:.1%}"
