"""SDE coefficients with spatial derivative jets and structural checks.

Coefficient maps are vectorized over a leading batch axis: ``drift(x)`` takes
``(B, d)`` and returns ``(B, d)``; ``diffusion(x)`` returns ``(B, d, d)`` with
``b[:, i, r]`` the ``r``-th column.  Derivative jets append one trailing axis of
length ``d`` per differentiation, so ``drift_jet(x, 2)[:, i, j, k]`` is
``d^2 a_i / dx_j dx_k``.
"""

from __future__ import annotations

import ast
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy

JetFn = Callable[[np.ndarray, int], np.ndarray]


class ModelError(ValueError):
    """Invalid model specification or coefficient evaluation failure."""


def _fd_jet(base: Callable[[np.ndarray, int], np.ndarray], x: np.ndarray, q: int, h: float) -> np.ndarray:
    """Central difference of the order ``q-1`` jet along each coordinate."""
    cols = []
    for j in range(x.shape[1]):
        step = np.zeros(x.shape[1])
        step[j] = h
        cols.append((base(x + step, q - 1) - base(x - step, q - 1)) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ModelSpec:
    """Drift and diffusion with derivative jets up to ``max_order``.

    When ``drift_derivs``/``diffusion_derivs`` are omitted, jets are obtained by
    nested central differences with step ``fd_step``; each nesting level loses
    roughly ``-log10(fd_step)`` digits, so beyond order 2 the fallback is only
    fit for smoke testing.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    drift_derivs: JetFn | None = None
    diffusion_derivs: JetFn | None = None
    max_order: int | None = None
    gamma: float = 1.0
    drift_sup: float = math.inf
    drift_grad_sup: float = math.inf
    diffusion_grad_sup: float = math.inf
    affine: bool = False
    name: str = "custom"
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.dim < 1:
            raise ModelError("model dimension must be >= 1")
        if self.max_order is None:
            object.__setattr__(self, "max_order", self.dim + 2)
        if self.gamma <= 0:
            raise ModelError("ellipticity constant gamma must be positive")

    def drift_jet(self, x: np.ndarray, q: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if q == 0:
            return self.drift(x)
        self._check_order(q)
        if self.drift_derivs is not None:
            return self.drift_derivs(x, q)
        return _fd_jet(self.drift_jet, x, q, self.fd_step)

    def diffusion_jet(self, x: np.ndarray, q: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if q == 0:
            return self.diffusion(x)
        self._check_order(q)
        if self.diffusion_derivs is not None:
            return self.diffusion_derivs(x, q)
        return _fd_jet(self.diffusion_jet, x, q, self.fd_step)

    def _check_order(self, q: int):
        if q > self.max_order:
            raise ModelError(f"model {self.name!r} provides derivatives up to order {self.max_order}, "
                             f"order {q} requested")


# -- catalog -----------------------------------------------------------------

def _diag_jet(values: np.ndarray, q: int, lead: int) -> np.ndarray:
    """Tensor with ``values[:, i]`` on the full diagonal of ``lead + q`` axes."""
    B, d = values.shape
    out = np.zeros((B,) + (d,) * (lead + q))
    idx = np.arange(d)
    out[(slice(None),) + (idx,) * (lead + q)] = values
    return out


def _constant_spec(a0: np.ndarray, b0: np.ndarray, name: str) -> ModelSpec:
    d = a0.shape[0]

    def drift(x):
        return np.broadcast_to(a0, x.shape).copy()

    def diffusion(x):
        return np.broadcast_to(b0, (x.shape[0], d, d)).copy()

    def drift_derivs(x, q):
        return np.zeros((x.shape[0], d) + (d,) * q)

    def diffusion_derivs(x, q):
        return np.zeros((x.shape[0], d, d) + (d,) * q)

    gamma = float(np.linalg.eigvalsh(b0 @ b0.T).min())
    if gamma <= 0:
        raise ModelError("constant diffusion matrix must be non-degenerate")
    return ModelSpec(d, drift, diffusion, drift_derivs, diffusion_derivs, max_order=8, gamma=gamma,
                     drift_sup=float(np.linalg.norm(a0)), drift_grad_sup=0.0, diffusion_grad_sup=0.0,
                     affine=True, name=name)


def _tanh_derivative(x: np.ndarray, q: int) -> np.ndarray:
    t = np.tanh(x)
    s = 1.0 - t * t
    if q == 0:
        return t
    if q == 1:
        return s
    if q == 2:
        return -2.0 * t * s
    if q == 3:
        return (6.0 * t * t - 2.0) * s
    if q == 4:
        return (16.0 * t - 24.0 * t**3) * s
    raise ModelError("tanh derivatives provided up to order 4")


def _ou_bounded_spec(d: int, lam: float) -> ModelSpec:
    def drift(x):
        return -lam * np.tanh(x)

    def diffusion(x):
        return np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy()

    def drift_derivs(x, q):
        return _diag_jet(-lam * _tanh_derivative(x, q), q, 1)

    def diffusion_derivs(x, q):
        return np.zeros((x.shape[0], d, d) + (d,) * q)

    return ModelSpec(d, drift, diffusion, drift_derivs, diffusion_derivs, max_order=4, gamma=1.0,
                     drift_sup=lam * math.sqrt(d), drift_grad_sup=lam, diffusion_grad_sup=0.0,
                     name="ou_bounded")


def _trig_spec(d: int, drift_scale: float = 0.5, diffusion_scale: float = 0.2) -> ModelSpec:
    def drift(x):
        return drift_scale * np.sin(x)

    def diffusion(x):
        return np.eye(d) + diffusion_scale * _diag_jet(np.cos(x), 0, 2)

    def drift_derivs(x, q):
        return _diag_jet(drift_scale * np.sin(x + q * math.pi / 2), q, 1)

    def diffusion_derivs(x, q):
        return _diag_jet(diffusion_scale * np.cos(x + q * math.pi / 2), q, 2)

    return ModelSpec(d, drift, diffusion, drift_derivs, diffusion_derivs, max_order=8,
                     gamma=(1.0 - diffusion_scale) ** 2, drift_sup=drift_scale * math.sqrt(d),
                     drift_grad_sup=drift_scale, diffusion_grad_sup=diffusion_scale, name="trig")


def gaussian_density(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    diff = y - mean
    prec = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", diff, prec, diff)
    d = mean.shape[0]
    return np.exp(-0.5 * quad) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))


@dataclass(frozen=True)
class ModelCatalogEntry:
    name: str
    spec: ModelSpec
    oracle: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | None = None
    compliance: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def oracle_moments(self, x, t: float) -> tuple[np.ndarray, np.ndarray]:
        a0, b0 = self.params["a0"], self.params["b0"]
        return np.asarray(x, dtype=float) + a0 * t, t * b0 @ b0.T


def _constant_entry(name: str, a0: np.ndarray, b0: np.ndarray) -> ModelCatalogEntry:
    spec = _constant_spec(a0, b0, name)

    def oracle(x, y, t):
        return gaussian_density(y, np.asarray(x, dtype=float) + a0 * t, t * b0 @ b0.T)

    return ModelCatalogEntry(name, spec, oracle, {"B1": True, "B4": False}, {"a0": a0, "b0": b0})


def catalog_entry(name: str, dim: int = 1, **params) -> ModelCatalogEntry:
    """Build a catalog model: ``iid``, ``constant``, ``ou_bounded`` or ``trig``."""
    if name == "iid":
        return _constant_entry("iid", np.zeros(dim), np.eye(dim))
    if name == "constant":
        a0 = np.broadcast_to(np.asarray(params.get("a0", 0.0), dtype=float), (dim,)).copy()
        b0 = np.asarray(params.get("b0", 1.0), dtype=float)
        if b0.ndim == 0:
            b0 = b0 * np.eye(dim)
        elif b0.ndim == 1:
            b0 = np.diag(np.broadcast_to(b0, (dim,)))
        if b0.shape != (dim, dim):
            raise ModelError(f"b0 must be {dim}x{dim}")
        return _constant_entry("constant", a0, b0)
    if name == "ou_bounded":
        lam = float(params.get("lam", 1.0))
        return ModelCatalogEntry(name, _ou_bounded_spec(dim, lam), None, {"B1": True, "B4": True},
                                 {"lam": lam})
    if name == "trig":
        return ModelCatalogEntry(name, _trig_spec(dim), None, {"B1": True, "B4": False})
    raise ModelError(f"unknown catalog model {name!r}")


CATALOG = ("iid", "constant", "ou_bounded", "trig")


# -- expression grammar ------------------------------------------------------

_FUNCTIONS = {"sin": sympy.sin, "cos": sympy.cos, "tanh": sympy.tanh, "exp": sympy.exp}
_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
           ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b}


def parse_expression(text: str, dim: int) -> sympy.Expr:
    """Parse ``+ - * /``, parentheses, numbers, ``pi``, ``sin cos tanh exp`` and ``x1..xd``."""
    symbols = sympy.symbols(f"x1:{dim + 1}")
    names = {f"x{i + 1}": s for i, s in enumerate(symbols)}
    names["pi"] = sympy.pi
    try:
        tree = ast.parse(str(text).strip(), mode="eval")
    except SyntaxError as exc:
        raise ModelError(f"cannot parse expression {text!r}: {exc.msg}") from None

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](build(node.left), build(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = build(node.operand)
            return -inner if isinstance(node.op, ast.USub) else inner
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return sympy.Float(node.value) if isinstance(node.value, float) else sympy.Integer(node.value)
        if isinstance(node, ast.Name) and node.id in names:
            return names[node.id]
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCTIONS and len(node.args) == 1 and not node.keywords:
            return _FUNCTIONS[node.func.id](build(node.args[0]))
        raise ModelError(f"unsupported construct in expression {text!r}: {ast.dump(node)[:60]}")

    return build(tree)


def _compile(expr: sympy.Expr, symbols) -> Callable[[np.ndarray], np.ndarray]:
    fn = sympy.lambdify(symbols, expr, modules="numpy")

    def evaluate(x):
        out = fn(*[x[:, i] for i in range(x.shape[1])])
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],))

    return evaluate


def custom_model(drift: list[str], diffusion: list[list[str]], gamma: float | None = None,
                 max_order: int | None = None, probe_points: int = 2000, seed: int = 0) -> ModelSpec:
    """Model from coefficient expressions; jets are exact symbolic derivatives."""
    d = len(drift)
    diffusion = [list(row) for row in diffusion]
    if len(diffusion) != d or any(len(row) != d for row in diffusion):
        raise ModelError(f"diffusion must be a {d}x{d} array of expressions")
    max_order = d + 2 if max_order is None else max_order
    symbols = sympy.symbols(f"x1:{d + 1}")
    a_exprs = np.empty((d,), dtype=object)
    a_exprs[:] = [parse_expression(e, d) for e in drift]
    b_exprs = np.empty((d, d), dtype=object)
    for i in range(d):
        for r in range(d):
            b_exprs[i, r] = parse_expression(diffusion[i][r], d)
    a_field = _symbolic_jets(a_exprs, symbols, max_order)
    b_field = _symbolic_jets(b_exprs, symbols, max_order)
    affine = a_field["zero_from"] is not None and a_field["zero_from"] <= 2 \
        and b_field["zero_from"] is not None and b_field["zero_from"] <= 1

    def jet_fn(field_):
        def fn(x, q):
            shape, flat = field_["jets"][q]
            return np.stack([f(x) for f in flat], axis=-1).reshape((x.shape[0],) + shape)
        return fn

    a_fn, b_fn = jet_fn(a_field), jet_fn(b_field)
    rng = np.random.default_rng(seed)
    probes = 3.0 * rng.standard_normal((probe_points, d))
    grad_a = np.linalg.norm(a_fn(probes, 1), ord=2, axis=(1, 2)).max() if max_order >= 1 else math.inf
    grad_b = np.linalg.norm(np.moveaxis(b_fn(probes, 1), 2, 1), ord=2, axis=(2, 3)).max() \
        if max_order >= 1 else math.inf
    drift_sup = np.linalg.norm(a_fn(probes, 0), axis=1).max()
    bb = np.einsum("bir,bjr->bij", b_fn(probes, 0), b_fn(probes, 0))
    probed_gamma = float(np.linalg.eigvalsh(bb).min())
    if gamma is None:
        gamma = probed_gamma
    if not gamma > 0:
        raise ModelError("custom diffusion is degenerate at probed points")
    return ModelSpec(d, lambda x: a_fn(x, 0), lambda x: b_fn(x, 0), a_fn, b_fn, max_order=max_order,
                     gamma=float(gamma), drift_sup=float(drift_sup), drift_grad_sup=float(grad_a),
                     diffusion_grad_sup=float(grad_b), affine=affine, name="custom")


def _symbolic_jets(exprs: np.ndarray, symbols, max_order: int) -> dict:
    d = len(symbols)
    jets, zero_from = [], None
    current = exprs
    for q in range(max_order + 1):
        flat = list(current.reshape(-1))
        if zero_from is None and all(sympy.simplify(e) == 0 for e in flat):
            zero_from = q
        jets.append((current.shape, [_compile(e, symbols) for e in flat]))
        if q < max_order:
            nxt = np.empty(current.shape + (d,), dtype=object)
            for idx in itertools.product(*[range(s) for s in current.shape]):
                for j, s in enumerate(symbols):
                    nxt[idx + (j,)] = sympy.diff(current[idx], s)
            current = nxt
    return {"jets": jets, "zero_from": zero_from}


def model_from_callables(dim: int, drift, diffusion, **kwargs) -> ModelSpec:
    """Ad-hoc model without analytic jets (finite-difference fallback)."""
    return ModelSpec(dim, drift, diffusion, **kwargs)


# -- structural checks -------------------------------------------------------

def _probe(dim: int, count: int, seed: int, scale: float = 3.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal((count, dim))


def ellipticity_check(spec: ModelSpec, probe_points: int, seed: int = 0) -> dict:
    if probe_points < 1:
        raise ValueError("probe_points must be >= 1")
    x = _probe(spec.dim, probe_points, seed)
    b = spec.diffusion(x)
    bad = ~np.all(np.isfinite(b.reshape(b.shape[0], -1)), axis=1)
    if bad.any():
        raise ModelError(f"non-finite diffusion value at x = {x[np.argmax(bad)].tolist()}")
    eig = np.linalg.eigvalsh(np.einsum("bir,bjr->bij", b, b)).min()
    return {"min_eigenvalue": float(eig), "pass": bool(eig >= spec.gamma * (1 - 1e-12))}


def recurrence_check(spec: ModelSpec, R0: float, probe_points: int, seed: int = 0) -> dict:
    if R0 <= 0:
        raise ValueError("R0 must be positive")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((probe_points, spec.dim))
    directions = g / np.linalg.norm(g, axis=1, keepdims=True)
    radii = R0 * (1.0 + 3.0 * rng.random(probe_points))
    radii[0] = R0
    x = radii[:, None] * directions
    margin = -np.einsum("bi,bi->b", spec.drift(x), x) / radii
    m = float(margin.min())
    return {"min_margin": m, "pass": bool(m > 0)}


def derivative_consistency(spec: ModelSpec, order: int, trials: int, step: float = 1e-5,
                           seed: int = 0) -> float:
    """Worst relative mismatch between supplied jets and central differences."""
    if order > spec.max_order:
        raise ModelError(f"order {order} exceeds stored derivative order {spec.max_order}")
    x = _probe(spec.dim, trials, seed, scale=1.5)
    worst = 0.0
    for jet in (spec.drift_jet, spec.diffusion_jet):
        for q in range(1, order + 1):
            exact = jet(x, q)
            approx = _fd_jet(jet, x, q, step)
            diff = np.abs(exact - approx).max()
            scale = np.abs(exact).max()
            if diff == 0.0:
                continue
            worst = max(worst, diff / scale if scale > 0 else math.inf)
    return float(worst)
