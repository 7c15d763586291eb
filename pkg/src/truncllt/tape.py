"""Exact per-sample calculus on the eta coordinates.

A :class:`SobolevElement` holds a batch of random functionals together with
their weighted derivative tensors ``T_j[i_1, ..., i_j] = X_{i_1} ... X_{i_j} f``
where ``X_{(k,r)} = w_k * d/d eta_{kr}`` and ``w_k = theta * psi(eta_k)``.  The
first index is the outermost (last applied) vector field.  Within one step the
fields do not commute for d >= 2, so tensors are generally not symmetric.

Array layout: ``value`` is ``(B, *vshape)`` and ``tensors[j-1]`` is
``(B, H, ..., H, *vshape)`` with ``j`` axes of length ``H = steps * d``
flattened step-major.  A "family" indexed by H is an element whose vshape
starts with ``H``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .decomp import BallSpec

_DERIV = "ABCDEFGHIJKLMNOP"


class TapeError(ValueError):
    """Order mismatch, shape mismatch or a singular Malliavin matrix on the truncation set."""


@dataclass
class SobolevElement:
    value: np.ndarray
    tensors: list
    H: int

    @property
    def order(self) -> int:
        return len(self.tensors)

    @property
    def vshape(self) -> tuple:
        return self.value.shape[1:]

    @property
    def batch(self) -> int:
        return self.value.shape[0]

    def tensor(self, j: int) -> np.ndarray:
        return self.value if j == 0 else self.tensors[j - 1]

    def truncate(self, m: int) -> "SobolevElement":
        if m > self.order:
            raise TapeError(f"cannot raise order {self.order} to {m}")
        return SobolevElement(self.value, self.tensors[:m], self.H)

    def _map(self, fn) -> "SobolevElement":
        return SobolevElement(fn(self.value, 0), [fn(t, j + 1) for j, t in enumerate(self.tensors)], self.H)

    def take(self, index) -> "SobolevElement":
        """Index into the value axes (an int, slice or tuple thereof)."""
        index = index if isinstance(index, tuple) else (index,)
        return self._map(lambda a, j: a[(slice(None),) * (1 + j) + index])

    def reshape_v(self, shape: tuple) -> "SobolevElement":
        return self._map(lambda a, j: a.reshape(a.shape[:1 + j] + tuple(shape)))

    def sum_v(self, axis: int) -> "SobolevElement":
        return self._map(lambda a, j: a.sum(axis=1 + j + axis))

    def broadcast_v(self, shape: tuple) -> "SobolevElement":
        return self._map(lambda a, j: np.broadcast_to(
            a.reshape(a.shape[:1 + j] + (1,) * (len(shape) - len(self.vshape)) + self.vshape),
            a.shape[:1 + j] + tuple(shape)).copy())

    def mask(self, keep: np.ndarray) -> "SobolevElement":
        """Zero out batch entries where ``keep`` is False."""
        keep = np.asarray(keep, dtype=bool)
        return self._map(lambda a, j: np.where(keep.reshape((-1,) + (1,) * (a.ndim - 1)), a, 0.0))

    def __add__(self, other):
        if not isinstance(other, SobolevElement):
            return SobolevElement(self.value + other, list(self.tensors), self.H)
        m = min(self.order, other.order)
        return SobolevElement(self.value + other.value,
                              [self.tensors[j] + other.tensors[j] for j in range(m)], self.H)

    __radd__ = __add__

    def __neg__(self):
        return self._map(lambda a, j: -a)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, SobolevElement):
            return multiply(self, other)
        other = np.asarray(other, dtype=float)
        return self._map(lambda a, j: a * other)

    __rmul__ = __mul__

    def scale(self, per_path) -> "SobolevElement":
        """Multiply by a path-dependent constant of shape (B,) or (B, *value-broadcastable)."""
        c = np.asarray(per_path, dtype=float)
        tail = c.shape[1:] + (1,) * (len(self.vshape) - (c.ndim - 1))
        return self._map(lambda a, j: a * c.reshape(c.shape[:1] + (1,) * j + tail))

    def active_horizon(self, d: int) -> int:
        """Largest 1-based step index with a nonzero tensor entry (0 if none)."""
        last = 0
        for j, t in enumerate(self.tensors, start=1):
            for axis in range(1, j + 1):
                other = tuple(a for a in range(t.ndim) if a != axis)
                nz = np.nonzero(np.any(t != 0, axis=other))[0]
                if nz.size:
                    last = max(last, int(nz.max()) // d + 1)
        return last

    def dump(self, path: int = 0) -> list[tuple[tuple, float]]:
        """Flat ``(multi-index, value)`` pairs of all nonzero entries for one path."""
        out = []
        for j in range(self.order + 1):
            arr = self.tensor(j)[path]
            for idx in zip(*np.nonzero(arr)):
                out.append((tuple(int(i) for i in idx), float(arr[idx])))
        return out


def lift_constant(v, m: int, H: int, batch: int | None = None) -> SobolevElement:
    v = np.asarray(v, dtype=float)
    if batch is not None:
        v = np.broadcast_to(v, (batch,) + v.shape[1:] if v.ndim and v.shape[0] == batch else (batch,) + v.shape)
    v = np.array(v, dtype=float)
    return SobolevElement(v, [np.zeros((v.shape[0],) + (H,) * j + v.shape[1:]) for j in range(1, m + 1)], H)


def _letters(k: int, avoid: str = "") -> str:
    pool = [c for c in "abcdefghijklmnopqrstuvwxy" if c not in avoid]
    return "".join(pool[:k])


@functools.lru_cache(maxsize=None)
def set_partitions(m: int) -> tuple:
    """Partitions of positions 0..m-1; blocks keep increasing order and are sorted by first position."""
    if m == 0:
        return ((),)
    out = []
    for part in set_partitions(m - 1):
        for i in range(len(part)):
            out.append(part[:i] + (part[i] + (m - 1,),) + part[i + 1:])
        out.append(part + ((m - 1,),))
    return tuple(out)


def bilinear(f: SobolevElement, g: SobolevElement, sig: str) -> SobolevElement:
    """Product rule for a bilinear pairing of value axes, given as an einsum signature.

    ``sig`` uses lowercase letters for the value axes of ``f`` and ``g`` only,
    e.g. ``"hi,hj->ij"``.  Derivative positions are split over ordered subsets.
    """
    lhs, out = sig.replace(" ", "").split("->")
    fin, gin = lhs.split(",")
    if f.H != g.H:
        raise TapeError("elements live on different H spaces")
    m = min(f.order, g.order)
    value = np.einsum(f"Z{fin},Z{gin}->Z{out}", f.value, g.value)
    tensors = []
    for j in range(1, m + 1):
        pos = _DERIV[:j]
        acc = None
        for mask in range(1 << j):
            s = "".join(pos[p] for p in range(j) if mask >> p & 1)
            sc = "".join(pos[p] for p in range(j) if not mask >> p & 1)
            term = np.einsum(f"Z{s}{fin},Z{sc}{gin}->Z{pos}{out}", f.tensor(len(s)), g.tensor(len(sc)))
            acc = term if acc is None else acc + term
        tensors.append(acc)
    return SobolevElement(value, tensors, f.H)


def multiply(f: SobolevElement, g: SobolevElement) -> SobolevElement:
    """Elementwise product; a scalar-valued factor broadcasts over the other's value axes."""
    if f.vshape == g.vshape:
        v = _letters(len(f.vshape))
        return bilinear(f, g, f"{v},{v}->{v}")
    if f.vshape == ():
        v = _letters(len(g.vshape))
        return bilinear(f, g, f",{v}->{v}")
    if g.vshape == ():
        v = _letters(len(f.vshape))
        return bilinear(f, g, f"{v},->{v}")
    raise TapeError(f"cannot multiply value shapes {f.vshape} and {g.vshape}")


def apply_elementwise(f: SobolevElement, derivs: list[np.ndarray]) -> SobolevElement:
    """Faa di Bruno for a scalar function applied entrywise; ``derivs[q]`` is F^(q)(f.value)."""
    m = min(f.order, len(derivs) - 1)
    v = _letters(len(f.vshape))
    tensors = []
    for j in range(1, m + 1):
        pos = _DERIV[:j]
        acc = 0.0
        for part in set_partitions(j):
            ops = [derivs[len(part)]]
            subs = [f"Z{v}"]
            for block in part:
                ops.append(f.tensor(len(block)))
                subs.append("Z" + "".join(pos[p] for p in block) + v)
            acc = acc + np.einsum(",".join(subs) + f"->Z{pos}{v}", *ops, optimize=len(ops) > 2)
        tensors.append(acc)
    return SobolevElement(np.array(derivs[0], dtype=float), tensors, f.H)


def apply_map(table, f: SobolevElement, out_ndim: int) -> SobolevElement:
    """Chain rule for a map of the vector element ``f`` (vshape ``(p,)``).

    ``table(q)`` returns the q-th derivative of the map at ``f.value`` with shape
    ``(B, *out, p, ..., p)``.
    """
    if len(f.vshape) != 1:
        raise TapeError("apply_map expects a vector-valued element")
    m = f.order
    tables = [table(q) for q in range(m + 1)]
    outl = _letters(out_ndim)
    inl = _letters(m, avoid=outl)
    tensors = []
    for j in range(1, m + 1):
        pos = _DERIV[:j]
        acc = 0.0
        for part in set_partitions(j):
            q = len(part)
            subs = ["Z" + outl + inl[:q]]
            ops = [tables[q]]
            for b, block in enumerate(part):
                ops.append(f.tensor(len(block)))
                subs.append("Z" + "".join(pos[p] for p in block) + inl[b])
            acc = acc + np.einsum(",".join(subs) + f"->Z{pos}{outl}", *ops, optimize=len(ops) > 2)
        tensors.append(acc)
    return SobolevElement(np.array(tables[0], dtype=float), tensors, f.H)


def stack(elements: list[SobolevElement]) -> SobolevElement:
    """Stack same-shaped elements along a new trailing value axis."""
    m = min(e.order for e in elements)
    return SobolevElement(np.stack([e.value for e in elements], axis=-1),
                          [np.stack([e.tensors[j] for e in elements], axis=-1) for j in range(m)],
                          elements[0].H)


class ScalarMap:
    """A smooth scalar map of p arguments with a jet ``jet(x, q) -> (B, p, ..., p)``."""

    def __init__(self, fn, jet):
        self.fn = fn
        self.jet = jet


def chain(F: ScalarMap, args: list[SobolevElement]) -> SobolevElement:
    orders = {a.order for a in args}
    if len(orders) != 1:
        raise TapeError(f"chain arguments must share one order, got {sorted(orders)}")
    x = stack(args)
    return apply_map(lambda q: F.jet(x.value, q), x, 0)


def grad(f: SobolevElement) -> SobolevElement:
    """The H-family ``D f``; its own tensors are the higher tensors of ``f`` (family index last)."""
    if f.order < 1:
        raise TapeError("gradient needs an element of order >= 1")
    return SobolevElement(f.tensors[0], f.tensors[1:], f.H)


def _trace_family(g: SobolevElement) -> SobolevElement:
    """``sum_h X_h g_h``: contract the last derivative position with the family axis."""
    if g.order < 1:
        raise TapeError("divergence needs a family of order >= 1")

    def tr(t, j):
        return np.trace(t, axis1=1 + j, axis2=2 + j)

    return SobolevElement(tr(g.tensors[0], 0), [tr(g.tensors[j], j) for j in range(1, g.order)], g.H)


@dataclass
class PathContext:
    """Noise and weight data for ``steps`` leading steps of a batch of paths."""

    eta: np.ndarray
    theta: np.ndarray
    ball: BallSpec
    steps: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim == 2:
            eta = eta[None]
        if self.steps is None:
            self.steps = eta.shape[1]
        self.eta = eta[:, :self.steps]
        self.theta = np.broadcast_to(np.asarray(self.theta, dtype=float), (eta.shape[0],)).copy()

    @property
    def d(self) -> int:
        return self.eta.shape[2]

    @property
    def H(self) -> int:
        return self.steps * self.d

    @property
    def batch(self) -> int:
        return self.eta.shape[0]

    @property
    def psi(self) -> np.ndarray:
        return self.ball.radius**2 - np.sum((self.eta - self.ball.center) ** 2, axis=-1)

    @property
    def weights(self) -> np.ndarray:
        """``theta * psi(eta_k)``, shape (B, steps)."""
        return self.theta[:, None] * self.psi

    @property
    def rho(self) -> np.ndarray:
        """``theta * grad psi(eta_k)`` flattened to (B, H)."""
        return (self.theta[:, None, None] * -2.0 * (self.eta - self.ball.center)).reshape(self.batch, -1)

    def coordinates(self, m: int) -> SobolevElement:
        if m not in self._cache:
            self._cache[m] = lift_coordinates(self, m)
        return self._cache[m]

    def weight_element(self, m: int) -> SobolevElement:
        eta = self.coordinates(m)
        return _ball_weight(eta, self)

    def rho_element(self, m: int) -> SobolevElement:
        """The family ``rho`` as an element of order m."""
        eta = self.coordinates(m)
        return ((eta - self.ball.center).scale(-2.0 * self.theta)).reshape_v((self.H,))


def _ball_weight(eta: SobolevElement, ctx: PathContext) -> SobolevElement:
    centred = eta - ctx.ball.center
    sq = multiply(centred, centred).sum_v(1)
    return (ctx.ball.radius**2 - sq).scale(ctx.theta)


def lift_coordinates(ctx: PathContext, m: int) -> SobolevElement:
    """All eta coordinates as one element with vshape (steps, d).

    Bootstraps by order: ``D^j eta_h`` is ``D^(j-1) w_(step of h)`` placed in the
    last position at ``h``.
    """
    n, d, H = ctx.steps, ctx.d, ctx.H
    onehot = np.eye(H).reshape(H, n, d)
    elem = SobolevElement(ctx.eta.copy(), [], H)
    for order in range(1, m + 1):
        w = _ball_weight(elem, ctx)
        tensors = []
        for j in range(1, order + 1):
            wt = w.tensor(j - 1)
            tensors.append(wt[..., None, :, None] * onehot)
        elem = SobolevElement(ctx.eta.copy(), tensors, H)
    return elem


def lift_coordinate(ctx: PathContext, k: int, r: int, m: int) -> SobolevElement:
    if not (0 <= k < ctx.steps and 0 <= r < ctx.d):
        raise TapeError(f"coordinate ({k}, {r}) outside {ctx.steps} steps x {ctx.d} components")
    return ctx.coordinates(m).take((k, r))


def divergence(g: SobolevElement, ctx: PathContext) -> SobolevElement:
    """``-sum_h [rho_h g_h + X_h g_h]`` for a family g (leading value axis of length H)."""
    if g.order < 1:
        raise TapeError("divergence needs a family of order >= 1")
    if g.vshape[:1] != (ctx.H,):
        raise TapeError(f"family axis {g.vshape[:1]} does not match H = {ctx.H}")
    rho = ctx.rho_element(g.order - 1)
    rest = _letters(len(g.vshape) - 1, avoid="h")
    pairing = bilinear(rho, g.truncate(g.order - 1), f"h,h{rest}->{rest}")
    return -(pairing + _trace_family(g))


def b_operator(g: SobolevElement, ctx: PathContext) -> SobolevElement:
    """Block-diagonal operator with blocks ``2 theta^2 psi(eta_k) I`` applied to a family."""
    m = g.order
    w = ctx.weight_element(m)
    blocks = w.reshape_v((ctx.steps, 1)).broadcast_v((ctx.steps, ctx.d)).reshape_v((ctx.H,))
    rest = _letters(len(g.vshape) - 1, avoid="h")
    return bilinear(blocks.scale(2.0 * ctx.theta), g, f"h,h{rest}->h{rest}")


def transpose_gradient(g: SobolevElement) -> SobolevElement:
    """``[D g]*``: the family ``h -> X_h g`` re-indexed so the derivative slot is the family axis.

    For a family g (vshape (H, *rest)) returns the family K with
    ``K_i = (X_j g_i)_j``, i.e. vshape (H, H, *rest) with the divergence
    index (i) leading.
    """
    dg = grad(g)
    return dg._map(lambda a, j: np.swapaxes(a, 1 + j, 2 + j))


def commutator_correction(g: SobolevElement, ctx: PathContext) -> SobolevElement:
    """``-sum_i [X_j, X_i] g_i`` for each j; identically zero when d = 1.

    Within a step ``[X_s, X_r] = rho_s X_r - rho_r X_s``, so for d >= 2 the
    commutation of D with the divergence picks up
    ``sum_i rho_i X_j g_i - rho_j sum_i X_i g_i`` (i ranging over the step of j).
    """
    m = g.order - 1
    xg = grad(g)                                   # value axes (j, i, *rest): X_j g_i
    rho = ctx.rho_element(m)
    same = np.kron(np.eye(ctx.steps), np.ones((ctx.d, ctx.d)))
    same_el = lift_constant(np.broadcast_to(same, (ctx.batch, ctx.H, ctx.H)), m, ctx.H)
    rest = _letters(len(g.vshape) - 1, avoid="ij")
    rho_same = bilinear(rho, same_el, "i,ji->ji")
    first = bilinear(rho_same, xg, f"ji,ji{rest}->j{rest}")
    diag = xg._map(lambda a, t: np.moveaxis(np.diagonal(a, axis1=1 + t, axis2=2 + t), -1, 1 + t))
    per_step = bilinear(same_el, diag, f"ji,i{rest}->j{rest}")
    second = bilinear(rho, per_step, f"j,j{rest}->j{rest}")
    return first - second


def inverse_with_derivative(sigma: SobolevElement, on_truncation) -> SobolevElement:
    """Tensor inverse of a matrix element; zero where ``on_truncation`` is False.

    Derivatives follow from differentiating ``sigma rho = I`` repeatedly:
    ``T_m(rho) = -rho_0 sum_{S nonempty} T_|S|(sigma)[S] T_{m-|S|}(rho)[S^c]``.
    """
    keep = np.broadcast_to(np.asarray(on_truncation, dtype=bool), (sigma.batch,))
    d = sigma.vshape[0]
    s0 = np.where(keep[:, None, None], sigma.value, np.eye(d))
    if np.any(keep):
        eig = np.linalg.eigvalsh(0.5 * (s0 + np.swapaxes(s0, 1, 2))[keep])
        if not np.all(np.isfinite(eig)) or eig.min() <= 0:
            raise TapeError("Malliavin matrix is singular on the truncation set")
    r0 = np.linalg.inv(s0)
    tensors = []
    for j in range(1, sigma.order + 1):
        pos = _DERIV[:j]
        acc = 0.0
        for mask in range(1, 1 << j):
            s = "".join(pos[p] for p in range(j) if mask >> p & 1)
            sc = "".join(pos[p] for p in range(j) if not mask >> p & 1)
            rt = r0 if not sc else tensors[len(sc) - 1]
            acc = acc + np.einsum(f"Z{s}ik,Z{sc}kl->Z{pos}il", sigma.tensor(len(s)), rt)
        tensors.append(-np.einsum("Zij,Z...jl->Z...il", r0, acc))
    out = SobolevElement(r0, tensors, sigma.H)
    return out.mask(keep)


def inner_family(f: SobolevElement, g: SobolevElement) -> SobolevElement:
    """``(f, g)_H`` for two scalar families (vshape (H,))."""
    return bilinear(f, g, "h,h->")


def relative_gap(a: SobolevElement, b: SobolevElement) -> float:
    """Largest relative discrepancy over value and tensors, scaled per order."""
    worst = 0.0
    for j in range(min(a.order, b.order) + 1):
        x, y = a.tensor(j), b.tensor(j)
        scale = max(np.abs(x).max(initial=0.0), np.abs(y).max(initial=0.0))
        if scale > 0:
            worst = max(worst, float(np.abs(x - y).max() / scale))
    return worst
