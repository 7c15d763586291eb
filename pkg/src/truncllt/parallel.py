"""Deterministic chunked Monte Carlo: seeded substreams, ordered map, exact reduction.

Paths are split into fixed-size chunks whose generator depends only on
``(seed, stream, chunk index)``.  Each chunk reports partial sums; totals are
formed with ``math.fsum``, which is correctly rounded and therefore independent
of the order in which partials are merged.  The worker count only changes wall
time.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

log = logging.getLogger(__name__)


def chunk_rng(seed: int, stream: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, chunk))))


def chunk_sizes(paths: int, chunk: int) -> list[int]:
    if paths < 0 or chunk < 1:
        raise ValueError("paths must be >= 0 and chunk >= 1")
    full, rest = divmod(paths, chunk)
    return [chunk] * full + ([rest] if rest else [])


def ordered_map(fn: Callable, items: Iterable, workers: int = 1) -> list:
    """``[fn(x) for x in items]`` on a thread pool; result order follows ``items``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def exact_sum(parts: np.ndarray) -> np.ndarray:
    """Correctly rounded column sums of a (chunks, ...) array."""
    parts = np.asarray(parts, dtype=float)
    if parts.shape[0] == 0:
        return np.zeros(parts.shape[1:])
    flat = parts.reshape(parts.shape[0], -1)
    return np.array([math.fsum(col) for col in flat.T]).reshape(parts.shape[1:])


@dataclass
class Accumulator:
    """Running sums, sums of squares and maxima of per-path values of shape ``vshape``.

    ``merge`` concatenates partials, so merged totals do not depend on grouping.
    """

    vshape: tuple = ()
    count: int = 0
    sums: list = field(default_factory=list)
    squares: list = field(default_factory=list)
    maxima: np.ndarray | None = None
    tallies: dict = field(default_factory=dict)

    def add(self, values: np.ndarray) -> "Accumulator":
        """Add a (B, *vshape) block of per-path values."""
        values = np.asarray(values, dtype=float)
        if values.shape[1:] != tuple(self.vshape):
            raise ValueError(f"expected trailing shape {self.vshape}, got {values.shape[1:]}")
        if values.shape[0] == 0:
            return self
        self.count += values.shape[0]
        self.sums.append(values.sum(axis=0))
        self.squares.append((values * values).sum(axis=0))
        block_max = np.abs(values).max(axis=0)
        self.maxima = block_max if self.maxima is None else np.maximum(self.maxima, block_max)
        return self

    def tally(self, key, amount: int) -> "Accumulator":
        self.tallies[key] = self.tallies.get(key, 0) + int(amount)
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        if tuple(other.vshape) != tuple(self.vshape):
            raise ValueError("cannot merge accumulators of different shapes")
        maxima = self.maxima if other.maxima is None else (
            other.maxima if self.maxima is None else np.maximum(self.maxima, other.maxima))
        tallies = dict(self.tallies)
        for key, value in other.tallies.items():
            tallies[key] = tallies.get(key, 0) + value
        return Accumulator(self.vshape, self.count + other.count, self.sums + other.sums,
                           self.squares + other.squares, maxima, tallies)

    @property
    def total(self) -> np.ndarray:
        return exact_sum(np.array(self.sums).reshape((-1,) + tuple(self.vshape)))

    @property
    def total_squares(self) -> np.ndarray:
        return exact_sum(np.array(self.squares).reshape((-1,) + tuple(self.vshape)))

    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.full(self.vshape, np.nan)
        return self.total / self.count

    def standard_error(self) -> np.ndarray:
        """Sample standard deviation over ``sqrt(count)``."""
        if self.count < 2:
            return np.full(self.vshape, np.nan)
        mean = self.mean()
        var = (self.total_squares - self.count * mean * mean) / (self.count - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.count)


def reduce_accumulators(parts: Iterable[Accumulator]) -> Accumulator:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    out = parts[0]
    for part in parts[1:]:
        out = out.merge(part)
    return out
