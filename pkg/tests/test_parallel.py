import numpy as np
from hypothesis import given, settings, strategies as st

from truncllt.parallel import Accumulator, chunk_rng, chunk_sizes, exact_sum, ordered_map, reduce_accumulators

values = st.lists(st.floats(-1e12, 1e12, allow_nan=False), min_size=1, max_size=40)


@given(values, st.integers(1, 10))
def test_reduction_ignores_merge_order(xs, split):
    # chunk boundaries are fixed by the run; only the merge order may vary
    groups = np.array_split(np.array(xs), min(split, len(xs)))
    accs = [Accumulator(()).add(g) for g in groups]
    forward = reduce_accumulators(accs).total
    backward = reduce_accumulators(accs[::-1]).total
    assert forward == backward == exact_sum(np.array([g.sum() for g in groups]))


def test_exact_sum_is_correctly_rounded():
    assert exact_sum(np.array([1e16, 1.0, -1e16])) == 1.0
    assert exact_sum(np.zeros((0, 3))).shape == (3,)


@settings(max_examples=25)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=6), st.integers(0, 2**32 - 1))
def test_accumulator_merge_is_associative(sizes, seed):
    rng = np.random.default_rng(seed)
    accs = [Accumulator((2,)).add(rng.normal(size=(s, 2)) * 10.0 ** rng.integers(-5, 5)) for s in sizes]
    left = reduce_accumulators(accs)
    right = accs[-1]
    for acc in reversed(accs[:-1]):
        right = acc.merge(right)
    np.testing.assert_array_equal(left.total, right.total)
    np.testing.assert_array_equal(left.standard_error(), right.standard_error())
    assert left.count == right.count == sum(sizes)


def test_accumulator_statistics():
    acc = Accumulator(()).add(np.array([1.0, 2.0, 3.0, 4.0]))
    assert acc.mean() == 2.5
    assert acc.standard_error() == np.sqrt(np.var([1, 2, 3, 4], ddof=1) / 4)
    assert acc.maxima == 4.0
    assert np.isnan(Accumulator(()).mean())


def test_chunk_sizes():
    assert chunk_sizes(10, 4) == [4, 4, 2]
    assert chunk_sizes(8, 4) == [4, 4]
    assert chunk_sizes(0, 4) == []


def test_chunk_streams_are_reproducible_and_distinct():
    a = chunk_rng(5, 0, 1).random(4)
    np.testing.assert_array_equal(a, chunk_rng(5, 0, 1).random(4))
    assert not np.array_equal(a, chunk_rng(5, 0, 2).random(4))
    assert not np.array_equal(a, chunk_rng(5, 1, 1).random(4))


def test_ordered_map_keeps_order_with_threads():
    def work(i):
        return float(chunk_rng(0, 0, i).random())

    assert ordered_map(work, range(20), workers=4) == ordered_map(work, range(20), workers=1)
