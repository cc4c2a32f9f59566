import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saf.ptrans import (
    IndivisiblePartition, partition, padded_dim, random_matrix, reassemble, run_ptrans, sweep, weak_dim,
)


def local_transpose(blocks):
    return [b.T for b in blocks]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 24), st.integers(1, 8), st.integers(0, 2**32))
def test_partitioned_transpose_matches_direct(n, k, seed):
    m = random_matrix(n, seed)
    blocks = partition(m, k, pad=True)
    assert len(blocks) == k
    assert all(b.shape == (padded_dim(n, k), padded_dim(n, k) // k) for b in blocks)
    assert np.array_equal(reassemble(local_transpose(blocks), n), m.T)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32))
def test_transpose_is_an_involution(n, seed):
    m = random_matrix(n, seed)
    once = reassemble(local_transpose(partition(m, 1)))
    twice = reassemble(local_transpose(partition(once, 1)))
    assert np.array_equal(twice, m)


def test_indivisible_partition():
    with pytest.raises(IndivisiblePartition) as exc:
        partition(random_matrix(10), 3)
    assert (exc.value.n, exc.value.k) == (10, 3)
    assert padded_dim(10, 3) == 12
    with pytest.raises(IndivisiblePartition):
        run_ptrans(3, 10)


def test_partition_rejects_bad_shapes():
    with pytest.raises(ValueError):
        partition(np.zeros((2, 3), dtype=np.uint64), 1)
    with pytest.raises(ValueError):
        partition(np.zeros((2, 2), dtype=np.uint64), 0)


def test_weak_dim():
    assert weak_dim(64, 1) == 64
    assert weak_dim(64, 4) == 128
    assert weak_dim(64, 2) % 2 == 0
    assert weak_dim(64, 2) ** 2 / 2 >= 64 ** 2


@pytest.mark.parametrize("k", [1, 2, 4])
def test_distributed_transpose_is_exact(k):
    m = random_matrix(64, seed=k)
    r = run_ptrans(k, 64, matrix=m, keep_output=True)
    assert r.correct
    assert np.array_equal(r.matrix_t, m.T)
    assert r.elements_per_device == 64 * 64 // k
    assert set(r.times) == {"program", "transfer", "run"}


def test_padded_run():
    r = run_ptrans(3, 10, pad=True, keep_output=True)
    assert r.correct and r.matrix_t.shape == (10, 10)


def test_strong_sweep_speedups():
    rs = sweep((1, 2, 4), 96)
    assert rs[0].speedup == 1.0
    sp = [r.speedup for r in rs]
    assert sp == sorted(sp)
    assert all(r.speedup >= 0.9 * r.k for r in rs)
    assert all(r.correct for r in rs)


def test_weak_sweep_flat_run_time():
    rs = sweep((1, 4), 48, scaling="weak")
    t = [r.times["run"] for r in rs]
    assert max(t) / min(t) < 1.1
    assert rs[0].speedup == 1.0
    assert rs[1].n == 96


def test_results_are_deterministic():
    a = run_ptrans(2, 32, seed=9).to_dict()
    b = run_ptrans(2, 32, seed=9).to_dict()
    assert a == b


def test_bad_mode():
    with pytest.raises(ValueError):
        run_ptrans(1, 8, scaling="diagonal")
    with pytest.raises(ValueError):
        run_ptrans(0, 8)
    with pytest.raises(ValueError):
        run_ptrans(1, 8, matrix=np.zeros((4, 4), dtype=np.uint64))
