from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsar.aggregation import ClientUpdate, aggregate, coordinate_median, fedavg, krum, weighted_aggregate
from fedsar.errors import ConfigurationError, ContractViolation


def U(i, p, n=1, w=None):
    return ClientUpdate(i, np.atleast_1d(np.asarray(p, dtype=float)), n, w)


def _brute_krum(stack, f):
    n = len(stack)
    best, best_score = None, np.inf
    for i in range(n):
        d = sorted(float(((stack[i] - stack[j]) ** 2).sum()) for j in range(n) if j != i)
        s = sum(d[:n - f - 2])
        if s < best_score:
            best, best_score = i, s
    return best


def test_fedavg_examples():
    assert fedavg([U(0, 1), U(1, 3)])[0] == 2.0
    assert fedavg([U(0, 0, 1), U(1, 4, 3)])[0] == 3.0
    np.testing.assert_array_equal(fedavg([U(4, [1.5, -2.0])]), [1.5, -2.0])
    with pytest.raises(ContractViolation):
        fedavg([])


def test_krum_examples():
    ups = [U(i, v) for i, v in enumerate([0.0, 0.1, 0.2, 10.0])]
    assert krum(ups, 1)[0] == 0.0
    same = [U(i, [1.0, 2.0]) for i in range(5)]
    np.testing.assert_array_equal(krum(same, 1), [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        krum(ups[:3], 1)


def test_krum_never_picks_far_outlier():
    g = np.random.default_rng(0)
    for _ in range(50):
        cluster = g.normal(0, 0.1, (5, 4))
        outlier = g.normal(0, 0.1, 4) + 100
        ups = [U(i, p) for i, p in enumerate(np.vstack([cluster, outlier]))]
        assert not np.array_equal(krum(ups, 1), outlier)


@pytest.mark.parametrize("seed", range(10))
def test_krum_matches_enumeration(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(4, 8))
    stack = np.round(g.normal(size=(n, 3)), 3)
    ups = [U(i, stack[i]) for i in range(n)]
    np.testing.assert_array_equal(krum(ups, 1), stack[_brute_krum(stack, 1)])


def test_median_examples():
    assert coordinate_median([U(0, 1), U(1, 2), U(2, 100)])[0] == 2.0
    assert coordinate_median([U(0, 1), U(1, 3)])[0] == 2.0
    g = np.random.default_rng(3)
    stack = g.normal(size=(5, 8))
    med = coordinate_median([U(i, stack[i]) for i in range(5)])
    for j in range(8):
        assert med[j] == sorted(stack[:, j])[2]


def test_weighted_examples():
    assert weighted_aggregate([U(0, 5, w=1.0), U(1, 9, w=0.0)])[0] == 5.0
    ups = [U(0, 1, w=0.525), U(1, 2, w=0.475), U(2, 99, w=0.0)]
    assert weighted_aggregate(ups)[0] == pytest.approx(1.475, abs=1e-9)
    g = np.random.default_rng(1)
    stack = g.normal(size=(4, 6))
    a = weighted_aggregate([U(i, stack[i], 7, 0.25) for i in range(4)])
    np.testing.assert_allclose(a, fedavg([U(i, stack[i], 7) for i in range(4)]), atol=1e-15)
    with pytest.raises(ContractViolation):
        weighted_aggregate([U(0, 1, w=0.0), U(1, 2, w=0.0)])
    with pytest.raises(ContractViolation):
        weighted_aggregate([U(0, 1, w=-1.0), U(1, 2, w=2.0)])


def test_input_contracts():
    with pytest.raises(ContractViolation):
        fedavg([U(0, 1), U(0, 2)])
    with pytest.raises(ContractViolation):
        fedavg([U(0, [1, 2]), U(1, 2)])
    with pytest.raises(ConfigurationError):
        aggregate("trimmed", [U(0, 1)])


stacks = st.integers(4, 7).flatmap(lambda n: st.lists(
    st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=n, max_size=n))


@given(stacks, st.integers(0, 10_000))
def test_permutation_invariance(rows, seed):
    stack = np.array(rows)
    ups = [U(i, stack[i], i + 1, 1.0 + i) for i in range(len(stack))]
    perm = list(np.random.default_rng(seed).permutation(len(ups)))
    shuffled = [ups[k] for k in perm]
    for rule in ("fedavg", "krum", "median", "nadafd"):
        assert np.array_equal(aggregate(rule, ups), aggregate(rule, shuffled))


@given(stacks, st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_affine_invariance(rows, shift):
    stack, c = np.array(rows), np.array(shift)
    ups = [U(i, stack[i], i + 2, 0.5 + i) for i in range(len(stack))]
    moved = [U(u.client_id, u.params + c, u.num_samples, u.weight) for u in ups]
    np.testing.assert_allclose(fedavg(moved), fedavg(ups) + c, atol=1e-9)
    np.testing.assert_allclose(weighted_aggregate(moved), weighted_aggregate(ups) + c, atol=1e-9)


@given(stacks)
def test_krum_membership_and_median_bounds(rows):
    stack = np.array(rows)
    ups = [U(i, stack[i]) for i in range(len(stack))]
    k = krum(ups, 1)
    assert any(np.array_equal(k, s) for s in stack)
    m = coordinate_median(ups)
    assert np.all(m >= stack.min(0)) and np.all(m <= stack.max(0))


def test_exhaustive_small_median_ties():
    for vals in itertools.product([0.0, 1.0, 2.0], repeat=4):
        m = coordinate_median([U(i, v) for i, v in enumerate(vals)])[0]
        s = sorted(vals)
        assert m == 0.5 * (s[1] + s[2])
