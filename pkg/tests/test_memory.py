import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modil.memory import (ExemplarMemory, herding_select, l2_normalize, nme_classify, nme_predict, quota,
                          random_select)


def brute_force_herding(feats, q):
    """Greedy mean matching with exact rational sums; exact ties go to the lowest index."""
    rows = [[Fraction(float(v)) for v in row] for row in feats]
    mu = [sum(col) / len(rows) for col in zip(*rows)]
    chosen = []
    for k in range(1, q + 1):
        costs = {}
        for i in range(len(rows)):
            if i not in chosen:
                mean = [sum(col) / k for col in zip(*(rows[j] for j in chosen + [i]))]
                costs[i] = sum((a - b) ** 2 for a, b in zip(mu, mean))
        chosen.append(min(costs, key=lambda i: (costs[i], i)))
    return chosen


@pytest.mark.parametrize("seed", range(50))
def test_herding_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, f = int(rng.integers(1, 13)), int(rng.integers(1, 5))
    q = int(rng.integers(1, n + 1))
    feats = rng.standard_normal((n, f))
    assert herding_select(feats, q) == brute_force_herding(feats, q)


def test_herding_first_pick_is_closest_to_mean():
    feats = np.array([[0.0, 0.0], [10.0, 0.0], [4.0, 1.0], [-2.0, -1.0]])
    assert herding_select(feats, 1) == [2]


def test_herding_full_selection_is_a_permutation():
    feats = np.random.default_rng(0).standard_normal((9, 3))
    assert sorted(herding_select(feats, 9)) == list(range(9))


def test_herding_tie_goes_to_lowest_index():
    feats = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    assert herding_select(feats, 2) == [0, 1]


def test_herding_prefix_property():
    feats = np.random.default_rng(1).standard_normal((12, 4))
    full = herding_select(feats, 10)
    for q in range(1, 10):
        assert herding_select(feats, q) == full[:q]


@pytest.mark.parametrize("q", [0, 5])
def test_herding_rejects_bad_q(q):
    with pytest.raises(ValueError):
        herding_select(np.zeros((4, 2)), q)


@settings(max_examples=50, deadline=None)
@given(budget=st.integers(0, 2000), n=st.integers(1, 40))
def test_quota_properties(budget, n):
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        q = quota(budget, n)
    assert len(q) == n and sum(q) == budget
    assert max(q) - min(q) <= 1
    assert q == sorted(q, reverse=True)


def test_quota_examples():
    assert quota(400, 16) == [25] * 16
    assert quota(10, 3) == [4, 3, 3]
    with pytest.warns(UserWarning):
        assert quota(2, 4) == [1, 1, 0, 0]
    with pytest.raises(ValueError):
        quota(10, 0)


def test_random_select_seeded():
    assert random_select(10, 4, 3) == random_select(10, 4, 3)
    assert len(set(random_select(10, 10, 0))) == 10
    with pytest.raises(ValueError):
        random_select(3, 4, 0)


def _fake_class(rng, c, n=20, length=8):
    frames = rng.standard_normal((n, 2, length)).astype(np.float32) + c
    return frames, np.arange(n) + 100 * c


def _feature_fn(frames):
    return frames.reshape(len(frames), -1)[:, :4].astype(np.float64)


@pytest.mark.parametrize("policy", ["herding", "random"])
def test_rebalance_respects_budget_and_truncates_prefixes(policy):
    rng = np.random.default_rng(0)
    mem = ExemplarMemory(12, policy, seed=1)
    mem.rebalance({0: _fake_class(rng, 0), 1: _fake_class(rng, 1)}, _feature_fn, 2)
    assert [mem.count(c) for c in mem.classes] == [6, 6]
    before = {c: mem.indices[c].copy() for c in mem.classes}
    mem.rebalance({2: _fake_class(rng, 2), 3: _fake_class(rng, 3)}, _feature_fn, 4)
    assert len(mem) == 12
    assert [mem.count(c) for c in mem.classes] == [3, 3, 3, 3]
    for c in (0, 1):
        np.testing.assert_array_equal(mem.indices[c], before[c][:3])
    x, y = mem.data()
    assert len(x) == 12 and sorted(set(y.tolist())) == [0, 1, 2, 3]


def test_herding_memory_uses_normalized_features():
    rng = np.random.default_rng(5)
    frames, idx = _fake_class(rng, 0)
    feats = _feature_fn(frames)
    mem = ExemplarMemory(5, "herding")
    mem.select(0, frames, idx, 5, feats)
    np.testing.assert_array_equal(mem.indices[0], idx[herding_select(l2_normalize(feats), 5)])


def test_herding_select_requires_features():
    mem = ExemplarMemory(4, "herding")
    with pytest.raises(ValueError):
        mem.select(0, np.zeros((3, 2, 4)), np.arange(3), 2)
    with pytest.raises(ValueError):
        ExemplarMemory(4, "kmeans")


def test_snapshot_restore():
    rng = np.random.default_rng(2)
    samples = rng.standard_normal((300, 2, 8)).astype(np.float32)
    mem = ExemplarMemory(6, "random", seed=3)
    mem.rebalance({0: (samples[:10], np.arange(10)), 1: (samples[100:110], np.arange(100, 110))},
                  _feature_fn, 2)
    back = ExemplarMemory.restore(mem.snapshot(), samples)
    assert back.snapshot() == mem.snapshot()
    for c in mem.classes:
        np.testing.assert_array_equal(back.frames[c], mem.frames[c])


def test_nme_predict_and_ties():
    means = l2_normalize(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    feats = np.array([[2.0, 0.1], [0.1, 3.0], [-1.0, 0.0], [1.0, 1.0]])
    assert nme_predict(feats, means).tolist() == [0, 1, 2, 0]


class _IdentityModel:
    def extract(self, x):
        return np.asarray(x).reshape(len(x), -1)[:, :2]


def test_nme_classify_uses_exemplar_means():
    mem = ExemplarMemory(4, "random")
    mem.frames = {3: np.array([[[1.0, 0.0]], [[1.0, 0.2]]]), 7: np.array([[[0.0, 1.0]], [[0.1, 1.0]]])}
    mem.indices = {3: np.array([0, 1]), 7: np.array([2, 3])}
    model = _IdentityModel()
    assert nme_classify(mem, model, np.array([[[0.9, 0.1]], [[0.0, 2.0]]])).tolist() == [3, 7]
    assert nme_classify(mem, model, np.array([[0.0, 2.0]])) == 7


def test_herding_oracle_exhaustive_small():
    # on tiny problems the greedy result must equal a search over all orderings of the greedy rule
    feats = np.random.default_rng(7).standard_normal((5, 2))
    mu = feats.mean(axis=0)
    best = None
    for perm in itertools.permutations(range(5), 2):
        first_ok = all(np.linalg.norm(mu - feats[perm[0]]) <= np.linalg.norm(mu - feats[j]) for j in range(5))
        if first_ok:
            cost = np.linalg.norm(mu - feats[list(perm)].mean(axis=0))
            if best is None or cost < best[0]:
                best = (cost, list(perm))
    assert herding_select(feats, 2) == best[1]
