import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coprlab.metrics import (
    consistency_report,
    hr_at_k,
    map_at_k,
    ndcg_at_k,
    position_errors,
    ranking_positions,
    rpc_curve,
)


# ---- independent reference implementations (plain python, dict lookups) ----


def ref_hr(pre, rank, k, n_rel=10):
    relevant = set(rank[:n_rel])
    return sum(1 for a in pre[:k] if a in relevant) / min(k, min(n_rel, len(rank)))


def ref_ndcg(pre, rank, k):
    L = len(rank)
    rel = {a: L - (p + 1) for p, a in enumerate(rank)}
    dcg = 0.0
    for q, a in enumerate(pre[:k]):
        dcg += (2.0 ** rel[a] - 1.0) / math.log2(q + 2)
    ideal = 0.0
    for q, a in enumerate(rank[:k]):
        ideal += (2.0 ** rel[a] - 1.0) / math.log2(q + 2)
    return 1.0 if ideal == 0.0 else dcg / ideal


def ref_map(pre, rank, k, n_rel=10):
    relevant = set(rank[:n_rel])
    hits, total = 0, 0.0
    for q, a in enumerate(pre[:k]):
        if a in relevant:
            hits += 1
            total += hits / (q + 1)
    return total / min(k, min(n_rel, len(rank)))


def all_cases(max_len=6):
    rng = np.random.default_rng(0)
    for L in range(1, max_len + 1):
        ids = rng.choice(1000, size=L, replace=False)
        rank = list(ids)
        for perm in itertools.permutations(range(L)):
            yield rank, [ids[i] for i in perm]


# ---- exhaustive oracle ----------------------------------------------------------


@pytest.mark.parametrize("n_rel", [1, 2, 3, 10])
def test_exhaustive_oracle_equivalence(n_rel):
    checked = 0
    for rank, pre in all_cases():
        L = len(rank)
        for k in range(1, L + 2):
            assert hr_at_k(pre, rank, k, n_rel) == ref_hr(pre, rank, k, n_rel)
            assert map_at_k(pre, rank, k, n_rel) == ref_map(pre, rank, k, n_rel)
            assert ndcg_at_k(pre, rank, k) == ref_ndcg(pre, rank, k)
            checked += 1
    assert checked > 5000


def test_batched_matches_single():
    rng = np.random.default_rng(1)
    rank = np.stack([rng.permutation(50) + 7 for _ in range(30)])
    pre = np.stack([rng.permutation(r) for r in rank])
    for k in (5, 10, 20):
        got = hr_at_k(pre, rank, k)
        assert np.array_equal(got, [hr_at_k(p, r, k) for p, r in zip(pre, rank)])
        assert np.array_equal(ndcg_at_k(pre, rank, k), [ndcg_at_k(p, r, k) for p, r in zip(pre, rank)])
        assert np.array_equal(map_at_k(pre, rank, k), [map_at_k(p, r, k) for p, r in zip(pre, rank)])


# ---- worked examples --------------------------------------------------------------


def test_identical_lists_are_perfect():
    lst = list(range(100))
    for k in (5, 10, 20, 50, 100):
        assert hr_at_k(lst, lst, k) == 1.0
        assert ndcg_at_k(lst, lst, k) == 1.0
        assert map_at_k(lst, lst, k) == 1.0


def test_disjoint_top10_hr_zero():
    rank = list(range(20))
    pre = list(range(10, 20)) + list(range(10))
    assert hr_at_k(pre, rank, 10) == 0.0
    assert map_at_k(pre, rank, 10) == 0.0


def test_six_of_ten_hits():
    rank = list(range(100))
    pre = [0, 1, 2, 3, 4, 5, 50, 51, 52, 53] + [a for a in range(100) if a not in (0, 1, 2, 3, 4, 5, 50, 51, 52, 53)]
    assert hr_at_k(pre, rank, 10) == pytest.approx(0.6)


def test_reversed_pair_ndcg():
    # L=2 reversed: dcg = 0/1 + 1/log2(3), idcg = 1
    assert ndcg_at_k([1, 0], [0, 1], 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg_at_k([1, 0], [0, 1], 2) == pytest.approx(0.6309, abs=1e-4)


def test_map_single_hit_at_position_two():
    rank = list(range(100))
    # ad 0 is the only ranking-top-10 ad inside the pre-ranking top 10
    pre = [50, 0] + list(range(51, 59)) + [a for a in range(100) if a not in [50, 0] + list(range(51, 59))]
    assert map_at_k(pre, rank, 10) == pytest.approx(0.05, abs=1e-15)


def test_no_relevant_in_topk():
    rank = list(range(30))
    pre = list(range(29, -1, -1))
    assert map_at_k(pre, rank, 10) == 0.0


def test_mismatched_sets_raise():
    with pytest.raises(ValueError):
        hr_at_k([1, 2, 3], [1, 2, 4], 2)
    with pytest.raises(ValueError):
        ndcg_at_k([1, 2], [1, 2, 3], 2)
    with pytest.raises(ValueError):
        ranking_positions([1, 1, 2], [1, 2, 2])
    with pytest.raises(ValueError):
        map_at_k([1, 2], [2, 1], 0)


# ---- properties --------------------------------------------------------------------

perm_pairs = st.integers(2, 30).flatmap(lambda L: st.tuples(st.permutations(list(range(L))), st.permutations(list(range(L)))))


@settings(max_examples=200, deadline=None)
@given(perm_pairs, st.integers(1, 35))
def test_metrics_in_unit_interval(pair, k):
    pre, rank = pair
    for f in (hr_at_k, ndcg_at_k, map_at_k):
        v = f(list(pre), list(rank), k)
        assert 0.0 <= v <= 1.0


@settings(max_examples=200, deadline=None)
@given(perm_pairs, st.data())
def test_adjacent_transposition_never_raises_full_ndcg(pair, data):
    _, rank = pair
    rank = list(rank)
    pre = list(pair[0])
    L = len(pre)
    q = data.draw(st.integers(0, L - 2))
    pos = {a: i for i, a in enumerate(rank)}
    # only swap an in-order pair into disorder
    if pos[pre[q]] > pos[pre[q + 1]]:
        pre[q], pre[q + 1] = pre[q + 1], pre[q]
    swapped = pre.copy()
    swapped[q], swapped[q + 1] = swapped[q + 1], swapped[q]
    assert ndcg_at_k(swapped, rank, L) <= ndcg_at_k(pre, rank, L)


@settings(max_examples=100, deadline=None)
@given(st.integers(11, 40).flatmap(lambda L: st.tuples(st.permutations(list(range(L))), st.permutations(list(range(L))), st.randoms())))
def test_hr_map_ignore_order_below_top10(args):
    pre, rank, rnd = args
    rank = list(rank)
    tail = rank[10:]
    rnd.shuffle(tail)
    rank2 = rank[:10] + tail
    for k in (5, 10, 20):
        assert hr_at_k(list(pre), rank, k) == hr_at_k(list(pre), rank2, k)
        assert map_at_k(list(pre), rank, k) == map_at_k(list(pre), rank2, k)


# ---- consistency report ----------------------------------------------------------------


def test_report_rows_cover_all_ks():
    rng = np.random.default_rng(3)
    rank = np.stack([rng.permutation(100) for _ in range(20)])
    pre = np.stack([rng.permutation(r) for r in rank])
    rep = consistency_report(pre, rank)
    rows = list(rep.rows())
    assert len(rows) == 15
    assert {k for _, k, _ in rows} == {5, 10, 20, 50, 100}
    assert rep.n_lists == 20
    assert rep.hr[10] == pytest.approx(np.mean(hr_at_k(pre, rank, 10)))


# ---- RPC ----------------------------------------------------------------------------------


def test_rpc_identity_and_reverse():
    lst = np.arange(12)
    c = rpc_curve(lst, lst)
    assert c.points == [(r, float(r)) for r in range(1, 13)]
    assert c.mean_abs_deviation() == 0.0
    rev = rpc_curve(lst[::-1], lst)
    assert rev.points == [(r, float(13 - r)) for r in range(1, 13)]


def test_rpc_random_permutations_centre():
    rng = np.random.default_rng(4)
    L, n = 20, 4000
    rank = np.tile(np.arange(L), (n, 1))
    pre = np.stack([rng.permutation(L) for _ in range(n)])
    c = rpc_curve(pre, rank)
    se = math.sqrt((L * L - 1) / 12 / n)
    assert np.all(np.abs(c.mean_preranking_positions - (L + 1) / 2) < 3 * se + 1e-12)
    assert np.all((c.mean_preranking_positions >= 1) & (c.mean_preranking_positions <= L))


def test_position_errors_match_curve_definition():
    pre = np.array([[2, 0, 1], [0, 1, 2]])
    rank = np.array([[0, 1, 2], [0, 1, 2]])
    err = position_errors(pre, rank)
    assert err.tolist() == [[1, 1, 2], [0, 0, 0]]
    c = rpc_curve(pre, rank)
    assert c.mean_preranking_positions.tolist() == [1.5, 2.5, 2.0]
