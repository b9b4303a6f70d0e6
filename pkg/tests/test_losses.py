import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coprlab.cascade import RankedList
from coprlab.losses import (
    LossReport,
    chunk_representatives,
    chunk_sample,
    ctr_loss,
    delta_ndcg,
    idcg,
    pair_index,
    pair_losses,
    pair_weights,
    rank_pair_loss,
    reg_penalty,
    softplus,
)


def ndcg_by_priority(order, D):
    """NDCG of a list of chunk priorities, computed from scratch."""
    gains = [(2.0**p - 1.0) for p in order]
    dcg = sum(g / math.log2(pos + 2) for pos, g in enumerate(gains))
    ideal = sum(g / math.log2(pos + 2) for pos, g in enumerate(sorted(gains, reverse=True)))
    return dcg / ideal


# ---- delta NDCG ------------------------------------------------------------------


def test_swap_identity_all_pairs_up_to_eight():
    for D in range(2, 9):
        ideal = list(range(D - 1, -1, -1))
        for i, j in itertools.combinations(range(1, D + 1), 2):
            swapped = ideal.copy()
            swapped[i - 1], swapped[j - 1] = swapped[j - 1], swapped[i - 1]
            assert abs(delta_ndcg(i, j, D) - (1.0 - ndcg_by_priority(swapped, D))) < 1e-12


def test_delta_ndcg_two_chunks_hand_value():
    assert idcg(2) == 1.0
    assert delta_ndcg(1, 2, 2) == pytest.approx(1.0 - 1.0 / math.log2(3), abs=1e-15)
    assert round(delta_ndcg(1, 2, 2), 4) == 0.3691


@pytest.mark.parametrize("D", range(2, 11))
def test_weights_positive_bounded_and_top_heavy(D):
    w = pair_weights(D)
    assert np.all(w > 0) and np.all(w <= 1)
    assert delta_ndcg(1, 2, D) >= delta_ndcg(D - 1, D, D)
    if D > 2:
        assert delta_ndcg(1, 2, D) > delta_ndcg(D - 1, D, D)


def test_weighting_schemes():
    w = pair_weights(5)
    u = pair_weights(5, "uniform")
    assert np.allclose(u, w.mean()) and u.sum() == pytest.approx(w.sum())
    assert np.array_equal(pair_weights(5, "unit"), np.ones(10))
    with pytest.raises(ValueError):
        pair_weights(5, "nope")


def test_delta_ndcg_errors():
    with pytest.raises(ValueError):
        delta_ndcg(1, 1, 3)
    with pytest.raises(ValueError):
        delta_ndcg(2, 1, 3)
    with pytest.raises(ValueError):
        delta_ndcg(1, 2, 1)
    with pytest.raises(ValueError):
        delta_ndcg(1, 4, 3)


def test_pair_index_row_major():
    i, j = pair_index(4)
    assert list(zip(i.tolist(), j.tolist())) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


# ---- pair losses ---------------------------------------------------------------------


def test_equal_scores_give_log2():
    for form in ("difference", "ratio"):
        assert rank_pair_loss(0.1, 20.0, 0.2, 10.0, form) == pytest.approx(math.log(2), abs=1e-15)


def test_difference_saturates():
    assert rank_pair_loss(31.0, 1.0, 1.0, 1.0) < 1e-12
    # huge negative margin stays finite
    assert rank_pair_loss(1.0, 1.0, 1000.0, 1.0) == pytest.approx(999.0)


def test_table1_pair_value():
    # margin 0.11*21 - 0.19*11 = 0.22
    v = rank_pair_loss(0.11, 21.0, 0.19, 11.0)
    assert v == pytest.approx(math.log1p(math.exp(-0.22)), abs=1e-12)
    # 0.58919: quoted elsewhere as 0.588 by truncation
    assert v == pytest.approx(0.588, abs=2e-3)


def test_pair_loss_errors():
    with pytest.raises(ValueError):
        rank_pair_loss(0.1, 0.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        rank_pair_loss(0.0, 1.0, 0.1, 1.0, "ratio")
    with pytest.raises(ValueError):
        pair_losses(np.ones(1), np.ones(1), "other")


@settings(max_examples=200, deadline=None)
@given(
    st.floats(1e-3, 10.0),
    st.floats(1e-3, 10.0),
    st.sampled_from([0.5, 2.0, 4.0, 0.25]),
)
def test_ratio_form_scale_invariant(s_i, s_j, c):
    a = pair_losses(np.array([s_i]), np.array([s_j]), "ratio")[0][0]
    b = pair_losses(np.array([c * s_i]), np.array([c * s_j]), "ratio")[0][0]
    assert abs(a - b) <= 1e-12


def test_difference_form_not_scale_invariant():
    s_i, s_j = np.array([0.11 * 21]), np.array([0.19 * 11])
    a = pair_losses(s_i, s_j, "difference")[0][0]
    b = pair_losses(2 * s_i, 2 * s_j, "difference")[0][0]
    assert a != b


@pytest.mark.parametrize("form", ["difference", "ratio"])
def test_pair_loss_gradients(form):
    rng = np.random.default_rng(0)
    s_i, s_j = rng.uniform(0.1, 3, 20), rng.uniform(0.1, 3, 20)
    _, gi, gj = pair_losses(s_i, s_j, form)
    h = 1e-6
    num_i = (pair_losses(s_i + h, s_j, form)[0] - pair_losses(s_i - h, s_j, form)[0]) / (2 * h)
    num_j = (pair_losses(s_i, s_j + h, form)[0] - pair_losses(s_i, s_j - h, form)[0]) / (2 * h)
    assert np.allclose(gi, num_i, rtol=1e-6, atol=1e-9)
    assert np.allclose(gj, num_j, rtol=1e-6, atol=1e-9)


def test_softplus_stable():
    assert softplus(np.array([-800.0]))[0] == 0.0
    assert softplus(np.array([800.0]))[0] == 800.0


# ---- ctr loss -------------------------------------------------------------------------


def test_ctr_loss_stationary_at_label():
    p = np.array([0.2, 0.7])
    logit = np.log(p / (1 - p))
    loss, d = ctr_loss(logit, p)
    assert np.allclose(d, 0.0, atol=1e-15)
    entropy = -np.mean(p * np.log(p) + (1 - p) * np.log(1 - p))
    assert loss == pytest.approx(entropy, abs=1e-12)


def test_ctr_loss_hard_labels():
    loss, _ = ctr_loss(np.array([0.0, 0.0]), np.array([1.0, 0.0]))
    assert loss == pytest.approx(math.log(2))


# ---- relaxation penalty ----------------------------------------------------------------


def test_reg_penalty_symmetry():
    assert reg_penalty(1.0) == 0.0
    assert reg_penalty(2.0) == 1.0
    assert reg_penalty(0.5) == 1.0
    a = np.array([0.25, 4.0, 1.5, 1 / 1.5])
    out = reg_penalty(a)
    assert out[0] == out[1] and out[2] == pytest.approx(out[3])


# ---- chunk sampling -------------------------------------------------------------------


def ranked(m):
    ids = np.arange(100, 100 + m)
    return RankedList(7, ids, np.linspace(0.2, 0.01, m), np.full(m, 3.0))


def test_chunk_four_by_two():
    s = chunk_sample(ranked(4), 2, np.random.default_rng(0))
    assert s.n_chunks == 2
    assert s.priorities.tolist() == [1, 0]
    assert s.ad_ids[0] in (100, 101) and s.ad_ids[1] in (102, 103)


def test_chunk_hundred_by_ten():
    s = chunk_sample(ranked(100), 10, np.random.default_rng(1))
    assert s.priorities.tolist() == list(range(9, -1, -1))
    for d, a in enumerate(s.ad_ids):
        assert 100 + 10 * d <= a < 100 + 10 * (d + 1)


def test_chunk_size_one_is_identity():
    r = ranked(9)
    s = chunk_sample(r, 1, np.random.default_rng(2))
    assert np.array_equal(s.ad_ids, r.ad_ids)
    assert s.priorities.tolist() == list(range(8, -1, -1))
    assert s.entries[0] == (100, pytest.approx(0.2), 3.0, 8)


def test_short_last_chunk():
    rng = np.random.default_rng(3)
    idx = chunk_representatives(500, 7, 3, rng)
    assert idx.shape == (500, 3)
    assert set(idx[:, 2].tolist()) == {6}
    assert set(idx[:, 0].tolist()) == {0, 1, 2}


def test_chunk_representatives_uniform():
    idx = chunk_representatives(30000, 4, 2, np.random.default_rng(4))
    share = np.mean(idx[:, 0] == 0)
    assert abs(share - 0.5) < 4 * math.sqrt(0.25 / 30000)


def test_chunk_errors():
    with pytest.raises(ValueError):
        chunk_sample(ranked(0), 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        chunk_representatives(1, 5, 0, np.random.default_rng(0))


# ---- report -------------------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_total_decomposition(a, b, c, l1, l2):
    r = LossReport(a, b, c, l1, l2)
    assert r.total == a + l1 * b + l2 * c
