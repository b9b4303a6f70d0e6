"""Consistency between pre-ranking and ranking ECPM lists.

Every function takes ad-id lists ordered best-first. Each argument is either
one list ``(L,)`` or a stack of lists ``(n, L)``, and the result is a
per-list value (scalar or ``(n,)``). The caller averages.

Relevance conventions:

* HR@K and MAP@K treat the ranking stage's top ``n_relevant`` (10) as the
  relevant set, with denominator ``min(K, n_relevant)``.
* NDCG@K grades the ad at ranking position p (1-based) with relevance
  ``L - p``, gain ``2**rel - 1`` and discount ``1 / log2(position + 1)``.

Sums are accumulated column by column in position order, which keeps the
results reproducible to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_KS = (5, 10, 20, 50, 100)
N_RELEVANT = 10


def _as_2d(pre, rank):
    pre, rank = np.asarray(pre), np.asarray(rank)
    single = pre.ndim == 1
    if single:
        pre, rank = pre[None, :], rank[None, :]
    if pre.shape != rank.shape:
        raise ValueError(f"list shapes differ: {pre.shape} vs {rank.shape}")
    return pre, rank, single


def ranking_positions(pre, rank) -> np.ndarray:
    """0-based ranking-list position of every pre-list entry, shape (n, L).

    Raises ``ValueError`` unless each pair of rows holds the same candidates.
    """
    pre, rank, _ = _as_2d(pre, rank)
    n, L = pre.shape
    rank_order = np.argsort(rank, axis=1, kind="stable")
    rank_sorted = np.take_along_axis(rank, rank_order, axis=1)
    if not np.array_equal(rank_sorted, np.sort(pre, axis=1)):
        raise ValueError("pre-ranking and ranking lists cover different candidate sets")
    if L > 1 and np.any(rank_sorted[:, 1:] == rank_sorted[:, :-1]):
        raise ValueError("lists contain duplicate ads")
    base = int(rank_sorted.min()) if rank_sorted.size else 0
    span = int(rank_sorted.max()) - base + 1 if rank_sorted.size else 1
    offset = (np.arange(n, dtype=np.int64) * span)[:, None]
    keys = (rank_sorted - base + offset).ravel()
    found = np.searchsorted(keys, (pre - base + offset).ravel())
    return rank_order.ravel()[found].reshape(n, L) if n else np.empty((0, L), dtype=np.int64)


def _out(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def hr_at_k(pre, rank, k: int, n_relevant: int = N_RELEVANT):
    pre, rank, single = _as_2d(pre, rank)
    return _out(_hr(ranking_positions(pre, rank), k, n_relevant), single)


def ndcg_at_k(pre, rank, k: int):
    pre, rank, single = _as_2d(pre, rank)
    return _out(_ndcg(ranking_positions(pre, rank), k), single)


def map_at_k(pre, rank, k: int, n_relevant: int = N_RELEVANT):
    pre, rank, single = _as_2d(pre, rank)
    return _out(_map(ranking_positions(pre, rank), k, n_relevant), single)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def _hr(pos: np.ndarray, k: int, n_relevant: int) -> np.ndarray:
    _check_k(k)
    n, L = pos.shape
    n_rel = min(n_relevant, L)
    kk = min(k, L)
    hits = np.sum(pos[:, :kk] < n_rel, axis=1)
    return hits / min(k, n_rel)


def _ndcg(pos: np.ndarray, k: int) -> np.ndarray:
    _check_k(k)
    n, L = pos.shape
    kk = min(k, L)
    rel = (L - 1 - pos[:, :kk]).astype(np.float64)
    gains = np.exp2(rel) - 1.0
    dcg = np.zeros(n)
    idcg = 0.0
    for q in range(kk):
        disc = np.log2(q + 2.0)
        dcg += gains[:, q] / disc
        idcg += (2.0 ** (L - 1 - q) - 1.0) / disc
    if idcg == 0.0:
        # single-item lists: the only order is the ideal one
        return np.ones(n)
    return dcg / idcg


def _map(pos: np.ndarray, k: int, n_relevant: int) -> np.ndarray:
    _check_k(k)
    n, L = pos.shape
    n_rel = min(n_relevant, L)
    kk = min(k, L)
    relevant = pos[:, :kk] < n_rel
    hits = np.zeros(n)
    ap = np.zeros(n)
    for q in range(kk):
        r = relevant[:, q]
        hits += r
        ap += np.where(r, hits / (q + 1.0), 0.0)
    return ap / min(k, n_rel)


@dataclass
class ConsistencyReport:
    hr: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    map: dict[int, float] = field(default_factory=dict)
    n_lists: int = 0

    def rows(self):
        for name in ("hr", "ndcg", "map"):
            for k, v in getattr(self, name).items():
                yield name, k, v


def consistency_report(pre_lists, rank_lists, ks=DEFAULT_KS, n_relevant: int = N_RELEVANT) -> ConsistencyReport:
    pre, rank, _ = _as_2d(pre_lists, rank_lists)
    pos = ranking_positions(pre, rank)
    rep = ConsistencyReport(n_lists=len(pre))
    for k in ks:
        rep.hr[k] = float(np.mean(_hr(pos, k, n_relevant)))
        rep.ndcg[k] = float(np.mean(_ndcg(pos, k)))
        rep.map[k] = float(np.mean(_map(pos, k, n_relevant)))
    return rep


@dataclass
class RpcCurve:
    """Mean pre-ranking position (1-based) for each ranking position 1..L."""

    ranking_positions: np.ndarray
    mean_preranking_positions: np.ndarray
    variant: str = "ecpm"

    @property
    def points(self) -> list[tuple[int, float]]:
        return [(int(r), float(p)) for r, p in zip(self.ranking_positions, self.mean_preranking_positions)]

    def mean_abs_deviation(self) -> float:
        """Mean |pre position - ranking position| of the curve against the identity."""
        return float(np.mean(np.abs(self.mean_preranking_positions - self.ranking_positions)))


def rpc_curve(pre_lists, rank_lists, variant: str = "ecpm") -> RpcCurve:
    """Ranking-PreRanking curve of paired lists ordered by the same criterion.

    ``variant`` only labels the curve; pass pCTR-ordered lists for the
    ``pctr`` variant and ECPM-ordered lists for ``ecpm``.
    """
    pre, rank, _ = _as_2d(pre_lists, rank_lists)
    pos = ranking_positions(pre, rank)
    n, L = pos.shape
    if n == 0:
        raise ValueError("no lists")
    # invert: pre position (1-based) of the ad at each ranking position
    pre_pos = np.empty_like(pos)
    np.put_along_axis(pre_pos, pos, np.arange(1, L + 1)[None, :].repeat(n, 0), axis=1)
    return RpcCurve(np.arange(1, L + 1), pre_pos.mean(axis=0), variant)


def position_errors(pre_lists, rank_lists) -> np.ndarray:
    """|pre position - ranking position| for every (list, ranking position)."""
    pre, rank, _ = _as_2d(pre_lists, rank_lists)
    pos = ranking_positions(pre, rank)
    n, L = pos.shape
    pre_pos = np.empty_like(pos)
    np.put_along_axis(pre_pos, pos, np.arange(1, L + 1)[None, :].repeat(n, 0), axis=1)
    return np.abs(pre_pos - np.arange(1, L + 1)[None, :])
