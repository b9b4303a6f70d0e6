"""Three-phase cascade replay: retrieval sample -> pre-rank -> rank -> display.

Lists are stored column-wise (one row per request) because evaluation runs
tens of thousands of requests; :class:`RankedList` and :class:`ScoredAd`
give the per-request view.

Ranking is by ECPM = 1000 * bid * score, descending, ties broken by
ascending ad id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .world import Catalog, Request, RequestBatch, true_ctr

RANKING_LOG_FIELDS = ("request_id", "user_id", "context", "position", "ad_id", "pctr", "bid_pre", "bid_rank", "ecpm", "selected")
IMPRESSION_LOG_FIELDS = ("request_id", "user_id", "context", "position", "ad_id", "y")


def ecpm(bid, pctr):
    return 1000.0 * np.asarray(bid) * np.asarray(pctr)


def ecpm_order(ecpms: np.ndarray, ad_ids: np.ndarray) -> np.ndarray:
    """Indices sorting the last axis by ECPM descending, then ad id ascending."""
    return np.lexsort((ad_ids, -ecpms), axis=-1)


@dataclass(frozen=True)
class ScoredAd:
    ad_id: int
    pctr: float
    bid: float
    ecpm: float


@dataclass(frozen=True)
class RankedList:
    request_id: int
    ad_ids: np.ndarray
    pctr: np.ndarray
    bids: np.ndarray

    @property
    def ecpm(self) -> np.ndarray:
        return ecpm(self.bids, self.pctr)

    @property
    def entries(self) -> list[ScoredAd]:
        e = self.ecpm
        return [ScoredAd(int(a), float(p), float(b), float(x)) for a, p, b, x in zip(self.ad_ids, self.pctr, self.bids, e)]

    def __len__(self) -> int:
        return len(self.ad_ids)


@dataclass(frozen=True)
class ImpressionLog:
    request_id: int
    ad_ids: np.ndarray
    y: np.ndarray

    @property
    def entries(self) -> list[tuple[int, int]]:
        return [(int(a), int(c)) for a, c in zip(self.ad_ids, self.y)]


def rank_scored(ad_ids, scores, bids, request_id: int = 0) -> RankedList:
    ad_ids, scores, bids = (np.asarray(v) for v in (ad_ids, scores, bids))
    if ad_ids.size == 0:
        raise ValueError("cannot rank an empty candidate list")
    order = ecpm_order(ecpm(bids, scores), ad_ids)
    return RankedList(request_id, ad_ids[order], scores[order], bids[order])


def score_and_rank(model, request: Request, catalog: Catalog, request_id: int = 0) -> RankedList:
    """Score every candidate with ``model.ranking_score`` and sort by ECPM."""
    cands = np.asarray(request.candidates)
    if cands.size == 0:
        raise ValueError("request has no candidates")
    feats = catalog.features(request.user_id, cands, request.context)
    scores = np.asarray(model.ranking_score(feats), dtype=np.float64)
    return rank_scored(cands, scores, catalog.bids[cands], request_id)


def _check_funnel(m: int, n_pre: int, n_disp: int) -> None:
    if not 1 <= n_disp <= n_pre <= m:
        raise ValueError(f"need 1 <= n_disp ({n_disp}) <= n_pre ({n_pre}) <= candidates ({m})")


def run_cascade(
    request: Request,
    prerank,
    rank,
    n_pre: int,
    n_disp: int,
    rng: np.random.Generator,
    catalog: Catalog,
    request_id: int = 0,
) -> tuple[RankedList, RankedList, ImpressionLog]:
    """One request through the funnel; clicks are Bernoulli(true_ctr) per displayed ad."""
    _check_funnel(len(request.candidates), n_pre, n_disp)
    pre = score_and_rank(prerank, request, catalog, request_id)
    survivors = Request(request.user_id, request.context, pre.ad_ids[:n_pre])
    ranked = score_and_rank(rank, survivors, catalog, request_id)
    shown = ranked.ad_ids[:n_disp]
    u = rng.random(n_disp)
    y = (u < true_ctr(catalog, request.user_id, shown, request.context)).astype(np.int64)
    return pre, ranked, ImpressionLog(request_id, shown, y)


# ---- batched logs ----------------------------------------------------------


@dataclass
class RankingLogs:
    """Ranking-stage ECPM lists, one row per request, best first."""

    request_ids: np.ndarray  # (n,)
    users: np.ndarray  # (n,)
    contexts: np.ndarray  # (n,)
    ad_ids: np.ndarray  # (n, L)
    pctr: np.ndarray  # (n, L) ranking-model pCTR
    bid_pre: np.ndarray  # (n, L)
    bid_rank: np.ndarray  # (n, L)
    n_selected: int = 1

    def __len__(self) -> int:
        return len(self.request_ids)

    @property
    def list_length(self) -> int:
        return self.ad_ids.shape[1]

    @property
    def ecpm(self) -> np.ndarray:
        return ecpm(self.bid_rank, self.pctr)

    def __getitem__(self, i: int) -> RankedList:
        return RankedList(int(self.request_ids[i]), self.ad_ids[i], self.pctr[i], self.bid_rank[i])

    def to_list(self) -> list[RankedList]:
        return [self[i] for i in range(len(self))]

    def save(self, path: str | Path) -> None:
        n, L = self.ad_ids.shape
        rows = np.empty((n * L, len(RANKING_LOG_FIELDS)), dtype=object)
        pos = np.tile(np.arange(1, L + 1), n)
        rows[:, 0] = np.repeat(self.request_ids, L)
        rows[:, 1] = np.repeat(self.users, L)
        rows[:, 2] = np.repeat(self.contexts, L)
        rows[:, 3] = pos
        rows[:, 4] = self.ad_ids.ravel()
        rows[:, 5] = self.pctr.ravel()
        rows[:, 6] = self.bid_pre.ravel()
        rows[:, 7] = self.bid_rank.ravel()
        rows[:, 8] = self.ecpm.ravel()
        rows[:, 9] = (pos <= self.n_selected).astype(int)
        _write_rows(path, RANKING_LOG_FIELDS, rows, float_cols=(5, 6, 7, 8))

    @classmethod
    def load(cls, path: str | Path) -> "RankingLogs":
        data = _read_rows(path, RANKING_LOG_FIELDS)
        pos = data[:, 3].astype(np.int64)
        L = int(pos.max())
        n = len(pos) // L
        if n * L != len(pos) or not np.array_equal(pos, np.tile(np.arange(1, L + 1), n)):
            raise ValueError(f"{path}: ranking lists must all have the same length")
        r = lambda c: data[:, c].reshape(n, L)  # noqa: E731
        sel = r(9)[0].astype(bool)
        return cls(
            request_ids=r(0)[:, 0].astype(np.int64),
            users=r(1)[:, 0].astype(np.int64),
            contexts=r(2)[:, 0].astype(np.int64),
            ad_ids=r(4).astype(np.int64),
            pctr=r(5).copy(),
            bid_pre=r(6).copy(),
            bid_rank=r(7).copy(),
            n_selected=int(sel.sum()),
        )


@dataclass
class ImpressionLogs:
    """Displayed ads with click labels, flat, in (request, display position) order."""

    request_ids: np.ndarray
    users: np.ndarray
    contexts: np.ndarray
    positions: np.ndarray
    ad_ids: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.ad_ids)

    def subset(self, mask_or_index) -> "ImpressionLogs":
        return ImpressionLogs(*(getattr(self, f)[mask_or_index] for f in ("request_ids", "users", "contexts", "positions", "ad_ids", "y")))

    def features(self, catalog: Catalog) -> np.ndarray:
        return catalog.features(self.users, self.ad_ids, self.contexts)

    def to_list(self) -> list[ImpressionLog]:
        out = []
        bounds = np.flatnonzero(np.diff(self.request_ids)) + 1
        for idx in np.split(np.arange(len(self)), bounds):
            if idx.size:
                out.append(ImpressionLog(int(self.request_ids[idx[0]]), self.ad_ids[idx], self.y[idx]))
        return out

    def save(self, path: str | Path) -> None:
        rows = np.stack([self.request_ids, self.users, self.contexts, self.positions, self.ad_ids, self.y], axis=1).astype(object)
        _write_rows(path, IMPRESSION_LOG_FIELDS, rows, float_cols=())

    @classmethod
    def load(cls, path: str | Path) -> "ImpressionLogs":
        data = _read_rows(path, IMPRESSION_LOG_FIELDS).astype(np.int64)
        return cls(*(data[:, k] for k in range(len(IMPRESSION_LOG_FIELDS))))

    @classmethod
    def concat(cls, parts: Sequence["ImpressionLogs"]) -> "ImpressionLogs":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("request_ids", "users", "contexts", "positions", "ad_ids", "y")))


def _write_rows(path, header, rows, float_cols) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = []
    for c in range(rows.shape[1]):
        col = rows[:, c]
        if c in float_cols:
            cols.append(["%.17g" % v for v in col])
        else:
            cols.append(["%d" % v for v in col])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        fh.writelines(",".join(r) + "\n" for r in zip(*cols))


def _read_rows(path, header) -> np.ndarray:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip().split(",")
    if tuple(first) != tuple(header):
        raise ValueError(f"{path}: unexpected header {first}")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)


def sample_clicks(catalog: Catalog, users, ads, contexts, uniforms) -> np.ndarray:
    return (np.asarray(uniforms) < true_ctr(catalog, users, ads, contexts)).astype(np.int64)


def display_uniform(
    requests: RequestBatch, n_disp: int, catalog: Catalog, rng: np.random.Generator, first_request_id: int = 0
) -> ImpressionLogs:
    """Exploration traffic: show ``n_disp`` candidates per request in retrieval order."""
    n = len(requests)
    shown = requests.candidates[:, :n_disp]
    u = rng.random((n, n_disp))
    rid = np.arange(first_request_id, first_request_id + n)
    users = np.repeat(requests.users, n_disp)
    ctx = np.repeat(requests.contexts, n_disp)
    y = sample_clicks(catalog, users, shown.ravel(), ctx, u.ravel())
    return ImpressionLogs(np.repeat(rid, n_disp), users, ctx, np.tile(np.arange(1, n_disp + 1), n), shown.ravel(), y)


@dataclass
class CascadeResult:
    pre_ad_ids: np.ndarray  # (n, M) pre-ranking ECPM order
    pre_scores: np.ndarray  # (n, M) pre-ranking score, aligned with pre_ad_ids
    rank_ad_ids: np.ndarray  # (n, n_pre) ranking-phase ECPM order over survivors
    rank_pctr: np.ndarray  # (n, n_pre)
    impressions: ImpressionLogs


def simulate_cascade(
    requests: RequestBatch,
    prerank_scores: np.ndarray,
    rank_scores: np.ndarray,
    n_pre: int,
    n_disp: int,
    catalog: Catalog,
    click_uniforms: np.ndarray,
    first_request_id: int = 0,
) -> CascadeResult:
    """Vectorised :func:`run_cascade` over a batch with precomputed scores.

    ``prerank_scores`` and ``rank_scores`` are (n, M), aligned with
    ``requests.candidates``. ``click_uniforms`` is (n, n_disp); sharing it
    across models gives common random numbers for click simulation.
    """
    n, m = requests.candidates.shape
    _check_funnel(m, n_pre, n_disp)
    cands = requests.candidates
    bids = catalog.bids[cands]
    rows = np.arange(n)[:, None]

    pre_order = ecpm_order(ecpm(bids, prerank_scores), cands)
    pre_ids = cands[rows, pre_order]
    top = pre_order[:, :n_pre]
    surv_ids = cands[rows, top]
    surv_rank = rank_scores[rows, top]
    rank_order = ecpm_order(ecpm(bids[rows, top], surv_rank), surv_ids)
    rank_ids = surv_ids[rows, rank_order]
    rank_pctr = surv_rank[rows, rank_order]

    shown = rank_ids[:, :n_disp]
    users = np.repeat(requests.users, n_disp)
    ctx = np.repeat(requests.contexts, n_disp)
    y = sample_clicks(catalog, users, shown.ravel(), ctx, np.asarray(click_uniforms).ravel())
    rid = np.arange(first_request_id, first_request_id + n)
    imps = ImpressionLogs(np.repeat(rid, n_disp), users, ctx, np.tile(np.arange(1, n_disp + 1), n), shown.ravel(), y)
    return CascadeResult(pre_ids, prerank_scores[rows, pre_order], rank_ids, rank_pctr, imps)


def collect_ranking_logs(
    requests: RequestBatch,
    prerank,
    rank,
    k_top: int,
    catalog: Catalog,
    mode: str = "public",
    rng: np.random.Generator | None = None,
    n_disp: int = 1,
    first_request_id: int = 0,
) -> RankingLogs:
    """Record the ranking model's ECPM list for every request.

    ``public`` mode ranks ``k_top`` candidates sampled from each request;
    ``production`` mode ranks the pre-ranking model's top ``k_top``.
    """
    n, m = requests.candidates.shape
    if not 1 <= k_top <= m:
        raise ValueError(f"k_top={k_top} must lie in [1, {m}]")
    rows = np.arange(n)[:, None]
    if mode == "public":
        if rng is None:
            raise ValueError("public mode needs an rng for candidate sampling")
        pick = np.stack([rng.choice(m, size=k_top, replace=False) for _ in range(n)]) if k_top < m else np.tile(np.arange(m), (n, 1))
        chosen = requests.candidates[rows, pick]
    elif mode == "production":
        if prerank is None:
            raise ValueError("production mode needs a pre-ranking model")
        feats = catalog.features(requests.users[:, None], requests.candidates, requests.contexts[:, None])
        pre = prerank.ranking_score(feats)
        order = ecpm_order(ecpm(catalog.bids[requests.candidates], pre), requests.candidates)
        chosen = requests.candidates[rows, order[:, :k_top]]
    else:
        raise ValueError(f"unknown ranking-log mode {mode!r}")
    feats = catalog.features(requests.users[:, None], chosen, requests.contexts[:, None])
    pctr = rank.ranking_score(feats)
    bids = catalog.bids[chosen]
    order = ecpm_order(ecpm(bids, pctr), chosen)
    ad_ids = chosen[rows, order]
    return RankingLogs(
        request_ids=np.arange(first_request_id, first_request_id + n),
        users=requests.users.copy(),
        contexts=requests.contexts.copy(),
        ad_ids=ad_ids,
        pctr=pctr[rows, order],
        bid_pre=bids[rows, order],
        bid_rank=bids[rows, order].copy(),
        n_selected=min(n_disp, k_top),
    )


def ctr_rpm(impressions: ImpressionLogs | Iterable[ImpressionLog], catalog: Catalog) -> tuple[float, float]:
    """CTR = clicks / displays; RPM = CTR * mean bid over clicked ads (0 without clicks)."""
    if isinstance(impressions, ImpressionLogs):
        ads, y = impressions.ad_ids, impressions.y
    else:
        logs = list(impressions)
        ads = np.concatenate([np.asarray(l.ad_ids, dtype=np.int64) for l in logs]) if logs else np.empty(0, np.int64)
        y = np.concatenate([np.asarray(l.y, dtype=np.int64) for l in logs]) if logs else np.empty(0, np.int64)
    if len(ads) == 0:
        raise ValueError("no displayed ads")
    clicks = int(np.sum(y))
    ctr = clicks / len(ads)
    if clicks == 0:
        return ctr, 0.0
    return ctr, ctr * float(np.mean(catalog.bids[ads[y == 1]]))
