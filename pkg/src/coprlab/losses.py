"""Loss terms and their analytic gradients.

Scalar helpers (``rank_pair_loss``, ``delta_ndcg``, ``reg_penalty``) mirror
the vectorised versions used in training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import sigmoid

FORMS = ("difference", "ratio")


def softplus(z):
    return np.logaddexp(0.0, z)


# ---- click loss ----------------------------------------------------------


def ctr_loss(logit: np.ndarray, y: np.ndarray):
    """Mean binary cross entropy from logits; returns ``(loss, dL/dlogit)``.

    ``y`` may be soft (teacher probabilities); the minimum is then the
    mean entropy of ``y``.
    """
    n = len(logit)
    if n == 0:
        return 0.0, np.zeros(0)
    loss = float(np.mean(softplus(logit) - y * logit))
    return loss, (sigmoid(logit) - y) / n


# ---- pairwise rank loss ----------------------------------------------------


def pair_losses(s_i: np.ndarray, s_j: np.ndarray, form: str = "difference"):
    """Logistic loss for pairs where ``i`` should outrank ``j``.

    ``s`` are bid-weighted scores ``adjusted_pctr * bid``. Returns
    ``(loss, dL/ds_i, dL/ds_j)`` elementwise.
    """
    if form == "difference":
        m = s_i - s_j
        g = -sigmoid(-m)
        return softplus(-m), g, -g
    if form == "ratio":
        if np.any(s_i <= 0) or np.any(s_j <= 0):
            raise ValueError("ratio form needs strictly positive bid-weighted scores")
        r = s_i / s_j
        g = -sigmoid(-(r - 1.0))
        return softplus(-(r - 1.0)), g / s_j, -g * r / s_j
    raise ValueError(f"unknown pair-loss form {form!r}")


def rank_pair_loss(y_i: float, bid_i: float, y_j: float, bid_j: float, form: str = "difference") -> float:
    if bid_i <= 0 or bid_j <= 0:
        raise ValueError("bids must be positive")
    if form == "ratio" and (y_i <= 0 or y_j <= 0):
        raise ValueError("ratio form needs positive scores")
    loss, _, _ = pair_losses(np.array([y_i * bid_i]), np.array([y_j * bid_j]), form)
    return float(loss[0])


# ---- pair weights ----------------------------------------------------------


def idcg(D: int) -> float:
    """Ideal DCG of priorities D-1, ..., 0 (gain 2**p - 1, log2 discount)."""
    return sum((2.0 ** (D - i) - 1.0) / math.log2(i + 1) for i in range(1, D + 1))


def delta_ndcg(i: int, j: int, D: int) -> float:
    """NDCG drop from swapping chunk ranks ``i < j`` (1-based) of an ideal list."""
    if D < 2:
        raise ValueError("need at least two chunks")
    if not 1 <= i < j <= D:
        raise ValueError(f"need 1 <= i < j <= D, got i={i}, j={j}, D={D}")
    gain = 2.0 ** (D - i) - 2.0 ** (D - j)
    disc = 1.0 / math.log2(i + 1) - 1.0 / math.log2(j + 1)
    return gain / idcg(D) * disc


def pair_index(D: int) -> tuple[np.ndarray, np.ndarray]:
    """0-based (i, j) for all D(D-1)/2 pairs with i < j, row-major."""
    i, j = np.triu_indices(D, k=1)
    return i, j


def pair_weights(D: int, weighting: str = "delta_ndcg") -> np.ndarray:
    """Weights aligned with :func:`pair_index`.

    ``uniform`` spreads the same total mass as ``delta_ndcg`` evenly, so the
    two schemes differ only in where the emphasis falls.
    """
    i, j = pair_index(D)
    w = np.array([delta_ndcg(a + 1, b + 1, D) for a, b in zip(i, j)])
    if weighting == "delta_ndcg":
        return w
    if weighting == "uniform":
        return np.full_like(w, w.mean())
    if weighting == "unit":
        return np.ones_like(w)
    raise ValueError(f"unknown pair weighting {weighting!r}")


# ---- relaxation regulariser --------------------------------------------------


def reg_penalty(alpha):
    """``alpha - 1`` above one, ``1/alpha - 1`` at or below; symmetric in log-space."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.where(alpha > 1.0, alpha - 1.0, 1.0 / alpha - 1.0)
    return float(out) if out.ndim == 0 else out


def reg_penalty_grad(alpha: np.ndarray) -> np.ndarray:
    return np.where(alpha > 1.0, 1.0, -1.0 / alpha**2)


# ---- chunk sampling ----------------------------------------------------------


@dataclass(frozen=True)
class ChunkSample:
    request_id: int
    ad_ids: np.ndarray
    pctr_teacher: np.ndarray
    bids: np.ndarray
    priorities: np.ndarray
    chunk_size: int

    @property
    def n_chunks(self) -> int:
        return len(self.ad_ids)

    @property
    def entries(self) -> list[tuple[int, float, float, int]]:
        return [(int(a), float(p), float(b), int(d)) for a, p, b, d in zip(self.ad_ids, self.pctr_teacher, self.bids, self.priorities)]


def n_chunks(m: int, k: int) -> int:
    return -(-m // k)


def chunk_representatives(n_lists: int, m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform pick of one position per chunk for every list: ``(n_lists, D)``.

    The last chunk holds ``m mod k`` positions when ``k`` does not divide ``m``.
    """
    if k < 1:
        raise ValueError("chunk size must be >= 1")
    if m < 1:
        raise ValueError("cannot chunk an empty list")
    D = n_chunks(m, k)
    starts = np.arange(D) * k
    sizes = np.minimum(k, m - starts)
    u = rng.random((n_lists, D))
    return starts[None, :] + np.minimum((u * sizes[None, :]).astype(np.int64), sizes[None, :] - 1)


def chunk_sample(ranked, k: int, rng: np.random.Generator) -> ChunkSample:
    """Compress one ECPM-ranked list to a representative per chunk, best chunk first."""
    m = len(ranked)
    if m == 0:
        raise ValueError("cannot chunk an empty list")
    idx = chunk_representatives(1, m, k, rng)[0]
    D = len(idx)
    return ChunkSample(
        request_id=ranked.request_id,
        ad_ids=np.asarray(ranked.ad_ids)[idx],
        pctr_teacher=np.asarray(ranked.pctr)[idx],
        bids=np.asarray(ranked.bids)[idx],
        priorities=np.arange(D - 1, -1, -1),
        chunk_size=k,
    )


# ---- reporting -----------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    """One objective evaluation: ``total = l_ctr + lambda1 * l_rank + lambda2 * l_reg``.

    For the score-alignment baselines ``l_rank`` carries their alignment term.
    """

    l_ctr: float
    l_rank: float
    l_reg: float
    lambda1: float
    lambda2: float

    @property
    def total(self) -> float:
        return self.l_ctr + self.lambda1 * self.l_rank + self.lambda2 * self.l_reg

    @staticmethod
    def mean(reports: list["LossReport"]) -> "LossReport":
        if not reports:
            raise ValueError("no reports to average")
        return LossReport(
            float(np.mean([r.l_ctr for r in reports])),
            float(np.mean([r.l_rank for r in reports])),
            float(np.mean([r.l_reg for r in reports])),
            reports[0].lambda1,
            reports[0].lambda2,
        )
