"""Training objectives for the pre-ranking student and the epoch loop.

Methods
-------
``base``      click cross entropy on impression logs.
``distill``   click loss + soft-label cross entropy against teacher pCTR on
              impression logs.
``rankflow``  click loss + squared error to teacher pCTR over ranking-log
              entries + a push-up term for the teacher-selected ads.
``copr``      click loss + ΔNDCG-weighted pairwise rank loss over chunk
              representatives + relaxation-factor regulariser.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping

import numpy as np

from .losses import (
    FORMS,
    LossReport,
    chunk_representatives,
    ctr_loss,
    pair_index,
    pair_losses,
    pair_weights,
    reg_penalty,
    reg_penalty_grad,
    softplus,
)
from .nn import PRERANK_HIDDEN, RELAX_HIDDEN, PreRankModel, sgd_step, sigmoid
from .world import ConfigError

METHODS = ("base", "distill", "rankflow", "copr")
WEIGHTINGS = ("delta_ndcg", "uniform", "unit")


@dataclass
class TrainBatch:
    """Click records plus chunk-representative lists (best chunk first)."""

    ctr_feats: np.ndarray  # (n, F)
    ctr_y: np.ndarray  # (n,)
    list_feats: np.ndarray  # (b, D, F)
    list_bids: np.ndarray  # (b, D)
    pair_i: np.ndarray  # (P,) 0-based chunk index of the better ad
    pair_j: np.ndarray  # (P,)
    pair_w: np.ndarray  # (P,)

    @classmethod
    def build(cls, ctr_feats, ctr_y, list_feats, list_bids, weighting: str = "delta_ndcg") -> "TrainBatch":
        list_feats = np.asarray(list_feats)
        D = list_feats.shape[1] if list_feats.ndim == 3 else 0
        if D >= 2:
            i, j = pair_index(D)
            w = pair_weights(D, weighting)
        else:
            i = j = np.zeros(0, dtype=np.int64)
            w = np.zeros(0)
        return cls(np.asarray(ctr_feats), np.asarray(ctr_y, dtype=np.float64), list_feats, np.asarray(list_bids, dtype=np.float64), i, j, w)

    @property
    def n_lists(self) -> int:
        return len(self.list_feats) if self.list_feats.ndim == 3 else 0

    def pair_records(self) -> Iterator[tuple[np.ndarray, np.ndarray, float, float, float]]:
        for b in range(self.n_lists):
            for i, j, w in zip(self.pair_i, self.pair_j, self.pair_w):
                yield self.list_feats[b, i], self.list_feats[b, j], self.list_bids[b, i], self.list_bids[b, j], w


def _stack(*parts: np.ndarray) -> np.ndarray:
    parts = [p for p in parts if len(p)]
    return np.concatenate(parts, axis=0)


def copr_loss(model: PreRankModel, batch: TrainBatch, lambda1: float = 1.0, lambda2: float = 0.2, form: str = "difference"):
    """Click loss + weighted pairwise rank loss + relaxation regulariser.

    L_rank is the per-list weighted pair sum averaged over lists; L_reg is the
    mean penalty over every representative in the batch. Returns
    ``(LossReport, grads)``.
    """
    if form not in FORMS:
        raise ValueError(f"unknown pair-loss form {form!r}")
    n_c = len(batch.ctr_feats)
    b = batch.n_lists
    if n_c == 0 and b == 0:
        raise ValueError("empty batch")
    D = batch.list_feats.shape[1] if b else 0
    F = batch.ctr_feats.shape[1] if n_c else batch.list_feats.shape[2]
    rows = _stack(batch.ctr_feats.reshape(-1, F), batch.list_feats.reshape(-1, F) if b else np.zeros((0, F), np.int64))
    fp = model.forward(rows)
    n = len(rows)
    d_logit = np.zeros(n)
    d_alpha = np.zeros(n) if model.has_relaxation else None

    l_ctr, g = ctr_loss(fp.logit[:n_c], batch.ctr_y)
    d_logit[:n_c] = g

    l_rank = l_reg = 0.0
    if b:
        sl = slice(n_c, n)
        p = fp.pctr[sl].reshape(b, D)
        alpha = fp.alpha[sl].reshape(b, D) if model.has_relaxation else np.ones((b, D))
        s = alpha * p * batch.list_bids
        d_s = np.zeros((b, D))
        if len(batch.pair_i):
            loss, g_i, g_j = pair_losses(s[:, batch.pair_i], s[:, batch.pair_j], form)
            w = batch.pair_w[None, :] / b
            l_rank = float(np.sum(loss * w))
            np.add.at(d_s, (slice(None), batch.pair_i), lambda1 * w * g_i)
            np.add.at(d_s, (slice(None), batch.pair_j), lambda1 * w * g_j)
        d_y = d_s * batch.list_bids  # d/d(adjusted pctr)
        d_p = d_y * alpha
        d_logit[sl] = (d_p * p * (1.0 - p)).ravel()
        if model.has_relaxation:
            l_reg = float(np.mean(reg_penalty(alpha)))
            d_a = d_y * p + lambda2 * reg_penalty_grad(alpha) / (b * D)
            d_alpha[sl] = d_a.ravel()
    report = LossReport(l_ctr, l_rank, l_reg, lambda1, lambda2)
    return report, model.backward(fp, d_logit, d_alpha)


def base_loss(model: PreRankModel, feats: np.ndarray, y: np.ndarray):
    if len(feats) == 0:
        raise ValueError("empty batch")
    fp = model.forward(feats)
    l_ctr, g = ctr_loss(fp.logit, np.asarray(y, dtype=np.float64))
    return LossReport(l_ctr, 0.0, 0.0, 0.0, 0.0), model.backward(fp, g)


def distill_loss(model: PreRankModel, feats: np.ndarray, y: np.ndarray, teacher_pctr: np.ndarray | None, weight: float = 1.0):
    """Click loss plus soft-label cross entropy toward the teacher, on the same records."""
    if teacher_pctr is None:
        raise ValueError("distillation needs a teacher score per impression")
    teacher_pctr = np.asarray(teacher_pctr, dtype=np.float64)
    if teacher_pctr.shape != (len(feats),) or np.any(np.isnan(teacher_pctr)):
        raise ValueError("missing teacher scores")
    if len(feats) == 0:
        raise ValueError("empty batch")
    fp = model.forward(feats)
    l_ctr, g1 = ctr_loss(fp.logit, np.asarray(y, dtype=np.float64))
    l_kd, g2 = ctr_loss(fp.logit, teacher_pctr)
    return LossReport(l_ctr, l_kd, 0.0, weight, 0.0), model.backward(fp, g1 + weight * g2)


def rankflow_loss(
    model: PreRankModel,
    ctr_feats: np.ndarray,
    ctr_y: np.ndarray,
    log_feats: np.ndarray,
    log_teacher: np.ndarray | None,
    log_selected: np.ndarray,
    score_weight: float = 1.0,
    select_weight: float = 1.0,
):
    """Click loss + score matching on ranking-log entries + selection push-up.

    Score matching is the mean of ``(pctr - teacher)**2`` over entries; the
    selection term is ``sum(-log pctr)`` over teacher-selected entries divided
    by the entry count. Both go into ``l_rank`` (with lambda1 = 1).
    """
    if log_teacher is None:
        raise ValueError("ranking logs carry no teacher scores")
    log_teacher = np.asarray(log_teacher, dtype=np.float64)
    log_selected = np.asarray(log_selected, dtype=bool)
    n_c, n_e = len(ctr_feats), len(log_feats)
    if n_c + n_e == 0:
        raise ValueError("empty batch")
    if log_teacher.shape != (n_e,) or log_selected.shape != (n_e,):
        raise ValueError("teacher scores / selection flags must align with ranking-log entries")
    fp = model.forward(_stack(ctr_feats, log_feats))
    d_logit = np.zeros(n_c + n_e)
    l_ctr, g = ctr_loss(fp.logit[:n_c], np.asarray(ctr_y, dtype=np.float64))
    d_logit[:n_c] = g
    l_align = 0.0
    if n_e:
        p = fp.pctr[n_c:]
        z = fp.logit[n_c:]
        diff = p - log_teacher
        l_match = float(np.mean(diff**2))
        l_sel = float(np.sum(softplus(-z[log_selected]))) / n_e
        l_align = score_weight * l_match + select_weight * l_sel
        d = score_weight * 2.0 * diff * p * (1.0 - p) / n_e
        d = d - select_weight * log_selected * sigmoid(-z) / n_e
        d_logit[n_c:] = d
    return LossReport(l_ctr, l_align, 0.0, 1.0, 0.0), model.backward(fp, d_logit)


# ---- data + config ---------------------------------------------------------------


@dataclass
class TrainingData:
    """Feature-id arrays drawn from impression and ranking logs."""

    vocab_sizes: tuple[int, ...]
    imp_feats: np.ndarray  # (n, F)
    imp_y: np.ndarray  # (n,)
    imp_teacher: np.ndarray | None = None  # (n,)
    log_feats: np.ndarray | None = None  # (n_lists, L, F), ECPM order
    log_pctr: np.ndarray | None = None  # (n_lists, L) ranking-model pCTR
    log_bids: np.ndarray | None = None  # (n_lists, L) pre-ranking bid
    n_selected: int = 1


@dataclass
class TrainConfig:
    method: str = "copr"
    epochs: int = 10
    lr: float = 0.05
    ctr_batch_size: int = 256
    emb_dim: int = 16
    hidden: tuple[int, ...] = PRERANK_HIDDEN
    relax_hidden: tuple[int, ...] = RELAX_HIDDEN
    init_pctr: float = 0.05
    # copr
    chunk_size: int = 2
    lambda1: float = 1.0
    lambda2: float = 0.2
    form: str = "difference"
    weighting: str = "delta_ndcg"
    # baselines
    distill_weight: float = 1.0
    score_weight: float = 1.0
    select_weight: float = 1.0

    def __post_init__(self) -> None:
        self.hidden = tuple(self.hidden)
        self.relax_hidden = tuple(self.relax_hidden)
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.form not in FORMS:
            raise ConfigError("form", f"must be one of {FORMS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError("weighting", f"must be one of {WEIGHTINGS}")
        for key in ("epochs",):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        for key in ("ctr_batch_size", "chunk_size", "emb_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        for key in ("lambda1", "lambda2", "distill_weight", "score_weight", "select_weight"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown training key")
        return cls(**dict(data))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["relax_hidden"] = list(self.relax_hidden)
        return d


def init_student(cfg: TrainConfig, vocab_sizes, seed: int) -> PreRankModel:
    """Fresh student for ``cfg.method``.

    The relaxation net draws from its own stream, so ``base`` and ``copr``
    students start with identical embeddings and prediction nets.
    """
    return PreRankModel.init(
        vocab_sizes,
        np.random.default_rng([seed, 1]),
        cfg.emb_dim,
        cfg.hidden,
        cfg.relax_hidden if cfg.method == "copr" else None,
        cfg.init_pctr,
        relax_rng=np.random.default_rng([seed, 2]),
    )


def _check_data(method: str, data: TrainingData) -> None:
    if len(data.imp_feats) == 0:
        raise ValueError("no impression records")
    if method == "distill" and data.imp_teacher is None:
        raise ValueError("distill needs teacher scores on impression logs")
    if method in ("rankflow", "copr") and (data.log_feats is None or data.log_pctr is None or data.log_bids is None):
        raise ValueError(f"{method} needs ranking logs")


def train(
    method: str,
    data: TrainingData,
    cfg: TrainConfig,
    seed: int,
    model: PreRankModel | None = None,
    on_epoch: Callable[[int, PreRankModel, LossReport], None] | None = None,
):
    """Mini-batch SGD over the method's record streams.

    One epoch is one pass over the impression stream in near-equal batches of
    at most ``ctr_batch_size``; the ranking-log stream is split across the
    same number of steps. Chunk representatives are
    redrawn every epoch. ``on_epoch(epoch, model, report)`` runs after each
    epoch. Returns ``(model, per-epoch mean LossReports)``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    cfg = dataclasses.replace(cfg, method=method)
    _check_data(method, data)
    if model is None:
        model = init_student(cfg, data.vocab_sizes, seed)
    shuffle_rng = np.random.default_rng([seed, 3])
    chunk_rng = np.random.default_rng([seed, 4])

    n_imp = len(data.imp_feats)
    steps = math.ceil(n_imp / cfg.ctr_batch_size)
    n_lists = len(data.log_feats) if data.log_feats is not None else 0
    if n_lists:
        L = data.log_feats.shape[1]
        selected = np.zeros(L, dtype=bool)
        selected[: data.n_selected] = True

    curve: list[LossReport] = []
    for epoch in range(cfg.epochs):
        # near-equal batches; a small remainder batch makes a noisy last step
        parts_c = np.array_split(shuffle_rng.permutation(n_imp), steps)
        parts_l = np.array_split(shuffle_rng.permutation(n_lists), steps) if n_lists else None
        reps = chunk_representatives(n_lists, L, cfg.chunk_size, chunk_rng) if method == "copr" else None
        reports = []
        for s in range(steps):
            ci = parts_c[s]
            feats, y = data.imp_feats[ci], data.imp_y[ci]
            if method == "base":
                rep, grads = base_loss(model, feats, y)
            elif method == "distill":
                rep, grads = distill_loss(model, feats, y, data.imp_teacher[ci], cfg.distill_weight)
            else:
                li = parts_l[s]
                if method == "rankflow":
                    lf = data.log_feats[li]
                    rep, grads = rankflow_loss(
                        model,
                        feats,
                        y,
                        lf.reshape(-1, lf.shape[-1]),
                        data.log_pctr[li].ravel(),
                        np.tile(selected, len(li)),
                        cfg.score_weight,
                        cfg.select_weight,
                    )
                else:
                    pick = reps[li]
                    rows = np.arange(len(li))[:, None]
                    batch = TrainBatch.build(feats, y, data.log_feats[li][rows, pick], data.log_bids[li][rows, pick], cfg.weighting)
                    rep, grads = copr_loss(model, batch, cfg.lambda1, cfg.lambda2, cfg.form)
            sgd_step(model, grads, cfg.lr)
            reports.append(rep)
        curve.append(LossReport.mean(reports))
        if on_epoch is not None:
            on_epoch(epoch + 1, model, curve[-1])
    return model, curve
