"""End-to-end experiment stages, shared by the CLI and the acceptance suite.

Output directory layout::

    world.npz                       catalog
    logs/impressions_train.csv      bootstrap impressions (teacher + students)
    logs/impressions_holdout.csv    held-out bootstrap impressions
    logs/ranking_logs.csv           teacher ECPM lists
    models/teacher.npz, models/<method>.npz
    curves/<method>.csv             per-epoch losses
    eval/consistency.csv, eval/system.csv, eval/rpc.csv
    eval/impressions_<method>.csv

Every random stream is derived from ``cfg.seed`` plus a fixed stage tag.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cascade import (
    ImpressionLogs,
    RankingLogs,
    collect_ranking_logs,
    ctr_rpm,
    display_uniform,
    ecpm,
    ecpm_order,
    simulate_cascade,
)
from .config import ExperimentConfig
from .losses import LossReport, ctr_loss
from .metrics import ConsistencyReport, RpcCurve, consistency_report, rpc_curve
from .nn import EmbeddingMlpModel, PreRankModel, RankModel, check_capacity_gap, load_model
from .trainer import TrainConfig, TrainingData, train
from .world import Catalog, RequestBatch, gen_catalog, gen_requests

log = logging.getLogger(__name__)

# stream tags
_BOOTSTRAP, _TEACHER_INIT, _LOG_SAMPLING, _EVAL_REQUESTS, _EVAL_CLICKS = 10, 11, 12, 20, 21
_TEACHER_SEED_OFFSET = 1_000_003


def rng_for(cfg: ExperimentConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag])


# ---- paths -------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def world(self) -> Path:
        return self.root / "world.npz"

    @property
    def impressions_train(self) -> Path:
        return self.root / "logs" / "impressions_train.csv"

    @property
    def impressions_holdout(self) -> Path:
        return self.root / "logs" / "impressions_holdout.csv"

    @property
    def ranking_logs(self) -> Path:
        return self.root / "logs" / "ranking_logs.csv"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.npz"

    def curve(self, name: str) -> Path:
        return self.root / "curves" / f"{name}.csv"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"


# ---- stages --------------------------------------------------------------------


def build_world(cfg: ExperimentConfig) -> Catalog:
    return gen_catalog(cfg.world, cfg.seed)


def bootstrap_impressions(cfg: ExperimentConfig, catalog: Catalog) -> tuple[ImpressionLogs, ImpressionLogs]:
    """Uniform-display exploration traffic, split into train / holdout by request."""
    t = cfg.teacher
    rng = rng_for(cfg, _BOOTSTRAP)
    requests = gen_requests(catalog, t.n_requests, t.display, rng)
    imps = display_uniform(requests, t.display, catalog, rng)
    n_hold = max(1, int(round(t.n_requests * t.holdout)))
    cut = t.n_requests - n_hold
    train_mask = imps.request_ids < cut
    return imps.subset(train_mask), imps.subset(~train_mask)


def teacher_train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.teacher
    return TrainConfig(method="base", epochs=t.epochs, lr=t.lr, ctr_batch_size=t.batch_size, init_pctr=cfg.world.base_ctr)


def init_teacher(cfg: ExperimentConfig, catalog: Catalog) -> RankModel:
    t = cfg.teacher
    return RankModel.init(catalog.vocab_sizes, rng_for(cfg, _TEACHER_INIT), t.emb_dim, t.hidden, init_pctr=cfg.world.base_ctr)


def train_teacher(cfg: ExperimentConfig, catalog: Catalog, imps: ImpressionLogs) -> tuple[RankModel, list[LossReport]]:
    teacher = init_teacher(cfg, catalog)
    data = TrainingData(catalog.vocab_sizes, imps.features(catalog), imps.y.astype(np.float64))
    return train("base", data, teacher_train_config(cfg), cfg.seed + _TEACHER_SEED_OFFSET, model=teacher)


def log_loss(model: EmbeddingMlpModel, imps: ImpressionLogs, catalog: Catalog) -> float:
    p = np.clip(model.predict(imps.features(catalog)), 1e-15, 1 - 1e-15)
    logit = np.log(p) - np.log1p(-p)
    return ctr_loss(logit, imps.y.astype(np.float64))[0]


def build_ranking_logs(
    cfg: ExperimentConfig, catalog: Catalog, teacher: RankModel, imps: ImpressionLogs, prerank: PreRankModel | None = None
) -> RankingLogs:
    """One teacher-ranked list per bootstrap request, with that request's user and context."""
    rid, first = np.unique(imps.request_ids, return_index=True)
    users, contexts = imps.users[first], imps.contexts[first]
    rng = rng_for(cfg, _LOG_SAMPLING)
    L = cfg.logs.list_size
    m = L if cfg.logs.mode == "public" else cfg.cascade.m
    cands = np.stack([rng.choice(catalog.n_ads, size=m, replace=False) for _ in range(len(rid))])
    requests = RequestBatch(users, contexts, cands)
    logs = collect_ranking_logs(requests, prerank, teacher, L, catalog, cfg.logs.mode, rng, cfg.logs.n_disp)
    logs.request_ids = rid
    return logs


def training_data(catalog: Catalog, imps: ImpressionLogs, teacher: RankModel | None, logs: RankingLogs | None) -> TrainingData:
    feats = imps.features(catalog)
    data = TrainingData(catalog.vocab_sizes, feats, imps.y.astype(np.float64))
    if teacher is not None:
        data.imp_teacher = teacher.predict(feats)
    if logs is not None:
        data.log_feats = catalog.features(logs.users[:, None], logs.ad_ids, logs.contexts[:, None])
        data.log_pctr = logs.pctr
        data.log_bids = logs.bid_pre
        data.n_selected = logs.n_selected
    return data


def train_student(cfg: ExperimentConfig, name: str, data: TrainingData) -> tuple[PreRankModel, list[LossReport]]:
    tc = cfg.train_config(name)
    return train(tc.method, data, tc, cfg.seed)


# ---- evaluation -------------------------------------------------------------------


@dataclass
class MethodResult:
    name: str
    consistency: ConsistencyReport
    ctr: float
    rpm: float
    rpc_ecpm: RpcCurve
    rpc_pctr: RpcCurve
    pctr_mae: float
    impressions: ImpressionLogs


@dataclass
class EvalResult:
    mean_teacher_pctr: float
    methods: dict[str, MethodResult] = field(default_factory=dict)


def eval_requests(cfg: ExperimentConfig, catalog: Catalog) -> tuple[RequestBatch, np.ndarray]:
    requests = gen_requests(catalog, cfg.eval.n_requests, cfg.cascade.m, rng_for(cfg, _EVAL_REQUESTS))
    uniforms = rng_for(cfg, _EVAL_CLICKS).random((cfg.eval.n_requests, cfg.cascade.n_disp))
    return requests, uniforms


def _order_by(scores: np.ndarray, weights: np.ndarray, cands: np.ndarray) -> np.ndarray:
    rows = np.arange(len(cands))[:, None]
    return cands[rows, ecpm_order(ecpm(weights, scores), cands)]


def evaluate_models(cfg: ExperimentConfig, catalog: Catalog, teacher: RankModel, students: dict[str, EmbeddingMlpModel]) -> EvalResult:
    """Run every student through the evaluation cascade against ``teacher``.

    Consistency and RPC compare each student's full ECPM order over all M
    candidates with the teacher's; clicks share one set of uniforms across
    students.
    """
    requests, uniforms = eval_requests(cfg, catalog)
    cands = requests.candidates
    feats = catalog.features(requests.users[:, None], cands, requests.contexts[:, None])
    bids = catalog.bids[cands]
    ones = np.ones_like(bids)
    t_score = teacher.ranking_score(feats, chunk=16384)
    rank_ecpm = _order_by(t_score, bids, cands)
    rank_pctr = _order_by(t_score, ones, cands)
    result = EvalResult(mean_teacher_pctr=float(np.mean(t_score)))
    c = cfg.cascade
    for name, model in students.items():
        s_score = model.ranking_score(feats, chunk=16384)
        sim = simulate_cascade(requests, s_score, t_score, c.n_pre, c.n_disp, catalog, uniforms)
        ctr, rpm = ctr_rpm(sim.impressions, catalog)
        raw = model.predict(feats, chunk=16384) if model.has_relaxation else s_score
        result.methods[name] = MethodResult(
            name=name,
            consistency=consistency_report(sim.pre_ad_ids, rank_ecpm, cfg.eval.ks),
            ctr=ctr,
            rpm=rpm,
            rpc_ecpm=rpc_curve(sim.pre_ad_ids, rank_ecpm, "ecpm"),
            rpc_pctr=rpc_curve(_order_by(s_score, ones, cands), rank_pctr, "pctr"),
            pctr_mae=float(np.mean(np.abs(raw - t_score))),
            impressions=sim.impressions,
        )
        log.info("%s: HR@10=%.4f NDCG@10=%.4f CTR=%.5f RPM=%.3f", name, result.methods[name].consistency.hr.get(10, float("nan")),
                 result.methods[name].consistency.ndcg.get(10, float("nan")), ctr, rpm)
    return result


def write_eval(result: EvalResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "K", "value"])
        for name, r in result.methods.items():
            for metric, k, v in r.consistency.rows():
                w.writerow([name, metric, k, "%.17g" % v])
    with open(out_dir / "system.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "ctr", "rpm", "pctr_mae", "rpc_dev_ecpm", "rpc_dev_pctr", "n_lists"])
        for name, r in result.methods.items():
            w.writerow(
                [name]
                + ["%.17g" % v for v in (r.ctr, r.rpm, r.pctr_mae, r.rpc_ecpm.mean_abs_deviation(), r.rpc_pctr.mean_abs_deviation())]
                + [r.consistency.n_lists]
            )
    with open(out_dir / "rpc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "ranking_position", "mean_preranking_position", "variant"])
        for name, r in result.methods.items():
            for curve in (r.rpc_ecpm, r.rpc_pctr):
                for pos, mean in curve.points:
                    w.writerow([name, pos, "%.17g" % mean, curve.variant])
    for name, r in result.methods.items():
        r.impressions.save(out_dir / f"impressions_{name}.csv")


def write_curve(curve: list[LossReport], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_ctr", "l_rank", "l_reg", "total"])
        for e, r in enumerate(curve, 1):
            w.writerow([e] + ["%.17g" % v for v in (r.l_ctr, r.l_rank, r.l_reg, r.total)])


# ---- whole pipeline ------------------------------------------------------------


@dataclass
class PipelineResult:
    catalog: Catalog
    teacher: RankModel
    students: dict[str, PreRankModel]
    curves: dict[str, list[LossReport]]
    teacher_holdout_logloss: float
    untrained_holdout_logloss: float
    eval: EvalResult


def run_pipeline(cfg: ExperimentConfig, write: bool = True, methods: list[str] | None = None) -> PipelineResult:
    """World -> bootstrap -> teacher -> ranking logs -> students -> evaluation."""
    layout = Layout(cfg.out)
    catalog = build_world(cfg)
    imps_train, imps_hold = bootstrap_impressions(cfg, catalog)
    untrained = log_loss(init_teacher(cfg, catalog), imps_hold, catalog)
    teacher, t_curve = train_teacher(cfg, catalog, imps_train)
    held = log_loss(teacher, imps_hold, catalog)
    log.info("teacher held-out log-loss %.5f (untrained %.5f)", held, untrained)
    logs = build_ranking_logs(cfg, catalog, teacher, imps_train)
    data = training_data(catalog, imps_train, teacher, logs)
    students, curves = {}, {"teacher": t_curve}
    for name in methods or list(cfg.methods):
        students[name], curves[name] = train_student(cfg, name, data)
        check_capacity_gap(teacher, students[name])
    result = evaluate_models(cfg, catalog, teacher, students)
    if write:
        digest = cfg.world.digest()
        catalog.save(layout.world)
        imps_train.save(layout.impressions_train)
        imps_hold.save(layout.impressions_holdout)
        logs.save(layout.ranking_logs)
        teacher.save(layout.model("teacher"), digest, {"holdout_logloss": held})
        for name, m in students.items():
            m.save(layout.model(name), digest, {"method": name})
        for name, c in curves.items():
            write_curve(c, layout.curve(name))
        write_eval(result, layout.eval_dir)
    return PipelineResult(catalog, teacher, students, curves, held, untrained, result)


def load_models(paths: dict[str, Path], world_digest: str) -> dict[str, EmbeddingMlpModel]:
    return {name: load_model(p, world_digest) for name, p in paths.items()}
