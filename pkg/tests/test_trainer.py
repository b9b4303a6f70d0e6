import dataclasses

import numpy as np
import pytest
from gradcheck import assert_grads_match, micro_feats, micro_student, numeric_grads

from coprlab import experiment as ex
from coprlab.config import load_config
from coprlab.losses import chunk_representatives
from coprlab.trainer import (
    TrainBatch,
    TrainConfig,
    TrainingData,
    base_loss,
    copr_loss,
    distill_loss,
    init_student,
    rankflow_loss,
    train,
)
from coprlab.world import ConfigError


def micro_batch(n_ctr=12, n_lists=5, D=4, weighting="delta_ndcg", seed=3):
    rng = np.random.default_rng(seed)
    lf = micro_feats(n_lists * D, seed + 1).reshape(n_lists, D, 5)
    bids = rng.uniform(0.5, 6.0, size=(n_lists, D))
    return TrainBatch.build(micro_feats(n_ctr, seed + 2), rng.integers(2, size=n_ctr), lf, bids, weighting)


# ---- gradient exactness ---------------------------------------------------------


@pytest.mark.parametrize("form", ["difference", "ratio"])
@pytest.mark.parametrize("alpha_bias", [1.3, 0.7])
def test_copr_gradients(form, alpha_bias):
    # alpha above and below 1 exercises both branches of the penalty
    model = micro_student(alpha_bias=alpha_bias)
    a = model.forward(micro_feats(40)).alpha
    assert np.all(a > 1.02) if alpha_bias > 1 else np.all(a < 0.98)
    batch = micro_batch()
    rep, grads = copr_loss(model, batch, 0.7, 0.3, form)
    assert rep.l_rank > 0 and rep.l_reg > 0
    num = numeric_grads(model, lambda: copr_loss(model, batch, 0.7, 0.3, form)[0].total)
    assert_grads_match(grads, num)


def test_rank_and_reg_terms_separately():
    model = micro_student()
    batch = micro_batch()
    for l1, l2 in ((1.0, 0.0), (0.0, 1.0)):
        _, grads = copr_loss(model, batch, l1, l2)
        # ctr part removed by subtracting the plain click-loss gradient
        _, g0 = copr_loss(model, batch, 0.0, 0.0)
        num = numeric_grads(model, lambda: copr_loss(model, batch, l1, l2)[0].total - copr_loss(model, batch, 0.0, 0.0)[0].total)
        assert_grads_match({k: grads[k] - g0[k] for k in grads}, num)


def test_distill_gradients():
    model = micro_student(relax=False)
    f = micro_feats(30)
    y = np.random.default_rng(5).integers(2, size=30)
    t = np.random.default_rng(6).uniform(0.01, 0.4, size=30)
    _, grads = distill_loss(model, f, y, t, 2.0)
    num = numeric_grads(model, lambda: distill_loss(model, f, y, t, 2.0)[0].total)
    assert_grads_match(grads, num)


def test_rankflow_gradients():
    model = micro_student(relax=False)
    rng = np.random.default_rng(7)
    f, y = micro_feats(10), rng.integers(2, size=10)
    lf = micro_feats(24, seed=8)
    t = rng.uniform(0.01, 0.4, size=24)
    sel = np.tile([True, False, False, False], 6)
    _, grads = rankflow_loss(model, f, y, lf, t, sel, 3.0, 0.5)
    num = numeric_grads(model, lambda: rankflow_loss(model, f, y, lf, t, sel, 3.0, 0.5)[0].total)
    assert_grads_match(grads, num)


def test_loss_input_errors():
    model = micro_student()
    f = micro_feats(4)
    with pytest.raises(ValueError):
        distill_loss(model, f, np.zeros(4), None)
    with pytest.raises(ValueError):
        distill_loss(model, f, np.zeros(4), np.array([0.1, np.nan, 0.1, 0.1]))
    with pytest.raises(ValueError):
        rankflow_loss(model, f, np.zeros(4), f, None, np.zeros(4, bool))
    with pytest.raises(ValueError):
        rankflow_loss(model, f, np.zeros(4), f, np.zeros(3), np.zeros(4, bool))
    with pytest.raises(ValueError):
        copr_loss(model, micro_batch(), form="cubic")
    with pytest.raises(ValueError):
        base_loss(model, f[:0], np.zeros(0))


def test_copr_without_rank_terms_equals_click_loss():
    model = micro_student()
    batch = micro_batch()
    rep, grads = copr_loss(model, batch, 0.0, 0.0)
    rep_b, grads_b = base_loss(model, batch.ctr_feats, batch.ctr_y)
    assert rep.total == rep_b.total
    for k in grads_b:
        assert np.array_equal(grads[k], grads_b[k])
    assert all(not np.any(grads[k]) for k in grads if k.startswith("relax"))


def test_batch_build():
    b = micro_batch(D=4)
    assert b.pair_i.tolist() == [0, 0, 0, 1, 1, 2] and b.n_lists == 5
    assert len(list(b.pair_records())) == 30
    one = TrainBatch.build(micro_feats(3), np.zeros(3), np.zeros((2, 1, 5), np.int64), np.ones((2, 1)))
    assert len(one.pair_i) == 0


# ---- training loop on a tiny world ---------------------------------------------


@pytest.fixture(scope="module")
def tiny():
    cfg = load_config(
        None,
        [
            "world.n_users=10",
            "world.n_ads=20",
            "world.n_ad_categories=5",
            "world.n_user_groups=3",
            "teacher.n_requests=200",
            "teacher.epochs=2",
            "teacher.emb_dim=8",
            "teacher.hidden=[16, 8]",
            "cascade.m=20",
            "eval.n_requests=50",
        ],
    )
    cat = ex.build_world(cfg)
    imps, _ = ex.bootstrap_impressions(cfg, cat)
    teacher, _ = ex.train_teacher(cfg, cat, imps)
    logs = ex.build_ranking_logs(cfg, cat, teacher, imps)
    return cfg, ex.training_data(cat, imps, teacher, logs)


def small(method, **kw):
    opts = dict(method=method, epochs=5, lr=0.05, ctr_batch_size=16, emb_dim=4, hidden=(8,), relax_hidden=(4,))
    return TrainConfig(**{**opts, **kw})


def test_copr_objective_decreases(tiny):
    # measured on one fixed draw of chunk representatives; per-epoch means
    # mix in a fresh draw each epoch
    _, data = tiny
    reps = chunk_representatives(len(data.log_feats), data.log_feats.shape[1], 2, np.random.default_rng(0))
    rows = np.arange(len(reps))[:, None]
    batch = TrainBatch.build(data.imp_feats, data.imp_y, data.log_feats[rows, reps], data.log_bids[rows, reps])
    cfg = small("copr")
    totals = [copr_loss(init_student(cfg, data.vocab_sizes, 1), batch)[0].total]
    train("copr", data, cfg, 1, on_epoch=lambda e, m, r: totals.append(copr_loss(m, batch)[0].total))
    assert len(totals) == 6
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_zero_rank_weights_reproduce_base(tiny):
    _, data = tiny
    base, _ = train("base", data, small("base"), 4)
    copr, _ = train("copr", data, small("copr", lambda1=0.0, lambda2=0.0), 4)
    for k, v in base.params().items():
        assert np.array_equal(v, copr.params()[k]), k


def test_zero_epochs_leaves_model(tiny):
    _, data = tiny
    cfg = dataclasses.replace(small("copr"), epochs=0)
    m0 = init_student(cfg, data.vocab_sizes, 9)
    m, curve = train("copr", data, cfg, 9)
    assert curve == []
    assert all(np.array_equal(v, m0.params()[k]) for k, v in m.params().items())


@pytest.mark.parametrize("method", ["base", "distill", "rankflow", "copr"])
def test_training_deterministic(tiny, method):
    _, data = tiny
    a, ca = train(method, data, small(method), 2)
    b, cb = train(method, data, small(method), 2)
    assert ca == cb
    assert all(np.array_equal(v, b.params()[k]) for k, v in a.params().items())


def test_epoch_callback(tiny):
    _, data = tiny
    seen = []
    _, curve = train("base", data, small("base"), 1, on_epoch=lambda e, m, r: seen.append((e, r)))
    assert [e for e, _ in seen] == [1, 2, 3, 4, 5] and [r for _, r in seen] == curve


def test_method_data_mismatch(tiny):
    _, data = tiny
    no_logs = TrainingData(data.vocab_sizes, data.imp_feats, data.imp_y)
    for method in ("rankflow", "copr", "distill"):
        with pytest.raises(ValueError):
            train(method, no_logs, small(method), 1)
    with pytest.raises(ValueError):
        train("lambdamart", data, small("base"), 1)
    with pytest.raises(ValueError):
        train("base", TrainingData(data.vocab_sizes, data.imp_feats[:0], data.imp_y[:0]), small("base"), 1)


@pytest.mark.parametrize(
    "kw,key",
    [({"method": "x"}, "method"), ({"epochs": -1}, "epochs"), ({"form": "log"}, "form"), ({"weighting": "w"}, "weighting"), ({"lr": -1.0}, "lr"), ({"chunk_size": 0}, "chunk_size")],
)
def test_train_config_rejects(kw, key):
    with pytest.raises(ConfigError) as e:
        TrainConfig(**kw)
    assert e.value.key == key
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
