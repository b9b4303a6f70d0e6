"""Embedding + MLP click models with hand-written backprop.

Two concrete models share one implementation:

* :class:`RankModel` -- the wide ranking-stage teacher.
* :class:`PreRankModel` -- the lightweight pre-ranking student, optionally
  carrying a relaxation net that outputs ``alpha = relu(mlp(x)) + 1e-6``.

Both nets of a student read the same concatenated embedding ``x``.
Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import load_archive, save_archive

ALPHA_FLOOR = 1e-6
CHECKPOINT_VERSION = 1

PRERANK_HIDDEN = (64, 32, 16)
RELAX_HIDDEN = (32, 16, 8)
RANK_HIDDEN = (256, 128, 64)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def alpha_from_preactivation(z):
    return np.maximum(z, 0.0) + ALPHA_FLOOR


def adjusted_pctr(pctr, alpha):
    """Relaxed ranking score ``alpha * pctr``; deliberately not clipped to 1."""
    return np.asarray(pctr) * np.asarray(alpha)


class Mlp:
    """ReLU hidden layers, linear scalar output."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: input width {w.shape[0]} != previous output {weights[k - 1].shape[1]}")
        if weights[-1].shape[1] != 1:
            raise ValueError("output layer must have width 1")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        hidden: Sequence[int],
        out_bias: float = 0.0,
        out_scale: float | None = None,
    ) -> "Mlp":
        dims = [in_dim, *hidden, 1]
        weights, biases = [], []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / a)
            if k == len(dims) - 2 and out_scale is not None:
                scale = out_scale
            weights.append(rng.normal(0.0, scale, size=(a, b)))
            biases.append(np.zeros(b))
        biases[-1][:] = out_bias
        return cls(weights, biases)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    def forward(self, x: np.ndarray):
        """Return ``(output (n,), activations)``; activations feed :meth:`backward`."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h[:, 0], acts

    def backward(self, acts: list[np.ndarray], d_out: np.ndarray):
        """Gradients of ``sum(d_out * output)``: returns ``(d_x, d_weights, d_biases)``."""
        g = d_out[:, None]
        d_w: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        d_b: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        for k in range(len(self.weights) - 1, -1, -1):
            d_w[k] = acts[k].T @ g
            d_b[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (acts[k] > 0)
        return g, d_w, d_b

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class ForwardPass:
    """Values recorded by a forward pass, consumed by :meth:`EmbeddingMlpModel.backward`."""

    feats: np.ndarray
    x: np.ndarray
    logit: np.ndarray
    pctr: np.ndarray
    pred_acts: list
    alpha_pre: np.ndarray | None = None
    alpha: np.ndarray | None = None
    relax_acts: list | None = None

    @property
    def adjusted(self) -> np.ndarray:
        return self.pctr if self.alpha is None else adjusted_pctr(self.pctr, self.alpha)


class EmbeddingMlpModel:
    kind = "base"

    def __init__(
        self,
        vocab_sizes: Sequence[int],
        tables: Sequence[np.ndarray],
        prediction_net: Mlp,
        relaxation_net: Mlp | None = None,
    ):
        if len(tables) != len(vocab_sizes):
            raise ValueError("one embedding table per feature field")
        dims = {t.shape[1] for t in tables}
        if len(dims) != 1 or 0 in dims:
            raise ValueError("all embedding tables need the same positive width")
        for v, t in zip(vocab_sizes, tables):
            if t.shape[0] != v:
                raise ValueError(f"table rows {t.shape[0]} != vocab size {v}")
        in_dim = len(tables) * tables[0].shape[1]
        if prediction_net.in_dim != in_dim:
            raise ValueError(f"prediction net expects {prediction_net.in_dim} inputs, embeddings give {in_dim}")
        if relaxation_net is not None and relaxation_net.in_dim != in_dim:
            raise ValueError(f"relaxation net expects {relaxation_net.in_dim} inputs, embeddings give {in_dim}")
        self.vocab_sizes = tuple(int(v) for v in vocab_sizes)
        self.tables = [np.asarray(t, dtype=np.float64) for t in tables]
        self.prediction_net = prediction_net
        self.relaxation_net = relaxation_net

    @property
    def emb_dim(self) -> int:
        return self.tables[0].shape[1]

    @property
    def in_dim(self) -> int:
        return len(self.tables) * self.emb_dim

    @property
    def has_relaxation(self) -> bool:
        return self.relaxation_net is not None

    # ---- parameters -------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array, keyed by a stable name."""
        out = {f"emb.{k}": t for k, t in enumerate(self.tables)}
        for prefix, net in (("pred", self.prediction_net), ("relax", self.relaxation_net)):
            if net is None:
                continue
            for k, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{prefix}.W{k}"] = w
                out[f"{prefix}.b{k}"] = b
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def copy(self):
        clone = self.__class__.__new__(self.__class__)
        clone.vocab_sizes = self.vocab_sizes
        clone.tables = [t.copy() for t in self.tables]
        clone.prediction_net = Mlp([w.copy() for w in self.prediction_net.weights], [b.copy() for b in self.prediction_net.biases])
        clone.relaxation_net = (
            None
            if self.relaxation_net is None
            else Mlp([w.copy() for w in self.relaxation_net.weights], [b.copy() for b in self.relaxation_net.biases])
        )
        return clone

    # ---- forward ----------------------------------------------------
    def embed(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != len(self.tables):
            raise ValueError(f"expected feature ids of shape (n, {len(self.tables)}), got {feats.shape}")
        for k, v in enumerate(self.vocab_sizes):
            col = feats[:, k]
            if col.size and (col.min() < 0 or col.max() >= v):
                raise IndexError(f"feature field {k} id out of range [0, {v})")
        return np.concatenate([t[feats[:, k]] for k, t in enumerate(self.tables)], axis=1)

    def forward(self, feats: np.ndarray) -> ForwardPass:
        x = self.embed(feats)
        logit, acts = self.prediction_net.forward(x)
        fp = ForwardPass(feats=np.asarray(feats), x=x, logit=logit, pctr=sigmoid(logit), pred_acts=acts)
        if self.relaxation_net is not None:
            z, racts = self.relaxation_net.forward(x)
            fp.alpha_pre, fp.alpha, fp.relax_acts = z, alpha_from_preactivation(z), racts
        return fp

    def predict(self, feats: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """pCTR for rows of feature ids (any leading shape)."""
        feats = np.asarray(feats)
        flat = feats.reshape(-1, feats.shape[-1])
        out = np.empty(len(flat))
        for s in range(0, len(flat), chunk):
            logit, _ = self.prediction_net.forward(self.embed(flat[s : s + chunk]))
            out[s : s + chunk] = sigmoid(logit)
        return out.reshape(feats.shape[:-1])

    def ranking_score(self, feats: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Score used for ECPM ranking: ``alpha * pctr`` with relaxation, else pCTR."""
        if self.relaxation_net is None:
            return self.predict(feats, chunk)
        feats = np.asarray(feats)
        flat = feats.reshape(-1, feats.shape[-1])
        out = np.empty(len(flat))
        for s in range(0, len(flat), chunk):
            x = self.embed(flat[s : s + chunk])
            logit, _ = self.prediction_net.forward(x)
            z, _ = self.relaxation_net.forward(x)
            out[s : s + chunk] = adjusted_pctr(sigmoid(logit), alpha_from_preactivation(z))
        return out.reshape(feats.shape[:-1])

    # ---- backward ---------------------------------------------------
    def backward(self, fp: ForwardPass | None, d_logit=None, d_alpha=None) -> dict[str, np.ndarray]:
        """Chain per-row upstream gradients back to every parameter.

        ``d_logit`` is dL/d(prediction logit) and ``d_alpha`` is dL/d(alpha),
        one entry per forward row. Parameters the pass never touched get zeros.
        """
        if fp is None or fp.pred_acts is None:
            raise RuntimeError("backward called without a recorded forward pass")
        n = len(fp.logit)
        grads = {name: np.zeros_like(p) for name, p in self.params().items()}
        d_x = np.zeros_like(fp.x)
        if d_logit is not None:
            d_logit = np.asarray(d_logit, dtype=np.float64)
            if d_logit.shape != (n,):
                raise ValueError(f"d_logit shape {d_logit.shape} != ({n},)")
            gx, dws, dbs = self.prediction_net.backward(fp.pred_acts, d_logit)
            d_x += gx
            for k, (dw, db) in enumerate(zip(dws, dbs)):
                grads[f"pred.W{k}"] = dw
                grads[f"pred.b{k}"] = db
        if d_alpha is not None:
            if self.relaxation_net is None or fp.relax_acts is None:
                raise RuntimeError("alpha gradient given but the model has no relaxation net")
            d_alpha = np.asarray(d_alpha, dtype=np.float64)
            if d_alpha.shape != (n,):
                raise ValueError(f"d_alpha shape {d_alpha.shape} != ({n},)")
            d_z = d_alpha * (fp.alpha_pre > 0)
            gx, dws, dbs = self.relaxation_net.backward(fp.relax_acts, d_z)
            d_x += gx
            for k, (dw, db) in enumerate(zip(dws, dbs)):
                grads[f"relax.W{k}"] = dw
                grads[f"relax.b{k}"] = db
        d = self.emb_dim
        for k in range(len(self.tables)):
            np.add.at(grads[f"emb.{k}"], fp.feats[:, k], d_x[:, k * d : (k + 1) * d])
        return grads

    # ---- persistence ------------------------------------------------
    def save(self, path: str | Path, world_digest: str, extra: dict | None = None) -> None:
        meta = {
            "format": "coprlab-checkpoint",
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "vocab_sizes": list(self.vocab_sizes),
            "world_digest": world_digest,
            "prediction_dims": self.prediction_net.layer_dims,
            "relaxation_dims": None if self.relaxation_net is None else self.relaxation_net.layer_dims,
            "extra": extra or {},
        }
        save_archive(path, self.params(), meta)


class PreRankModel(EmbeddingMlpModel):
    kind = "prerank"

    @classmethod
    def init(
        cls,
        vocab_sizes: Sequence[int],
        rng: np.random.Generator,
        emb_dim: int = 16,
        hidden: Sequence[int] = PRERANK_HIDDEN,
        relax_hidden: Sequence[int] | None = None,
        init_pctr: float = 0.05,
        emb_scale: float = 0.1,
        relax_rng: np.random.Generator | None = None,
    ) -> "PreRankModel":
        """Fresh student; pass ``relax_hidden`` to attach a relaxation net."""
        tables = [rng.normal(0.0, emb_scale, size=(v, emb_dim)) for v in vocab_sizes]
        in_dim = emb_dim * len(vocab_sizes)
        pred = Mlp.init(rng, in_dim, hidden, out_bias=float(np.log(init_pctr / (1 - init_pctr))))
        relax = None
        if relax_hidden is not None:
            # near-zero output weights with unit bias start every alpha at ~1
            relax = Mlp.init(relax_rng or rng, in_dim, relax_hidden, out_bias=1.0, out_scale=1e-3)
        return cls(vocab_sizes, tables, pred, relax)


class RankModel(EmbeddingMlpModel):
    kind = "rank"

    def __init__(self, vocab_sizes, tables, prediction_net, relaxation_net=None):
        if relaxation_net is not None:
            raise ValueError("the ranking model has no relaxation net")
        super().__init__(vocab_sizes, tables, prediction_net)

    @classmethod
    def init(
        cls,
        vocab_sizes: Sequence[int],
        rng: np.random.Generator,
        emb_dim: int = 32,
        hidden: Sequence[int] = RANK_HIDDEN,
        init_pctr: float = 0.05,
        emb_scale: float = 0.1,
    ) -> "RankModel":
        tables = [rng.normal(0.0, emb_scale, size=(v, emb_dim)) for v in vocab_sizes]
        pred = Mlp.init(rng, emb_dim * len(vocab_sizes), hidden, out_bias=float(np.log(init_pctr / (1 - init_pctr))))
        return cls(vocab_sizes, tables, pred)


def check_capacity_gap(teacher: RankModel, student: PreRankModel) -> None:
    if teacher.param_count() <= student.param_count():
        raise ValueError(
            f"ranking model ({teacher.param_count()} params) must be larger than "
            f"the pre-ranking model ({student.param_count()} params)"
        )


def load_model(path: str | Path, world_digest: str | None = None) -> EmbeddingMlpModel:
    """Load a checkpoint; a digest mismatch against the current world is an error."""
    arrays, meta = load_archive(path)
    if meta.get("format") != "coprlab-checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    if world_digest is not None and meta["world_digest"] != world_digest:
        raise ValueError(f"{path} was trained on a different world (digest {meta['world_digest'][:12]}...)")
    vocab = meta["vocab_sizes"]
    tables = [arrays[f"emb.{k}"] for k in range(len(vocab))]

    def net(prefix, dims):
        n = len(dims) - 1
        return Mlp([arrays[f"{prefix}.W{k}"] for k in range(n)], [arrays[f"{prefix}.b{k}"] for k in range(n)])

    pred = net("pred", meta["prediction_dims"])
    relax = None if meta["relaxation_dims"] is None else net("relax", meta["relaxation_dims"])
    if meta["kind"] == "rank":
        return RankModel(vocab, tables, pred)
    return PreRankModel(vocab, tables, pred, relax)


def checkpoint_meta(path: str | Path) -> dict:
    return load_archive(path)[1]


# ---- functional surface -------------------------------------------------


def embed_concat(model: EmbeddingMlpModel, user_feats, ad_feats, ctx_feats) -> np.ndarray:
    """Concatenate the per-field embeddings of one (user, ad, context) triple."""
    feats = np.concatenate([np.atleast_1d(user_feats), np.atleast_1d(ad_feats), np.atleast_1d(ctx_feats)])
    return model.embed(feats[None, :])[0]


def _as_rows(model: EmbeddingMlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rows = x[None, :] if x.ndim == 1 else x
    if rows.shape[1] != model.in_dim:
        raise ValueError(f"representation length {rows.shape[1]} != model input {model.in_dim}")
    return rows


def forward_pctr(model: EmbeddingMlpModel, x):
    x = np.asarray(x)
    logit, _ = model.prediction_net.forward(_as_rows(model, x))
    p = sigmoid(logit)
    return float(p[0]) if x.ndim == 1 else p


def forward_alpha(model: EmbeddingMlpModel, x):
    if model.relaxation_net is None:
        raise ValueError("model has no relaxation net")
    x = np.asarray(x)
    z, _ = model.relaxation_net.forward(_as_rows(model, x))
    a = alpha_from_preactivation(z)
    return float(a[0]) if x.ndim == 1 else a


def sgd_step(model: EmbeddingMlpModel, grads: dict[str, np.ndarray], lr: float) -> EmbeddingMlpModel:
    """In-place ``p -= lr * g`` over every parameter; returns ``model``."""
    params = model.params()
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(set(grads) ^ set(params))} do not match the model")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
    if lr == 0:
        return model
    for name, p in params.items():
        p -= lr * grads[name]
    return model
