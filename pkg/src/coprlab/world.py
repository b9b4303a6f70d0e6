"""Synthetic ad world: users, ads, bids and a hidden click oracle.

Feature layout is one categorical id per field::

    field 0  user id          (vocab n_users)
    field 1  user group       (vocab n_user_groups)
    field 2  ad id            (vocab n_ads)
    field 3  ad category      (vocab n_ad_categories)
    field 4  context          (vocab n_contexts)

The click oracle is ``sigmoid(bias + <u, a> + ctx_offset)`` over hidden
factor vectors. Models only ever see the feature ids above.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.optimize import brentq

from .archive import digest, load_archive, save_archive

CATALOG_VERSION = 1
N_FIELDS = 5


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 1000
    n_ads: int = 5000
    n_user_groups: int = 8
    n_ad_categories: int = 40
    n_contexts: int = 4
    hidden_dim: int = 8
    # interaction strength of the hidden factors
    group_scale: float = 0.45
    individual_scale: float = 0.25
    # ad quality = per-category part + per-ad part
    category_quality_scale: float = 1.2
    ad_quality_scale: float = 0.3
    context_scale: float = 0.3
    # log-normal bids; bid_mean is the distribution mean, not the median
    bid_mean: float = 1000.0
    bid_sigma: float = 1.3998
    # correlation of log-bid with standardized ad quality (cheap ads click more)
    bid_quality_corr: float = -0.95
    base_ctr: float = 0.05

    def __post_init__(self) -> None:
        for key in ("n_users", "n_ads", "n_user_groups", "n_ad_categories", "n_contexts", "hidden_dim"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(key, f"must be a positive integer, got {value!r}")
        if self.hidden_dim < 2:
            raise ConfigError("hidden_dim", "must be at least 2")
        for key in ("group_scale", "individual_scale", "category_quality_scale", "ad_quality_scale", "context_scale", "bid_sigma"):
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(key, f"must be a non-negative number, got {value!r}")
        if not isinstance(self.bid_mean, (int, float)) or self.bid_mean <= 0:
            raise ConfigError("bid_mean", f"must be positive, got {self.bid_mean!r}")
        if not isinstance(self.bid_quality_corr, (int, float)) or not -1 <= self.bid_quality_corr <= 1:
            raise ConfigError("bid_quality_corr", f"must lie in [-1, 1], got {self.bid_quality_corr!r}")
        if not isinstance(self.base_ctr, (int, float)) or not 0 < self.base_ctr < 1:
            raise ConfigError("base_ctr", f"must lie in (0, 1), got {self.base_ctr!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown world key")
        return cls(**dict(data))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return (self.n_users, self.n_user_groups, self.n_ads, self.n_ad_categories, self.n_contexts)

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass(frozen=True, eq=False)
class Catalog:
    config: WorldConfig
    seed: int
    user_features: np.ndarray  # (n_users, 2): id, group
    ad_features: np.ndarray  # (n_ads, 2): id, category
    bids: np.ndarray  # (n_ads,)
    user_factors: np.ndarray  # (n_users, hidden_dim)
    ad_factors: np.ndarray  # (n_ads, hidden_dim)
    context_offsets: np.ndarray  # (n_contexts,)
    bias: float

    def __post_init__(self) -> None:
        for name in ("user_features", "ad_features", "bids", "user_factors", "ad_factors", "context_offsets"):
            getattr(self, name).setflags(write=False)

    @property
    def n_users(self) -> int:
        return self.config.n_users

    @property
    def n_ads(self) -> int:
        return self.config.n_ads

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return self.config.vocab_sizes

    @property
    def context_vocab(self) -> int:
        return self.config.n_contexts

    def features(self, users, ads, contexts) -> np.ndarray:
        """Stack feature ids for broadcast-compatible (user, ad, context) arrays.

        Returns an int64 array of shape ``broadcast_shape + (5,)``.
        """
        users, ads, contexts = np.broadcast_arrays(np.asarray(users), np.asarray(ads), np.asarray(contexts))
        _check_range(users, self.n_users, "user")
        _check_range(ads, self.n_ads, "ad")
        _check_range(contexts, self.context_vocab, "context")
        out = np.empty(users.shape + (N_FIELDS,), dtype=np.int64)
        out[..., 0:2] = self.user_features[users]
        out[..., 2:4] = self.ad_features[ads]
        out[..., 4] = contexts
        return out

    def save(self, path: str | Path) -> None:
        arrays = {
            "user_features": self.user_features,
            "ad_features": self.ad_features,
            "bids": self.bids,
            "user_factors": self.user_factors,
            "ad_factors": self.ad_factors,
            "context_offsets": self.context_offsets,
            "bias": np.array(self.bias),
        }
        meta = {"format": "coprlab-catalog", "version": CATALOG_VERSION, "seed": self.seed, "config": self.config.to_dict()}
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        arrays, meta = load_archive(path)
        if meta.get("format") != "coprlab-catalog":
            raise ValueError(f"{path} is not a catalog file")
        if meta.get("version") != CATALOG_VERSION:
            raise ValueError(f"unsupported catalog version {meta.get('version')}")
        return cls(
            config=WorldConfig.from_dict(meta["config"]),
            seed=int(meta["seed"]),
            user_features=arrays["user_features"],
            ad_features=arrays["ad_features"],
            bids=arrays["bids"],
            user_factors=arrays["user_factors"],
            ad_factors=arrays["ad_factors"],
            context_offsets=arrays["context_offsets"],
            bias=float(arrays["bias"].item()),
        )

    def same_as(self, other: "Catalog") -> bool:
        return (
            self.config == other.config
            and self.seed == other.seed
            and self.bias == other.bias
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("user_features", "ad_features", "bids", "user_factors", "ad_factors", "context_offsets")
            )
        )


@dataclass(frozen=True)
class Request:
    user_id: int
    context: int
    candidates: np.ndarray

    def __post_init__(self) -> None:
        if len(self.candidates) < 1:
            raise ValueError("a request needs at least one candidate")


@dataclass(frozen=True)
class RequestBatch:
    """Many requests with the same candidate count, stored column-wise."""

    users: np.ndarray  # (n,)
    contexts: np.ndarray  # (n,)
    candidates: np.ndarray  # (n, m)

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, i: int) -> Request:
        return Request(int(self.users[i]), int(self.contexts[i]), self.candidates[i])


def _check_range(ids: np.ndarray, size: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise IndexError(f"{what} index out of range [0, {size})")


def _logit_sample(user_factors, ad_factors, context_offsets, rng, n: int = 200_000) -> np.ndarray:
    u = rng.integers(len(user_factors), size=n)
    a = rng.integers(len(ad_factors), size=n)
    c = rng.integers(len(context_offsets), size=n)
    return np.einsum("ij,ij->i", user_factors[u], ad_factors[a]) + context_offsets[c]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gen_catalog(config: WorldConfig, seed: int) -> Catalog:
    """Draw a world from ``config``; the result is a pure function of (config, seed)."""
    rng = np.random.default_rng([seed, 0xC0A7])
    h = config.hidden_dim

    user_group = rng.integers(config.n_user_groups, size=config.n_users)
    ad_category = rng.integers(config.n_ad_categories, size=config.n_ads)
    user_features = np.stack([np.arange(config.n_users), user_group], axis=1).astype(np.int64)
    ad_features = np.stack([np.arange(config.n_ads), ad_category], axis=1).astype(np.int64)

    group_centers = rng.normal(0.0, config.group_scale, size=(config.n_user_groups, h))
    category_centers = rng.normal(0.0, config.group_scale, size=(config.n_ad_categories, h))
    user_factors = group_centers[user_group] + rng.normal(0.0, config.individual_scale, size=(config.n_users, h))
    ad_factors = category_centers[ad_category] + rng.normal(0.0, config.individual_scale, size=(config.n_ads, h))
    # coordinate 0 of the user side is pinned to 1 so the ad side carries a per-ad quality term
    user_factors[:, 0] = 1.0
    category_quality = rng.normal(0.0, config.category_quality_scale, size=config.n_ad_categories)
    quality = category_quality[ad_category] + rng.normal(0.0, config.ad_quality_scale, size=config.n_ads)
    ad_factors[:, 0] = quality
    context_offsets = rng.normal(0.0, config.context_scale, size=config.n_contexts)

    # log-bid = mu + sigma * (rho * z_quality + sqrt(1 - rho^2) * noise), so the
    # marginal stays (close to) log-normal while cheap ads tend to click more
    rho = config.bid_quality_corr
    sd = quality.std()
    z_quality = (quality - quality.mean()) / sd if sd > 0 else np.zeros_like(quality)
    noise = rng.standard_normal(config.n_ads)
    mu = np.log(config.bid_mean) - 0.5 * config.bid_sigma**2
    bids = np.exp(mu + config.bid_sigma * (rho * z_quality + np.sqrt(1.0 - rho**2) * noise))

    logits = _logit_sample(user_factors, ad_factors, context_offsets, np.random.default_rng([seed, 0xB1A5]))
    target = config.base_ctr
    bias = brentq(lambda b: float(np.mean(_sigmoid(b + logits))) - target, -30.0, 30.0, xtol=1e-12)

    return Catalog(
        config=config,
        seed=int(seed),
        user_features=user_features,
        ad_features=ad_features,
        bids=bids,
        user_factors=user_factors,
        ad_factors=ad_factors,
        context_offsets=context_offsets,
        bias=float(bias),
    )


def true_ctr(catalog: Catalog, user, ad, context):
    """Ground-truth click probability; vectorised over broadcastable index arrays."""
    user, ad, context = np.asarray(user), np.asarray(ad), np.asarray(context)
    _check_range(user, catalog.n_users, "user")
    _check_range(ad, catalog.n_ads, "ad")
    _check_range(context, catalog.context_vocab, "context")
    z = (
        catalog.bias
        + np.einsum("...j,...j->...", catalog.user_factors[user], catalog.ad_factors[ad])
        + catalog.context_offsets[context]
    )
    # exp form keeps the result strictly inside (0, 1) for any realistic logit
    p = 1.0 / (1.0 + np.exp(-z))
    return float(p) if p.ndim == 0 else p


def gen_request(catalog: Catalog, m: int, rng: np.random.Generator) -> Request:
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > catalog.n_ads:
        raise ValueError(f"m={m} exceeds n_ads={catalog.n_ads}")
    user = int(rng.integers(catalog.n_users))
    context = int(rng.integers(catalog.context_vocab))
    candidates = rng.choice(catalog.n_ads, size=m, replace=False)
    return Request(user, context, candidates.astype(np.int64))


def gen_requests(catalog: Catalog, n: int, m: int, rng: np.random.Generator) -> RequestBatch:
    """``n`` successive :func:`gen_request` draws packed into a batch."""
    users = np.empty(n, dtype=np.int64)
    contexts = np.empty(n, dtype=np.int64)
    candidates = np.empty((n, m), dtype=np.int64)
    for i in range(n):
        r = gen_request(catalog, m, rng)
        users[i], contexts[i], candidates[i] = r.user_id, r.context, r.candidates
    return RequestBatch(users, contexts, candidates)
