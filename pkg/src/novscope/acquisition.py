"""Acquisition policies: expected improvement, maximum uncertainty and BEACON novelty."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from novscope.surrogate import Posterior

POLICIES = ("ei", "mu", "beacon")
NOVELTY_SPACES = ("response", "latent")


class BudgetExceeded(ValueError):
    """No unmeasured candidate is left to select."""


@dataclass(frozen=True, eq=False)
class EliteSet:
    """Top fraction of the acquired responses with their z-score statistics.

    ``members`` holds positions into the acquisition history (0-based).
    ``std`` is the floored population standard deviation; ``raw_std`` is
    the value before flooring.
    """

    members: np.ndarray
    responses: np.ndarray
    mean: float
    std: float
    raw_std: float

    @property
    def size(self) -> int:
        return self.members.size


@dataclass(frozen=True, eq=False)
class AcquisitionDecision:
    index: int
    score: float
    scores: np.ndarray
    policy: str


def std_floor(mean: float) -> float:
    return 1e-8 * max(1.0, abs(mean))


def select_elite(history, fraction: float = 0.2) -> EliteSet:
    """Pick the ``max(1, ceil(fraction * n))`` largest responses.

    ``history`` is a sequence of responses in acquisition order, or of
    ``(index, y)`` pairs. Ties go to the earlier acquisition.
    """
    y = _responses(history)
    n = y.size
    if n == 0:
        raise ValueError("elite selection needs a nonempty history")
    if not 0 < fraction <= 1:
        raise ValueError(f"elite fraction must lie in (0, 1], got {fraction}")
    m = max(1, math.ceil(fraction * n - 1e-9))
    order = np.argsort(-y, kind="stable")[:m]
    resp = y[order]
    mean = float(resp.mean())
    raw = float(resp.std())
    return EliteSet(members=order, responses=resp, mean=mean, std=max(raw, std_floor(mean)), raw_std=raw)


def _responses(history) -> np.ndarray:
    arr = np.asarray(history, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, 1]
    return arr.ravel()


def thompson_sample(post: Posterior, rng: np.random.Generator) -> np.ndarray:
    """Independent per-candidate draws from N(mean, variance)."""
    eps = rng.standard_normal(post.mean.shape)
    return post.mean + np.sqrt(post.variance) * eps


def knn_mean_distance(dist: np.ndarray, k: int) -> np.ndarray:
    """Row-wise mean of the ``k`` smallest entries (``k`` capped at the row length)."""
    k_eff = min(int(k), dist.shape[1])
    if k_eff < dist.shape[1]:
        dist = np.partition(dist, k_eff - 1, axis=1)[:, :k_eff]
    return np.sort(dist, axis=1).mean(axis=1)


def beacon_score(sample: np.ndarray, elite: EliteSet, k: int = 1) -> np.ndarray:
    """Mean absolute z-scored distance from each sampled response to its k nearest elites."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    s = (np.asarray(sample, dtype=np.float64) - elite.mean) / elite.std
    e = (elite.responses - elite.mean) / elite.std
    return knn_mean_distance(np.abs(s[:, None] - e[None, :]), k)


def beacon_latent_score(latents: np.ndarray, elite_latents: np.ndarray, k: int = 1) -> np.ndarray:
    """k-NN mean Euclidean distance from candidate latents to the elite members' latents."""
    diff = latents[:, None, :] - elite_latents[None, :, :]
    return knn_mean_distance(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)), k)


def ei_score(post: Posterior, best: float) -> np.ndarray:
    mu = post.mean
    sigma = np.sqrt(post.variance)
    imp = mu - best
    out = np.maximum(imp, 0.0)
    pos = sigma > 0
    if np.any(pos):
        u = imp[pos] / sigma[pos]
        out[pos] = imp[pos] * ndtr(u) + sigma[pos] * np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return out


def mu_score(post: Posterior) -> np.ndarray:
    return np.sqrt(post.variance)


def select_next(scores: np.ndarray, measured_mask: np.ndarray, policy: str = "") -> AcquisitionDecision:
    """Arg-max over unmeasured candidates; ties go to the lowest flat index."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(measured_mask, dtype=bool)
    open_idx = np.flatnonzero(~mask)
    if open_idx.size == 0:
        raise BudgetExceeded("budget exceeds search space")
    open_scores = scores[open_idx]
    j = int(np.argmax(open_scores))
    return AcquisitionDecision(
        index=int(open_idx[j]), score=float(open_scores[j]), scores=open_scores, policy=policy
    )


@dataclass(frozen=True)
class AcquisitionConfig:
    elite_fraction: float = 0.2
    k: int = 1
    novelty_space: str = "response"

    def __post_init__(self):
        if not 0 < self.elite_fraction <= 1:
            raise ValueError(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.novelty_space not in NOVELTY_SPACES:
            raise ValueError(f"novelty_space must be one of {NOVELTY_SPACES}, got {self.novelty_space!r}")


def score_policy(
    policy: str,
    post: Posterior,
    history_y: Sequence[float],
    config: AcquisitionConfig,
    rng: Optional[np.random.Generator] = None,
    history_latents: Optional[np.ndarray] = None,
    counters: Optional[dict] = None,
) -> np.ndarray:
    """Score every candidate under one policy.

    ``history_latents`` (latent vectors of the acquired points, in order) is
    needed only for BEACON in latent novelty mode. ``counters`` tallies the
    elite/Thompson/EI/MU operations performed.
    """
    counters = counters if counters is not None else {}
    y = np.asarray(history_y, dtype=np.float64)
    if policy == "ei":
        counters["ei"] = counters.get("ei", 0) + 1
        return ei_score(post, float(y.max()))
    if policy == "mu":
        counters["mu"] = counters.get("mu", 0) + 1
        return mu_score(post)
    if policy == "beacon":
        elite = select_elite(y, config.elite_fraction)
        counters["elite"] = counters.get("elite", 0) + 1
        if config.novelty_space == "latent":
            if history_latents is None or post.latents is None:
                raise ValueError("latent novelty needs latents for candidates and history")
            return beacon_latent_score(post.latents, history_latents[elite.members], config.k)
        if rng is None:
            raise ValueError("BEACON needs a generator for Thompson sampling")
        sample = thompson_sample(post, rng)
        counters["thompson"] = counters.get("thompson", 0) + 1
        return beacon_score(sample, elite, config.k)
    raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
