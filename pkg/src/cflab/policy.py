"""Plackett-Luce ranking policies with linear scoring.

A policy places ``cutoff`` documents by repeatedly drawing from a softmax over
the documents that are still unplaced.  Besides single-query helpers, the
module offers batched kernels over padded ``(queries, docs)`` score arrays,
which the training code relies on.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ValidationError

CHECKPOINT_FORMAT = "cflab.ranking_policy"
CHECKPOINT_VERSION = 1
EXACT_MAX_DOCS = 6


@dataclass(frozen=True, eq=False)
class ExaminationModel:
    """Per-rank examination (``alpha``) and trust offset (``beta``).

    Ranks beyond the cutoff receive zero examination.
    """

    kind: str
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        beta = np.zeros_like(alpha) if self.beta is None else np.asarray(self.beta, dtype=float)
        if self.kind not in ("pbm", "trust_bias"):
            raise ConfigError(f"unknown examination kind {self.kind!r}")
        if alpha.ndim != 1 or beta.shape != alpha.shape or alpha.size == 0:
            raise ConfigError("alpha and beta must be equal-length non-empty vectors")
        total = alpha + beta
        if np.any(alpha < 0) or np.any(beta < 0) or np.any(total > 1 + 1e-12):
            raise ConfigError("alpha, beta and alpha + beta must lie in [0, 1]")
        if self.kind == "pbm" and np.any(beta != 0):
            raise ConfigError("position-based examination has beta = 0")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def cutoff(self) -> int:
        return int(self.alpha.size)

    @property
    def Z(self) -> float:
        """Total expected examination per ranking."""
        return float(self.alpha.sum())

    @property
    def Z_omega(self) -> float:
        """Total metric weight per ranking, ``sum(alpha + beta)``."""
        return float((self.alpha + self.beta).sum())

    @property
    def omega(self) -> np.ndarray:
        return self.alpha + self.beta

    @property
    def beta_alpha_max(self) -> float:
        return float(np.max(self.beta / self.alpha)) if np.any(self.beta) else 0.0

    def __eq__(self, other):
        if not isinstance(other, ExaminationModel):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.alpha, other.alpha) and np.array_equal(
            self.beta, other.beta
        )

    __hash__ = None


def examination_defaults(kind: str, cutoff: int = 5) -> ExaminationModel:
    """Default examination parameters.

    ``pbm``: ``alpha_k = 1 / k**2``.  ``trust_bias``: fixed five-rank vectors.
    """
    if kind == "pbm":
        alpha = 1.0 / np.arange(1, cutoff + 1) ** 2
        return ExaminationModel("pbm", alpha, np.zeros(cutoff))
    if kind == "trust_bias":
        alpha = np.array([0.35, 0.53, 0.55, 0.54, 0.52])
        beta = np.array([0.65, 0.26, 0.15, 0.11, 0.08])
        if cutoff > alpha.size:
            raise ConfigError(f"trust-bias defaults cover {alpha.size} ranks, cutoff {cutoff} requested")
        return ExaminationModel("trust_bias", alpha[:cutoff], beta[:cutoff])
    raise ConfigError(f"unknown examination kind {kind!r}")


@dataclass(frozen=True, eq=False)
class StochasticRankingPolicy:
    """Plackett-Luce policy with scores ``features @ weights / temperature``."""

    weights: np.ndarray
    cutoff: int = 5
    temperature: float = 1.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1:
            raise ConfigError("weights must be a vector")
        if self.cutoff < 1:
            raise ConfigError("cutoff must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def scores(self, features) -> np.ndarray:
        return np.asarray(features) @ self.weights / self.temperature

    def with_weights(self, weights) -> "StochasticRankingPolicy":
        return replace(self, weights=weights)

    def to_text(self) -> str:
        return json.dumps({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "cutoff": self.cutoff,
            "temperature": self.temperature,
            "weights": self.weights.tolist(),
        }, indent=2)

    @classmethod
    def from_text(cls, text: str) -> "StochasticRankingPolicy":
        obj = json.loads(text)
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError("not a ranking-policy checkpoint")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {obj.get('version')}")
        return cls(np.array(obj["weights"]), cutoff=obj["cutoff"], temperature=obj["temperature"])

    def __eq__(self, other):
        if not isinstance(other, StochasticRankingPolicy):
            return NotImplemented
        return (
            self.cutoff == other.cutoff
            and self.temperature == other.temperature
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


@dataclass(frozen=True)
class ExposureProfile:
    """Expected examination ``rho`` and metric weight ``omega`` per document."""

    rho: np.ndarray
    omega: np.ndarray
    n_samples: int
    exact: bool = False


# ---------------------------------------------------------------------------
# batched kernels on padded score arrays

def masked_scores(scores, mask=None):
    scores = np.asarray(scores, dtype=float)
    if mask is None:
        return scores
    return np.where(mask, scores, -np.inf)


def sample_from_scores(scores, cutoff, n_samples, rng, mask=None):
    """Draw PL rankings via Gumbel-perturbed top-k.

    ``scores`` has shape ``(..., D)``; the result has shape
    ``(..., n_samples, cutoff)`` of document indices.
    """
    s = masked_scores(scores, mask)
    gumbel = rng.gumbel(size=s.shape[:-1] + (n_samples, s.shape[-1]))
    keys = s[..., None, :] + gumbel
    top = np.argpartition(-keys, cutoff - 1, axis=-1)[..., :cutoff] if cutoff < s.shape[-1] else None
    if top is None:
        return np.argsort(-keys, axis=-1, kind="stable")
    top_keys = np.take_along_axis(keys, top, axis=-1)
    order = np.argsort(-top_keys, axis=-1, kind="stable")
    return np.take_along_axis(top, order, axis=-1)


def pl_log_prob_and_score_grad(scores, rankings, mask=None):
    """Log-probabilities of rankings and their gradients w.r.t. the scores.

    Parameters
    ----------
    scores : array (..., D)
    rankings : int array (..., M, K)
    mask : bool array (..., D), optional

    Returns
    -------
    log_prob : array (..., M)
    score_grad : array (..., M, D)
        ``d log pi(y) / d s_d = sum_k [1(y_k = d) - p_k(d)]``.
    """
    s = masked_scores(scores, mask)[..., None, :]
    s = np.broadcast_to(s, rankings.shape[:-1] + (s.shape[-1],))
    available = np.isfinite(s).copy()
    log_prob = np.zeros(rankings.shape[:-1])
    grad = np.zeros(s.shape)
    for k in range(rankings.shape[-1]):
        chosen = rankings[..., k : k + 1]
        s_avail = np.where(available, s, -np.inf)
        top = np.max(s_avail, axis=-1, keepdims=True)
        ex = np.exp(s_avail - top)
        norm = ex.sum(axis=-1, keepdims=True)
        log_prob += (np.take_along_axis(s, chosen, axis=-1) - top - np.log(norm))[..., 0]
        grad -= ex / norm
        np.put_along_axis(grad, chosen, np.take_along_axis(grad, chosen, axis=-1) + 1.0, axis=-1)
        np.put_along_axis(available, chosen, False, axis=-1)
    return log_prob, grad


def rank_weights_per_doc(rankings, n_docs_padded, rank_weights):
    """Scatter per-rank weights onto documents: ``out[..., m, d] = w[rank of d]``."""
    out = np.zeros(rankings.shape[:-1] + (n_docs_padded,))
    w = np.broadcast_to(np.asarray(rank_weights, float)[: rankings.shape[-1]], rankings.shape)
    np.put_along_axis(out, rankings, w, axis=-1)
    return out


def dcg_discounts(cutoff: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, cutoff + 2))


def ideal_dcg(grades, cutoff, mask=None):
    g = np.asarray(grades, dtype=float)
    if mask is not None:
        g = np.where(mask, g, -np.inf)
    top = -np.sort(-g, axis=-1)[..., :cutoff]
    top = np.where(np.isfinite(top), top, 0.0)
    disc = dcg_discounts(cutoff)[: top.shape[-1]]
    return (top * disc).sum(axis=-1)


def ndcg_of_rankings(rankings, grades, cutoff, mask=None):
    """NDCG@cutoff of rankings ``(..., M, K)`` for grades ``(..., D)``.

    Queries whose ideal DCG is zero score 1.0.
    """
    g = np.asarray(grades, dtype=float)[..., None, :]
    gains = np.take_along_axis(np.broadcast_to(g, rankings.shape[:-1] + (g.shape[-1],)), rankings[..., :cutoff], -1)
    dcg = (gains * dcg_discounts(cutoff)[: gains.shape[-1]]).sum(axis=-1)
    ideal = ideal_dcg(grades, cutoff, mask)[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ideal > 0, dcg / np.where(ideal > 0, ideal, 1.0), 1.0)


# ---------------------------------------------------------------------------
# single-query API

def _check_query(policy, query):
    if query.n_docs < policy.cutoff:
        raise ValidationError(
            f"query {query.query_id} has {query.n_docs} documents, fewer than cutoff {policy.cutoff}"
        )


def _check_ranking(policy, query, ranking):
    r = np.asarray(ranking)
    if (
        r.ndim != 1
        or r.size != policy.cutoff
        or not np.issubdtype(r.dtype, np.integer)
        or r.min(initial=0) < 0
        or r.max(initial=0) >= query.n_docs
        or np.unique(r).size != r.size
    ):
        raise ValidationError(f"invalid ranking {ranking!r} for query {query.query_id}")
    return r


def sample_rankings(policy, query, n_samples, rng) -> np.ndarray:
    """``n_samples`` independent rankings, shape ``(n_samples, cutoff)``."""
    _check_query(policy, query)
    return sample_from_scores(policy.scores(query.features), policy.cutoff, n_samples, rng)


def sample_ranking(policy, query, rng) -> np.ndarray:
    return sample_rankings(policy, query, 1, rng)[0]


def log_prob(policy, query, ranking) -> float:
    r = _check_ranking(policy, query, ranking)
    lp, _ = pl_log_prob_and_score_grad(policy.scores(query.features), r[None, :])
    return float(lp[0])


def grad_log_prob(policy, query, ranking) -> np.ndarray:
    """Gradient of ``log_prob`` with respect to the policy weights."""
    r = _check_ranking(policy, query, ranking)
    _, g = pl_log_prob_and_score_grad(policy.scores(query.features), r[None, :])
    return g[0] @ query.features / policy.temperature


def enumerate_rankings(policy, query):
    """All length-``cutoff`` rankings with their exact probabilities."""
    _check_query(policy, query)
    if query.n_docs > EXACT_MAX_DOCS:
        raise ValidationError(f"exact enumeration is limited to {EXACT_MAX_DOCS} documents")
    rankings = np.array(list(itertools.permutations(range(query.n_docs), policy.cutoff)), dtype=np.int64)
    lp, _ = pl_log_prob_and_score_grad(policy.scores(query.features), rankings)
    return rankings, np.exp(lp)


def estimate_exposure(policy, query, model: ExaminationModel, n_samples: int, rng=None, exact=False) -> ExposureProfile:
    """Expected ``alpha`` (rho) and ``alpha + beta`` (omega) per document."""
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    if model.cutoff < policy.cutoff:
        raise ConfigError("examination model covers fewer ranks than the policy cutoff")
    if exact:
        rankings, probs = enumerate_rankings(policy, query)
    else:
        rankings = sample_rankings(policy, query, n_samples, rng)
        probs = np.full(n_samples, 1.0 / n_samples)
    rho = probs @ rank_weights_per_doc(rankings, query.n_docs, model.alpha)
    omega = probs @ rank_weights_per_doc(rankings, query.n_docs, model.omega)
    return ExposureProfile(rho, omega, int(rankings.shape[0]), exact)


def ndcg_at_k(ranking, grades, cutoff) -> float:
    """NDCG@cutoff of one ranking (gain = grade, discount 1/log2(rank+1))."""
    r = np.asarray(ranking)[None, :]
    return float(ndcg_of_rankings(r, np.asarray(grades), cutoff)[0])


def policy_ndcg(policy, dataset, n_samples=100, rng=None, cutoff=None) -> float:
    """Expected NDCG@cutoff averaged over the queries of ``dataset``.

    Pass an ``int`` seed (or a fresh generator) for common random numbers
    across the policies being compared.
    """
    cutoff = cutoff or policy.cutoff
    rng = np.random.default_rng(rng)
    dense = dataset.padded
    scores = policy.scores(dense.features)
    rankings = sample_from_scores(scores, policy.cutoff, n_samples, rng, dense.mask)
    return float(ndcg_of_rankings(rankings, dense.grades, cutoff, dense.mask).mean())
