"""Click simulation, interaction logs and logging-propensity estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .dataset import RankingDataset, RelevanceTransform, relevance_probability
from .errors import ConfigError, EmptyDatasetError, MissingPropensityError, ParseError, ValidationError
from .policy import ExaminationModel, examination_defaults, sample_from_scores

_CHUNK = 1 << 16


@dataclass(frozen=True)
class ClickModel:
    examination: ExaminationModel
    transform: RelevanceTransform
    adversarial: bool = False

    @property
    def cutoff(self) -> int:
        return self.examination.cutoff

    @classmethod
    def pbm(cls, cutoff=5):
        return cls(examination_defaults("pbm", cutoff), RelevanceTransform.pbm_sparse())

    @classmethod
    def trust_bias(cls, cutoff=5, adversarial=False):
        return cls(examination_defaults("trust_bias", cutoff), RelevanceTransform.trust_bias(), adversarial)

    @classmethod
    def named(cls, name: str, cutoff=5):
        factories = {
            "pbm": lambda: cls.pbm(cutoff),
            "trust_bias": lambda: cls.trust_bias(cutoff),
            "adversarial": lambda: cls.trust_bias(cutoff, adversarial=True),
        }
        if name not in factories:
            raise ConfigError(f"unknown click model {name!r}; expected one of {sorted(factories)}")
        return factories[name]()

    def click_probs(self, grades_at_ranks) -> np.ndarray:
        """Click probabilities for grades laid out by rank along the last axis."""
        g = np.asarray(grades_at_ranks)
        k = g.shape[-1]
        if k > self.cutoff:
            raise ValidationError(f"{k} ranks exceed the click-model cutoff {self.cutoff}")
        p = self.examination.alpha[:k] * relevance_probability(self.transform, g) + self.examination.beta[:k]
        return 1.0 - p if self.adversarial else p


def click_probability(model: ClickModel, grade: int, rank: int) -> float:
    """Click probability of a document with ``grade`` shown at 1-based ``rank``."""
    if rank < 1:
        raise ValidationError("ranks are 1-based")
    if rank > model.cutoff:
        return 0.0
    pr = relevance_probability(model.transform, grade)
    p = model.examination.alpha[rank - 1] * pr + model.examination.beta[rank - 1]
    return float(1.0 - p if model.adversarial else p)


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """Append-only record of displayed rankings and their clicks.

    ``query_ids`` hold dataset query ids; ``rankings`` hold per-query document
    indices in canonical order.
    """

    query_ids: np.ndarray
    rankings: np.ndarray
    clicks: np.ndarray
    logging_policy_ref: str = ""

    def __post_init__(self):
        q = np.asarray(self.query_ids, dtype=np.int64).reshape(-1)
        r = np.asarray(self.rankings, dtype=np.int64)
        c = np.asarray(self.clicks, dtype=bool)
        if r.ndim != 2:
            r = r.reshape(q.size, -1)
        if c.shape != r.shape or r.shape[0] != q.size:
            raise ValidationError("clicks must have the same shape as the displayed rankings")
        for arr in (q, r, c):
            arr.setflags(write=False)
        object.__setattr__(self, "query_ids", q)
        object.__setattr__(self, "rankings", r)
        object.__setattr__(self, "clicks", c)

    @property
    def N(self) -> int:
        return int(self.query_ids.size)

    def __len__(self):
        return self.N

    @property
    def cutoff(self) -> int:
        return int(self.rankings.shape[1])

    def entries(self):
        for q, r, c in zip(self.query_ids, self.rankings, self.clicks):
            yield int(q), r.tolist(), c.astype(int).tolist()

    def extend(self, other: "InteractionLog") -> "InteractionLog":
        """A new log holding this log's entries followed by ``other``'s."""
        if self.N and other.N and self.cutoff != other.cutoff:
            raise ValidationError("cannot merge logs with different cutoffs")
        if not other.N:
            return self
        if not self.N:
            return InteractionLog(other.query_ids, other.rankings, other.clicks, self.logging_policy_ref)
        return InteractionLog(
            np.concatenate([self.query_ids, other.query_ids]),
            np.concatenate([self.rankings, other.rankings]),
            np.concatenate([self.clicks, other.clicks]),
            self.logging_policy_ref,
        )

    def save(self, path) -> None:
        """Write ``qid,doc_1,...,doc_K,click_bits`` lines."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# logging_policy={self.logging_policy_ref}\n")
            for q, r, c in zip(self.query_ids, self.rankings, self.clicks):
                fh.write(",".join([str(q), *map(str, r), "".join("1" if b else "0" for b in c)]) + "\n")

    @classmethod
    def load(cls, path) -> "InteractionLog":
        qids, ranks, clicks, ref = [], [], [], ""
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if line.startswith("# logging_policy="):
                        ref = line.split("=", 1)[1]
                    continue
                parts = line.split(",")
                try:
                    q, docs, bits = int(parts[0]), [int(p) for p in parts[1:-1]], parts[-1]
                except (ValueError, IndexError):
                    raise ParseError("expected 'qid,doc_1,...,doc_K,click_bits'", lineno) from None
                if len(bits) != len(docs) or set(bits) - {"0", "1"}:
                    raise ParseError("click bits must be a 0/1 string with one bit per rank", lineno)
                qids.append(q)
                ranks.append(docs)
                clicks.append([b == "1" for b in bits])
        if not qids:
            return cls(np.zeros(0, np.int64), np.zeros((0, 0), np.int64), np.zeros((0, 0), bool), ref)
        return cls(np.array(qids), np.array(ranks), np.array(clicks), ref)


def query_positions(dataset: RankingDataset, query_ids) -> np.ndarray:
    """Map query ids to positions in ``dataset``."""
    index = {q.query_id: i for i, q in enumerate(dataset.queries)}
    try:
        return np.fromiter((index[int(q)] for q in query_ids), dtype=np.int64, count=len(query_ids))
    except KeyError as exc:
        raise MissingPropensityError(f"query {exc.args[0]} is not part of the dataset") from None


def simulate(N: int, policy, dataset: RankingDataset, model: ClickModel, rng, logging_policy_ref: str = "") -> InteractionLog:
    """Sample ``N`` interactions: uniform query, PL ranking, independent clicks per rank."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot simulate on an empty dataset")
    if policy.cutoff != model.cutoff:
        raise ConfigError(f"policy cutoff {policy.cutoff} differs from click-model cutoff {model.cutoff}")
    K = policy.cutoff
    if N == 0:
        return InteractionLog(np.zeros(0, np.int64), np.zeros((0, K), np.int64), np.zeros((0, K), bool), logging_policy_ref)
    dense = dataset.padded
    if dense.n_docs.min() < K:
        raise ValidationError("every query needs at least cutoff documents")
    scores = policy.scores(dense.features)
    pos = rng.integers(len(dataset), size=N)
    rankings = np.empty((N, K), dtype=np.int64)
    clicks = np.empty((N, K), dtype=bool)
    for start in range(0, N, _CHUNK):
        p = pos[start : start + _CHUNK]
        r = sample_from_scores(scores[p], K, 1, rng, dense.mask[p])[:, 0, :]
        g = np.take_along_axis(dense.grades[p], r, axis=1)
        rankings[start : start + p.size] = r
        clicks[start : start + p.size] = rng.random(r.shape) < model.click_probs(g)
    qids = np.array([q.query_id for q in dataset.queries])[pos]
    return InteractionLog(qids, rankings, clicks, logging_policy_ref)


@dataclass(frozen=True, eq=False)
class LogAggregate:
    """Per (query, document) sufficient statistics of a log, aligned with a dataset.

    Arrays have shape ``(Q, D)`` with ``D`` the padded candidate count.
    ``rank_counts[q, k, d]`` counts how often ``d`` was displayed at rank ``k``.
    """

    dataset: RankingDataset
    N: int
    counts: np.ndarray  # (Q,) interactions per query
    clicks: np.ndarray  # (Q, D) click totals
    alpha_sum: np.ndarray  # (Q, D) sum of alpha at displayed ranks
    beta_sum: np.ndarray  # (Q, D) sum of beta at displayed ranks
    rank_counts: np.ndarray  # (Q, K, D)
    rank_clicks: np.ndarray  # (Q, K, D)

    @cached_property
    def logged(self) -> np.ndarray:
        return self.counts > 0


def aggregate_log(log: InteractionLog, dataset: RankingDataset, examination: ExaminationModel) -> LogAggregate:
    dense = dataset.padded
    Q, D = dense.mask.shape
    K = log.cutoff if log.N else examination.cutoff
    if K > examination.cutoff:
        raise ConfigError("log cutoff exceeds the examination model")
    pos = query_positions(dataset, log.query_ids)
    if log.N and (log.rankings.max() >= D or np.any(log.rankings >= dense.n_docs[pos, None])):
        raise ValidationError("log references documents outside the dataset")
    counts = np.bincount(pos, minlength=Q)
    flat_rank = (pos[:, None] * K + np.arange(K)) * D + log.rankings
    rank_counts = np.bincount(flat_rank.ravel(), minlength=Q * K * D).reshape(Q, K, D).astype(float)
    rank_clicks = np.bincount(flat_rank.ravel(), weights=log.clicks.ravel().astype(float), minlength=Q * K * D)
    rank_clicks = rank_clicks.reshape(Q, K, D)
    alpha = examination.alpha[:K]
    beta = examination.beta[:K]
    return LogAggregate(
        dataset=dataset,
        N=log.N,
        counts=counts,
        clicks=rank_clicks.sum(axis=1),
        alpha_sum=np.einsum("qkd,k->qd", rank_counts, alpha),
        beta_sum=np.einsum("qkd,k->qd", rank_counts, beta),
        rank_counts=rank_counts,
        rank_clicks=rank_clicks,
    )


@dataclass(frozen=True, eq=False)
class PropensityEstimate:
    """Frequency estimates of the logging policy's exposure.

    ``rho_hat``/``omega_hat`` are unclipped; ``rho_train`` applies the clip
    floor and is what training objectives divide by.
    """

    aggregate: LogAggregate
    rho_hat: np.ndarray
    omega_hat: np.ndarray
    clip_floor: float

    @property
    def rho_train(self) -> np.ndarray:
        return np.maximum(self.rho_hat, self.clip_floor)

    @property
    def logged(self) -> np.ndarray:
        return self.aggregate.logged

    def rank_frequencies(self) -> np.ndarray:
        """``freq[q, k, d]``: fraction of query ``q``'s rankings with ``d`` at rank ``k``."""
        n = np.maximum(self.aggregate.counts, 1)[:, None, None]
        return self.aggregate.rank_counts / n

    def action_propensity(self, query_position: int, ranking) -> float:
        """Frequency estimate of the probability of a full displayed ranking."""
        if not self.logged[query_position]:
            raise MissingPropensityError(f"query at position {query_position} was never logged")
        freq = self.rank_frequencies()[query_position]
        ranking = np.asarray(ranking)
        return float(np.prod(freq[np.arange(ranking.size), ranking]))

    def require(self, query_position: int) -> None:
        if not self.logged[query_position]:
            qid = self.aggregate.dataset.queries[query_position].query_id
            raise MissingPropensityError(f"query {qid} is absent from the log")


def estimate_propensities(
    log: InteractionLog,
    examination: ExaminationModel,
    dataset: RankingDataset,
    clip: bool = True,
) -> PropensityEstimate:
    """Average examination of each document over its query's logged rankings.

    With ``clip`` the training floor is ``10 / sqrt(N)``.
    """
    if log.N == 0:
        raise EmptyDatasetError("cannot estimate propensities from an empty log")
    agg = aggregate_log(log, dataset, examination)
    n = np.maximum(agg.counts, 1)[:, None]
    rho = agg.alpha_sum / n
    omega = (agg.alpha_sum + agg.beta_sum) / n
    floor = 10.0 / math.sqrt(log.N) if clip else 0.0
    return PropensityEstimate(agg, rho, omega, floor)
