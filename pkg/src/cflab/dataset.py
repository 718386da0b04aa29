"""Learning-to-rank datasets: synthetic generation, file loading and the logging ranker.

Datasets are immutable.  Every query keeps its documents in a canonical order
(generation order, or file order for loaded data) so that document indices are
stable identifiers throughout simulation and estimation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, EmptyDatasetError, ParseError, ValidationError
from .policy import StochasticRankingPolicy

MAX_GRADE = 4
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True, eq=False)
class QueryRecord:
    """One query with its candidate documents.

    Attributes
    ----------
    query_id : int
    features : ndarray, shape (n_docs, feature_dim)
    grades : ndarray of int, shape (n_docs,)
    """

    query_id: int
    features: np.ndarray
    grades: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        grades = np.asarray(self.grades)
        if features.ndim != 2 or grades.shape != (features.shape[0],):
            raise ValidationError(
                f"query {self.query_id}: features {features.shape} do not match grades {grades.shape}"
            )
        if grades.size and not np.all(np.equal(np.mod(grades, 1), 0)):
            raise ValidationError(f"query {self.query_id}: grades must be integers")
        grades = grades.astype(np.int64)
        if grades.size and (grades.min() < 0 or grades.max() > MAX_GRADE):
            raise ValidationError(f"query {self.query_id}: grades must lie in [0, {MAX_GRADE}]")
        features.setflags(write=False)
        grades.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "grades", grades)

    @property
    def n_docs(self) -> int:
        return int(self.grades.shape[0])

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.grades, other.grades)
        )

    __hash__ = None


class PaddedQueries(NamedTuple):
    """Dense view of a dataset, padded to the largest candidate set."""

    features: np.ndarray  # (Q, D, F)
    grades: np.ndarray  # (Q, D)
    mask: np.ndarray  # (Q, D) True for real documents
    n_docs: np.ndarray  # (Q,)


@dataclass(frozen=True, eq=False)
class RankingDataset:
    """An immutable collection of queries belonging to one split."""

    queries: tuple
    split: str = "train"
    feature_dim: int = 0
    cutoff: int | None = None

    def __post_init__(self):
        queries = tuple(self.queries)
        object.__setattr__(self, "queries", queries)
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        dim = self.feature_dim or (queries[0].features.shape[1] if queries else 0)
        object.__setattr__(self, "feature_dim", int(dim))
        for q in queries:
            if q.features.shape[1] != self.feature_dim:
                raise ValidationError(
                    f"query {q.query_id} has {q.features.shape[1]} features, expected {self.feature_dim}"
                )
            if self.cutoff is not None and q.n_docs < self.cutoff:
                raise ValidationError(
                    f"query {q.query_id} has {q.n_docs} documents, fewer than the cutoff {self.cutoff}"
                )

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, i):
        return self.queries[i]

    def __eq__(self, other):
        if not isinstance(other, RankingDataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.feature_dim == other.feature_dim
            and self.queries == other.queries
        )

    __hash__ = None

    @cached_property
    def padded(self) -> PaddedQueries:
        if not self.queries:
            raise EmptyDatasetError("dataset has no queries")
        n_docs = np.array([q.n_docs for q in self.queries])
        width = int(n_docs.max())
        n = len(self.queries)
        features = np.zeros((n, width, self.feature_dim))
        grades = np.zeros((n, width), dtype=np.int64)
        mask = np.zeros((n, width), dtype=bool)
        for i, q in enumerate(self.queries):
            features[i, : q.n_docs] = q.features
            grades[i, : q.n_docs] = q.grades
            mask[i, : q.n_docs] = True
        for arr in (features, grades, mask, n_docs):
            arr.setflags(write=False)
        return PaddedQueries(features, grades, mask, n_docs)

    def subset(self, indices: Iterable[int], split: str | None = None) -> "RankingDataset":
        return RankingDataset(
            tuple(self.queries[i] for i in indices),
            split=split or self.split,
            feature_dim=self.feature_dim,
            cutoff=self.cutoff,
        )


class DatasetSplits(NamedTuple):
    train: RankingDataset
    validation: RankingDataset
    test: RankingDataset


@dataclass(frozen=True)
class RelevanceTransform:
    """Affine map from a relevance grade to a relevance probability."""

    kind: str
    slope: float
    offset: float

    def __post_init__(self):
        for g in (0, MAX_GRADE):
            p = self.slope * g + self.offset
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"transform {self.kind} maps grade {g} to {p}, outside [0, 1]")

    @classmethod
    def pbm_sparse(cls):
        return cls("pbm_sparse", 0.025, 0.2)

    @classmethod
    def trust_bias(cls):
        return cls("trust_bias", 0.25, 0.0)

    @classmethod
    def named(cls, kind: str):
        try:
            return {"pbm_sparse": cls.pbm_sparse, "trust_bias": cls.trust_bias}[kind]()
        except KeyError:
            raise ConfigError(f"unknown relevance transform {kind!r}") from None


def relevance_probability(transform: RelevanceTransform, grade):
    """P(R=1) for a grade, or elementwise for an array of grades."""
    g = np.asarray(grade)
    if np.any(g < 0) or np.any(g > MAX_GRADE):
        raise ValidationError(f"grade {grade!r} outside [0, {MAX_GRADE}]")
    p = transform.slope * g + transform.offset
    return float(p) if np.ndim(p) == 0 else p


def generate_synthetic(
    n_queries: int,
    docs_per_query: int,
    feature_dim: int,
    seed: int,
    *,
    grade_probs: Sequence[float] | None = None,
    signal: float = 1.0,
    noise: float = 1.0,
    cutoff: int | None = 5,
    split: str = "train",
) -> RankingDataset:
    """Sample a synthetic dataset with a linear relevance signal.

    Each document's features are ``(grade - 2) * signal * u + noise * eps``
    where ``u`` is a random unit direction shared by all queries and
    ``eps`` is standard normal.  Grades are drawn i.i.d. from
    ``grade_probs`` (uniform over 0..4 by default).
    """
    if n_queries < 1 or docs_per_query < 1 or feature_dim < 1:
        raise ConfigError("n_queries, docs_per_query and feature_dim must all be positive")
    if cutoff is not None and docs_per_query < cutoff:
        raise ConfigError(f"docs_per_query={docs_per_query} is below the cutoff {cutoff}")
    probs = np.full(MAX_GRADE + 1, 1.0 / (MAX_GRADE + 1)) if grade_probs is None else np.asarray(grade_probs, float)
    if probs.shape != (MAX_GRADE + 1,) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0):
        raise ConfigError("grade_probs must be a distribution over grades 0..4")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(feature_dim)
    direction /= np.linalg.norm(direction)
    grades = rng.choice(MAX_GRADE + 1, size=(n_queries, docs_per_query), p=probs)
    eps = rng.standard_normal((n_queries, docs_per_query, feature_dim))
    features = (grades[..., None] - MAX_GRADE / 2) * signal * direction + noise * eps
    queries = tuple(QueryRecord(i, features[i], grades[i]) for i in range(n_queries))
    return RankingDataset(queries, split=split, feature_dim=feature_dim, cutoff=cutoff)


def split_dataset(data: RankingDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplits:
    """Randomly partition queries into train/validation/test."""
    fractions = np.asarray(fractions, float)
    if fractions.shape != (3,) or np.any(fractions < 0) or not math.isclose(fractions.sum(), 1.0):
        raise ConfigError("split fractions must be three non-negative numbers summing to 1")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return DatasetSplits(*(data.subset(sorted(p), s) for p, s in zip(parts, SPLITS)))


def generate_synthetic_splits(n_queries, docs_per_query, feature_dim, seed, **kwargs) -> DatasetSplits:
    """Generate a synthetic dataset and split it 60/20/20."""
    return split_dataset(generate_synthetic(n_queries, docs_per_query, feature_dim, seed, **kwargs), seed=seed)


def load_ltr_file(path, cutoff: int | None = None) -> RankingDataset:
    """Read a ``grade qid:<id> <idx>:<val> ...`` file.

    Feature indices are 1-based; absent indices are zero.  Trailing
    ``# comments`` are ignored.  Queries appear in order of first occurrence.
    """
    docs: dict[int, list] = {}
    max_index = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) < 2 or not tokens[1].startswith("qid:"):
                raise ParseError("expected '<grade> qid:<int> <idx>:<val> ...'", lineno)
            try:
                grade_f = float(tokens[0])
                qid = int(tokens[1][4:])
                feats = {}
                for tok in tokens[2:]:
                    idx, val = tok.split(":", 1)
                    idx = int(idx)
                    if idx < 1:
                        raise ValueError("feature indices start at 1")
                    feats[idx] = float(val)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not grade_f.is_integer() or not 0 <= grade_f <= MAX_GRADE:
                raise ValidationError(f"line {lineno}: grade {tokens[0]} outside [0, {MAX_GRADE}]")
            max_index = max([max_index, *feats])
            docs.setdefault(qid, []).append((int(grade_f), feats))
    if not docs:
        raise EmptyDatasetError(f"{path}: no documents found")
    dim = max(max_index, 1)
    queries = []
    for qid, rows in docs.items():
        x = np.zeros((len(rows), dim))
        for j, (_, feats) in enumerate(rows):
            for idx, val in feats.items():
                x[j, idx - 1] = val
        queries.append(QueryRecord(qid, x, np.array([g for g, _ in rows])))
    return RankingDataset(tuple(queries), feature_dim=dim, cutoff=cutoff)


def save_snapshot(data: RankingDataset, path) -> None:
    """Write one JSON object per query."""
    with open(path, "w", encoding="utf-8") as fh:
        for q in data:
            fh.write(json.dumps({
                "query_id": q.query_id,
                "split": data.split,
                "grades": q.grades.tolist(),
                "features": q.features.tolist(),
            }) + "\n")


def load_snapshot(path, cutoff: int | None = None) -> RankingDataset:
    queries, split = [], "train"
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            split = obj.get("split", split)
            queries.append(QueryRecord(obj["query_id"], np.array(obj["features"], float), np.array(obj["grades"])))
    if not queries:
        raise EmptyDatasetError(f"{path}: empty snapshot")
    return RankingDataset(tuple(queries), split=split, cutoff=cutoff)


def _listwise_loss(w, features, targets, mask, l2):
    scores = np.where(mask, features @ w, -np.inf)
    shift = scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(scores - shift).sum(axis=1, keepdims=True)) + shift
    log_p = np.where(mask, scores - logz, 0.0)
    n = features.shape[0]
    loss = -(targets * log_p).sum() / n + 0.5 * l2 * w @ w
    p = np.exp(log_p) * mask
    grad = np.einsum("qd,qdf->f", p - targets, features) / n + l2 * w
    return loss, grad


def train_logging_policy(
    data: RankingDataset,
    fraction: float,
    seed: int,
    *,
    cutoff: int = 5,
    l2: float = 1.0,
    temperature: float = 1.0,
) -> StochasticRankingPolicy:
    """Fit a linear ranker on a random fraction of the labelled queries.

    The loss is listwise softmax cross-entropy against ``softmax(grades)``
    plus an L2 penalty; optimisation is deterministic (L-BFGS from zero).
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n_sel = int(round(fraction * len(data)))
    if n_sel == 0:
        raise ConfigError(f"fraction {fraction} of {len(data)} queries selects no query")
    chosen = np.sort(np.random.default_rng(seed).choice(len(data), size=n_sel, replace=False))
    dense = data.subset(chosen).padded
    g = np.where(dense.mask, dense.grades.astype(float), -np.inf)
    targets = np.exp(g - g.max(axis=1, keepdims=True))
    targets /= targets.sum(axis=1, keepdims=True)
    res = minimize(
        _listwise_loss,
        np.zeros(data.feature_dim),
        args=(dense.features, targets, dense.mask, l2),
        jac=True,
        method="L-BFGS-B",
    )
    return StochasticRankingPolicy(res.x, cutoff=cutoff, temperature=temperature)
