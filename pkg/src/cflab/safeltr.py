"""Counterfactual learning-to-rank estimators and safe training objectives.

Every exposure-based estimator used here is linear in the target policy's
metric weights: with per-(query, document) coefficients ``g`` built from the
log,

    U_hat(pi) = (1 / N) * sum_q sum_d omega_pi(d | q) * g(d | q).

Under position bias ``omega == rho`` (beta is zero), so the same code covers
position-bias IPS, trust-bias IPS with the affine correction, and DR.  The
safety terms (divergence penalty, PRPO clipping) are functions of the same
weights, which lets one REINFORCE routine produce gradients for all of them.

Arrays indexed by ``(query, document)`` are aligned with a dataset's padded
layout (see :attr:`cflab.dataset.RankingDataset.padded`).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .clicksim import (
    ClickModel,
    InteractionLog,
    LogAggregate,
    PropensityEstimate,
    aggregate_log,
    estimate_propensities,
    query_positions,
    simulate,
)
from .dataset import (
    DatasetSplits,
    RankingDataset,
    generate_synthetic_splits,
    relevance_probability,
    train_logging_policy,
)
from .errors import ConfigError, EstimatorError, TrainingDivergedError, ValidationError
from .policy import (
    ExaminationModel,
    StochasticRankingPolicy,
    estimate_exposure,
    pl_log_prob_and_score_grad,
    policy_ndcg,
    rank_weights_per_doc,
    sample_from_scores,
)

ESTIMATOR_KINDS = ("exposure_ips", "action_ips", "dr", "naive")
SAFETY_MODES = ("crm_exposure", "crm_action", "safe_dr", "prpo", "none")
TRAIN_KINDS = ("naive", "ips", "dr", "crm", "safe_dr", "prpo", "action_ips", "crm_action")
TRACE_COLUMNS = ("epoch", "N", "objective", "estimate", "risk", "divergence", "ndcg_test", "ndcg_logging")


@dataclass(frozen=True)
class CltrEstimate:
    """An estimate with its optional safety penalty.

    ``constant_term`` is the policy-independent part of the generalization
    bound; it is reported but never optimized.
    """

    utility: float
    risk_term: float = 0.0
    divergence: float = float("nan")
    estimator_kind: str = "exposure_ips"
    constant_term: float = 0.0

    @property
    def lower_bound(self) -> float:
        return self.utility - self.risk_term

    @property
    def certified_bound(self) -> float:
        """Lower bound including the constant term."""
        return self.utility - self.risk_term - self.constant_term


@dataclass(frozen=True)
class SafetyConfig:
    delta: float
    Z: float
    beta_alpha_max: float = 0.0
    mode: str = "crm_exposure"

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie strictly inside (0, 1), got {self.delta}")
        if not self.Z > 0:
            raise ConfigError("Z must be positive")
        if self.beta_alpha_max < 0:
            raise ConfigError("beta_alpha_max must be non-negative")
        if self.mode not in SAFETY_MODES:
            raise ConfigError(f"unknown safety mode {self.mode!r}")

    @classmethod
    def for_examination(cls, examination: ExaminationModel, delta: float, mode: str = "crm_exposure"):
        """Safety constants for a click model; the normalizer is the total metric weight."""
        bam = examination.beta_alpha_max if mode == "safe_dr" else 0.0
        return cls(delta, examination.Z_omega, bam, mode)

    @property
    def confidence_factor(self) -> float:
        return (1.0 - self.delta) / self.delta

    @property
    def multiplier(self) -> float:
        return 1.0 + self.beta_alpha_max

    @property
    def effective_Z(self) -> float:
        return 2.0 * self.Z if self.mode == "safe_dr" else self.Z


@dataclass(frozen=True)
class PrpoConfig:
    eps_minus: float
    eps_plus: float
    schedule: str = "constant"
    parameter: float = 1.0

    def __post_init__(self):
        if not self.eps_minus > 0:
            raise ConfigError("eps_minus must be positive")
        if self.eps_minus > self.eps_plus:
            raise ConfigError(f"eps_minus={self.eps_minus} exceeds eps_plus={self.eps_plus}")

    @classmethod
    def from_schedule(cls, N: int, schedule: str = "linear_in_N", parameter: float = 100.0):
        lo, hi = prpo_schedule(N, schedule, parameter)
        return cls(lo, hi, schedule, parameter)


@dataclass(frozen=True, eq=False)
class RegressionModel:
    """Relevance predictions ``R_hat`` aligned with a dataset's padded layout."""

    predictions: np.ndarray
    source: str = "learned"

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=float)
        if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
            raise ValidationError("relevance predictions must lie in [0, 1]")
        object.__setattr__(self, "predictions", p)

    @classmethod
    def oracle(cls, dataset, click_model: ClickModel):
        return cls(_true_relevance(dataset, click_model), "oracle")

    @classmethod
    def noisy_oracle(cls, dataset, click_model: ClickModel, noise: float, rng):
        truth = _true_relevance(dataset, click_model)
        return cls(np.clip(truth + noise * rng.standard_normal(truth.shape), 0, 1), f"noisy_oracle({noise})")

    @classmethod
    def constant(cls, dataset, c: float):
        return cls(np.full(dataset.padded.mask.shape, float(c)), f"constant({c})")

    @classmethod
    def zeros_like(cls, dataset):
        return cls.constant(dataset, 0.0)


def _true_relevance(dataset, click_model: ClickModel) -> np.ndarray:
    dense = dataset.padded
    r = relevance_probability(click_model.transform, dense.grades)
    if click_model.adversarial:
        # Under the adversarial model the quantity the clicks reveal is the complement.
        r = 1.0 - r
    return np.where(dense.mask, r, 0.0)


def fit_regression(aggregate: LogAggregate, ridge: float = 1.0, target: RankingDataset | None = None) -> RegressionModel:
    """Ridge regression from features to the debiased per-document relevance.

    The target ``(clicks - beta_sum) / alpha_sum`` is unbiased for ``P(R=1)``;
    each document is weighted by ``alpha_sum``.  Predictions are made for
    ``target`` (default: the logged dataset).
    """
    dense = aggregate.dataset.padded
    out = (target or aggregate.dataset).padded
    seen = aggregate.alpha_sum > 0
    if not np.any(seen):
        return RegressionModel(np.zeros(out.mask.shape), "learned")
    x = dense.features[seen]
    y = (aggregate.clicks[seen] - aggregate.beta_sum[seen]) / aggregate.alpha_sum[seen]
    w = aggregate.alpha_sum[seen]
    x1 = np.hstack([x, np.ones((x.shape[0], 1))])
    reg = ridge * np.eye(x1.shape[1])
    reg[-1, -1] = 0.0
    coef = np.linalg.solve(x1.T @ (w[:, None] * x1) + reg, x1.T @ (w * y))
    pred = out.features @ coef[:-1] + coef[-1]
    return RegressionModel(np.where(out.mask, np.clip(pred, 0.0, 1.0), 0.0), "learned")


# ---------------------------------------------------------------------------
# estimator coefficients and point estimates

def _safe_ratio(num, den, what):
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    bad = (den <= 0) & (num != 0)
    if np.any(bad):
        q, d = np.argwhere(bad)[0]
        raise EstimatorError(f"zero logging propensity for {what} (query position {q}, document {d})")
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def ips_coefficients(aggregate: LogAggregate, rho0) -> np.ndarray:
    """``g = (clicks - beta_sum) / rho0``; reduces to ``clicks / rho0`` under position bias."""
    return _safe_ratio(aggregate.clicks - aggregate.beta_sum, rho0, "a clicked document")


def dr_coefficients(aggregate: LogAggregate, rho0, regression: RegressionModel) -> np.ndarray:
    """Direct-method term plus the IPS-weighted correction."""
    r_hat = regression.predictions
    residual = aggregate.clicks - aggregate.alpha_sum * r_hat - aggregate.beta_sum
    return aggregate.counts[:, None] * r_hat + _safe_ratio(residual, rho0, "a displayed document")


def naive_coefficients(aggregate: LogAggregate) -> np.ndarray:
    return aggregate.clicks.astype(float)


def _linear_estimate(aggregate, target_omega, coef, kind):
    if aggregate.N == 0:
        return CltrEstimate(0.0, estimator_kind=kind)
    return CltrEstimate(float(np.sum(np.asarray(target_omega) * coef) / aggregate.N), estimator_kind=kind)


def ips_exposure(aggregate: LogAggregate, rho0, target_omega) -> CltrEstimate:
    """Exposure-based IPS: ``(1/N) sum_i sum_d omega(d) / rho0(d) * (c_i(d) - beta_{k_i(d)})``.

    Pass ``target_omega = rho`` under position bias.
    """
    return _linear_estimate(aggregate, target_omega, ips_coefficients(aggregate, rho0), "exposure_ips")


def dr_estimate(aggregate: LogAggregate, rho0, target_omega, regression: RegressionModel) -> CltrEstimate:
    return _linear_estimate(aggregate, target_omega, dr_coefficients(aggregate, rho0, regression), "dr")


def naive_estimate(aggregate: LogAggregate, target_omega) -> CltrEstimate:
    return _linear_estimate(aggregate, target_omega, naive_coefficients(aggregate), "naive")


def ips_action(log: InteractionLog, dataset: RankingDataset, propensities: PropensityEstimate, policy) -> CltrEstimate:
    """Action-based IPS: ``(1/N) sum_i pi(y_i) / pi0_hat(y_i) * sum_d c_i(d)``."""
    weights = action_weights(log, dataset, propensities, policy)
    value = float(np.sum(weights * log.clicks.sum(axis=1)) / log.N) if log.N else 0.0
    return CltrEstimate(value, estimator_kind="action_ips")


def action_weights(log, dataset, propensities, policy):
    pos = query_positions(dataset, log.query_ids)
    dense = dataset.padded
    freq = propensities.rank_frequencies()
    K = log.cutoff
    pi0 = np.prod(freq[pos[:, None], np.arange(K), log.rankings], axis=1)
    if np.any(pi0 <= 0):
        raise EstimatorError("zero action propensity for a logged ranking")
    scores = policy.scores(dense.features)[pos]
    lp, _ = pl_log_prob_and_score_grad(scores, log.rankings[:, None, :], dense.mask[pos])
    return np.exp(lp[:, 0]) / pi0


def empirical_divergence(target, logging, counts, N=None) -> float:
    """Empirical second-order Renyi divergence between normalized exposures.

    ``(1/N) sum_q n_q sum_d p0(d) * (p(d) / p0(d))**2`` where ``p`` and ``p0``
    are the per-query normalized ``target`` and ``logging`` exposures.
    """
    target = np.atleast_2d(np.asarray(target, float))
    logging = np.atleast_2d(np.asarray(logging, float))
    counts = np.atleast_1d(np.asarray(counts, float))
    N = counts.sum() if N is None else N
    used = counts > 0
    p = target[used] / target[used].sum(axis=1, keepdims=True)
    p0 = logging[used] / logging[used].sum(axis=1, keepdims=True)
    if np.any((p0 <= 0) & (p > 0)):
        raise EstimatorError("target exposure on a document with zero logging exposure: divergence is infinite")
    per_query = np.sum(np.divide(p**2, p0, out=np.zeros_like(p), where=p0 > 0), axis=1)
    return float(counts[used] @ per_query / N)


def crm_lower_bound(utility: float, divergence: float, N: int, config: SafetyConfig, kind="exposure_ips") -> CltrEstimate:
    f = config.confidence_factor
    risk = config.multiplier * math.sqrt(config.effective_Z / N * f * divergence)
    const = config.multiplier * math.sqrt(f / N)
    return CltrEstimate(float(utility), risk, float(divergence), kind, const)


def prpo_schedule(N: int, schedule: str = "linear_in_N", parameter: float = 100.0):
    """Clipping range ``(eps_minus, eps_plus)`` for a log of size ``N``.

    ``linear_in_N``: ``delta = parameter / N``; ``log_in_N``: ``delta = parameter / log N``;
    ``constant``: ``delta = parameter``.  ``eps_minus = min(delta, 1)`` and ``eps_plus = 1 / eps_minus``.
    """
    if N < 1:
        raise ConfigError("N must be at least 1")
    if schedule == "linear_in_N":
        delta = parameter / N
    elif schedule == "log_in_N":
        delta = parameter / math.log(N) if N > 1 else math.inf
    elif schedule == "constant":
        delta = parameter
    else:
        raise ConfigError(f"unknown PRPO schedule {schedule!r}")
    if not delta > 0:
        raise ConfigError("PRPO schedule parameter must be positive")
    lo = min(delta, 1.0)
    return lo, 1.0 / lo


def clip_function(x, eps_minus, eps_plus, r):
    """``min(x, eps_plus) * r`` where ``r >= 0``, ``max(x, eps_minus) * r`` otherwise."""
    x = np.asarray(x, float)
    r = np.asarray(r, float)
    return np.where(r >= 0, np.minimum(x, eps_plus) * r, np.maximum(x, eps_minus) * r)


def prpo_rewards(aggregate: LogAggregate, rho0, omega0, regression: RegressionModel) -> np.ndarray:
    """Per-(query, document) rewards whose ratio-weighted sum is the DR estimate.

    ``r = [n_q omega0 R_hat + omega0 / rho0 * sum_i (c - alpha R_hat - beta)] / N``,
    so that ``sum (omega / omega0) * r`` equals :func:`dr_estimate` exactly.
    """
    r_hat = regression.predictions
    residual = aggregate.clicks - aggregate.alpha_sum * r_hat - aggregate.beta_sum
    r = aggregate.counts[:, None] * omega0 * r_hat + omega0 * _safe_ratio(residual, rho0, "a displayed document")
    return r / max(aggregate.N, 1)


def prpo_ratio(omega, omega0) -> np.ndarray:
    """``omega / omega0``, defined as 1 where both are zero and 0 where only ``omega0`` is."""
    omega = np.asarray(omega, float)
    omega0 = np.asarray(omega0, float)
    x = np.divide(omega, omega0, out=np.zeros_like(omega), where=omega0 > 0)
    return np.where((omega0 <= 0) & (omega <= 0), 1.0, x)


def prpo_objective(omega, omega0, rewards, config: PrpoConfig) -> float:
    x = prpo_ratio(omega, omega0)
    return float(np.sum(clip_function(x, config.eps_minus, config.eps_plus, rewards)))


def prpo_weight_gradient(omega, omega0, rewards, config: PrpoConfig, ratio=None) -> np.ndarray:
    """``d objective / d omega``: ``r / omega0`` inside the band, zero where clipped.

    At a band edge the zero supergradient is taken, so a policy sitting
    exactly on the edge is not pushed past it.  ``ratio`` overrides
    ``omega / omega0`` when the two are estimated differently.
    """
    omega0 = np.asarray(omega0, float)
    x = prpo_ratio(omega, omega0) if ratio is None else np.asarray(ratio, float)
    active = ((rewards > 0) & (x < config.eps_plus)) | ((rewards < 0) & (x > config.eps_minus))
    return np.where(active & (omega0 > 0), np.divide(rewards, omega0, out=np.zeros_like(omega0), where=omega0 > 0), 0.0)


def true_utility(omega, relevance, mask=None) -> float:
    """Mean over queries of ``sum_d omega(d) * P(R=1 | d)``."""
    v = np.asarray(omega) * np.asarray(relevance)
    if mask is not None:
        v = np.where(mask, v, 0.0)
    return float(v.sum(axis=-1).mean())


# ---------------------------------------------------------------------------
# objectives as functions of (rho, omega) on logged queries

class ExposureObjective:
    """Base class: ``evaluate(rho, omega)`` returns the estimate and partials.

    All arrays are restricted to the rows in ``positions`` (logged queries).
    """

    positions: np.ndarray

    def evaluate(self, rho, omega):
        raise NotImplementedError


class LinearObjective(ExposureObjective):
    def __init__(self, positions, coef, N, kind):
        self.positions = positions
        self.coef = coef
        self.N = N
        self.kind = kind

    def evaluate(self, rho, omega):
        est = CltrEstimate(float(np.sum(omega * self.coef) / self.N), estimator_kind=self.kind)
        return est, est.utility, None, self.coef / self.N


class CrmObjective(ExposureObjective):
    """Utility minus the divergence-based risk term."""

    def __init__(self, base: LinearObjective, omega0, counts, config: SafetyConfig):
        self.base = base
        self.positions = base.positions
        self.p0 = omega0 / omega0.sum(axis=1, keepdims=True)
        self.counts = counts
        self.config = config

    def evaluate(self, rho, omega):
        est, _, _, b = self.base.evaluate(rho, omega)
        N = self.base.N
        total = omega.sum(axis=1, keepdims=True)
        p = omega / total
        per_query = np.sum(p**2 / self.p0, axis=1)
        d2 = float(self.counts @ per_query / N)
        bound = crm_lower_bound(est.utility, d2, N, self.config, est.estimator_kind)
        c = self.config
        scale = c.multiplier * math.sqrt(c.effective_Z * c.confidence_factor / N)
        if d2 > 0:
            dd2 = (self.counts[:, None] / N) * 2.0 * p / self.p0 / total
            b = b - scale * dd2 / (2.0 * math.sqrt(d2))
        return bound, bound.lower_bound, None, b


class PrpoObjectiveFn(ExposureObjective):
    """Clipped PRPO objective.

    With a ``reference`` policy, the ratio denominator is that policy's
    metric weight estimated from the same random draws as the current
    policy, so the ratio is exactly one at the reference.  Documents the
    reference never placed fall back to the logged ``omega0``.
    """

    def __init__(self, positions, omega0, rewards, config: PrpoConfig, reference=None):
        self.positions = positions
        self.omega0 = omega0
        self.rewards = rewards
        self.config = config
        self.reference = reference

    def evaluate(self, rho, omega, reference_omega=None):
        if reference_omega is None:
            value = prpo_objective(omega, self.omega0, self.rewards, self.config)
            grad = prpo_weight_gradient(omega, self.omega0, self.rewards, self.config)
        else:
            # where the reference was never placed, the slope uses the logged weight
            denom = np.where(reference_omega > 0, reference_omega, self.omega0)
            x = np.where((reference_omega <= 0) & (omega <= 0), 1.0, prpo_ratio(omega, denom))
            value = float(np.sum(clip_function(x, self.config.eps_minus, self.config.eps_plus, self.rewards)))
            grad = prpo_weight_gradient(omega, denom, self.rewards, self.config, ratio=x)
        est = CltrEstimate(value, estimator_kind="dr")
        return est, value, None, grad


@dataclass(frozen=True)
class RankingSample:
    """Rankings for a set of queries with their averaging weights.

    Monte Carlo samples carry weight ``1/M``; exact enumeration carries the
    ranking probabilities, which makes every expectation below exact.
    """

    rankings: np.ndarray  # (Q, M, K)
    weights: np.ndarray  # (Q, M)
    score_grad: np.ndarray  # (Q, M, D)
    alpha_at: np.ndarray  # (Q, M, D)
    omega_at: np.ndarray  # (Q, M, D)

    @property
    def rho(self):
        return np.einsum("qm,qmd->qd", self.weights, self.alpha_at)

    @property
    def omega(self):
        return np.einsum("qm,qmd->qd", self.weights, self.omega_at)


def sample_exposure(policy, dataset, positions, examination, n_samples, rng, exact=False) -> RankingSample:
    dense = dataset.padded
    scores = policy.scores(dense.features[positions])
    mask = dense.mask[positions]
    K = policy.cutoff
    if exact:
        width = int(dense.n_docs[positions].max())
        if np.any(dense.n_docs[positions] != width):
            raise ValidationError("exact enumeration needs equal candidate counts")
        perms = np.array(list(itertools.permutations(range(width), K)), dtype=np.int64)
        rankings = np.broadcast_to(perms, (len(positions),) + perms.shape).copy()
    else:
        rankings = sample_from_scores(scores, K, n_samples, rng, mask)
    lp, score_grad = pl_log_prob_and_score_grad(scores, rankings, mask)
    weights = np.exp(lp) if exact else np.full(lp.shape, 1.0 / rankings.shape[1])
    D = mask.shape[1]
    return RankingSample(
        rankings,
        weights,
        score_grad,
        rank_weights_per_doc(rankings, D, examination.alpha),
        rank_weights_per_doc(rankings, D, examination.omega),
    )


def objective_gradient(policy, dataset, objective: ExposureObjective, examination, n_samples=64, rng=None, exact=False):
    """Objective value and its REINFORCE gradient w.r.t. the policy weights.

    The per-query mean reward of the sampled rankings is the control variate.
    Returns ``(estimate, value, gradient)``.
    """
    sample, ref_omega = _draw(policy, dataset, objective, examination, n_samples, rng, exact)
    est, value, a, b = _evaluate_sample(objective, sample, ref_omega)
    reward = np.einsum("qd,qmd->qm", b, sample.omega_at)
    if a is not None:
        reward = reward + np.einsum("qd,qmd->qm", a, sample.alpha_at)
    baseline = np.sum(sample.weights * reward, axis=1, keepdims=True)
    coef = np.einsum("qm,qmd->qd", sample.weights * (reward - baseline), sample.score_grad)
    features = dataset.padded.features[objective.positions]
    grad = np.einsum("qd,qdf->f", coef, features) / policy.temperature
    return est, value, grad


def objective_value(policy, dataset, objective, examination, n_samples=64, rng=None, exact=False):
    sample, ref_omega = _draw(policy, dataset, objective, examination, n_samples, rng, exact)
    est, value, _, _ = _evaluate_sample(objective, sample, ref_omega)
    return est, value


def _draw(policy, dataset, objective, examination, n_samples, rng, exact):
    """Sample the current policy and, if the objective has one, its reference
    policy under common random numbers."""
    reference = getattr(objective, "reference", None)
    if reference is None:
        return sample_exposure(policy, dataset, objective.positions, examination, n_samples, rng, exact), None
    rng = np.random.default_rng(rng)
    seed = int(rng.integers(2**63))
    sample = sample_exposure(policy, dataset, objective.positions, examination, n_samples, np.random.default_rng(seed), exact)
    ref = sample_exposure(reference, dataset, objective.positions, examination, n_samples, np.random.default_rng(seed), exact)
    return sample, ref.omega


def _evaluate_sample(objective, sample, ref_omega):
    if ref_omega is None:
        return objective.evaluate(sample.rho, sample.omega)
    return objective.evaluate(sample.rho, sample.omega, reference_omega=ref_omega)


# ---------------------------------------------------------------------------
# action-based objectives (work directly on logged rankings)

class ActionObjective:
    """Action-based IPS, optionally with a sample-variance risk term."""

    def __init__(self, log, dataset, propensities, safety: SafetyConfig | None = None):
        pos = query_positions(dataset, log.query_ids)
        key = np.concatenate([pos[:, None], log.rankings], axis=1)
        uniq, inverse, mult = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        per_row = log.clicks.sum(axis=1).astype(float)
        clicks = np.bincount(inverse.ravel(), weights=per_row, minlength=uniq.shape[0])
        clicks_sq = np.bincount(inverse.ravel(), weights=per_row**2, minlength=uniq.shape[0])
        freq = propensities.rank_frequencies()
        K = log.cutoff
        self.pos = uniq[:, 0]
        self.rankings = uniq[:, 1:]
        self.pi0 = np.prod(freq[self.pos[:, None], np.arange(K), self.rankings], axis=1)
        self.click_sum = clicks  # summed over duplicate interactions
        self.click_sq_sum = clicks_sq
        self.N = log.N
        self.dataset = dataset
        self.safety = safety

    def value_and_gradient(self, policy):
        dense = self.dataset.padded
        scores = policy.scores(dense.features)[self.pos]
        lp, sg = pl_log_prob_and_score_grad(scores, self.rankings[:, None, :], dense.mask[self.pos])
        w = np.exp(lp[:, 0]) / self.pi0
        grad_logp = np.einsum("ud,udf->uf", sg[:, 0], dense.features[self.pos]) / policy.temperature
        u_sum = w * self.click_sum  # per unique ranking, summed over its interactions
        utility = u_sum.sum() / self.N
        grad = (u_sum[:, None] * grad_logp).sum(axis=0) / self.N
        risk = 0.0
        if self.safety is not None:
            # sample variance of the per-interaction values w * c_i
            m2 = np.sum(w**2 * self.click_sq_sum) / self.N
            var = max(m2 - utility**2, 0.0)
            f = self.safety.confidence_factor
            risk = math.sqrt(f * var / self.N)
            if risk > 0:
                dm2 = (2 * w**2 * self.click_sq_sum)[:, None] * grad_logp
                dvar = dm2.sum(axis=0) / self.N - 2 * utility * grad
                grad = grad - 0.5 * math.sqrt(f / self.N) * dvar / math.sqrt(var)
        est = CltrEstimate(float(utility), float(risk), float("nan"), "action_ips")
        return est, est.lower_bound, grad


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and evaluation settings for :func:`train`."""

    epochs: int = 100
    learning_rate: float = 0.5
    lr_decay: float = 0.01
    max_grad_norm: float | None = 1.0
    n_samples: int = 32
    eval_every: int = 1
    eval_samples: int = 32
    ndcg_samples: int = 64
    patience: int | None = None
    init: str = "logging"
    divergence_floor: float = 1e-3
    include_initial: bool = False
    regression_ridge: float = 1.0
    crn_ratio: bool = True
    validation_propensities: str = "estimated"
    propensity_samples: int = 256
    seed: int = 0


@dataclass
class TrainResult:
    policy: StochasticRankingPolicy
    best_epoch: int
    trace: list
    ndcg_logging: float
    ndcg_test: float


def build_objective(
    kind: str,
    log: InteractionLog,
    dataset: RankingDataset,
    examination: ExaminationModel,
    *,
    clip: bool,
    safety: SafetyConfig | None = None,
    prpo: PrpoConfig | None = None,
    regression: RegressionModel | None = None,
    divergence_floor: float = 1e-3,
    reference: StochasticRankingPolicy | None = None,
    propensities: PropensityEstimate | None = None,
):
    """Build a training or validation objective over the logged queries.

    Training objectives use clipped propensities (``clip=True``).  The
    divergence compares against the unclipped frequency estimate, floored at
    ``divergence_floor`` so that never-displayed documents keep it finite.
    ``reference`` (PRPO only) enables common-random-number ratio estimates.
    ``propensities`` replaces the frequency estimate when given.
    """
    if kind not in TRAIN_KINDS:
        raise ConfigError(f"unknown objective kind {kind!r}")
    props = propensities or estimate_propensities(log, examination, dataset, clip=clip)
    if kind in ("action_ips", "crm_action"):
        return ActionObjective(log, dataset, props, safety if kind == "crm_action" else None)
    agg = props.aggregate
    pos = np.flatnonzero(agg.logged)
    rho0 = props.rho_train if clip else props.rho_hat
    N = agg.N
    if kind in ("dr", "safe_dr", "prpo") and regression is None:
        raise ConfigError(f"objective {kind!r} needs a regression model")
    if kind == "naive":
        return LinearObjective(pos, naive_coefficients(agg)[pos], N, "naive")
    if kind in ("ips", "crm"):
        base = LinearObjective(pos, ips_coefficients(agg, rho0)[pos], N, "exposure_ips")
    elif kind in ("dr", "safe_dr"):
        base = LinearObjective(pos, dr_coefficients(agg, rho0, regression)[pos], N, "dr")
    else:
        if prpo is None:
            raise ConfigError("PRPO objective needs a PrpoConfig")
        rewards = prpo_rewards(agg, rho0, props.omega_hat, regression)
        return PrpoObjectiveFn(pos, props.omega_hat[pos], rewards[pos], prpo, reference)
    if kind in ("ips", "dr"):
        return base
    if safety is None:
        raise ConfigError(f"objective {kind!r} needs a SafetyConfig")
    mask = dataset.padded.mask[pos]
    omega0 = np.where(mask, np.maximum(props.omega_hat[pos], divergence_floor), 1e-300)
    return CrmObjective(base, omega0, agg.counts[pos].astype(float), safety)


def _evaluate(objective, policy, dataset, examination, n_samples, rng):
    if isinstance(objective, ActionObjective):
        est, value, _ = objective.value_and_gradient(policy)
        return est, value
    return objective_value(policy, dataset, objective, examination, n_samples, rng)


def _step(objective, policy, dataset, examination, n_samples, rng):
    if isinstance(objective, ActionObjective):
        return objective.value_and_gradient(policy)
    return objective_gradient(policy, dataset, objective, examination, n_samples, rng)


def train(
    kind: str,
    splits: DatasetSplits,
    train_log: InteractionLog,
    val_log: InteractionLog,
    logging_policy: StochasticRankingPolicy,
    click_model: ClickModel,
    config: TrainConfig = TrainConfig(),
    *,
    safety: SafetyConfig | None = None,
    prpo: PrpoConfig | None = None,
    regression: RegressionModel | str | None = "learned",
) -> TrainResult:
    """Gradient ascent on a counterfactual objective with early stopping.

    The validation log is scored with the same objective kind using unclipped
    propensities; the epoch with the best validation value is returned.
    """
    exam = click_model.examination
    if logging_policy.cutoff != exam.cutoff:
        raise ConfigError("logging policy and click model disagree on the cutoff")
    rng = np.random.default_rng(config.seed)
    if kind in ("dr", "safe_dr", "prpo"):
        train_reg, val_reg = _resolve_regression(regression, train_log, splits, click_model, config)
    else:
        train_reg = val_reg = None
    prpo_train = prpo_val = prpo
    if kind == "prpo" and prpo is not None and prpo.schedule != "constant":
        prpo_val = PrpoConfig.from_schedule(max(val_log.N, 1), prpo.schedule, prpo.parameter)
    common = dict(safety=safety, divergence_floor=config.divergence_floor)
    if kind == "prpo" and config.crn_ratio:
        common["reference"] = logging_policy
    objective = build_objective(kind, train_log, splits.train, exam, clip=True, prpo=prpo_train, regression=train_reg, **common)
    validation = None
    if val_log.N:
        val_props = _validation_propensities(val_log, splits.validation, logging_policy, exam, config)
        validation = build_objective(
            kind, val_log, splits.validation, exam, clip=False, prpo=prpo_val, regression=val_reg,
            propensities=val_props, **common,
        )

    if config.init == "logging":
        w = logging_policy.weights.copy()
    elif config.init == "zero":
        w = np.zeros_like(logging_policy.weights)
    else:
        raise ConfigError(f"unknown init {config.init!r}")
    policy = logging_policy.with_weights(w)
    ndcg_seed = config.seed + 7919
    ndcg_logging = policy_ndcg(logging_policy, splits.test, config.ndcg_samples, ndcg_seed)

    trace = []
    best = (-math.inf, 0, policy)
    since_best = 0
    for epoch in range(config.epochs + 1):
        if epoch > 0:
            est, value, grad = _step(objective, policy, splits.train, exam, config.n_samples, rng)
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"non-finite gradient at epoch {epoch}")
            norm = float(np.linalg.norm(grad))
            if config.max_grad_norm is not None and norm > config.max_grad_norm:
                grad = grad * (config.max_grad_norm / norm)
            lr = config.learning_rate / (1.0 + config.lr_decay * (epoch - 1))
            w = policy.weights + lr * grad
            if not np.all(np.isfinite(w)):
                raise TrainingDivergedError(f"non-finite weights at epoch {epoch}")
            policy = policy.with_weights(w)
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        est, value = _evaluate(objective, policy, splits.train, exam, config.eval_samples, rng)
        val_value = (
            _evaluate(validation, policy, splits.validation, exam, config.eval_samples, rng)[1]
            if validation is not None
            else value
        )
        ndcg = policy_ndcg(policy, splits.test, config.ndcg_samples, ndcg_seed)
        trace.append({
            "epoch": epoch,
            "N": train_log.N,
            "objective": value,
            "estimate": est.utility,
            "risk": est.risk_term,
            "divergence": est.divergence,
            "ndcg_test": ndcg,
            "ndcg_logging": ndcg_logging,
            "validation": val_value,
        })
        if epoch == 0 and not config.include_initial:
            continue
        if val_value > best[0]:
            best = (val_value, epoch, policy)
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                break
    _, best_epoch, best_policy = best
    final_ndcg = next(r["ndcg_test"] for r in trace if r["epoch"] == best_epoch)
    return TrainResult(best_policy, best_epoch, trace, ndcg_logging, final_ndcg)


def _validation_propensities(val_log, dataset, logging_policy, exam, config):
    """``None`` (frequency estimate) or the logging policy's own exposure."""
    if config.validation_propensities == "estimated":
        return None
    if config.validation_propensities != "logging_policy":
        raise ConfigError(f"unknown validation propensities {config.validation_propensities!r}")
    rng = np.random.default_rng([config.seed, 17])
    shape = dataset.padded.mask.shape
    rho, omega = np.zeros(shape), np.zeros(shape)
    for i, q in enumerate(dataset):
        prof = estimate_exposure(logging_policy, q, exam, config.propensity_samples, rng, exact=q.n_docs <= 6)
        rho[i, : q.n_docs] = prof.rho
        omega[i, : q.n_docs] = prof.omega
    return PropensityEstimate(aggregate_log(val_log, dataset, exam), rho, omega, 0.0)


def _resolve_regression(regression, train_log, splits, click_model, config):
    """Regression models for the training and validation queries.

    A learned model is always fitted on training clicks only.
    """
    if isinstance(regression, RegressionModel):
        return regression, regression
    if regression in (None, "learned"):
        agg = estimate_propensities(train_log, click_model.examination, splits.train, clip=False).aggregate
        return (
            fit_regression(agg, config.regression_ridge),
            fit_regression(agg, config.regression_ridge, splits.validation),
        )
    if regression == "oracle":
        return RegressionModel.oracle(splits.train, click_model), RegressionModel.oracle(splits.validation, click_model)
    if regression == "zero":
        return RegressionModel.zeros_like(splits.train), RegressionModel.zeros_like(splits.validation)
    raise ConfigError(f"unknown regression model {regression!r}")


def train_skyline(splits: DatasetSplits, cutoff: int = 5, seed: int = 0, l2: float = 1e-3) -> StochasticRankingPolicy:
    """Supervised ranker on all training labels, an upper reference point."""
    return train_logging_policy(splits.train, 1.0, seed, cutoff=cutoff, l2=l2)


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(trace)


# ---------------------------------------------------------------------------
# desk-scale experiment protocol

SWEEP_METHODS = ("naive", "ips", "dr", "crm", "safe_dr", "prpo", "action_ips", "crm_action")


@dataclass(frozen=True)
class SafeLtrSetup:
    """Synthetic world and method settings shared by safe-LTR sweeps.

    Proximal PRPO starts from the logging policy, with epoch 0 as an
    early-stopping candidate; every other method trains from zero weights.
    """

    n_queries: int = 200
    docs_per_query: int = 10
    feature_dim: int = 100
    logging_fraction: float = 0.25
    logging_l2: float = 0.01
    click_model: str = "pbm"
    validation_ratio: float = 1.0 / 3.0
    crm_delta: float = 1e-3
    safe_dr_delta: float = 0.95
    prpo_schedule: str = "linear_in_N"
    prpo_parameter: float = 1000.0
    regression: str = "learned"
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.click_model not in ("pbm", "trust_bias", "adversarial"):
            raise ConfigError(f"unknown click model {self.click_model!r}")
        if not 0 < self.validation_ratio:
            raise ConfigError("validation_ratio must be positive")


@dataclass
class SafeLtrWorld:
    splits: DatasetSplits
    logging_policy: StochasticRankingPolicy
    click_model: ClickModel


def make_world(setup: SafeLtrSetup, seed: int) -> SafeLtrWorld:
    splits = generate_synthetic_splits(setup.n_queries, setup.docs_per_query, setup.feature_dim, seed)
    logging = train_logging_policy(splits.train, setup.logging_fraction, seed, l2=setup.logging_l2)
    return SafeLtrWorld(splits, logging, ClickModel.named(setup.click_model))


def run_safeltr(setup: SafeLtrSetup, world: SafeLtrWorld, method: str, N: int, seed: int) -> TrainResult:
    """Simulate training and validation logs of sizes ``N`` and ``N * validation_ratio``
    from the logging policy, then train ``method`` on them."""
    if method not in SWEEP_METHODS:
        raise ConfigError(f"unknown safe-LTR method {method!r}")
    rng = np.random.default_rng([seed, int(N)])
    cm = world.click_model
    train_log = simulate(N, world.logging_policy, world.splits.train, cm, rng)
    val_log = simulate(max(int(round(N * setup.validation_ratio)), 1), world.logging_policy, world.splits.validation, cm, rng)
    exam = cm.examination
    safety = None
    if method in ("crm", "crm_action"):
        safety = SafetyConfig.for_examination(exam, setup.crm_delta, "crm_exposure" if method == "crm" else "crm_action")
    elif method == "safe_dr":
        safety = SafetyConfig.for_examination(exam, setup.safe_dr_delta, "safe_dr")
    prpo = PrpoConfig.from_schedule(N, setup.prpo_schedule, setup.prpo_parameter) if method == "prpo" else None
    proximal = method == "prpo"
    config = replace(setup.train, init="logging" if proximal else "zero", include_initial=proximal, seed=seed)
    return train(method, world.splits, train_log, val_log, world.logging_policy, cm, config,
                 safety=safety, prpo=prpo, regression=setup.regression)
