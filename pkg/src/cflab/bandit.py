"""Single-action contextual bandits: environments, estimators and learning.

Contexts come from a finite pool, so the true value of any policy is an
exact average.  Logs may carry row multiplicities, which lets a log of
``N`` interactions be stored as one row per observed (context, action)
cell with the mean reward; every estimator here is exact under that
compression.
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .errors import ConfigError, DegenerateBaselineError, EmptyDatasetError, EstimatorError, UsageError, ValidationError

BASELINE_KINDS = ("none", "fixed", "optimal_gradient", "optimal_value", "mean_reward")
OPL_METHODS = ("ips", "snips", "banditnet", "beta_ips_gradient", "beta_ips_value")
OPE_ESTIMATORS = ("ips", "snips", "dr", "beta_ips")
DEGENERATE_TOL = 1e-9
OPE_COLUMNS = ["estimator", "n_actions", "inv_temp", "N", "mse", "variance", "bias", "ci_low", "ci_high"]


@dataclass(frozen=True, eq=False)
class BanditEnvironment:
    """Finite context pool with Bernoulli rewards and a softmax logging policy.

    ``expected_reward[x, a]`` is the click probability of action ``a`` in
    context ``x``; the logging policy is ``softmax(inv_temp * expected_reward[x])``.
    """

    contexts: np.ndarray
    expected_reward: np.ndarray
    inv_temp: float = 1.0
    context_probs: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.contexts, float)
        q = np.asarray(self.expected_reward, float)
        if X.ndim != 2 or q.ndim != 2 or X.shape[0] != q.shape[0] or X.shape[0] == 0:
            raise ConfigError("contexts (P, d) and expected_reward (P, A) must share P > 0")
        if q.shape[1] < 1 or np.any(q < 0) or np.any(q > 1):
            raise ValidationError("expected rewards must lie in [0, 1]")
        p = np.full(X.shape[0], 1.0 / X.shape[0]) if self.context_probs is None else np.asarray(self.context_probs, float)
        if p.shape != (X.shape[0],) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError("context_probs must be a distribution over the pool")
        if not np.isfinite(self.inv_temp):
            raise ConfigError("inv_temp must be finite")
        for name, arr in (("contexts", X), ("expected_reward", q), ("context_probs", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_actions(self) -> int:
        return int(self.expected_reward.shape[1])

    @property
    def context_dim(self) -> int:
        return int(self.contexts.shape[1])

    @property
    def n_contexts(self) -> int:
        return int(self.contexts.shape[0])

    @property
    def logging_probs(self) -> np.ndarray:
        return softmax(self.inv_temp * self.expected_reward, axis=1)

    def with_inverse_temperature(self, inv_temp: float) -> "BanditEnvironment":
        return BanditEnvironment(self.contexts, self.expected_reward, inv_temp, self.context_probs)

    @classmethod
    def synthetic(cls, n_actions=10, context_dim=10, n_contexts=1000, inv_temp=1.0, seed=0, reward_scale=1.0):
        """Logistic rewards ``sigmoid(reward_scale * (x . theta_a + b_a))`` on Gaussian contexts."""
        if min(n_actions, context_dim, n_contexts) < 1:
            raise ConfigError("sizes must be positive")
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n_contexts, context_dim))
        theta = rng.normal(size=(context_dim, n_actions)) / math.sqrt(context_dim)
        bias = rng.normal(size=n_actions)
        q = expit(reward_scale * (X @ theta + bias))
        return cls(X, q, inv_temp)

    def sample_log(self, N: int, rng, aggregate=False) -> "BanditLog":
        """Draw ``N`` interactions from the logging policy.

        With ``aggregate=True`` the log holds one row per observed
        (context, action) cell, weighted by its count, with the mean reward.
        """
        if N < 1:
            raise ConfigError("N must be positive")
        pi0 = self.logging_probs
        per_context = rng.multinomial(N, self.context_probs)
        if aggregate:
            counts = rng.multinomial(per_context, pi0)
            ctx, act = np.nonzero(counts)
            n = counts[ctx, act]
            reward_sum = rng.binomial(n, self.expected_reward[ctx, act])
            return BanditLog(self.contexts[ctx], act, pi0[ctx, act], reward_sum / n, ctx, n.astype(float))
        ctx = rng.permutation(np.repeat(np.arange(self.n_contexts), per_context))
        cdf = np.cumsum(pi0[ctx], axis=1)
        act = np.minimum((cdf < rng.random(N)[:, None] * cdf[:, -1:]).sum(axis=1), self.n_actions - 1)
        reward = (rng.random(N) < self.expected_reward[ctx, act]).astype(float)
        return BanditLog(self.contexts[ctx], act, pi0[ctx, act], reward, ctx)

    def population_log(self) -> "BanditLog":
        """Every (context, action, reward) outcome weighted by its probability.

        Sample averages over this log are exact expectations under the
        logging distribution, which the optimality checks rely on.
        """
        P, A = self.expected_reward.shape
        pi0 = self.logging_probs
        ctx = np.repeat(np.arange(P), 2 * A)
        act = np.tile(np.repeat(np.arange(A), 2), P)
        rew = np.tile([1.0, 0.0], P * A)
        q = self.expected_reward[ctx, act]
        prob = self.context_probs[ctx] * pi0[ctx, act] * np.where(rew == 1.0, q, 1.0 - q)
        keep = prob > 0
        return BanditLog(self.contexts[ctx][keep], act[keep], pi0[ctx, act][keep], rew[keep], ctx[keep], prob[keep])


@dataclass(frozen=True, eq=False)
class BanditLog:
    """Logged interactions ``(x, a, pi0(a|x), r)``.

    ``multiplicity`` weights each row (default 1); ``N`` is their sum.
    """

    contexts: np.ndarray
    actions: np.ndarray
    propensities: np.ndarray
    rewards: np.ndarray
    context_ids: np.ndarray | None = None
    multiplicity: np.ndarray | None = None
    subsample: bool = field(default=False)

    def __post_init__(self):
        X = np.asarray(self.contexts, float)
        a = np.asarray(self.actions)
        p = np.asarray(self.propensities, float)
        r = np.asarray(self.rewards, float)
        n = X.shape[0] if X.ndim == 2 else -1
        if n <= 0:
            raise EmptyDatasetError("a bandit log needs at least one row")
        if a.shape != (n,) or p.shape != (n,) or r.shape != (n,):
            raise ValidationError("actions, propensities and rewards must have one entry per context row")
        if not np.issubdtype(a.dtype, np.integer) or np.any(a < 0):
            raise ValidationError("actions must be non-negative integers")
        if np.any(~(p > 0)) or np.any(p > 1):
            raise ValidationError("propensities must lie in (0, 1]")
        m = np.ones(n) if self.multiplicity is None else np.asarray(self.multiplicity, float)
        if m.shape != (n,) or np.any(m <= 0):
            raise ValidationError("multiplicities must be positive")
        for name, arr in (("contexts", X), ("actions", a), ("propensities", p), ("rewards", r), ("multiplicity", m)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> float:
        return float(self.multiplicity.sum())

    @property
    def n_rows(self) -> int:
        return int(self.actions.size)

    def rows(self, index) -> "BanditLog":
        ids = None if self.context_ids is None else np.asarray(self.context_ids)[index]
        return BanditLog(
            self.contexts[index], self.actions[index], self.propensities[index], self.rewards[index],
            ids, self.multiplicity[index], subsample=True,
        )

    def batches(self, batch_size: int, rng):
        """Shuffled mini-batches covering every row once."""
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        order = rng.permutation(self.n_rows)
        for start in range(0, self.n_rows, batch_size):
            yield self.rows(order[start : start + batch_size])


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Linear softmax policy without bias, ``pi(a|x) = softmax(W x)_a``."""

    weights: np.ndarray

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2:
            raise ConfigError("weights must be an (n_actions, context_dim) matrix")
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @classmethod
    def zeros(cls, n_actions, context_dim):
        return cls(np.zeros((n_actions, context_dim)))

    @property
    def n_actions(self) -> int:
        return int(self.weights.shape[0])

    def probs(self, contexts) -> np.ndarray:
        return softmax(np.asarray(contexts, float) @ self.weights.T, axis=-1)

    def prob_of(self, contexts, actions) -> np.ndarray:
        return self.probs(contexts)[np.arange(len(actions)), actions]


@dataclass(frozen=True)
class Baseline:
    """Additive control variate ``beta`` for the policy gradient."""

    kind: str = "none"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")

    @classmethod
    def fixed(cls, lam: float) -> "Baseline":
        return cls("fixed", float(lam))


# ---------------------------------------------------------------------------
# estimators

def _check_actions(log: BanditLog, policy: SoftmaxPolicy):
    if log.actions.max() >= policy.n_actions:
        raise ValidationError("logged action outside the policy's action set")


def importance_weights(log: BanditLog, policy: SoftmaxPolicy) -> np.ndarray:
    _check_actions(log, policy)
    return policy.prob_of(log.contexts, log.actions) / log.propensities


def _mean(log, values):
    return float(np.dot(log.multiplicity, values) / log.N)


def evaluate_true_value(policy: SoftmaxPolicy, environment: BanditEnvironment) -> float:
    """Exact ``sum_x p(x) sum_a pi(a|x) q(x, a)`` over the context pool."""
    if policy.n_actions != environment.n_actions:
        raise ConfigError("policy and environment disagree on the number of actions")
    per_context = np.sum(policy.probs(environment.contexts) * environment.expected_reward, axis=1)
    return float(environment.context_probs @ per_context)


def ips_value(log: BanditLog, policy: SoftmaxPolicy) -> float:
    return _mean(log, importance_weights(log, policy) * log.rewards)


def snips_value(log: BanditLog, policy: SoftmaxPolicy) -> float:
    w = importance_weights(log, policy)
    total = float(np.dot(log.multiplicity, w))
    if not total > 0:
        raise EstimatorError("importance weights sum to zero; the log is degenerate for this policy")
    return float(np.dot(log.multiplicity, w * log.rewards) / total)


def beta_ips_value(log: BanditLog, policy: SoftmaxPolicy, beta: float) -> float:
    """``beta + mean(w * (r - beta))``."""
    w = importance_weights(log, policy)
    return float(beta + _mean(log, w * (log.rewards - beta)))


def dr_value(log: BanditLog, policy: SoftmaxPolicy, reward_model) -> float:
    """Doubly robust estimate with ``reward_model(contexts) -> (n, A)`` predictions."""
    w = importance_weights(log, policy)
    r_hat = np.asarray(reward_model(log.contexts), float)
    if r_hat.shape != (log.n_rows, policy.n_actions):
        raise ValidationError("reward model must predict every action")
    direct = np.sum(policy.probs(log.contexts) * r_hat, axis=1)
    logged = r_hat[np.arange(log.n_rows), log.actions]
    return _mean(log, w * (log.rewards - logged) + direct)


def constant_reward_model(c: float, n_actions: int):
    """Reward model predicting ``c`` for every action."""

    def model(contexts):
        return np.full((np.asarray(contexts).shape[0], n_actions), float(c))

    return model


def fit_reward_model(log: BanditLog, n_actions: int, ridge: float = 1.0):
    """Per-action ridge regression of reward on context (with intercept).

    Returns a callable mapping contexts ``(n, d)`` to predictions ``(n, A)``
    clipped to ``[0, 1]``.  Actions never logged predict the global mean.
    """
    X = np.column_stack([np.ones(log.n_rows), log.contexts])
    d = X.shape[1]
    coef = np.zeros((n_actions, d))
    coef[:, 0] = _mean(log, log.rewards)
    penalty = ridge * np.eye(d)
    penalty[0, 0] = 0.0
    for a in np.unique(log.actions):
        rows = log.actions == a
        Xa = X[rows]
        m = log.multiplicity[rows]
        gram = Xa.T @ (m[:, None] * Xa) + penalty
        coef[a] = np.linalg.lstsq(gram, Xa.T @ (m * log.rewards[rows]), rcond=None)[0]

    def model(contexts):
        Z = np.column_stack([np.ones(len(contexts)), np.asarray(contexts, float)])
        return np.clip(Z @ coef.T, 0.0, 1.0)

    return model


def optimal_beta_value(log: BanditLog, policy: SoftmaxPolicy, fallback: bool = True) -> float:
    """Estimator-variance-minimizing baseline ``sum((w^2 - w) r) / sum(w^2 - w)``.

    If the denominator is below ``1e-9 * sum(w^2)`` (target close to the
    logging policy), returns the mean reward, or raises
    :class:`DegenerateBaselineError` when ``fallback`` is false.
    """
    w = importance_weights(log, policy)
    m = log.multiplicity
    k = w * w - w
    den = float(np.dot(m, k))
    if abs(den) < DEGENERATE_TOL * float(np.dot(m, w * w)):
        if not fallback:
            raise DegenerateBaselineError("optimal value baseline is undefined: sum(w^2 - w) vanishes")
        return _mean(log, log.rewards)
    return float(np.dot(m, k * log.rewards) / den)


def _softmax_grad_parts(log: BanditLog, policy: SoftmaxPolicy):
    """Probabilities, ``w`` and the factors of ``grad pi(a|x) = pi_a (e_a - pi) x^T``."""
    _check_actions(log, policy)
    probs = policy.probs(log.contexts)
    idx = np.arange(log.n_rows)
    pa = probs[idx, log.actions]
    centered = -probs
    centered[idx, log.actions] += 1.0
    return probs, pa, centered


def grad_pi_sq_norm(log: BanditLog, policy: SoftmaxPolicy) -> np.ndarray:
    """Closed-form ``||grad_W pi(a_i|x_i)||^2 = pi_a^2 ||e_a - pi||^2 ||x||^2``."""
    _, pa, centered = _softmax_grad_parts(log, policy)
    return pa**2 * np.sum(centered**2, axis=1) * np.sum(log.contexts**2, axis=1)


def _gradient_beta_sums(log: BanditLog, policy: SoftmaxPolicy):
    g = grad_pi_sq_norm(log, policy) / log.propensities**2
    return float(np.dot(log.multiplicity, g * log.rewards)), float(np.dot(log.multiplicity, g))


def optimal_beta_gradient(log: BanditLog, policy: SoftmaxPolicy) -> float:
    """Gradient-variance-minimizing baseline ``sum(g r) / sum(g)``, ``g = ||grad pi||^2 / pi0^2``."""
    num, den = _gradient_beta_sums(log, policy)
    if not den > 0:
        return _mean(log, log.rewards)
    return num / den


def resolve_baseline(log: BanditLog, policy: SoftmaxPolicy, baseline: Baseline) -> float:
    if baseline.kind == "none":
        return 0.0
    if baseline.kind == "fixed":
        return baseline.value
    if baseline.kind == "mean_reward":
        return _mean(log, log.rewards)
    if baseline.kind == "optimal_value":
        return optimal_beta_value(log, policy)
    return optimal_beta_gradient(log, policy)


def per_row_gradients(log: BanditLog, policy: SoftmaxPolicy, beta: float) -> np.ndarray:
    """``(grad pi(a_i|x_i) / pi0_i) (r_i - beta)`` for every row, shape ``(n, A, d)``."""
    _, pa, centered = _softmax_grad_parts(log, policy)
    scale = pa / log.propensities * (log.rewards - beta)
    return (scale[:, None] * centered)[:, :, None] * log.contexts[:, None, :]


def policy_gradient(batch: BanditLog, policy: SoftmaxPolicy, baseline: Baseline = Baseline()):
    """Monte Carlo gradient of the beta-IPS objective.

    Returns ``(gradient, beta)``; data-driven baselines are computed on the
    same batch before being applied.
    """
    beta = resolve_baseline(batch, policy, baseline)
    _, pa, centered = _softmax_grad_parts(batch, policy)
    scale = batch.multiplicity * pa / batch.propensities * (batch.rewards - beta) / batch.N
    return (scale[:, None] * centered).T @ batch.contexts, beta


def gradient_variance(batch: BanditLog, policy: SoftmaxPolicy, beta: float) -> float:
    """Trace of the per-row gradient covariance within a batch."""
    g = per_row_gradients(batch, policy, beta).reshape(batch.n_rows, -1)
    m = batch.multiplicity / batch.N
    mean = m @ g
    return float(m @ np.sum((g - mean) ** 2, axis=1))


def snips_fullbatch_gradient(log: BanditLog, policy: SoftmaxPolicy) -> np.ndarray:
    """Gradient of SNIPS, ``sum_i grad w_i (r_i - V) / sum_j w_j``.

    This equals the double sum ``sum_ij grad w_i w_j (r_i - r_j) / (sum w)^2``.
    Mini-batches give a biased gradient, so they are rejected.
    """
    if log.subsample:
        raise UsageError("the SNIPS gradient needs the full log, not a mini-batch")
    _, pa, centered = _softmax_grad_parts(log, policy)
    w = pa / log.propensities
    m = log.multiplicity
    total = float(np.dot(m, w))
    if not total > 0:
        raise EstimatorError("importance weights sum to zero")
    value = float(np.dot(m, w * log.rewards) / total)
    scale = m * w * (log.rewards - value) / total
    return (scale[:, None] * centered).T @ log.contexts


# ---------------------------------------------------------------------------
# learning

class Adam:
    """Adam ascent steps on a parameter array."""

    def __init__(self, learning_rate=0.01, b1=0.9, b2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params + self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class OplResult:
    policy: SoftmaxPolicy
    trace: list

    @property
    def final_value(self) -> float:
        return self.trace[-1]["true_value"]

    @property
    def mean_gradient_variance(self) -> float:
        vals = [row["grad_variance"] for row in self.trace if row["epoch"] > 0]
        return float(np.mean(vals)) if vals else math.nan


def method_baseline(method: str, lam: float = 0.0) -> Baseline:
    if method == "ips":
        return Baseline()
    if method == "banditnet":
        return Baseline.fixed(lam)
    if method == "beta_ips_gradient":
        return Baseline("optimal_gradient")
    if method == "beta_ips_value":
        return Baseline("optimal_value")
    raise ConfigError(f"method {method!r} has no additive baseline")


def train_opl(
    environment: BanditEnvironment,
    log: BanditLog,
    method: str,
    *,
    batch_size: int | None = 1024,
    epochs: int = 20,
    learning_rate: float = 0.01,
    lam: float = 0.0,
    beta_window: int | None = None,
    seed: int = 0,
) -> OplResult:
    """Off-policy learning of a :class:`SoftmaxPolicy` with Adam.

    ``batch_size=None`` is full-batch training.  For ``beta_ips_gradient``
    the baseline is recomputed on every batch; ``beta_window=k`` instead
    pools its numerator and denominator over the last ``k`` batches.  The
    trace records, per epoch, the exact policy value, the baseline used, and
    the mean within-batch gradient variance.
    """
    if method not in OPL_METHODS:
        raise ConfigError(f"unknown OPL method {method!r}")
    if method == "snips" and batch_size is not None:
        raise UsageError("SNIPS can only be trained full-batch")
    if epochs < 1:
        raise ConfigError("epochs must be positive")
    if beta_window is not None and (method != "beta_ips_gradient" or beta_window < 1):
        raise ConfigError("beta_window needs method 'beta_ips_gradient' and a positive size")
    rng = np.random.default_rng(seed)
    window = collections.deque(maxlen=beta_window or 1)
    policy = SoftmaxPolicy.zeros(environment.n_actions, environment.context_dim)
    opt = Adam(learning_rate)
    baseline = None if method == "snips" else method_baseline(method, lam)
    trace = [{"epoch": 0, "true_value": evaluate_true_value(policy, environment), "grad_variance": math.nan, "beta": math.nan}]
    for epoch in range(1, epochs + 1):
        batches = [log] if batch_size is None else log.batches(batch_size, rng)
        variances, betas = [], []
        for batch in batches:
            if method == "snips":
                grad = snips_fullbatch_gradient(batch, policy)
                beta = snips_value(batch, policy)
            elif beta_window is not None:
                window.append(_gradient_beta_sums(batch, policy))
                num, den = map(sum, zip(*window))
                beta = num / den if den > 0 else _mean(batch, batch.rewards)
                grad, _ = policy_gradient(batch, policy, Baseline.fixed(beta))
            else:
                grad, beta = policy_gradient(batch, policy, baseline)
            variances.append(gradient_variance(batch, policy, beta))
            betas.append(beta)
            policy = SoftmaxPolicy(opt.step(policy.weights, grad))
        trace.append({
            "epoch": epoch,
            "true_value": evaluate_true_value(policy, environment),
            "grad_variance": float(np.mean(variances)),
            "beta": float(np.mean(betas)),
        })
    return OplResult(policy, trace)


def train_target_policy(environment: BanditEnvironment, n: int = 10_000, epochs: int = 10, seed: int = 0) -> SoftmaxPolicy:
    """IPS-trained softmax policy, used as the evaluation target in OPE."""
    rng = np.random.default_rng(seed)
    log = environment.with_inverse_temperature(0.0).sample_log(n, rng)
    return train_opl(environment, log, "ips", batch_size=1024, epochs=epochs, learning_rate=0.05, seed=seed).policy


def ope_estimates(log: BanditLog, policy: SoftmaxPolicy, ridge: float = 1.0) -> dict:
    model = fit_reward_model(log, policy.n_actions, ridge)
    return {
        "ips": ips_value(log, policy),
        "snips": snips_value(log, policy),
        "dr": dr_value(log, policy, model),
        "beta_ips": beta_ips_value(log, policy, optimal_beta_value(log, policy)),
    }


def ope_experiment(environment, target_policy, Ns, inv_temps, repetitions=100, seed=0, z=1.959963984540054):
    """MSE of each estimator against the exact target value.

    Returns one dict per (estimator, inverse temperature, N) with the
    columns of ``OPE_COLUMNS``; ``ci_low``/``ci_high`` bracket the MSE.
    """
    if repetitions < 2:
        raise ConfigError("repetitions must be at least 2")
    truth = evaluate_true_value(target_policy, environment)
    rows = []
    for t_index, inv_temp in enumerate(inv_temps):
        env = environment.with_inverse_temperature(inv_temp)
        for N in Ns:
            rng = np.random.default_rng([seed, t_index, int(N)])
            est = {k: np.empty(repetitions) for k in OPE_ESTIMATORS}
            for rep in range(repetitions):
                for k, v in ope_estimates(env.sample_log(int(N), rng, aggregate=True), target_policy).items():
                    est[k][rep] = v
            for k in OPE_ESTIMATORS:
                err = est[k] - truth
                sq = err**2
                half = z * sq.std(ddof=1) / math.sqrt(repetitions)
                rows.append({
                    "estimator": k,
                    "n_actions": env.n_actions,
                    "inv_temp": inv_temp,
                    "N": int(N),
                    "mse": float(sq.mean()),
                    "variance": float(est[k].var(ddof=1)),
                    "bias": float(err.mean()),
                    "ci_low": float(max(sq.mean() - half, 0.0)),
                    "ci_high": float(sq.mean() + half),
                })
    return rows
