"""Policy-gradient estimators on a toy diffusion-like Gaussian chain.

A trajectory starts from ``x_T ~ N(0, sigma^2 I)`` and takes ``T`` Gaussian
steps ``x_{t-1} ~ N(x_t + W phi(x_t, c, t), step_std^2 I)`` with features
``phi = [x_t, c, onehot(t)]``.  The only reward is paid on ``x_0``:
``exp(-||x_0 - G c||^2 / (2 width^2))``, which lies in ``(0, 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bandit import Adam
from .errors import ConfigError, UsageError

RL_METHODS = ("reinforce", "reinforce_bc", "rloo", "ppo", "loop")
ON_POLICY = ("reinforce", "reinforce_bc", "rloo")
DEFAULT_CLIP = 1e-4
TRACE_COLUMNS = ["epoch", "method", "K", "mean_reward", "reward_variance", "grad_norm"]
ON_POLICY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ChainMdp:
    """Finite-horizon chain with a terminal, prompt-dependent target."""

    horizon: int
    prompts: np.ndarray
    target_map: np.ndarray
    sigma: float = 1.0
    reward_width: float = 1.0

    def __post_init__(self):
        P = np.asarray(self.prompts, float)
        G = np.asarray(self.target_map, float)
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        if P.ndim != 2 or P.shape[0] < 1 or G.ndim != 2 or G.shape[1] != P.shape[1]:
            raise ConfigError("prompts (n, c) and target_map (s, c) are inconsistent")
        if not (self.sigma > 0 and self.reward_width > 0):
            raise ConfigError("sigma and reward_width must be positive")
        P.setflags(write=False)
        G.setflags(write=False)
        object.__setattr__(self, "prompts", P)
        object.__setattr__(self, "target_map", G)

    @property
    def state_dim(self) -> int:
        return int(self.target_map.shape[0])

    @property
    def context_dim(self) -> int:
        return int(self.prompts.shape[1])

    @property
    def n_prompts(self) -> int:
        return int(self.prompts.shape[0])

    @property
    def feature_dim(self) -> int:
        return self.state_dim + self.context_dim + self.horizon

    def targets(self, prompt_ids) -> np.ndarray:
        return self.prompts[prompt_ids] @ self.target_map.T

    def reward(self, x0, prompt_ids) -> np.ndarray:
        """Terminal reward; ``prompt_ids`` must broadcast against ``x0.shape[:-1]``."""
        d2 = np.sum((np.asarray(x0) - self.targets(np.asarray(prompt_ids))) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * self.reward_width**2))

    @classmethod
    def synthetic(cls, horizon=10, state_dim=2, context_dim=3, n_prompts=16, seed=0, sigma=1.0, reward_width=1.0):
        rng = np.random.default_rng(seed)
        prompts = rng.normal(size=(n_prompts, context_dim))
        target_map = rng.normal(size=(state_dim, context_dim)) * 2.0 / math.sqrt(context_dim)
        return cls(horizon, prompts, target_map, sigma, reward_width)


@dataclass(frozen=True, eq=False)
class GaussianChainPolicy:
    """Per-step mean ``x_t + W phi``; fixed step standard deviation."""

    weights: np.ndarray
    step_std: float = 0.3

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2:
            raise ConfigError("weights must be a (state_dim, feature_dim) matrix")
        if not self.step_std > 0:
            raise ConfigError("step_std must be positive")
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @classmethod
    def zeros(cls, mdp: ChainMdp, step_std=0.3):
        return cls(np.zeros((mdp.state_dim, mdp.feature_dim)), step_std)

    def with_weights(self, weights):
        return GaussianChainPolicy(weights, self.step_std)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``n`` prompts with ``K`` trajectories each.

    ``states[..., j, :]`` is ``x_{T-j}``; ``features[..., j, :]`` is
    ``phi(x_{T-j}, c, T-j)`` and ``old_log_probs[..., j]`` the log-density
    of the step ``x_{T-j} -> x_{T-j-1}`` under the sampling policy.
    """

    prompt_ids: np.ndarray  # (n,)
    states: np.ndarray  # (n, K, T + 1, s)
    features: np.ndarray  # (n, K, T, F)
    old_log_probs: np.ndarray  # (n, K, T)
    rewards: np.ndarray  # (n, K)

    @property
    def K(self) -> int:
        return int(self.rewards.shape[1])

    @property
    def n_prompts(self) -> int:
        return int(self.rewards.shape[0])


def _features(x, contexts, t, horizon):
    onehot = np.zeros(x.shape[:-1] + (horizon,))
    onehot[..., t - 1] = 1.0
    return np.concatenate([x, np.broadcast_to(contexts, x.shape[:-1] + contexts.shape[-1:]), onehot], axis=-1)


def rollout(policy: GaussianChainPolicy, mdp: ChainMdp, prompt_ids, K: int, rng, noise=None) -> TrajectoryBatch:
    """Sample ``K`` trajectories per prompt.

    ``noise`` may supply ``(x_T draws (n, K, s), step draws (n, K, T, s))``
    of standard normals, for common-random-number comparisons.
    """
    if K < 1:
        raise ConfigError("K must be at least 1")
    ids = np.asarray(prompt_ids)
    n, T, s = ids.size, mdp.horizon, mdp.state_dim
    if noise is None:
        z0 = rng.standard_normal((n, K, s))
        steps = rng.standard_normal((n, K, T, s))
    else:
        z0, steps = noise
    ctx = mdp.prompts[ids][:, None, :]
    states = np.empty((n, K, T + 1, s))
    feats = np.empty((n, K, T, mdp.feature_dim))
    states[:, :, 0] = mdp.sigma * z0
    for j in range(T):
        t = T - j
        phi = _features(states[:, :, j], ctx, t, T)
        feats[:, :, j] = phi
        states[:, :, j + 1] = states[:, :, j] + phi @ policy.weights.T + policy.step_std * steps[:, :, j]
    old_lp = _step_log_probs(policy, states, feats)
    return TrajectoryBatch(ids, states, feats, old_lp, mdp.reward(states[:, :, -1], ids[:, None]))


def _step_log_probs(policy, states, feats):
    mean = states[..., :-1, :] + feats @ policy.weights.T
    resid = states[..., 1:, :] - mean
    s = states.shape[-1]
    var = policy.step_std**2
    return -0.5 * np.sum(resid**2, axis=-1) / var - 0.5 * s * math.log(2 * math.pi * var)


def log_probs(policy: GaussianChainPolicy, batch: TrajectoryBatch) -> np.ndarray:
    """Per-step log-densities ``(n, K, T)`` of the batch under ``policy``."""
    return _step_log_probs(policy, batch.states, batch.features)


def _score_terms(policy, batch):
    """Residual ``(a - mu) / std^2`` per step; the step score is ``resid ⊗ phi``."""
    mean = batch.states[..., :-1, :] + batch.features @ policy.weights.T
    return (batch.states[..., 1:, :] - mean) / policy.step_std**2


def _weighted_score(policy, batch, step_weights):
    """``sum_{n,K,t} step_weights * grad log pi_t`` as an ``(s, F)`` matrix."""
    resid = _score_terms(policy, batch)
    return np.einsum("nkt,nkts,nktf->sf", step_weights, resid, batch.features)


def trajectory_score(policy, batch) -> np.ndarray:
    """``grad log pi(trajectory)`` for every trajectory, shape ``(n, K, s, F)``."""
    return np.einsum("nkts,nktf->nksf", _score_terms(policy, batch), batch.features)


def _require_on_policy(policy, batch):
    if np.max(np.abs(log_probs(policy, batch) - batch.old_log_probs)) > ON_POLICY_TOL:
        raise UsageError("REINFORCE-family gradients need a batch sampled from the current policy")


def _check_clip(eps):
    if not eps > 0:
        raise ConfigError("clip epsilon must be positive")


def loo_baseline(rewards) -> np.ndarray:
    """Leave-one-out mean of the other trajectories of the same prompt."""
    r = np.asarray(rewards, float)
    K = r.shape[-1]
    if K < 2:
        raise UsageError("a leave-one-out baseline needs K >= 2")
    return (r.sum(axis=-1, keepdims=True) - r) / (K - 1)


def reinforce_gradient(batch: TrajectoryBatch, policy: GaussianChainPolicy, baseline: str = "none") -> np.ndarray:
    """``mean over trajectories of sum_t grad log pi_t (r - b)``."""
    _require_on_policy(policy, batch)
    if baseline == "none":
        b = 0.0
    elif baseline == "mean_reward":
        b = float(batch.rewards.mean())
    else:
        raise ConfigError(f"unknown baseline {baseline!r}")
    adv = batch.rewards - b
    T = batch.old_log_probs.shape[-1]
    weights = np.repeat(adv[..., None], T, axis=-1) / adv.size
    return _weighted_score(policy, batch, weights)


def rloo_gradient(batch: TrajectoryBatch, policy: GaussianChainPolicy) -> np.ndarray:
    _require_on_policy(policy, batch)
    adv = batch.rewards - loo_baseline(batch.rewards)
    T = batch.old_log_probs.shape[-1]
    weights = np.repeat(adv[..., None], T, axis=-1) / adv.size
    return _weighted_score(policy, batch, weights)


def _clipped_objective(batch, policy, eps, advantages):
    _check_clip(eps)
    ratio = np.exp(log_probs(policy, batch) - batch.old_log_probs)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    n_traj = advantages.size
    value = float(np.sum(clipped * advantages[..., None]) / n_traj)
    inside = (ratio >= 1.0 - eps) & (ratio <= 1.0 + eps)
    weights = np.where(inside, ratio, 0.0) * advantages[..., None] / n_traj
    return value, _weighted_score(policy, batch, weights)


def ppo_objective(batch: TrajectoryBatch, policy: GaussianChainPolicy, eps: float = DEFAULT_CLIP):
    """``mean over trajectories of sum_t clip(ratio_t, 1-eps, 1+eps) r`` and its gradient."""
    return _clipped_objective(batch, policy, eps, batch.rewards)


def loop_objective(batch: TrajectoryBatch, policy: GaussianChainPolicy, eps: float = DEFAULT_CLIP):
    """PPO objective with leave-one-out advantages ``r^i - b^i``; needs ``K >= 2``."""
    return _clipped_objective(batch, policy, eps, batch.rewards - loo_baseline(batch.rewards))


def per_prompt_objective(batch, policy, eps, method):
    """Objective estimate of each prompt's group of ``K`` trajectories, shape ``(n,)``.

    ``method`` is ``"ppo"`` (raw reward) or ``"loop"`` (leave-one-out advantage).
    """
    _check_clip(eps)
    ratio = np.exp(log_probs(policy, batch) - batch.old_log_probs)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps).sum(axis=-1)
    adv = batch.rewards if method == "ppo" else batch.rewards - loo_baseline(batch.rewards)
    return np.mean(clipped * adv, axis=-1)


def expected_reward(policy, mdp, n_per_prompt=256, seed=12345) -> float:
    """Monte Carlo ``E[r]`` over all prompts with a fixed noise seed."""
    rng = np.random.default_rng(seed)
    batch = rollout(policy, mdp, np.arange(mdp.n_prompts), n_per_prompt, rng)
    return float(batch.rewards.mean())


@dataclass
class RlResult:
    policy: GaussianChainPolicy
    trace: list
    final_reward: float


def train_rl(
    mdp: ChainMdp,
    method: str,
    *,
    epochs: int = 100,
    inner_epochs: int = 1,
    K: int = 1,
    prompts_per_epoch: int = 16,
    learning_rate: float = 0.01,
    eps: float = DEFAULT_CLIP,
    step_std: float = 0.3,
    seed: int = 0,
    eval_samples: int = 256,
) -> RlResult:
    """Train a chain policy from zero weights with Adam.

    Every epoch draws ``prompts_per_epoch`` prompts and ``K`` trajectories
    per prompt from the current policy; PPO and LOOP then take
    ``inner_epochs`` steps on that batch.
    """
    if method not in RL_METHODS:
        raise ConfigError(f"unknown RL method {method!r}")
    if method in ON_POLICY and inner_epochs != 1:
        raise UsageError(f"{method} is on-policy; sample reuse (inner_epochs > 1) needs importance weighting")
    if method in ("rloo", "loop") and K < 2:
        raise UsageError(f"{method} needs K >= 2")
    if epochs < 1 or inner_epochs < 1 or prompts_per_epoch < 1:
        raise ConfigError("epochs, inner_epochs and prompts_per_epoch must be positive")
    rng = np.random.default_rng(seed)
    policy = GaussianChainPolicy.zeros(mdp, step_std)
    opt = Adam(learning_rate)
    trace = []
    for epoch in range(1, epochs + 1):
        ids = rng.integers(mdp.n_prompts, size=prompts_per_epoch)
        batch = rollout(policy, mdp, ids, K, rng)
        norms = []
        for _ in range(inner_epochs):
            if method == "reinforce":
                grad = reinforce_gradient(batch, policy, "none")
            elif method == "reinforce_bc":
                grad = reinforce_gradient(batch, policy, "mean_reward")
            elif method == "rloo":
                grad = rloo_gradient(batch, policy)
            elif method == "ppo":
                grad = ppo_objective(batch, policy, eps)[1]
            else:
                grad = loop_objective(batch, policy, eps)[1]
            norms.append(float(np.linalg.norm(grad)))
            policy = policy.with_weights(opt.step(policy.weights, grad))
        trace.append({
            "epoch": epoch,
            "method": method,
            "K": K,
            "mean_reward": float(batch.rewards.mean()),
            "reward_variance": float(batch.rewards.var()),
            "grad_norm": float(np.mean(norms)),
        })
    return RlResult(policy, trace, expected_reward(policy, mdp, eval_samples, seed + 1))


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(trace)
