"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict (printed at the end of the
session by ``conftest.py``) and asserts the criterion at its stated
tolerance.  Heavy experiments carry the ``slow`` marker; deselect them with
``-m "not slow"``.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats

from cflab import bandit as B
from cflab import rlloop as R
from cflab import safeltr as S
from cflab.clicksim import ClickModel, InteractionLog, aggregate_log, simulate
from cflab.dataset import QueryRecord, RankingDataset, generate_synthetic, relevance_probability
from cflab.policy import StochasticRankingPolicy, estimate_exposure, examination_defaults, grad_log_prob, log_prob

from oracles import all_rankings, bandit_log_expectation, click_outcomes, pl_prob

pytestmark = pytest.mark.acceptance

RESULTS = []


def report(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


# ---------------------------------------------------------------------------
# shared helpers

def one_query_world(seed, kind, n_docs=3, K=2):
    rng = np.random.default_rng(seed)
    q = QueryRecord(0, rng.normal(size=(n_docs, 2)), rng.integers(0, 5, n_docs))
    data = RankingDataset((q,), cutoff=K)
    cm = ClickModel.pbm(cutoff=K) if kind == "pbm" else ClickModel.trust_bias(cutoff=K)
    return data, cm


def single_logs(data, cm, pi0):
    """Every one-interaction log with its exact probability (brute force)."""
    q = data[0]
    exam = cm.examination
    scores = pi0.scores(q.features).tolist()
    rel = relevance_probability(cm.transform, q.grades)
    for y in all_rankings(q.n_docs, pi0.cutoff):
        py = pl_prob(scores, y)
        probs = [exam.alpha[k] * rel[d] + exam.beta[k] for k, d in enumerate(y)]
        for c, pc in click_outcomes(y, probs):
            yield InteractionLog([q.query_id], [list(y)], [list(c)]), py * pc


def exact_profiles(policy, data, exam):
    """Exact (rho, omega) arrays in the dataset's padded layout."""
    shape = data.padded.mask.shape
    rho, omega = np.zeros(shape), np.zeros(shape)
    for i, q in enumerate(data):
        prof = estimate_exposure(policy, q, exam, 1, exact=True)
        rho[i, : q.n_docs] = prof.rho
        omega[i, : q.n_docs] = prof.omega
    return rho, omega


def clopper_pearson_lower(k, n, confidence=0.99):
    if k == 0:
        return 0.0
    return float(stats.beta.ppf(1 - confidence, k, n - k + 1))


def paired_interval(a, b, level=0.8):
    d = np.asarray(a, float) - np.asarray(b, float)
    half = stats.t.ppf(0.5 + level / 2, d.size - 1) * d.std(ddof=1) / math.sqrt(d.size)
    return d.mean() - half, d.mean() + half


# ---------------------------------------------------------------------------
# 1. unbiasedness by enumeration

def test_criterion_1_unbiased_by_enumeration():
    start = time.perf_counter()
    worst = 0.0
    checks = 0
    for kind, estimators in (("pbm", ("ips",)), ("trust_bias", ("ips", "dr"))):
        for seed in range(20):
            data, cm = one_query_world(seed, kind)
            rng = np.random.default_rng(1000 + seed)
            pi0 = StochasticRankingPolicy(rng.normal(size=2), cutoff=2)
            target = StochasticRankingPolicy(rng.normal(size=2) * 2, cutoff=2)
            exam = cm.examination
            rho0, _ = exact_profiles(pi0, data, exam)
            _, omega = exact_profiles(target, data, exam)
            truth = S.true_utility(omega, relevance_probability(cm.transform, data[0].grades)[None])
            r_hat = S.RegressionModel(rng.uniform(size=(1, 3)))
            # the estimate is a mean over i.i.d. interactions, so one interaction suffices
            means = dict.fromkeys(estimators, 0.0)
            for log, p in single_logs(data, cm, pi0):
                agg = aggregate_log(log, data, exam)
                if "ips" in means:
                    means["ips"] += p * S.ips_exposure(agg, rho0, omega).utility
                if "dr" in means:
                    means["dr"] += p * S.dr_estimate(agg, rho0, omega, r_hat).utility
            for value in means.values():
                worst = max(worst, abs(value - truth))
                checks += 1
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-10 and elapsed < 10,
           f"{checks} exact expectations, max |E[U_hat] - U| = {worst:.2e} (tol 1e-10), {elapsed:.1f}s (limit 10s)")


# ---------------------------------------------------------------------------
# 2. variance bound

def test_criterion_2_variance_bound():
    violations = 0
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_docs = int(rng.integers(3, 6))
        K = int(rng.integers(1, min(n_docs, 4) + 1))
        data, cm = one_query_world(seed, "pbm", n_docs, K)
        exam = cm.examination
        pi0 = StochasticRankingPolicy(rng.normal(size=2) * rng.uniform(0, 3), cutoff=K)
        target = StochasticRankingPolicy(rng.normal(size=2) * rng.uniform(0, 3), cutoff=K)
        rho0, _ = exact_profiles(pi0, data, exam)
        rho, _ = exact_profiles(target, data, exam)
        m1 = m2 = 0.0
        for log, p in single_logs(data, cm, pi0):
            u = S.ips_exposure(aggregate_log(log, data, exam), rho0, rho).utility
            m1 += p * u
            m2 += p * u * u
        var1 = m2 - m1 * m1
        Z = exam.alpha[:K].sum()
        d2 = S.empirical_divergence(rho, rho0, [1])
        # Var over N i.i.d. interactions is var1 / N, so the bound scales identically
        for N in (1, 10, 1000):
            bound = Z / N * d2 + 1 / N
            violations += var1 / N > bound
            worst = max(worst, (var1 / N) / bound)
    report(2, violations == 0, f"20 policy pairs x 3 N, {violations} violations, max Var/bound = {worst:.3f}")


# ---------------------------------------------------------------------------
# 3. bound coverage

def test_criterion_3_bound_coverage():
    start = time.perf_counter()
    n_logs, N = 2000, 100
    data = generate_synthetic(5, 5, 3, seed=0)
    rng = np.random.default_rng(0)
    pi0 = StochasticRankingPolicy(rng.normal(size=3))
    target = StochasticRankingPolicy(rng.normal(size=3) * 2)
    mask = data.padded.mask
    lines, ok = [], True
    for kind, mode in (("pbm", "crm_exposure"), ("trust_bias", "safe_dr")):
        cm = ClickModel.named(kind)
        exam = cm.examination
        rho0, omega0 = exact_profiles(pi0, data, exam)
        rho, omega = exact_profiles(target, data, exam)
        rel = np.where(mask, relevance_probability(cm.transform, data.padded.grades), 0.0)
        truth = S.true_utility(omega, rel, mask)
        reg = S.RegressionModel.noisy_oracle(data, cm, 0.2, np.random.default_rng(1))
        aggs = [aggregate_log(simulate(N, pi0, data, cm, np.random.default_rng([7, i])), data, exam) for i in range(n_logs)]
        for delta in (0.5, 0.95):
            cfg = S.SafetyConfig.for_examination(exam, delta, mode)
            covered = 0
            for agg in aggs:
                if mode == "safe_dr":
                    est = S.dr_estimate(agg, rho0, omega, reg)
                    d2 = S.empirical_divergence(omega, omega0, agg.counts)
                else:
                    est = S.ips_exposure(agg, rho0, rho)
                    d2 = S.empirical_divergence(rho, rho0, agg.counts)
                covered += truth >= S.crm_lower_bound(est.utility, d2, N, cfg).certified_bound
            lower = clopper_pearson_lower(covered, n_logs)
            ok &= lower >= 1 - delta
            lines.append(f"{mode}/{kind} delta={delta}: {covered}/{n_logs} covered, 99% lower {lower:.3f} vs {1 - delta:.2f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    report(3, ok, "; ".join(lines) + f"; {elapsed:.0f}s (limit 300s)")


# ---------------------------------------------------------------------------
# 4. safe-LTR ordering

@pytest.mark.slow
def test_criterion_4_safe_ltr_ordering():
    setup = S.SafeLtrSetup()
    methods = ("ips", "dr", "crm", "prpo")
    seeds = range(10)
    delta = {(m, N): [] for m in methods for N in (100, 1000, 10_000, 10**6)}
    for seed in seeds:
        world = S.make_world(setup, seed)
        for N in (100, 1000, 10_000, 10**6):
            for m in methods:
                res = S.run_safeltr(setup, world, m, N, seed)
                delta[(m, N)].append(res.ndcg_test - res.ndcg_logging)
    safe_ok = all(min(delta[(m, N)]) >= -0.01 for m in ("crm", "prpo") for N in (100, 1000, 10_000))
    worst_safe = min(min(delta[(m, N)]) for m in ("crm", "prpo") for N in (100, 1000, 10_000))
    below = {m: sum(d < 0 for d in delta[(m, 100)]) for m in ("ips", "dr")}
    unsafe_ok = all(v >= 7 for v in below.values())
    means = {m: float(np.mean(delta[(m, 10**6)])) for m in methods}
    spread = max(means.values()) - min(means.values())
    detail = (f"CRM/PRPO worst delta {worst_safe:+.3f} (need >= -0.01); "
              f"below logging at N=100: IPS {below['ips']}/10, DR {below['dr']}/10 (need >= 7); "
              f"N=1e6 seed-mean spread {spread:.3f} (need <= 0.02) "
              + ", ".join(f"{m} {v:+.3f}" for m, v in means.items()))
    report(4, safe_ok and unsafe_ok and spread <= 0.02, detail)


# ---------------------------------------------------------------------------
# 5. PRPO robustness under adversarial clicks

@pytest.mark.slow
def test_criterion_5_prpo_robustness():
    setup = S.SafeLtrSetup(click_model="adversarial", prpo_schedule="constant", prpo_parameter=1.0, safe_dr_delta=0.01)
    prpo, safe_dr = [], []
    for seed in range(10):
        world = S.make_world(setup, seed)
        for N in (1000, 10**6):
            res = S.run_safeltr(setup, world, "prpo", N, seed)
            prpo.append(res.ndcg_test - res.ndcg_logging)
        res = S.run_safeltr(setup, world, "safe_dr", 10**6, seed)
        safe_dr.append(res.ndcg_test - res.ndcg_logging)
    drop = -float(np.mean(safe_dr))
    ok = min(prpo) >= -0.01 and drop > 0.05
    report(5, ok, f"PRPO worst delta {min(prpo):+.4f} over 10 seeds x N in (1e3, 1e6) (need >= -0.01); "
                  f"safe-DR mean drop at 1e6 {drop:.3f} (need > 0.05), {sum(d < -0.05 for d in safe_dr)}/10 seeds individually")


# ---------------------------------------------------------------------------
# 6. PRPO unit band keeps the logging ranking optimal

def test_criterion_6_prpo_logging_ranking_optimal():
    exam = examination_defaults("trust_bias")
    cfg = S.PrpoConfig(1.0, 1.0)
    exceptions = ties = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        y0 = rng.permutation(5)
        r = rng.choice([-1.0, 1.0], 5) * rng.uniform(0.05, 1.0, 5)
        weights = {}
        for y in itertools.permutations(range(5)):
            omega = np.zeros(5)
            omega[list(y)] = exam.omega
            weights[y] = omega
        omega0 = weights[tuple(y0)]
        values = {y: S.prpo_objective(w, omega0, r, cfg) for y, w in weights.items()}
        best = max(values.values())
        logging_value = values[tuple(y0)]
        exceptions += logging_value < best - 1e-12
        ties += sum(v >= best - 1e-12 for v in values.values()) > 1
    report(6, exceptions == 0, f"50 instances, {exceptions} where another ranking beats the logging ranking "
                               f"({ties} instances have co-optimal rankings)")


# ---------------------------------------------------------------------------
# 7. beta-IPS optimality

def grid_minimum_check(f, center, step=0.05, half_width=20):
    grid = center + step * np.arange(-half_width, half_width + 1)
    values = np.array([f(b) for b in grid])
    margin = float(values.min() - f(center))
    interior = 0 < int(np.argmin(values)) < len(grid) - 1
    return margin, interior


def test_criterion_7_beta_ips_optimality():
    lines, ok = [], True
    # value baseline, tabular world: exact variance over every log of two rows
    rng = np.random.default_rng(3)
    P, A = 2, 3
    p_ctx = np.array([0.4, 0.6])
    logging = rng.dirichlet(np.ones(A) * 2, size=P)
    rewards = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    pi = B.SoftmaxPolicy(rng.normal(size=(A, P)) * 1.5)
    ctx, act = np.divmod(np.arange(P * A), A)
    population = B.BanditLog(np.eye(P)[ctx], act, logging[ctx, act], rewards[ctx, act],
                             multiplicity=p_ctx[ctx] * logging[ctx, act])
    beta_star = B.optimal_beta_value(population, pi, fallback=False)

    def to_log(rows):
        x, a, p, r = zip(*rows)
        return B.BanditLog(np.eye(P)[list(x)], np.array(a), np.array(p), np.array(r))

    def exact_var(beta):
        est = lambda rows: B.beta_ips_value(to_log(rows), pi, beta)
        m1 = bandit_log_expectation(p_ctx, logging, rewards, 2, est)
        m2 = bandit_log_expectation(p_ctx, logging, rewards, 2, lambda rows: est(rows) ** 2)
        return m2 - m1 * m1

    margin, interior = grid_minimum_check(exact_var, beta_star)
    extra = min(exact_var(0.0), exact_var(float(population.rewards @ population.multiplicity))) - exact_var(beta_star)
    ok &= margin >= 0 and interior and extra >= 0
    lines.append(f"value/tabular beta*={beta_star:.3f} margin {margin:.2e} interior={interior}, vs IPS/mean {extra:.2e}")

    # value baseline, Bernoulli-reward environment: exact single-interaction variance
    env = B.BanditEnvironment.synthetic(5, 3, 40, inv_temp=1.0, seed=4)
    pi = B.SoftmaxPolicy(np.random.default_rng(4).normal(size=(5, 3)))
    pop = env.population_log()
    w = B.importance_weights(pop, pi)
    V = B.evaluate_true_value(pi, env)

    def pop_var(beta):
        return float(pop.multiplicity @ (w * (pop.rewards - beta) + beta) ** 2) - V**2

    beta_star = B.optimal_beta_value(pop, pi, fallback=False)
    margin, interior = grid_minimum_check(pop_var, beta_star)
    ok &= margin >= 0 and interior
    lines.append(f"value/population beta*={beta_star:.3f} margin {margin:.2e} interior={interior}")

    # gradient baseline: on the population the per-row gradient has mean E[grad pi] = 0,
    # so the centered variance equals the second moment it minimizes
    beta_g = B.optimal_beta_gradient(pop, pi)
    margin, interior = grid_minimum_check(lambda b: B.gradient_variance(pop, pi, b), beta_g)
    ok &= margin >= 0 and interior
    lines.append(f"gradient/population beta*={beta_g:.3f} margin {margin:.2e} interior={interior}")

    # gradient baseline on a sampled log: the empirical second moment
    log = env.sample_log(2000, np.random.default_rng(5))
    beta_g = B.optimal_beta_gradient(log, pi)

    def second_moment(b):
        g = B.per_row_gradients(log, pi, b).reshape(log.n_rows, -1)
        return float(np.mean(np.sum(g**2, axis=1)))

    margin, interior = grid_minimum_check(second_moment, beta_g)
    ok &= margin >= 0 and interior
    lines.append(f"gradient/sampled beta*={beta_g:.3f} margin {margin:.2e} interior={interior}")
    report(7, ok, "; ".join(lines))


# ---------------------------------------------------------------------------
# 8. OPE MSE ordering

@pytest.mark.slow
def test_criterion_8_ope_mse_ordering():
    start = time.perf_counter()
    cells = []
    for n_actions in (10, 100):
        env = B.BanditEnvironment.synthetic(n_actions=n_actions, context_dim=10, n_contexts=1000, seed=0)
        target = B.train_target_policy(env, seed=0)
        rows = B.ope_experiment(env, target, [1000, 10_000, 100_000], [-5.0, 5.0], repetitions=100, seed=0)
        for inv_temp in (-5.0, 5.0):
            for N in (1000, 10_000, 100_000):
                mse = {r["estimator"]: r["mse"] for r in rows if r["inv_temp"] == inv_temp and r["N"] == N}
                cells.append((n_actions, inv_temp, N, mse))
    elapsed = time.perf_counter() - start
    vs_ips = sum(c[3]["beta_ips"] <= c[3]["ips"] for c in cells)
    vs_snips = sum(c[3]["beta_ips"] <= c[3]["snips"] for c in cells)
    losing = [f"A={a},t={t:+g},N={n}" for a, t, n, m in cells if m["beta_ips"] > m["snips"]]
    ok = vs_ips == len(cells) and vs_snips >= 0.8 * len(cells) and elapsed < 900
    report(8, ok, f"beta-IPS <= IPS in {vs_ips}/{len(cells)} cells (need all); <= SNIPS in {vs_snips}/{len(cells)} "
                  f"(need >= {math.ceil(0.8 * len(cells))}); SNIPS better at {losing}; {elapsed:.0f}s (limit 900s)")


# ---------------------------------------------------------------------------
# 9. OPL ordering

@pytest.mark.slow
def test_criterion_9_opl_ordering():
    lams = (0.0, 0.25, 0.5, 0.75, 1.0)
    runs = {}
    for seed in range(32):
        env = B.BanditEnvironment.synthetic(n_actions=10, context_dim=10, n_contexts=1000, seed=seed)
        log = env.sample_log(10_000, np.random.default_rng([seed, 1]))
        jobs = [("ips", 0.0), ("beta_ips_gradient", 0.0)] + [("banditnet", lam) for lam in lams]
        for method, lam in jobs:
            res = B.train_opl(env, log, method, batch_size=1024, epochs=20, learning_rate=0.01, lam=lam, seed=seed)
            runs.setdefault((method, lam), []).append((res.final_value, res.mean_gradient_variance))
    value = {k: np.array(v)[:, 0] for k, v in runs.items()}
    gvar = {k: np.array(v)[:, 1] for k, v in runs.items()}
    best = max((("banditnet", lam) for lam in lams), key=lambda k: value[k].mean())
    beta, ips = ("beta_ips_gradient", 0.0), ("ips", 0.0)
    # ">=" holds unless the paired 80% interval lies entirely below zero;
    # "<" needs the whole interval below zero
    v1, v2 = paired_interval(value[beta], value[best]), paired_interval(value[best], value[ips])
    g1, g2 = paired_interval(gvar[beta], gvar[best]), paired_interval(gvar[best], gvar[ips])
    ok = v1[1] >= 0 and v2[1] >= 0 and g1[1] < 0 and g2[1] < 0
    report(9, ok, f"best BanditNet lambda={best[1]}; value beta-BN CI [{v1[0]:+.4f},{v1[1]:+.4f}], "
                  f"BN-IPS CI [{v2[0]:+.4f},{v2[1]:+.4f}]; grad-var beta-BN CI [{g1[0]:+.3g},{g1[1]:+.3g}], "
                  f"BN-IPS CI [{g2[0]:+.3g},{g2[1]:+.3g}] (32 seeds, paired 80% t-intervals)")


# ---------------------------------------------------------------------------
# 10. LOOP variance and reward ordering

@pytest.mark.slow
def test_criterion_10_loop_variance_and_ordering():
    mdp = R.ChainMdp.synthetic(seed=0)
    eps = 0.2
    old = R.GaussianChainPolicy.zeros(mdp)
    rng = np.random.default_rng(1)
    probe = R.rollout(old, mdp, np.arange(mdp.n_prompts), 8, rng)
    # evaluate one clipped step away from the sampling policy: at the sampling
    # policy the LOOP objective is identically zero
    new = old.with_weights(old.weights + 0.01 * np.sign(R.loop_objective(probe, old, eps)[1]))
    Ks = (1, 2, 4, 8)
    var = {}
    for K in Ks:
        vals = [R.per_prompt_objective(R.rollout(old, mdp, np.zeros(1, int), K, rng), new, eps, "ppo" if K == 1 else "loop")[0]
                for _ in range(2000)]
        var[K] = float(np.var(vals, ddof=1))
    slope = float(np.polyfit(np.log(Ks), np.log([var[k] for k in Ks]), 1)[0])
    slope_2_8 = float(np.polyfit(np.log(Ks[1:]), np.log([var[k] for k in Ks[1:]]), 1)[0])

    final = {}
    for name, K, inner in (("loop", 4, 4), ("ppo", 1, 4), ("reinforce", 1, 1)):
        final[name] = [R.train_rl(mdp, name, epochs=200, inner_epochs=inner, K=K, learning_rate=0.01, eps=eps,
                                  seed=seed).final_reward for seed in range(3)]
    means = {k: float(np.mean(v)) for k, v in final.items()}
    order_ok = means["loop"] >= means["ppo"] >= means["reinforce"]
    ok = var[4] < var[1] and -1.3 <= slope <= -0.7 and order_ok
    report(10, ok, f"Var K=1..8 {', '.join(f'{var[k]:.3g}' for k in Ks)}; K=4 < PPO: {var[4] < var[1]}; "
                   f"log-log slope {slope:.2f} (need [-1.3,-0.7]; K=2..8 only: {slope_2_8:.2f}); "
                   f"final reward LOOP4 {means['loop']:.3f} >= PPO {means['ppo']:.3f} >= REINFORCE {means['reinforce']:.3f}: {order_ok}")


# ---------------------------------------------------------------------------
# 11. gradient correctness

def central_difference(f, x, h):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        out[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def test_criterion_11_gradient_correctness():
    checks = {}

    # Plackett-Luce log-probability, atol 1e-6
    err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        q = QueryRecord(0, rng.normal(size=(5, 3)), rng.integers(0, 5, 5))
        policy = StochasticRankingPolicy(rng.normal(size=3), cutoff=3, temperature=rng.uniform(0.5, 2))
        y = rng.permutation(5)[:3]
        fd = central_difference(lambda w: log_prob(policy.with_weights(w), q, y), policy.weights, 1e-5)
        err = max(err, float(np.max(np.abs(grad_log_prob(policy, q, y) - fd))))
    checks["PL log-prob"] = (err, 1e-6)

    # CRM and PRPO objectives under exact enumeration, rtol 1e-5
    def objective_check(kind, seed, kw):
        data = generate_synthetic(2, 3, 2, seed=seed, cutoff=2)
        cm = ClickModel.pbm(cutoff=2) if kind == "crm" else ClickModel.trust_bias(cutoff=2)
        exam = cm.examination
        pi0 = StochasticRankingPolicy(np.array([0.5, -0.3]), cutoff=2)
        log = simulate(50, pi0, data, cm, np.random.default_rng(seed))
        obj = S.build_objective(kind, log, data, exam, clip=False, **kw(data, exam))
        policy = pi0.with_weights(pi0.weights + np.random.default_rng(seed).normal(size=2) * 0.3)
        if kind == "prpo":
            sample = S.sample_exposure(policy, data, obj.positions, exam, 1, None, exact=True)
            x = S.prpo_ratio(sample.omega, obj.omega0)
            if min(np.min(np.abs(x - obj.config.eps_minus)), np.min(np.abs(x - obj.config.eps_plus))) < 1e-3:
                return None  # too close to a clip boundary for a finite difference
        grad = S.objective_gradient(policy, data, obj, exam, exact=True)[2]
        fd = central_difference(lambda w: S.objective_value(policy.with_weights(w), data, obj, exam, exact=True)[1],
                                policy.weights, 1e-6)
        return float(np.max(np.abs(grad - fd) / (np.abs(fd) + 1e-4)))

    crm_kw = lambda data, exam: {"safety": S.SafetyConfig.for_examination(exam, 0.3)}
    prpo_kw = lambda data, exam: {"prpo": S.PrpoConfig(0.6, 1.6), "regression": S.RegressionModel.constant(data, 0.3)}
    checks["CRM objective"] = (max(objective_check("crm", s, kw=crm_kw) for s in range(5)), 1e-5)
    prpo = [e for e in (objective_check("prpo", s, kw=prpo_kw) for s in range(8)) if e is not None]
    checks[f"PRPO objective ({len(prpo)} cases off the clip edges)"] = (max(prpo), 1e-5)

    # beta-IPS and full-batch SNIPS, atol 1e-5
    b_err = s_err = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        log = B.BanditLog(rng.normal(size=(30, 3)), rng.integers(0, 4, 30), rng.uniform(0.05, 1, 30), rng.random(30))
        W = rng.normal(size=(4, 3))
        beta = float(rng.uniform(-1, 1))
        g, _ = B.policy_gradient(log, B.SoftmaxPolicy(W), B.Baseline.fixed(beta))
        b_err = max(b_err, float(np.max(np.abs(g - central_difference(lambda V: B.beta_ips_value(log, B.SoftmaxPolicy(V), beta), W, 1e-6)))))
        g = B.snips_fullbatch_gradient(log, B.SoftmaxPolicy(W))
        s_err = max(s_err, float(np.max(np.abs(g - central_difference(lambda V: B.snips_value(log, B.SoftmaxPolicy(V)), W, 1e-6)))))
    checks["beta-IPS"] = (b_err, 1e-5)
    checks["SNIPS full-batch"] = (s_err, 1e-5)

    # Gaussian-chain REINFORCE against common-random-number differences, 1e4 samples, rel 5e-2
    mdp = R.ChainMdp.synthetic(seed=0)
    policy = R.GaussianChainPolicy.zeros(mdp)
    n = 10_000
    rng = np.random.default_rng(0)
    ids = np.arange(n) % mdp.n_prompts
    noise = (rng.standard_normal((n, 1, mdp.state_dim)), rng.standard_normal((n, 1, mdp.horizon, mdp.state_dim)))
    value = lambda W: R.rollout(policy.with_weights(W), mdp, ids, 1, None, noise).rewards.mean()
    fd = central_difference(value, policy.weights, 1e-5)
    grad = R.reinforce_gradient(R.rollout(policy, mdp, ids, 1, None, noise), policy, "mean_reward")
    checks["chain REINFORCE vs CRN (relative)"] = (float(np.linalg.norm(grad - fd) / np.linalg.norm(fd)), 5e-2)

    ok = all(err <= tol for err, tol in checks.values())
    report(11, ok, "; ".join(f"{name} {err:.2e} (tol {tol:g})" for name, (err, tol) in checks.items()))
