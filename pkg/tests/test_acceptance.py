"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

from trpolab import harness, theory
from trpolab import policies as pol
from trpolab.baselines import BaselineConfig, cem_optimize, linear_cartpole_spec, run_episodes
from trpolab.envs import CartPole, TabularEnv, random_mdp
from trpolab.harness import RunConfig, run_experiment
from trpolab.mdp import TabularMdp, TabularPolicy, eta_difference_identity, value_iteration
from trpolab.policies import NetworkSpec
from trpolab.sampling import build_vine, rollout_single_path, surrogate_from_vine
from trpolab.solver import FvpContext, SamplingConfig, TrustRegionConfig, conjugate_gradient, trpo_iteration

from conftest import random_instance
from test_solver import mean_kl_hessian_fd

CARTPOLE_SAMPLING = SamplingConfig(num_paths=20, horizon=1000, gamma=0.99, baseline="mean")


@pytest.mark.acceptance(1, "advantage identity on 1000 random triples within 1e-8")
def test_advantage_identity():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        lhs, rhs = eta_difference_identity(*random_instance(rng, 10, 5))
        worst = max(worst, abs(lhs - rhs))
    elapsed = time.perf_counter() - t0
    print(f"worst identity error {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-8
    assert elapsed < 10


@pytest.mark.acceptance(2, "surrogate gradient equals finite-difference return gradient")
def test_first_order_match():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        S, A = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        mdp = random_mdp(S, A, int(rng.integers(2**31)), discount=float(rng.uniform(0.5, 0.95)))
        logits = rng.normal(size=(S, A))
        g = theory.surrogate_grad_softmax(mdp, logits)
        fd = theory.eta_grad_fd_softmax(mdp, logits, h=1e-5)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0
    print(f"worst relative gradient error {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed < 30


@pytest.mark.acceptance(3, "total-variation bound holds and the refined bound dominates it")
def test_bound_certification():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    min_slack, min_gap = np.inf, np.inf
    for _ in range(1000):
        mdp, pi, pi2 = random_instance(rng, 10, 5)
        c1 = theory.certify_tv_bound(mdp, pi, pi2)
        c2 = theory.certify_perturbation_bound(mdp, pi, pi2)
        min_slack = min(min_slack, c1.slack)
        min_gap = min(min_gap, c2.lower_bound - c1.lower_bound)
    elapsed = time.perf_counter() - t0
    print(f"min slack {min_slack:.3e}, min refined-minus-TV bound {min_gap:.3e}, {elapsed:.1f}s")
    assert min_slack >= -1e-9
    assert min_gap >= 0.0
    assert elapsed < 60


@pytest.mark.acceptance(4, "minorize-maximize policy iteration is monotone and reaches the optimum")
def test_mm_monotonicity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_drop, worst_gap = -np.inf, 0.0
    for i in range(50):
        S, A = int(rng.integers(2, 7)), int(rng.integers(2, 4))
        mdp = random_mdp(S, A, 1000 + i, discount=0.5)
        steps = theory.mm_policy_iteration(mdp, TabularPolicy.uniform(S, A), 150)
        etas = np.array([s.eta for s in steps])
        worst_drop = max(worst_drop, float(np.max(etas[:-1] - etas[1:])))
        worst_gap = max(worst_gap, float(mdp.initial_dist @ value_iteration(mdp)) - etas[-1])
    elapsed = time.perf_counter() - t0
    print(f"largest per-step decrease {worst_drop:.2e}, largest final gap {worst_gap:.2e}, {elapsed:.0f}s")
    assert worst_drop <= 1e-9
    assert worst_gap <= 1e-3
    assert elapsed < 300


@pytest.mark.acceptance(5, "Fisher-vector products, conjugate gradient and score gradients")
def test_solver_numerics():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    fvp_err = 0.0
    for spec in (NetworkSpec.gaussian(3, (4,), 2), NetworkSpec.categorical(3, (5,), (3,)),
                 NetworkSpec.categorical(2, (3,), (2, 3))):
        theta = pol.init_params(spec, rng) + 0.3 * rng.normal(size=pol.param_layout(spec).size)
        assert theta.size <= 50
        states = rng.normal(size=(20, spec.input_dim))
        H = mean_kl_hessian_fd(spec, theta, states)
        f = FvpContext(spec, theta, states)
        for _ in range(5):
            v = rng.normal(size=theta.size)
            fvp_err = max(fvp_err, np.linalg.norm(f(v) - H @ v) / np.linalg.norm(H @ v))
    cg_err = 0.0
    for _ in range(20):
        M = rng.normal(size=(20, 20))
        A = M @ M.T + np.eye(20)
        g = rng.normal(size=20)
        x, _, _ = conjugate_gradient(lambda v: A @ v, g, 200, tol=1e-14)
        direct = np.linalg.solve(A, g)
        cg_err = max(cg_err, np.linalg.norm(x - direct) / np.linalg.norm(direct))
    score_err = 0.0
    for spec in (NetworkSpec.gaussian(3, (5,), 2), NetworkSpec.categorical(3, (4, 3), (3, 2)),
                 NetworkSpec.tabular(4, 3)):
        for _ in range(10):
            theta = pol.init_params(spec, rng) + 0.3 * rng.normal(size=pol.param_layout(spec).size)
            s = np.eye(4)[rng.integers(4)] if spec.head == "tabular" else rng.normal(size=spec.input_dim)
            a = pol.sample(pol.forward(spec, theta, s), rng)[0]
            g = pol.grad_log_prob(spec, theta, s, a)
            h = 1e-6
            fd = np.array([(pol.log_prob(pol.forward(spec, theta + h * e, s), [a])[0]
                            - pol.log_prob(pol.forward(spec, theta - h * e, s), [a])[0]) / (2 * h)
                           for e in np.eye(theta.size)])
            score_err = max(score_err, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0
    print(f"FVP {fvp_err:.2e}, CG {cg_err:.2e}, score {score_err:.2e}, {elapsed:.1f}s")
    assert fvp_err <= 1e-3 and cg_err <= 1e-8 and score_err <= 1e-4
    assert elapsed < 120


@pytest.mark.slow
@pytest.mark.acceptance(6, "every accepted cart-pole step satisfies the KL constraint and improves")
def test_constraint_enforcement(tmp_path, monkeypatch):
    reports = []
    real = harness.compute_step

    def recording(est, fvp, cfg):
        rep = real(est, fvp, cfg)
        reports.append(rep)
        return rep

    monkeypatch.setattr(harness, "compute_step", recording)
    cfg = RunConfig(env="cartpole", algo="trpo-sp", seed=0, iterations=100, hidden_sizes=(30,),
                    sampling=CARTPOLE_SAMPLING, trust=TrustRegionConfig(delta=0.01))
    log = run_experiment(cfg, tmp_path)
    accepted = [r for r in reports if r.accepted]
    print(f"{len(accepted)} of {len(reports)} steps accepted, max KL {max(r.kl_after for r in accepted):.5f}")
    assert len(log.rows) == 100 and accepted
    assert all(r.kl_after <= 0.01 + 1e-8 for r in accepted)
    assert all(r.surrogate_improvement > 0 for r in accepted)
    kl = log.column("kl")[log.column("accepted") == 1]
    assert np.all(kl <= 0.01 + 1e-8)


@pytest.mark.slow
@pytest.mark.acceptance(7, "TRPO and CEM solve cart-pole")
def test_cartpole_learning():
    t0 = time.perf_counter()
    spec = NetworkSpec.categorical(4, (30,), (2,))
    tcfg = TrustRegionConfig(delta=0.01)
    solved_at = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        theta = pol.init_params(spec, rng)
        hit = None
        for it in range(1, 101):
            theta, row = trpo_iteration(CartPole(), spec, theta, CARTPOLE_SAMPLING, tcfg, rng)
            if row["mean_length"] >= 950:
                hit = it
                break
        solved_at.append(hit)
    print(f"TRPO iterations to mean length 950 per seed: {solved_at}")
    cem_lengths = []
    cfg = BaselineConfig(kind="cem", cem_population=30, cem_extra_std=0.5)
    lin = linear_cartpole_spec()
    for seed in range(5):
        rng = np.random.default_rng(seed)
        state = None
        for _ in range(30):
            state, _ = cem_optimize(CartPole(continuous=True), lin, cfg, 1, rng, state)
            length = run_episodes(CartPole(continuous=True), lin, state.mean, 5, seed=10_000 + seed,
                                  deterministic=True)[1] / 5
            if length >= 950:
                break
        cem_lengths.append(length)
    elapsed = time.perf_counter() - t0
    print(f"CEM mean-policy episode length per seed: {cem_lengths}; {elapsed:.0f}s")
    assert sum(h is not None for h in solved_at) >= 4
    assert sum(length >= 950 for length in cem_lengths) >= 4
    assert elapsed < 900


@pytest.mark.slow
@pytest.mark.acceptance(8, "vine advantage differences have lower variance than single path")
def test_vine_variance():
    # every anchor is the start state; both schemes spend 2N Q samples per estimate
    base = random_mdp(5, 2, 3, discount=0.9)
    mdp = TabularMdp(base.transitions, base.rewards, np.eye(5)[0], 0.9)
    env = TabularEnv(mdp)
    spec = NetworkSpec.tabular(5, 2)
    theta = np.zeros(10)
    N, L, draws = 10, 20, 30

    def vine_estimate(rng):
        rs = build_vine(env, spec, theta, N, N, 2, L, rng, gamma=0.9, q_mode="exhaustive", trunk_horizon=1)
        return np.mean(rs.q_hats[:, 0] - rs.q_hats[:, 1])

    def single_path_estimate(rng):
        b = rollout_single_path(env, spec, theta, 2 * N, L, rng, gamma=0.9)
        first = b.timesteps == 0
        a, q = b.actions[first, 0], b.q_hat[first]
        if a.min() == a.max():
            return np.nan
        return q[a == 0].mean() - q[a == 1].mean()

    t0 = time.perf_counter()
    wins = 0
    for rep in range(100):
        rng = np.random.default_rng(rep)
        v = [vine_estimate(rng) for _ in range(draws)]
        s = [single_path_estimate(rng) for _ in range(draws)]
        wins += np.var(v, ddof=1) <= np.nanvar(s, ddof=1)
    elapsed = time.perf_counter() - t0
    print(f"vine variance no larger in {wins}/100 repetitions, {elapsed:.0f}s")
    assert wins >= 90
    assert elapsed < 300


@pytest.mark.acceptance(9, "constant shift of Q leaves the self-normalized gradient unchanged")
def test_baseline_invariance():
    spec = NetworkSpec.categorical(4, (8,), (2,))
    worst = 0.0
    for mode in ("policy", "uniform"):
        rng = np.random.default_rng(9)
        theta = pol.init_params(spec, rng)
        env = CartPole()
        env.reseed(9)
        rs = build_vine(env, spec, theta, 3, 40, 3, 50, rng, gamma=0.99, q_mode=mode, trunk_horizon=50)
        ref = surrogate_from_vine(rs, spec, theta, estimator="self-normalized")
        for c in (-1000.0, 7.0, 1000.0):
            shifted = surrogate_from_vine(rs, spec, theta, estimator="self-normalized", q_values=rs.q_hats + c)
            worst = max(worst, float(np.max(np.abs(shifted.grad - ref.grad))))
    print(f"largest gradient change under a constant shift {worst:.2e}")
    assert worst < 1e-10


@pytest.mark.acceptance(10, "identical runs give identical logs and resumed runs match")
def test_determinism_and_resume(tmp_path):
    common = dict(env="cartpole", algo="trpo-sp", seed=7, hidden_sizes=(8,), checkpoint_every=3,
                  sampling=SamplingConfig(num_paths=5, horizon=200, gamma=0.99, baseline="mean"))
    cfg = RunConfig(iterations=6, **common)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    log_a = (tmp_path / "a" / "log.csv").read_bytes()
    assert log_a == (tmp_path / "b" / "log.csv").read_bytes()
    for ck in ("iter_00003.json", "iter_00006.json"):
        assert (tmp_path / "a" / "checkpoints" / ck).read_bytes() == (tmp_path / "b" / "checkpoints" / ck).read_bytes()
    harness.resume_experiment(tmp_path / "b" / "checkpoints" / "iter_00003.json", output_dir=tmp_path / "c")
    assert (tmp_path / "c" / "log.csv").read_bytes() == log_a
    run_experiment(RunConfig(iterations=3, **common), tmp_path / "d")
    harness.resume_experiment(tmp_path / "d" / "checkpoints" / "iter_00003.json", iterations=6)
    assert (tmp_path / "d" / "log.csv").read_bytes() == log_a
