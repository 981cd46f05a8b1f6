"""Comparison methods: fixed-stepsize natural gradient, l2-constrained
vanilla policy gradient, and the cross-entropy method."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import policies as pol
from .sampling import SurrogateEstimate
from .solver import conjugate_gradient

__all__ = [
    "BaselineConfig",
    "CemState",
    "natural_gradient_step",
    "vanilla_pg_step",
    "cross_entropy_method",
    "cem_optimize",
    "evaluate_policy",
    "run_episodes",
    "linear_cartpole_spec",
]


@dataclass(frozen=True)
class BaselineConfig:
    kind: str = "natural-gradient"
    stepsize_inverse_lambda: float = 0.1
    l2_delta: float = 0.01
    cg_iters: int = 10
    cem_population: int = 30
    cem_elite_frac: float = 0.2
    cem_init_stddev: float = 1.0
    cem_episodes: int = 4
    cem_deterministic: bool = True
    cem_extra_std: float = 0.5
    cem_extra_decay: int = 10

    def __post_init__(self):
        if self.kind not in ("natural-gradient", "vanilla-pg", "cem"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.stepsize_inverse_lambda < 0:
            raise ValueError("stepsize_inverse_lambda must be >= 0")
        if not self.l2_delta > 0:
            raise ValueError("l2_delta must be positive")
        if self.cem_population < 2:
            raise ValueError("cem_population must be >= 2")
        if not 0 < self.cem_elite_frac <= 1:
            raise ValueError("cem_elite_frac must lie in (0, 1]")
        if self.cem_extra_std < 0 or self.cem_extra_decay < 0:
            raise ValueError("cem_extra_std and cem_extra_decay must be >= 0")
        if not self.cem_init_stddev > 0 or self.cem_episodes < 1:
            raise ValueError("cem_init_stddev and cem_episodes must be positive")


def natural_gradient_step(est: SurrogateEstimate, fvp, cfg: BaselineConfig):
    """``theta_old + (1/lambda) A^-1 g`` with no line search. Returns ``(theta_new, direction)``."""
    g = est.grad
    if not np.any(g):
        return est.theta_old.copy(), np.zeros_like(g)
    s, _, _ = conjugate_gradient(fvp, g, cfg.cg_iters)
    return est.theta_old + cfg.stepsize_inverse_lambda * s, s


def vanilla_pg_step(est: SurrogateEstimate, cfg: BaselineConfig) -> np.ndarray:
    """Maximiser of ``g . d`` subject to ``|d|^2 / 2 <= l2_delta``."""
    g = est.grad
    norm = float(np.linalg.norm(g))
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite policy gradient")
    if norm == 0.0:
        return est.theta_old.copy()
    return est.theta_old + math.sqrt(2.0 * cfg.l2_delta) * g / norm


# -- cross-entropy method --------------------------------------------------------------


@dataclass
class CemState:
    mean: np.ndarray
    std: np.ndarray
    best_theta: np.ndarray
    best_score: float = -math.inf
    iteration: int = 0
    env_steps: int = 0


def cross_entropy_method(score_fn, mean0, std0, iters, rng, population=50, elite_frac=0.2,
                         state: CemState | None = None, min_std=1e-8, extra_std=0.0, extra_decay=10):
    """Diagonal-Gaussian CEM maximising ``score_fn(thetas, rng) -> scores``.

    ``score_fn`` receives the whole population (P, d). Returns the final
    state and a list of ``(best_score_this_iter, mean_score_this_iter)``.
    The best-so-far parameters are only replaced by a strictly better score.

    ``extra_std`` adds exploration variance ``extra_std^2 * max(0, 1 - k/extra_decay)``
    after the ``k``-th refit, which guards against premature collapse.
    """
    if population < 2:
        raise ValueError("population must be >= 2")
    if not 0 < elite_frac <= 1:
        raise ValueError("elite_frac must lie in (0, 1]")
    if state is None:
        mean0 = np.asarray(mean0, dtype=float)
        state = CemState(mean0.copy(), np.broadcast_to(np.asarray(std0, float), mean0.shape).copy(), mean0.copy())
    n_elite = max(1, int(round(elite_frac * population)))
    trace = []
    for _ in range(iters):
        pop = state.mean + state.std * rng.standard_normal((population, state.mean.size))
        scores = np.asarray(score_fn(pop, rng), dtype=float)
        order = np.argsort(-scores, kind="stable")
        elite = pop[order[:n_elite]]
        state.mean = elite.mean(axis=0)
        state.iteration += 1
        extra = extra_std**2 * max(0.0, 1.0 - state.iteration / extra_decay) if extra_decay > 0 else 0.0
        state.std = np.maximum(np.sqrt(elite.var(axis=0) + extra), min_std)
        top = int(order[0])
        if scores[top] > state.best_score:
            state.best_score = float(scores[top])
            state.best_theta = pop[top].copy()
        trace.append((float(scores[top]), float(np.mean(scores))))
    return state, trace


def evaluate_policy(env, spec, theta, episodes, seed, horizon=None, deterministic=False):
    """Mean undiscounted return over ``episodes`` episodes with a fixed seed."""
    return run_episodes(env, spec, theta, episodes, seed, horizon, deterministic)[0]


def run_episodes(env, spec, theta, episodes, seed, horizon=None, deterministic=False):
    """Returns ``(mean_return, env_steps)``.

    Episodes run in lockstep so the policy is evaluated once per time step.
    ``deterministic`` acts with the mean (Gaussian) or the mode (categorical).
    """
    rng = np.random.default_rng(seed)
    horizon = horizon or env.max_steps or 1000
    envs = []
    for ep in range(episodes):
        e = env.clone()
        e.reseed([seed, ep])
        envs.append(e)
    obs = [e.reset() for e in envs]
    active = list(range(episodes))
    total = 0.0
    steps = 0
    for _ in range(horizon):
        if not active:
            break
        dist = pol.forward(spec, theta, np.array([obs[i] for i in active]))
        if not deterministic:
            acts = pol.sample(dist, rng)
        elif dist.kind == "gaussian":
            acts = dist.mean
        else:
            acts = np.column_stack([np.argmax(p, axis=1) for p in dist.probs])
        still = []
        for j, i in enumerate(active):
            obs[i], r, done = envs[i].step(acts[j])
            total += r
            steps += 1
            if not done:
                still.append(i)
        active = still
    return total / episodes, steps


def cem_optimize(env, spec, cfg: BaselineConfig, iters, rng, state: CemState | None = None, horizon=None):
    """CEM over policy parameters, scored by mean episode return.

    All candidates of one iteration are evaluated on the same episode seeds.
    Returns ``(state, trace)`` as :func:`cross_entropy_method`.
    """
    d = pol.param_layout(spec).size
    if state is None:
        state = CemState(np.zeros(d), np.full(d, cfg.cem_init_stddev), np.zeros(d))

    def score(pop, r):
        seed = int(r.integers(0, 2**63 - 1))
        out = []
        for th in pop:
            ret, steps = run_episodes(env, spec, th, cfg.cem_episodes, seed, horizon, cfg.cem_deterministic)
            state.env_steps += steps
            out.append(ret)
        return out

    return cross_entropy_method(score, state.mean, state.std, iters, rng,
                                cfg.cem_population, cfg.cem_elite_frac, state,
                                extra_std=cfg.cem_extra_std, extra_decay=cfg.cem_extra_decay)


def linear_cartpole_spec() -> pol.NetworkSpec:
    """Six parameters: 4 weights, a bias and a log standard deviation."""
    return pol.NetworkSpec.gaussian(4, (), 1)
