"""KL-constrained policy update.

Solves ``max_theta L(theta)  s.t.  mean KL(theta_old, theta) <= delta``
approximately: a conjugate-gradient solve of ``A s = g`` with ``A`` the
Fisher matrix (applied matrix-free as ``J^T M J``), the maximal step
``beta = sqrt(2 delta / s^T A s)``, then a backtracking line search on the
sampled objective and constraint.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import policies as pol
from .sampling import (
    SurrogateEstimate,
    build_vine,
    rollout_single_path,
    surrogate_from_single_path,
    surrogate_from_vine,
)

__all__ = [
    "TrustRegionConfig",
    "SamplingConfig",
    "StepReport",
    "FvpContext",
    "ZeroCurvatureError",
    "conjugate_gradient",
    "fisher_vector_product",
    "compute_step",
    "collect",
    "trpo_iteration",
]


class ZeroCurvatureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrustRegionConfig:
    delta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 1e-3
    backtrack_ratio: float = 0.5
    max_backtracks: int = 10
    fvp_subsample: float = 0.1
    fim_mode: str = "analytic"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.cg_damping < 0:
            raise ValueError("cg_damping must be >= 0")
        if not 0 < self.backtrack_ratio < 1:
            raise ValueError("backtrack_ratio must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")
        if not 0 < self.fvp_subsample <= 1:
            raise ValueError("fvp_subsample must lie in (0, 1]")
        if self.fim_mode not in ("analytic", "empirical"):
            raise ValueError("fim_mode must be 'analytic' or 'empirical'")


@dataclass(frozen=True)
class SamplingConfig:
    """How to collect data for one update.

    ``scheme`` is ``single-path`` or ``vine``. Single path uses
    ``num_paths`` trajectories of at most ``horizon`` steps. Vine uses
    ``trunk_paths`` trunks (``horizon`` steps), ``num_anchors`` anchors,
    ``actions_per_state`` branches of ``rollout_len`` steps, actions from
    ``q_mode``. ``baseline`` (``none`` or ``mean``) optionally subtracts the
    batch-mean return from the single-path Q estimates.
    """

    scheme: str = "single-path"
    num_paths: int = 20
    horizon: int = 1000
    gamma: float = 0.99
    trunk_paths: int = 10
    num_anchors: int = 100
    actions_per_state: int = 2
    rollout_len: int = 100
    q_mode: str = "policy"
    baseline: str = "none"

    def __post_init__(self):
        if self.scheme not in ("single-path", "vine"):
            raise ValueError(f"unknown sampling scheme {self.scheme!r}")
        if self.baseline not in ("none", "mean"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("num_paths", "horizon", "trunk_paths", "num_anchors", "actions_per_state", "rollout_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class StepReport:
    search_dir: np.ndarray
    initial_beta: float
    accepted_beta: float
    backtracks_used: int
    surrogate_improvement: float
    kl_after: float
    cg_residual: float
    accepted: bool
    reason: str = ""
    theta_new: np.ndarray | None = None


def conjugate_gradient(apply_A, g, iters: int, tol: float = 1e-10):
    """Standard CG from ``x = 0``. Returns ``(x, residual_norm, x^T A x)``.

    Stops early once the residual drops below ``tol * |g|``. ``x^T A x`` is
    obtained without an extra product as ``x . (g - r)``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    g = np.asarray(g, dtype=float)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = float(r @ r)
    stop = tol * math.sqrt(rr)
    if rr == 0.0:
        return x, 0.0, 0.0
    for i in range(iters):
        Ap = np.asarray(apply_A(p), dtype=float)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            raise ArithmeticError(f"conjugate gradient broke down at iteration {i} (p^T A p = {pAp})")
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        if not np.all(np.isfinite(x)):
            raise ArithmeticError(f"non-finite conjugate gradient iterate at iteration {i}")
        rr_new = float(r @ r)
        if math.sqrt(rr_new) < stop:
            rr = rr_new
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, math.sqrt(rr), float(x @ (g - r))


class FvpContext:
    """Fisher-vector products at ``theta_old`` over a fixed set of states.

    ``mode='analytic'`` averages ``J^T M J v`` using the head Fisher;
    ``mode='empirical'`` averages ``(g_i . v) g_i`` with ``g_i`` the score of
    the sampled action ``actions[i]``. ``damping * v`` is added in both.
    """

    def __init__(self, spec, theta_old, states, actions=None, mode="analytic", damping=0.0):
        if len(states) == 0:
            raise ValueError("Fisher-vector products need at least one state")
        if mode == "empirical" and actions is None:
            raise ValueError("empirical Fisher needs the sampled actions")
        self.lin = pol.Linearization(spec, theta_old, states)
        self.mode = mode
        self.damping = damping
        if mode == "empirical":
            self._score = pol.score_head(self.lin.dist, actions)

    @property
    def num_states(self) -> int:
        return self.lin.n

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.mode == "analytic":
            out = self.lin.fvp(v)
        else:
            c = np.sum(self._score * self.lin.jvp(v), axis=1)
            out = self.lin.vjp(self._score * c[:, None]) / self.lin.n
        return out + self.damping * v

    @classmethod
    def for_estimate(cls, est: SurrogateEstimate, cfg: TrustRegionConfig, rng=None):
        n = len(est.states)
        m = max(1, int(math.ceil(cfg.fvp_subsample * n)))
        if m < n:
            if rng is None:
                raise ValueError("a generator is needed to subsample states")
            idx = np.sort(rng.choice(n, size=m, replace=False))
        else:
            idx = np.arange(n)
        return cls(est.spec, est.theta_old, est.states[idx], est.actions[idx], cfg.fim_mode, cfg.cg_damping)


def fisher_vector_product(states, spec, theta_old, v, mode="analytic", actions=None, damping=0.0):
    return FvpContext(spec, theta_old, states, actions, mode, damping)(v)


def compute_step(est: SurrogateEstimate, fvp, cfg: TrustRegionConfig) -> StepReport:
    """Search direction, maximal step and backtracking line search.

    A candidate ``theta_old + beta s`` is accepted once the sampled
    objective strictly improves and the sampled mean KL is at most
    ``delta`` (up to a relative 1e-12 so that the full step of an exact
    quadratic model is not rejected by rounding). After ``max_backtracks`` failures the step is rejected and
    ``theta_new`` equals ``theta_old``.
    """
    theta_old = est.theta_old
    g = est.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite policy gradient")
    if not np.any(g):
        return StepReport(np.zeros_like(g), 0.0, 0.0, 0, 0.0, 0.0, 0.0, False, "zero gradient", theta_old.copy())
    s, residual, sAs = conjugate_gradient(fvp, g, cfg.cg_iters)
    # curvature along s relative to its length, so small gradients are not mistaken for flat directions
    if not sAs > 1e-12 * float(s @ s):
        raise ZeroCurvatureError(f"degenerate search direction: s^T A s = {sAs:.3e}")
    beta0 = math.sqrt(2.0 * cfg.delta / sAs)
    beta = beta0
    base = est.value
    improvement, kl_val = 0.0, 0.0
    for k in range(cfg.max_backtracks + 1):
        theta = theta_old + beta * s
        try:
            obj, kl_val = est.evaluate(theta)
        except FloatingPointError:
            obj, kl_val = float("nan"), float("nan")
        improvement = obj - base
        if np.isfinite(obj) and np.isfinite(kl_val) and improvement > 0 and kl_val <= cfg.delta * (1 + 1e-12):
            return StepReport(s, beta0, beta, k, improvement, kl_val, residual, True, "", theta)
        beta *= cfg.backtrack_ratio
    return StepReport(s, beta0, 0.0, cfg.max_backtracks, improvement, kl_val, residual, False,
                      "line search exhausted", theta_old.copy())


def collect(env, spec, theta, scfg: SamplingConfig, rng):
    """Sample data and build the estimate. Returns ``(estimate, info)``."""
    if scfg.scheme == "single-path":
        batch = rollout_single_path(env, spec, theta, scfg.num_paths, scfg.horizon, rng, gamma=scfg.gamma)
        q = batch.q_hat - np.mean(batch.q_hat) if scfg.baseline == "mean" else None
        est = surrogate_from_single_path(batch, spec, theta, q_values=q)
        trunk, steps = batch, batch.num_samples
    else:
        rs = build_vine(env, spec, theta, scfg.trunk_paths, scfg.num_anchors, scfg.actions_per_state,
                        scfg.rollout_len, rng, gamma=scfg.gamma, q_mode=scfg.q_mode, trunk_horizon=scfg.horizon)
        est = surrogate_from_vine(rs, spec, theta)
        trunk, steps = rs.trunk, rs.env_steps
    info = {
        "samples": int(steps),
        "mean_return": float(np.mean(trunk.path_returns)),
        "mean_length": float(np.mean(trunk.path_lengths)),
        "eta_estimate": float(np.mean(trunk.q_hat[trunk.timesteps == 0])),
    }
    return est, info


def trpo_iteration(env, spec, theta_old, scfg: SamplingConfig, tcfg: TrustRegionConfig, rng):
    """One collect / estimate / constrained-step cycle. Returns ``(theta_new, row)``."""
    t0 = time.perf_counter()
    try:
        est, info = collect(env, spec, theta_old, scfg, rng)
    except Exception as exc:
        raise RuntimeError(f"sampling stage failed: {exc}") from exc
    try:
        fvp = FvpContext.for_estimate(est, tcfg, rng)
        rep = compute_step(est, fvp, tcfg)
    except Exception as exc:
        raise RuntimeError(f"step stage failed: {exc}") from exc
    row = {
        "samples": info["samples"],
        "mean_return": info["mean_return"],
        "mean_length": info["mean_length"],
        "eta_estimate": info["eta_estimate"],
        "surrogate": est.value + rep.surrogate_improvement if rep.accepted else est.value,
        "kl": rep.kl_after if rep.accepted else 0.0,
        "beta": rep.accepted_beta,
        "backtracks": rep.backtracks_used,
        "cg_residual": rep.cg_residual,
        "accepted": int(rep.accepted),
        "wall_time": time.perf_counter() - t0,
    }
    return rep.theta_new, row
