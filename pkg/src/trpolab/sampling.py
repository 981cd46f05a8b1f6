"""Monte-Carlo estimation of the surrogate objective and the mean-KL constraint.

Two sampling schemes:

* single path: whole trajectories under the current policy, with
  reward-to-go returns as Q estimates;
* vine: trunk trajectories, a subset of visited states ("anchors"), and
  several short branch rollouts from each anchor that share one
  environment-noise stream (common random numbers).

The estimators turn either into a :class:`SurrogateEstimate`, which knows
its value and gradient at ``theta_old`` and can re-evaluate objective and
mean KL at any other ``theta`` on the same data.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import policies as pol
from .envs import Env, UnsupportedCapability
from .policies import NetworkSpec

__all__ = [
    "TrajectoryBatch",
    "RolloutSet",
    "SurrogateEstimate",
    "rollout_single_path",
    "build_vine",
    "surrogate_from_single_path",
    "surrogate_from_vine",
    "discounted_reward_to_go",
    "dump_batch",
]

LOG_PROB_FLOOR = -700.0


@dataclass
class TrajectoryBatch:
    """Flattened trajectories in path-major order.

    ``path_ids[i]`` and ``timesteps[i]`` locate sample ``i``. ``q_hat`` is the
    discounted reward-to-go truncated at episode end or the horizon.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_log_probs: np.ndarray
    q_hat: np.ndarray
    path_ids: np.ndarray
    timesteps: np.ndarray
    path_lengths: np.ndarray
    path_returns: np.ndarray
    terminated: np.ndarray
    horizon: int
    gamma: float
    behavior_kind: str = "single-path"
    snapshots: list | None = field(default=None, repr=False)

    @property
    def num_paths(self) -> int:
        return len(self.path_lengths)

    @property
    def num_samples(self) -> int:
        return len(self.rewards)

    @property
    def trajectories(self) -> list:
        out = []
        start = 0
        for n in self.path_lengths:
            sl = slice(start, start + n)
            out.append((self.observations[sl], self.actions[sl], self.rewards[sl], self.behavior_log_probs[sl]))
            start += n
        return out


@dataclass
class RolloutSet:
    anchor_states: np.ndarray       # (N, obs_dim)
    actions: np.ndarray             # (N, K, action_cols)
    q_hats: np.ndarray              # (N, K)
    behavior_log_probs: np.ndarray  # (N, K), log q(a | s)
    crn_seeds: np.ndarray           # (N,)
    q_mode: str
    gamma: float
    rollout_len: int
    trunk: TrajectoryBatch
    env_steps: int

    @property
    def num_anchors(self) -> int:
        return self.q_hats.shape[0]

    @property
    def actions_per_state(self) -> int:
        return self.q_hats.shape[1]


@dataclass
class SurrogateEstimate:
    """Sampled objective and constraint around ``theta_old``.

    ``objective(theta)`` and ``mean_kl(theta)`` re-use the stored samples;
    ``evaluate(theta)`` returns both with one forward pass.
    """

    spec: NetworkSpec
    theta_old: np.ndarray
    value: float
    grad: np.ndarray
    evaluate: Callable
    states: np.ndarray
    actions: np.ndarray
    sample_count: int
    excluded: int = 0

    def objective(self, theta) -> float:
        return self.evaluate(theta)[0]

    def mean_kl(self, theta) -> float:
        return self.evaluate(theta)[1]

    def mean_kl_fn(self, theta) -> float:
        return self.mean_kl(theta)


def discounted_reward_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _seed_list(rng, n):
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=n)]


def _run_paths(envs, spec, theta, horizon, rng, snapshots=False, first_actions=None, action_rngs=None):
    """Step all environments in lockstep until done or ``horizon``.

    ``first_actions`` (optional, per env) prescribes the action at t=0.
    ``action_rngs`` (optional, per env) gives each env its own action stream;
    otherwise actions are drawn from ``rng`` for the whole batch.
    Environments must already be reset (``obs`` is read from ``env._obs0``).
    """
    n = len(envs)
    obs = [e._obs0 for e in envs]
    rec = [{"obs": [], "act": [], "rew": [], "lp": [], "snap": []} for _ in range(n)]
    active = list(range(n))
    done_flag = [False] * n
    for t in range(horizon):
        if not active:
            break
        states = np.array([obs[i] for i in active])
        dist = pol.forward(spec, theta, states)
        if action_rngs is None:
            acts = pol.sample(dist, rng)
        else:
            acts = np.concatenate([pol.sample(dist.take([j]), action_rngs[i]) for j, i in enumerate(active)])
        if t == 0 and first_actions is not None:
            acts = np.array([first_actions[i] for i in active]).reshape(acts.shape).astype(acts.dtype)
        lps = pol.log_prob(dist, acts)
        still = []
        for j, i in enumerate(active):
            r = rec[i]
            if snapshots:
                r["snap"].append(envs[i].save_state())
            try:
                o, rew, done = envs[i].step(acts[j])
            except Exception as exc:
                raise RuntimeError(f"environment step failed on trajectory {i} at t={t}: {exc}") from exc
            r["obs"].append(states[j])
            r["act"].append(acts[j])
            r["rew"].append(rew)
            r["lp"].append(lps[j])
            obs[i] = o
            if done:
                done_flag[i] = True
            else:
                still.append(i)
        active = still
    return rec, done_flag


def _assemble(rec, done_flag, spec, horizon, gamma, kind, snapshots):
    lengths = np.array([len(r["rew"]) for r in rec], dtype=int)
    obs_dim = spec.input_dim
    act_cols = spec.action_dim if spec.head == "gaussian" else len(spec.action_factors)
    act_dtype = float if spec.head == "gaussian" else int
    if lengths.sum() == 0:
        empty = np.zeros(0)
        return TrajectoryBatch(np.zeros((0, obs_dim)), np.zeros((0, act_cols), dtype=act_dtype), empty, empty,
                               empty, np.zeros(0, int), np.zeros(0, int), lengths, np.zeros(len(rec)),
                               np.array(done_flag, dtype=bool), horizon, gamma, kind, [] if snapshots else None)
    observations = np.concatenate([np.array(r["obs"]).reshape(-1, obs_dim) for r in rec if r["obs"]])
    actions = np.concatenate([np.array(r["act"]).reshape(-1, act_cols) for r in rec if r["act"]]).astype(act_dtype)
    rewards = np.concatenate([np.array(r["rew"], dtype=float) for r in rec])
    lp = np.concatenate([np.array(r["lp"], dtype=float) for r in rec])
    q = np.concatenate([discounted_reward_to_go(np.array(r["rew"], dtype=float), gamma) for r in rec])
    path_ids = np.repeat(np.arange(len(rec)), lengths)
    timesteps = np.concatenate([np.arange(n) for n in lengths])
    returns = np.array([float(np.sum(r["rew"])) for r in rec])
    snaps = [s for r in rec for s in r["snap"]] if snapshots else None
    return TrajectoryBatch(observations, actions, rewards, lp, q, path_ids, timesteps, lengths, returns,
                           np.array(done_flag, dtype=bool), horizon, gamma, kind, snaps)


def _reset_all(env: Env, seeds):
    envs = []
    for s in seeds:
        e = env.clone()
        e.reseed(s)
        e._obs0 = e.reset()
        envs.append(e)
    return envs


def rollout_single_path(env: Env, spec: NetworkSpec, theta_old, num_paths: int, horizon: int,
                        rng: np.random.Generator, gamma: float = 0.99, snapshots: bool = False) -> TrajectoryBatch:
    """Sample ``num_paths`` trajectories under ``pi_theta_old``.

    Each path gets its own environment copy whose noise stream is seeded
    from ``rng``; actions for the whole batch are drawn from ``rng``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if num_paths < 1:
        raise ValueError("num_paths must be >= 1")
    envs = _reset_all(env, _seed_list(rng, num_paths))
    rec, done = _run_paths(envs, spec, theta_old, horizon, rng, snapshots=snapshots)
    return _assemble(rec, done, spec, horizon, gamma, "single-path", snapshots)


def _joint_actions(spec):
    return np.array(list(itertools.product(*[range(k) for k in spec.action_factors])), dtype=int)


def build_vine(env: Env, spec: NetworkSpec, theta_old, trunk_paths: int, num_anchors: int,
               actions_per_state: int, rollout_len: int, rng: np.random.Generator,
               gamma: float = 0.99, q_mode: str = "policy", trunk_horizon: int | None = None) -> RolloutSet:
    """Trunk rollouts, anchor subsampling, and CRN branch rollouts.

    ``q_mode`` chooses the branch actions: ``policy`` samples ``K`` actions
    from ``pi_theta_old``, ``uniform`` samples them uniformly (discrete
    only), ``exhaustive`` uses every joint discrete action once (``K`` must
    equal the number of joint actions). After the prescribed first action
    each branch follows ``pi_theta_old``.

    For each anchor a seed is drawn; every branch from that anchor restores
    the anchor snapshot and re-seeds both its environment-noise stream and
    its own action stream from that seed, so branches differ only through
    their first action.
    """
    if not env.supports_restore:
        raise UnsupportedCapability(
            f"{type(env).__name__} cannot restore arbitrary states, which vine sampling requires"
        )
    if q_mode not in ("policy", "uniform", "exhaustive"):
        raise ValueError(f"unknown q_mode {q_mode!r}")
    discrete = spec.head != "gaussian"
    if q_mode in ("uniform", "exhaustive") and not discrete:
        raise ValueError(f"q_mode {q_mode!r} needs a discrete action space")
    K = actions_per_state
    if q_mode == "exhaustive":
        joint = _joint_actions(spec)
        if K != len(joint):
            raise ValueError(f"exhaustive mode needs K = {len(joint)} (one branch per action), got {K}")
    if K < 1 or rollout_len < 1:
        raise ValueError("actions_per_state and rollout_len must be >= 1")

    trunk = rollout_single_path(env, spec, theta_old, trunk_paths, trunk_horizon or rollout_len, rng,
                                gamma=gamma, snapshots=True)
    M = trunk.num_samples
    if num_anchors > M:
        raise ValueError(f"asked for {num_anchors} anchors but the trunk visited only {M} states")
    idx = rng.choice(M, size=num_anchors, replace=False)
    anchors = trunk.observations[idx]
    seeds = np.array(_seed_list(rng, num_anchors), dtype=np.int64)

    dist_old = pol.forward(spec, theta_old, anchors)
    rep = dist_old.take(np.repeat(np.arange(num_anchors), K))
    if q_mode == "policy":
        acts = pol.sample(rep, rng)
        logq = pol.log_prob(rep, acts)
    elif q_mode == "uniform":
        acts = np.column_stack([rng.integers(0, k, size=num_anchors * K) for k in spec.action_factors])
        logq = np.full(num_anchors * K, -float(np.sum(np.log(spec.action_factors))))
    else:
        acts = np.tile(joint, (num_anchors, 1))
        logq = pol.log_prob(rep, acts)

    envs, action_rngs = [], []
    for n in range(num_anchors):
        for _ in range(K):
            e = env.clone()
            e.restore_state(trunk.snapshots[idx[n]])
            env_seed, act_seed = np.random.SeedSequence(int(seeds[n])).spawn(2)
            e.reseed(env_seed)
            e._obs0 = anchors[n]
            envs.append(e)
            action_rngs.append(np.random.default_rng(act_seed))
    rec, done = _run_paths(envs, spec, theta_old, rollout_len, rng, first_actions=list(acts),
                           action_rngs=action_rngs)
    q = np.array([float(discounted_reward_to_go(np.array(r["rew"], dtype=float), gamma)[0]) for r in rec])
    branch_steps = sum(len(r["rew"]) for r in rec)
    return RolloutSet(
        anchor_states=anchors,
        actions=acts.reshape(num_anchors, K, -1),
        q_hats=q.reshape(num_anchors, K),
        behavior_log_probs=logq.reshape(num_anchors, K),
        crn_seeds=seeds,
        q_mode=q_mode,
        gamma=gamma,
        rollout_len=rollout_len,
        trunk=trunk,
        env_steps=int(trunk.num_samples + branch_steps),
    )


def surrogate_from_single_path(batch: TrajectoryBatch, spec: NetworkSpec, theta_old,
                               q_values: np.ndarray | None = None,
                               weighting: str = "uniform") -> SurrogateEstimate:
    """Importance-sampled objective ``sum_i c_i ratio_i Q_i`` with ``q = pi_theta_old``.

    ``weighting="uniform"`` uses ``c_i = 1 / #samples`` (the usual practical
    average over visited states). ``weighting="discounted"`` uses
    ``c_i = gamma^t_i / #paths``, which estimates the discounted-visitation
    sum exactly as it appears in the surrogate. ``q_values`` overrides
    ``batch.q_hat`` (for instance with a baseline subtracted). Samples whose
    behaviour log-probability is below the ``-700`` floor are excluded and
    counted. The mean KL is always the plain average over sampled states.
    """
    if weighting not in ("uniform", "discounted"):
        raise ValueError(f"unknown weighting {weighting!r}")
    theta_old = np.asarray(theta_old, dtype=float).copy()
    q = batch.q_hat if q_values is None else np.asarray(q_values, dtype=float)
    keep = np.isfinite(batch.behavior_log_probs) & (batch.behavior_log_probs >= LOG_PROB_FLOOR)
    excluded = int(np.sum(~keep))
    if excluded > 0.001 * max(len(keep), 1):
        warnings.warn(f"{excluded} of {len(keep)} samples excluded: behaviour probability underflow")
    obs, act, q = batch.observations[keep], batch.actions[keep], q[keep]
    n = len(q)
    if n == 0:
        raise ValueError("no usable samples in batch")
    if weighting == "uniform":
        c = np.full(n, 1.0 / n)
    else:
        c = batch.gamma ** batch.timesteps[keep].astype(float) / batch.num_paths
    cq = c * q
    lin = pol.Linearization(spec, theta_old, obs)
    old_lp = pol.log_prob(lin.dist, act)
    grad = lin.grad_log_prob(act, cq)
    value = float(np.sum(cq))

    def evaluate(theta):
        dist = pol.forward(spec, theta, obs)
        ratio = np.exp(pol.log_prob(dist, act) - old_lp)
        return float(np.sum(ratio * cq)), float(np.mean(pol.kl(lin.dist, dist)))

    return SurrogateEstimate(spec, theta_old, value, grad, evaluate, obs, act, n, excluded)


def surrogate_from_vine(rs: RolloutSet, spec: NetworkSpec, theta_old, estimator: str | None = None,
                        q_values: np.ndarray | None = None) -> SurrogateEstimate:
    """Per-anchor objectives averaged over anchors.

    ``exhaustive``: ``L_n = sum_k pi_theta(a_k | s_n) Q_k`` over all actions.
    ``self-normalized``: ``L_n = sum_k w_k Q_k / sum_k w_k`` with
    ``w_k = pi_theta(a_k | s_n) / q(a_k | s_n)``; adding a constant to every
    ``Q`` shifts ``L_n`` by that constant and leaves its gradient unchanged.
    The default is ``exhaustive`` for exhaustive rollout sets and
    ``self-normalized`` otherwise.
    """
    if estimator is None:
        estimator = "exhaustive" if rs.q_mode == "exhaustive" else "self-normalized"
    if estimator not in ("exhaustive", "self-normalized"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "exhaustive" and rs.q_mode != "exhaustive":
        raise ValueError("the exhaustive estimator needs an exhaustive rollout set")
    N, K = rs.q_hats.shape
    if estimator == "self-normalized" and K < 2:
        raise ValueError("the self-normalized estimator needs K >= 2")
    theta_old = np.asarray(theta_old, dtype=float).copy()
    q_all = rs.q_hats if q_values is None else np.asarray(q_values, dtype=float).reshape(N, K)
    states = np.repeat(rs.anchor_states, K, axis=0)
    acts = rs.actions.reshape(N * K, -1)
    lin = pol.Linearization(spec, theta_old, states)
    old_lp = pol.log_prob(lin.dist, acts).reshape(N, K)
    anchor_lin = pol.Linearization(spec, theta_old, rs.anchor_states)
    logq = rs.behavior_log_probs
    if rs.q_mode == "policy":
        logq = old_lp  # same quantity; recomputed so the weights are exactly 1 at theta_old

    keep = np.ones(N, dtype=bool)
    if estimator == "self-normalized":
        keep = np.any(np.isfinite(old_lp - logq) & (old_lp > -np.inf), axis=1)
    dropped = int(np.sum(~keep))
    if not keep.any():
        raise ValueError("every anchor has all-zero importance weights")
    q = q_all[keep]
    lp0, lq = old_lp[keep], logq[keep]
    rows = np.repeat(keep, K)
    n = int(keep.sum())

    if estimator == "exhaustive":
        p0 = np.exp(lp0)
        value = float(np.mean(np.sum(p0 * q, axis=1)))
        grad = lin.grad_log_prob(acts, np.where(rows, (np.exp(old_lp) * q_all).ravel(), 0.0)) / n

        def objective(theta):
            lp = pol.log_prob(pol.forward(spec, theta, states[rows]), acts[rows]).reshape(n, K)
            return float(np.mean(np.sum(np.exp(lp) * q, axis=1)))
    else:
        def weights(lp):
            lw = lp - lq
            lw = lw - lw.max(axis=1, keepdims=True)
            w = np.exp(lw)
            return w / w.sum(axis=1, keepdims=True)

        w0 = weights(lp0)
        L0 = np.sum(w0 * q, axis=1)
        value = float(np.mean(L0))
        coef = np.zeros((N, K))
        coef[keep] = w0 * (q - L0[:, None])
        grad = lin.grad_log_prob(acts, coef.ravel()) / n

        def objective(theta):
            lp = pol.log_prob(pol.forward(spec, theta, states[rows]), acts[rows]).reshape(n, K)
            return float(np.mean(np.sum(weights(lp) * q, axis=1)))

    anchor_states = rs.anchor_states[keep]
    anchor_old = anchor_lin.dist.take(np.flatnonzero(keep))

    def evaluate(theta):
        kl = float(np.mean(pol.kl(anchor_old, pol.forward(spec, theta, anchor_states))))
        return objective(theta), kl

    # FVP states: every (anchor, action) row, so empirical-Fisher scores line up
    return SurrogateEstimate(spec, theta_old, value, grad, evaluate, states[rows], acts[rows],
                             n * K, dropped)


def dump_batch(batch: TrajectoryBatch, path) -> None:
    """Write one whitespace-separated record per sample.

    Columns: ``path t state... action... reward behavior_log_prob q_hat``.
    """
    obs_cols = [f"s{i}" for i in range(batch.observations.shape[1])]
    act_cols = [f"a{i}" for i in range(batch.actions.shape[1])]
    header = " ".join(["path", "t", *obs_cols, *act_cols, "reward", "behavior_log_prob", "q_hat"])
    with open(path, "w") as fh:
        fh.write("# " + header + "\n")
        for i in range(batch.num_samples):
            fields = [str(batch.path_ids[i]), str(batch.timesteps[i])]
            fields += [repr(float(x)) for x in batch.observations[i]]
            fields += [repr(x.item()) for x in batch.actions[i]]
            fields += [repr(float(batch.rewards[i])), repr(float(batch.behavior_log_probs[i])),
                       repr(float(batch.q_hat[i]))]
            fh.write(" ".join(fields) + "\n")
