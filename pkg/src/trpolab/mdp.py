"""Finite discounted MDPs and their exact solution.

Everything here is dense linear algebra on small state spaces. The
quantities computed by :func:`evaluate_exact` are the ground truth that the
theory checks and the Monte-Carlo estimators are validated against.

Conventions: rewards depend on the state only, ``r[s]``, and are collected
at the state the agent is in before acting, so that

    V(s)    = r(s) + gamma * sum_a pi(a|s) sum_s' P(s'|s,a) V(s')
    Q(s, a) = r(s) + gamma * sum_s' P(s'|s,a) V(s')

Visitation frequencies ``rho`` are unnormalized and sum to ``1/(1-gamma)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "TabularMdp",
    "TabularPolicy",
    "ExactEvaluation",
    "evaluate_exact",
    "eta_difference_identity",
    "greedy_policy",
    "policy_iteration",
    "value_iteration",
    "random_policy",
    "load_mdp",
    "save_mdp",
    "parse_mdp",
    "format_mdp",
]

_SIMPLEX_TOL = 1e-12


def _check_simplex(x: np.ndarray, axis: int, what: str) -> None:
    if np.any(x < 0):
        raise ValueError(f"{what} has negative entries")
    err = np.max(np.abs(x.sum(axis=axis) - 1.0))
    if err > _SIMPLEX_TOL:
        raise ValueError(f"{what} does not sum to one (max error {err:.3e})")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP ``(S, A, P, r, rho0, gamma)``.

    ``transitions`` has shape ``(S, A, S)`` with ``transitions[s, a, s']``
    the probability of moving to ``s'``.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial_dist: np.ndarray
    discount: float

    def __post_init__(self):
        P = np.array(self.transitions, dtype=float)
        r = np.array(self.rewards, dtype=float)
        rho0 = np.array(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transitions must have shape (S, A, S), got {P.shape}")
        S = P.shape[0]
        if r.shape != (S,):
            raise ValueError(f"rewards must have shape ({S},), got {r.shape}")
        if rho0.shape != (S,):
            raise ValueError(f"initial_dist must have shape ({S},), got {rho0.shape}")
        if not 0.0 < float(self.discount) < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        _check_simplex(P, 2, "transition rows")
        _check_simplex(rho0, 0, "initial_dist")
        for arr in (P, r, rho0):
            arr.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial_dist", rho0)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    def state_transitions(self, policy: "TabularPolicy") -> np.ndarray:
        """Row-stochastic ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)``."""
        return np.einsum("sa,sat->st", policy.probs, self.transitions)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Conditional action probabilities ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"policy must be a (S, A) matrix, got shape {p.shape}")
        _check_simplex(p, 1, "policy rows")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, num_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls(p)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "TabularPolicy":
        z = np.asarray(logits, dtype=float)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        # renormalise once more so rows pass the 1e-12 simplex check
        return cls(p / p.sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class ExactEvaluation:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    visitation: np.ndarray
    eta: float


def evaluate_exact(mdp: TabularMdp, policy: TabularPolicy) -> ExactEvaluation:
    """Solve for ``V``, ``Q``, ``A``, ``rho`` and ``eta`` of ``policy`` directly.

    Both linear systems ``(I - gamma P_pi) V = r`` and
    ``(I - gamma P_pi^T) rho = rho0`` are solved by dense LU factorisation.
    """
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )
    gamma = mdp.discount
    P_pi = mdp.state_transitions(policy)
    system = np.eye(mdp.num_states) - gamma * P_pi
    try:
        v = np.linalg.solve(system, mdp.rewards)
        rho = np.linalg.solve(system.T, mdp.initial_dist)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError(f"internal error: policy evaluation system is singular ({exc})")
    q = mdp.rewards[:, None] + gamma * mdp.transitions @ v
    adv = q - v[:, None]
    eta = float(mdp.initial_dist @ v)
    for arr in (v, q, adv, rho):
        arr.setflags(write=False)
    return ExactEvaluation(v=v, q=q, adv=adv, visitation=rho, eta=eta)


def eta_difference_identity(
    mdp: TabularMdp, pi: TabularPolicy, pi_tilde: TabularPolicy
) -> tuple[float, float]:
    """Both sides of ``eta(pi~) - eta(pi) = sum_s rho_pi~(s) sum_a pi~(a|s) A_pi(s,a)``."""
    ev = evaluate_exact(mdp, pi)
    ev_tilde = evaluate_exact(mdp, pi_tilde)
    lhs = ev_tilde.eta - ev.eta
    rhs = float(ev_tilde.visitation @ np.sum(pi_tilde.probs * ev.adv, axis=1))
    return lhs, rhs


def greedy_policy(q: np.ndarray) -> TabularPolicy:
    """Deterministic policy choosing ``argmax_a q[s, a]`` (lowest index on ties)."""
    q = np.asarray(q)
    return TabularPolicy.deterministic(np.argmax(q, axis=1), q.shape[1])


def policy_iteration(
    mdp: TabularMdp, pi0: TabularPolicy | None = None, max_iters: int = 1000
) -> tuple[TabularPolicy, ExactEvaluation]:
    """Howard policy iteration with exact evaluation.

    Ties are broken in favour of the incumbent action so the loop terminates.
    """
    pi = pi0 if pi0 is not None else TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
    ev = evaluate_exact(mdp, pi)
    actions = np.argmax(ev.q, axis=1)
    pi = TabularPolicy.deterministic(actions, mdp.num_actions)
    for _ in range(max_iters):
        ev = evaluate_exact(mdp, pi)
        best = np.argmax(ev.q, axis=1)
        current = ev.q[np.arange(mdp.num_states), actions]
        improve = ev.q[np.arange(mdp.num_states), best] > current + 1e-12 * (1 + np.abs(current))
        if not improve.any():
            return pi, ev
        actions = np.where(improve, best, actions)
        pi = TabularPolicy.deterministic(actions, mdp.num_actions)
    raise RuntimeError(f"policy iteration did not converge in {max_iters} iterations")


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iters: int = 100_000) -> np.ndarray:
    """Optimal state values by repeated Bellman backups (sup-norm stopping rule)."""
    v = np.zeros(mdp.num_states)
    for _ in range(max_iters):
        v_new = mdp.rewards + mdp.discount * np.max(mdp.transitions @ v, axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
    raise RuntimeError(f"value iteration did not converge in {max_iters} iterations")


def random_policy(num_states: int, num_actions: int, rng: np.random.Generator) -> TabularPolicy:
    """Rows drawn from the flat Dirichlet distribution."""
    p = rng.dirichlet(np.ones(num_actions), size=num_states)
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


# -- text format ---------------------------------------------------------------
#
#   mdp S A gamma
#   rho0 p_0 ... p_{S-1}
#   r r_0 ... r_{S-1}
#   P s a p_0 ... p_{S-1}        (S*A lines)
#
# Whitespace-delimited; everything after '#' is a comment.


def parse_mdp(text: str) -> TabularMdp:
    header = None
    rho0 = None
    rewards = None
    P = None
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0]
        try:
            if key == "mdp":
                if len(tok) != 4:
                    raise ValueError("expected 'mdp S A gamma'")
                header = (int(tok[1]), int(tok[2]), float(tok[3]))
                P = np.full((header[0], header[1], header[0]), np.nan)
            elif header is None:
                raise ValueError("'mdp' header must come first")
            elif key == "rho0":
                rho0 = np.array([float(x) for x in tok[1:]])
            elif key == "r":
                rewards = np.array([float(x) for x in tok[1:]])
            elif key == "P":
                s, a = int(tok[1]), int(tok[2])
                row = [float(x) for x in tok[3:]]
                if len(row) != header[0]:
                    raise ValueError(f"expected {header[0]} probabilities")
                if (s, a) in seen:
                    raise ValueError(f"duplicate row for (s={s}, a={a})")
                seen.add((s, a))
                P[s, a] = row
            else:
                raise ValueError(f"unknown record {key!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if header is None or rho0 is None or rewards is None:
        raise ValueError("incomplete MDP file: need 'mdp', 'rho0' and 'r' records")
    S, A, gamma = header
    if len(seen) != S * A:
        raise ValueError(f"expected {S * A} 'P' rows, found {len(seen)}")
    return TabularMdp(P, rewards, rho0, gamma)


def format_mdp(mdp: TabularMdp) -> str:
    S, A = mdp.num_states, mdp.num_actions
    lines = [f"mdp {S} {A} {mdp.discount!r}"]
    lines.append("rho0 " + " ".join(repr(float(x)) for x in mdp.initial_dist))
    lines.append("r " + " ".join(repr(float(x)) for x in mdp.rewards))
    for s in range(S):
        for a in range(A):
            lines.append(f"P {s} {a} " + " ".join(repr(float(x)) for x in mdp.transitions[s, a]))
    return "\n".join(lines) + "\n"


def load_mdp(path) -> TabularMdp:
    return parse_mdp(Path(path).read_text())


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(format_mdp(mdp))
