"""Surrogate objective, divergences and policy improvement bounds on tabular MDPs.

All functions work with exact quantities from :func:`trpolab.mdp.evaluate_exact`.
The certificates report the *slack* ``eta(pi~) - lower_bound``; a bound holds
on an instance exactly when its slack is non-negative.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .mdp import ExactEvaluation, TabularMdp, TabularPolicy, evaluate_exact

logger = logging.getLogger(__name__)

__all__ = [
    "DivergenceReport",
    "BoundCertificate",
    "InnerSolverError",
    "surrogate_L",
    "surrogate_grad_softmax",
    "eta_grad_fd_softmax",
    "divergences",
    "kl_rows",
    "certify_tv_bound",
    "certify_perturbation_bound",
    "certify_cpi",
    "cpi_mixture",
    "mm_policy_iteration",
    "mm_update",
    "MMStep",
]


class InnerSolverError(RuntimeError):
    """The per-iteration maximisation in :func:`mm_policy_iteration` failed."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class DivergenceReport:
    tv_max: float
    kl_max: float
    kl_mean: float
    tv: np.ndarray
    kl: np.ndarray


@dataclass(frozen=True)
class BoundCertificate:
    eta_new: float
    surrogate: float
    alpha: float
    epsilon: float
    penalty_coeff: float
    lower_bound: float
    slack: float


def _surrogate_from(ev: ExactEvaluation, pi_tilde: TabularPolicy) -> float:
    return ev.eta + float(ev.visitation @ np.sum(pi_tilde.probs * ev.adv, axis=1))


def surrogate_L(mdp: TabularMdp, pi: TabularPolicy, pi_tilde: TabularPolicy) -> float:
    """Local approximation ``eta(pi) + sum_s rho_pi(s) sum_a pi~(a|s) A_pi(s,a)``.

    Visitation and advantages both come from ``pi``; only the action
    distribution is taken from ``pi_tilde``.
    """
    return _surrogate_from(evaluate_exact(mdp, pi), pi_tilde)


def surrogate_grad_softmax(mdp: TabularMdp, logits: np.ndarray) -> np.ndarray:
    """Analytic gradient of ``L_{pi_theta0}(pi_theta)`` at ``theta = theta0``.

    For tabular softmax logits this is ``rho(s) pi(b|s) A(s,b)``; the usual
    ``- pi(b|s) sum_a pi(a|s) A(s,a)`` term vanishes because advantages
    average to zero under their own policy.
    """
    pi = TabularPolicy.from_logits(logits)
    ev = evaluate_exact(mdp, pi)
    expected = np.sum(pi.probs * ev.adv, axis=1, keepdims=True)
    return ev.visitation[:, None] * pi.probs * (ev.adv - expected)


def eta_grad_fd_softmax(mdp: TabularMdp, logits: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``eta`` w.r.t. tabular softmax logits."""
    logits = np.asarray(logits, dtype=float)
    grad = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        plus = logits.copy()
        minus = logits.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (
            evaluate_exact(mdp, TabularPolicy.from_logits(plus)).eta
            - evaluate_exact(mdp, TabularPolicy.from_logits(minus)).eta
        ) / (2 * h)
    return grad


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p || q)`` with ``0 log 0 = 0`` and ``+inf`` where ``q`` misses ``p``'s support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    kl = terms.sum(axis=-1)
    # rounding can leave tiny negatives for nearly identical rows
    return np.maximum(kl, 0.0)


def divergences(
    pi: TabularPolicy, pi_tilde: TabularPolicy, state_weights=None
) -> DivergenceReport:
    """Maximum TV, maximum KL and state-weighted mean KL between two policies.

    KL is ``KL(pi(.|s) || pi~(.|s))``. Infinite KL is reported as ``inf``.
    """
    p, q = pi.probs, pi_tilde.probs
    if p.shape != q.shape:
        raise ValueError(f"policy shapes differ: {p.shape} vs {q.shape}")
    S = p.shape[0]
    if state_weights is None:
        w = np.full(S, 1.0 / S)
    else:
        w = np.asarray(state_weights, dtype=float)
        if w.shape != (S,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("state_weights must be a probability vector over states")
    tv = 0.5 * np.abs(p - q).sum(axis=1)
    kl = kl_rows(p, q)
    with np.errstate(invalid="ignore"):
        kl_mean = float(np.sum(np.where(w > 0, w * kl, 0.0)))
    return DivergenceReport(
        tv_max=float(tv.max()), kl_max=float(kl.max()), kl_mean=kl_mean, tv=tv, kl=kl
    )


def _penalty(gamma: float, epsilon: float) -> float:
    return 2.0 * epsilon * gamma / (1.0 - gamma) ** 2


def certify_tv_bound(mdp: TabularMdp, pi: TabularPolicy, pi_tilde: TabularPolicy) -> BoundCertificate:
    """Check ``eta(pi~) >= L_pi(pi~) - 2 eps gamma alpha^2 / (1-gamma)^2``.

    ``alpha`` is the maximum total-variation divergence and
    ``eps = max_{s,a} |A_pi(s,a)|``.
    """
    ev = evaluate_exact(mdp, pi)
    eps = float(np.max(np.abs(ev.adv)))
    C = _penalty(mdp.discount, eps)
    if np.array_equal(pi.probs, pi_tilde.probs):
        # L_pi(pi) = eta(pi) exactly; skip the re-evaluation so both bounds agree bit for bit
        return BoundCertificate(ev.eta, ev.eta, 0.0, eps, C, ev.eta, 0.0)
    eta_new = evaluate_exact(mdp, pi_tilde).eta
    surrogate = _surrogate_from(ev, pi_tilde)
    alpha = divergences(pi, pi_tilde).tv_max
    lower = surrogate - C * alpha**2
    return BoundCertificate(eta_new, surrogate, alpha, eps, C, lower, eta_new - lower)


def perturbation_epsilon(
    ev: ExactEvaluation, pi: TabularPolicy, pi_tilde: TabularPolicy, reduce: str = "max"
) -> float | None:
    """Per-state ratio ``|sum_a (pi~ - pi) Q| / sum_a |pi~ - pi|`` reduced over states.

    States where the two policies agree exactly are skipped; ``None`` means
    they agree everywhere. The sum uses ``A`` in place of ``Q`` (equal because
    each row of ``pi~ - pi`` sums to zero, but with less cancellation), and
    each ratio is capped at ``max |A|``, which it cannot exceed in exact
    arithmetic, so the refined constant never rounds above the plain one.
    """
    diff = pi_tilde.probs - pi.probs
    mass = np.abs(diff).sum(axis=1)
    active = mass > 0
    if not active.any():
        return None
    ratio = np.abs(np.sum(diff * ev.adv, axis=1)[active]) / mass[active]
    ratio = np.minimum(ratio, np.max(np.abs(ev.adv)))
    if reduce == "max":
        return float(ratio.max())
    if reduce == "min":
        return float(ratio.min())
    raise ValueError(f"reduce must be 'max' or 'min', got {reduce!r}")


def certify_perturbation_bound(
    mdp: TabularMdp, pi: TabularPolicy, pi_tilde: TabularPolicy, reduce: str = "max"
) -> BoundCertificate:
    """Perturbation-theory bound with a policy-pair dependent ``eps``.

    ``eps`` is the ratio of the expected Q-value change to the total-variation
    mass at a state. The bound needs that ratio to dominate every state, so
    the default reduction is the maximum over states. ``reduce="min"`` gives
    the literal minimum, which is *not* a valid bound in general and is kept
    only so the failure can be demonstrated.
    """
    ev = evaluate_exact(mdp, pi)
    eta_new = evaluate_exact(mdp, pi_tilde).eta
    surrogate = _surrogate_from(ev, pi_tilde)
    alpha = divergences(pi, pi_tilde).tv_max
    eps = perturbation_epsilon(ev, pi, pi_tilde, reduce)
    if eps is None:
        # identical policies: L = eta and the bound is tight
        return BoundCertificate(ev.eta, ev.eta, 0.0, 0.0, 0.0, ev.eta, 0.0)
    C = _penalty(mdp.discount, eps)
    lower = surrogate - C * alpha**2
    return BoundCertificate(eta_new, surrogate, alpha, eps, C, lower, eta_new - lower)


def cpi_mixture(pi_old: TabularPolicy, pi_prime: TabularPolicy, alpha: float) -> TabularPolicy:
    """``(1 - alpha) pi_old + alpha pi'``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return pi_old
    if alpha == 1.0:
        return pi_prime
    mix = (1.0 - alpha) * pi_old.probs + alpha * pi_prime.probs
    return TabularPolicy(mix / mix.sum(axis=1, keepdims=True))


def certify_cpi(
    mdp: TabularMdp, pi_old: TabularPolicy, pi_prime: TabularPolicy, alpha: float, simple: bool = False
) -> BoundCertificate:
    """Conservative policy iteration bound for the mixture update.

    Uses ``eps = max_s |E_{a~pi'} A_pi_old(s,a)|`` and the denominator
    ``(1 - gamma (1 - alpha)) (1 - gamma)``; ``simple=True`` switches to the
    looser ``(1 - gamma)^2`` form.
    """
    gamma = mdp.discount
    ev = evaluate_exact(mdp, pi_old)
    pi_new = cpi_mixture(pi_old, pi_prime, alpha)
    eta_new = evaluate_exact(mdp, pi_new).eta
    surrogate = _surrogate_from(ev, pi_new)
    eps = float(np.max(np.abs(np.sum(pi_prime.probs * ev.adv, axis=1))))
    if simple:
        C = 2.0 * eps * gamma / (1.0 - gamma) ** 2
    else:
        C = 2.0 * eps * gamma / ((1.0 - gamma * (1.0 - alpha)) * (1.0 - gamma))
    lower = surrogate - C * alpha**2
    return BoundCertificate(eta_new, surrogate, alpha, eps, C, lower, eta_new - lower)


# -- KL-penalised minorisation-maximisation ----------------------
#
# M(pi) = sum_s rho(s) <pi(.|s), A(s,.)> - C max_s KL(p_s || pi_s).
#
# With an epigraph variable t for the max, the KKT conditions give, for each
# state with non-constant advantages, a one-parameter family
#     pi_s(a) ∝ p_s(a) / (d_s(a) + g_s),   d_s(a) = max_b A(s,b) - A(s,a),
# where g_s > 0 is set by KL(p_s || pi_s) = t. The state's shadow price is
# rho(s) / W_s with W_s = sum_a p_s(a) / (d_s(a) + g_s), and the common level
# t solves sum_s rho(s) / W_s = C.


@dataclass(frozen=True)
class MMStep:
    policy: TabularPolicy
    eta: float
    surrogate: float


def _family(p, d, g):
    w = p / (d + g[:, None])
    W = w.sum(axis=1)
    return w / W[:, None], W


def _solve_gap(p, d, t, max_iter=200, rtol=1e-12):
    """Per-state ``g`` with ``KL(p || pi(g)) = t``, vectorised safeguarded Newton in ``log g``.

    States that cannot reach level ``t`` inside the search range are pinned to
    the smallest gap (their KL is then below ``t``). A state also counts as
    solved once its bracket on ``log g`` has collapsed, which is what happens
    when ``t`` is below the rounding level of the KL evaluation.
    """
    n = p.shape[0]
    lo = np.full(n, -300.0)  # KL(lo) > t unless unreachable
    hi = np.full(n, 60.0)    # KL(hi) < t
    _, kl_floor, _ = _family_kl(p, d, np.exp(lo))
    reachable = kl_floor > t
    var = np.sum(p * d**2, axis=1) - np.sum(p * d, axis=1) ** 2
    y = 0.5 * np.log(np.maximum(var, 1e-300) / (2.0 * t))
    y = np.where(reachable, np.clip(y, lo + 1.0, hi - 1.0), lo)
    for it in range(max_iter):
        g = np.exp(y)
        pi, kl, scale = _family_kl(p, d, g)
        resid = np.where(reachable, kl - t, 0.0)
        # the two log1p terms cancel; their rounding sets the attainable accuracy
        tol = rtol * t + 8 * np.finfo(float).eps * scale
        if np.all((np.abs(resid) <= tol) | (hi - lo <= 1e-12 * np.maximum(1.0, np.abs(y)))):
            return g, pi, kl
        above = resid > 0
        lo = np.where(above, y, lo)
        hi = np.where(above | ~reachable, hi, y)
        slope = g * np.sum((p - pi) / (d + g[:, None]), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            y_new = y - resid / slope
        bad = ~np.isfinite(y_new) | (y_new <= lo) | (y_new >= hi)
        if it >= 40:
            # Newton is stalling on a noisy slope; plain bisection from here
            bad[:] = True
        y = np.where(reachable, np.where(bad, 0.5 * (lo + hi), y_new), y)
    g = np.exp(y)
    pi, kl, _ = _family_kl(p, d, g)
    resid = float(np.max(np.abs(np.where(reachable, kl - t, 0.0))) / t)
    raise InnerSolverError("per-state KL level solve did not converge", resid)


def _family_kl(p, d, g):
    # KL(p || pi(g)) = sum p log1p(d/g) + log1p(-sum p (d/g)/(1 + d/g)), which
    # keeps relative accuracy when g is large and the KL is tiny
    pi, _ = _family(p, d, g)
    x = d / g[:, None]
    first = np.sum(p * np.log1p(x), axis=1)
    with np.errstate(divide="ignore"):
        kl = first + np.log1p(-np.sum(p * x / (1.0 + x), axis=1))
    return pi, np.maximum(kl, 0.0), first


def mm_update(mdp: TabularMdp, pi: TabularPolicy, ev: ExactEvaluation | None = None) -> tuple[TabularPolicy, float]:
    """One maximisation of ``M_i``; returns ``(pi_next, M_i(pi_next))``.

    Falls back to ``pi`` itself whenever the numerical optimum does not beat
    ``M_i(pi) = eta(pi)``, so the returned surrogate never decreases.
    """
    ev = ev if ev is not None else evaluate_exact(mdp, pi)
    gamma = mdp.discount
    A, rho, p = ev.adv, ev.visitation, pi.probs
    eps = float(np.max(np.abs(A)))
    if eps == 0.0:
        return pi, ev.eta
    C = _penalty(gamma, eps)
    d = A.max(axis=1, keepdims=True) - A
    # states that can change: non-constant advantage on the support, visited
    movable = (np.sum(p * d, axis=1) > 1e-15 * eps) & (rho > 0)
    if not movable.any():
        return pi, ev.eta
    pm, dm, rm = p[movable], d[movable], rho[movable]

    def price(log_t):
        g, pi_m, kl = _solve_gap(pm, dm, np.exp(log_t))
        W = np.sum(pm / (dm + g[:, None]), axis=1)
        return np.log(np.sum(rm / W)) - np.log(C), pi_m, kl

    a, b = -40.0, -6.0
    fa, fb = price(a)[0], price(b)[0]
    while fa < 0 and a > -700:
        a -= 20.0
        fa = price(a)[0]
    while fb > 0 and b < 6:
        b += 2.0
        fb = price(b)[0]
    if fa < 0 or fb > 0:
        raise InnerSolverError("could not bracket the KL level", min(abs(fa), abs(fb)))
    log_t = brentq(lambda x: price(x)[0], a, b, xtol=1e-13, rtol=1e-13, maxiter=200)
    _, pi_m, kl = price(log_t)
    new = p.copy()
    new[movable] = pi_m
    new /= new.sum(axis=1, keepdims=True)
    candidate = TabularPolicy(new)
    gain = float(rho @ np.sum(new * A, axis=1))
    value = ev.eta + gain - C * float(kl_rows(p, new).max())
    if not value >= ev.eta:
        return pi, ev.eta
    return candidate, value


def mm_policy_iteration(mdp: TabularMdp, pi0: TabularPolicy, iters: int) -> list[MMStep]:
    """Run the monotone MM scheme for ``iters`` iterations.

    Entry 0 is the starting policy (with ``surrogate == eta``); entry ``i+1``
    is ``pi_{i+1}`` with ``eta(pi_{i+1})`` and ``M_i(pi_{i+1})``.
    """
    ev = evaluate_exact(mdp, pi0)
    steps = [MMStep(pi0, ev.eta, ev.eta)]
    pi = pi0
    for _ in range(iters):
        pi, m_value = mm_update(mdp, pi, ev)
        ev = evaluate_exact(mdp, pi)
        steps.append(MMStep(pi, ev.eta, m_value))
    return steps
