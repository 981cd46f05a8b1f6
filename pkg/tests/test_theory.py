import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trpolab import theory
from trpolab.envs import random_mdp
from trpolab.mdp import TabularMdp, TabularPolicy, evaluate_exact, policy_iteration, random_policy

from conftest import random_instance, uniform


def test_surrogate_touches_eta(rng):
    mdp, pi, _ = random_instance(rng)
    assert theory.surrogate_L(mdp, pi, pi) == pytest.approx(evaluate_exact(mdp, pi).eta, abs=1e-12)


def test_surrogate_recomputed_from_evaluation(rng):
    mdp, pi, pi2 = random_instance(rng)
    ev = evaluate_exact(mdp, pi)
    total = ev.eta
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            total += ev.visitation[s] * pi2.probs[s, a] * (ev.q[s, a] - ev.v[s])
    assert theory.surrogate_L(mdp, pi, pi2) == pytest.approx(total, abs=1e-10)


def test_surrogate_gradient_matches_eta_gradient(rng):
    for _ in range(5):
        mdp = random_mdp(4, 3, int(rng.integers(1000)), discount=0.9)
        logits = rng.normal(size=(4, 3))
        g = theory.surrogate_grad_softmax(mdp, logits)
        fd = theory.eta_grad_fd_softmax(mdp, logits, h=1e-5)
        np.testing.assert_allclose(g, fd, atol=1e-5)


def test_divergences_basic():
    p = TabularPolicy([[1.0, 0.0], [0.5, 0.5]])
    q = TabularPolicy([[0.0, 1.0], [0.5, 0.5]])
    rep = theory.divergences(p, q)
    assert rep.tv_max == 1.0
    assert rep.kl_max == np.inf
    zero = theory.divergences(p, p)
    assert zero.tv_max == zero.kl_max == zero.kl_mean == 0.0
    # zero mass in p contributes nothing
    assert theory.kl_rows([[1.0, 0.0]], [[0.5, 0.5]])[0] == pytest.approx(np.log(2))


def test_divergences_weights_and_errors():
    p = TabularPolicy([[0.9, 0.1], [0.5, 0.5]])
    q = TabularPolicy([[0.5, 0.5], [0.5, 0.5]])
    rep = theory.divergences(p, q, [0.25, 0.75])
    assert rep.kl_mean == pytest.approx(0.25 * rep.kl[0])
    with pytest.raises(ValueError):
        theory.divergences(p, q, [0.5, 0.6])
    with pytest.raises(ValueError):
        theory.divergences(p, TabularPolicy.uniform(3, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_pinsker_per_state(S, A, seed):
    r = np.random.default_rng(seed)
    rep = theory.divergences(random_policy(S, A, r), random_policy(S, A, r))
    assert np.all(rep.tv**2 <= rep.kl + 1e-15)
    assert 0.0 <= rep.tv_max <= 1.0
    assert rep.tv_max**2 <= rep.kl_max + 1e-15


def test_tv_bound_trivial_and_random(rng):
    mdp, pi, _ = random_instance(rng)
    c = theory.certify_tv_bound(mdp, pi, pi)
    assert c.alpha == 0.0
    assert c.lower_bound == pytest.approx(evaluate_exact(mdp, pi).eta, abs=1e-12)
    assert abs(c.slack) < 1e-12
    for _ in range(200):
        mdp, pi, pi2 = random_instance(rng)
        assert theory.certify_tv_bound(mdp, pi, pi2).slack >= -1e-9


def test_perturbation_bound_trivial():
    mdp = random_mdp(3, 2, 1)
    pi = uniform(mdp)
    c = theory.certify_perturbation_bound(mdp, pi, pi)
    assert c.slack == 0.0 and c.alpha == 0.0


def test_perturbation_epsilon_by_enumeration():
    P = np.zeros((2, 2, 2))
    P[0, 0] = [0.8, 0.2]
    P[0, 1] = [0.1, 0.9]
    P[1, 0] = [0.5, 0.5]
    P[1, 1] = [1.0, 0.0]
    mdp = TabularMdp(P, [0.0, 1.0], [1.0, 0.0], 0.9)
    pi = TabularPolicy([[0.5, 0.5], [0.3, 0.7]])
    pi2 = TabularPolicy([[0.2, 0.8], [0.6, 0.4]])
    ev = evaluate_exact(mdp, pi)
    ratios = []
    for s in range(2):
        num = sum((pi2.probs[s, a] - pi.probs[s, a]) * ev.q[s, a] for a in range(2))
        den = sum(abs(pi2.probs[s, a] - pi.probs[s, a]) for a in range(2))
        ratios.append(abs(num) / den)
    assert theory.perturbation_epsilon(ev, pi, pi2, "max") == pytest.approx(max(ratios), rel=1e-12)
    assert theory.perturbation_epsilon(ev, pi, pi2, "min") == pytest.approx(min(ratios), rel=1e-12)
    c = theory.certify_perturbation_bound(mdp, pi, pi2)
    assert c.epsilon == pytest.approx(max(ratios), rel=1e-12)


def test_perturbation_bound_dominates_tv_bound(rng):
    for _ in range(200):
        mdp, pi, pi2 = random_instance(rng)
        c1 = theory.certify_tv_bound(mdp, pi, pi2)
        c2 = theory.certify_perturbation_bound(mdp, pi, pi2)
        assert c2.lower_bound >= c1.lower_bound - 1e-12
        assert c2.slack >= -1e-9


def test_literal_min_reduction_can_fail():
    # the minimum over states is not a valid constant; find a counterexample
    rng = np.random.default_rng(0)
    worst = min(theory.certify_perturbation_bound(*random_instance(rng, 5, 3), reduce="min").slack
                for _ in range(300))
    assert worst < -1e-9


def test_cpi_mixture():
    a = TabularPolicy([[1.0, 0.0]])
    b = TabularPolicy([[0.0, 1.0]])
    assert theory.cpi_mixture(a, b, 0.0) is a
    assert theory.cpi_mixture(a, b, 1.0) is b
    np.testing.assert_allclose(theory.cpi_mixture(a, b, 0.5).probs, [[0.5, 0.5]])
    with pytest.raises(ValueError):
        theory.cpi_mixture(a, b, 1.5)


def test_cpi_bound_holds(rng):
    for _ in range(200):
        mdp, pi, _ = random_instance(rng)
        greedy = TabularPolicy.deterministic(np.argmax(evaluate_exact(mdp, pi).adv, axis=1), mdp.num_actions)
        for simple in (False, True):
            assert theory.certify_cpi(mdp, pi, greedy, 0.1, simple=simple).slack >= -1e-9


def test_mm_fixed_point_at_optimum():
    mdp = random_mdp(4, 2, 3, discount=0.5)
    opt, _ = policy_iteration(mdp)
    near = TabularPolicy((opt.probs + 1e-10) / (1 + 2e-10))
    steps = theory.mm_policy_iteration(mdp, near, 5)
    etas = np.array([s.eta for s in steps])
    assert np.all(np.abs(np.diff(etas)) <= 1e-9)


def test_mm_monotone_and_reaches_optimum():
    mdp = random_mdp(4, 2, 5, discount=0.5)
    steps = theory.mm_policy_iteration(mdp, uniform(mdp), 50)
    etas = np.array([s.eta for s in steps])
    assert np.all(np.diff(etas) >= -1e-9)
    # M_i(pi_{i+1}) never exceeds eta(pi_{i+1}) and never drops below eta(pi_i)
    for prev, cur in zip(steps, steps[1:]):
        assert cur.surrogate <= cur.eta + 1e-9
        assert cur.surrogate >= prev.eta - 1e-12
    _, ev = policy_iteration(mdp)
    assert ev.eta - etas[-1] <= 1e-4


def test_mm_update_noop_on_zero_advantage():
    mdp = TabularMdp(np.ones((1, 2, 1)), [1.0], [1.0], 0.5)
    pi = TabularPolicy([[0.3, 0.7]])
    new, value = theory.mm_update(mdp, pi)
    assert new is pi and value == pytest.approx(2.0)
