import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trpolab.envs import chain_mdp, random_mdp
from trpolab.mdp import (
    TabularMdp,
    TabularPolicy,
    eta_difference_identity,
    evaluate_exact,
    format_mdp,
    greedy_policy,
    load_mdp,
    parse_mdp,
    policy_iteration,
    random_policy,
    save_mdp,
    value_iteration,
)

from conftest import random_instance


def test_single_state_geometric_series():
    mdp = TabularMdp(np.ones((1, 1, 1)), [1.0], [1.0], 0.5)
    ev = evaluate_exact(mdp, TabularPolicy.uniform(1, 1))
    assert ev.v == pytest.approx([2.0])
    assert ev.eta == pytest.approx(2.0)


def test_evaluation_invariants(rng):
    for _ in range(50):
        mdp, pi, _ = random_instance(rng)
        ev = evaluate_exact(mdp, pi)
        np.testing.assert_allclose(ev.adv, ev.q - ev.v[:, None], atol=1e-10)
        np.testing.assert_allclose(np.sum(pi.probs * ev.adv, axis=1), 0.0, atol=1e-10)
        assert ev.visitation.sum() == pytest.approx(1.0 / (1.0 - mdp.discount), abs=1e-8)
        # dual form of the return
        assert ev.eta == pytest.approx(float(mdp.rewards @ ev.visitation), abs=1e-8)


def test_evaluation_is_deterministic(rng):
    mdp, pi, _ = random_instance(rng)
    a, b = evaluate_exact(mdp, pi), evaluate_exact(mdp, pi)
    for f in ("v", "q", "adv", "visitation"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert a.eta == b.eta


def test_eta_matches_monte_carlo():
    # 10^6 trajectories of length 200, simulated in parallel
    mdp = random_mdp(5, 3, seed=7, discount=0.9)
    pi = random_policy(5, 3, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    n, T = 1_000_000, 200
    S, A = 5, 3
    # inverse-CDF sampling of row k: searchsorted(cdf rows laid end to end, k + u) - k * width
    cdf_pi = (np.cumsum(pi.probs, axis=1) + np.arange(S)[:, None]).ravel()
    cdf_p = (np.cumsum(mdp.transitions.reshape(S * A, S), axis=1) + np.arange(S * A)[:, None]).ravel()
    s = np.minimum(np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(n), side="right"), S - 1)
    ret = np.zeros(n)
    disc = 1.0
    for _ in range(T):
        ret += disc * mdp.rewards[s]
        a = np.searchsorted(cdf_pi, s + rng.random(n), side="right") - s * A
        row = s * A + np.minimum(a, A - 1)
        s = np.minimum(np.searchsorted(cdf_p, row + rng.random(n), side="right") - row * S, S - 1)
        disc *= mdp.discount
    se = ret.std(ddof=1) / np.sqrt(n)
    eta = evaluate_exact(mdp, pi).eta
    assert abs(ret.mean() - eta) <= 3 * se


def test_identity_trivial_and_random(rng):
    mdp, pi, pi2 = random_instance(rng)
    lhs, rhs = eta_difference_identity(mdp, pi, pi)
    assert lhs == 0.0 and abs(rhs) < 1e-12
    lhs, rhs = eta_difference_identity(mdp, pi, pi2)
    assert abs(lhs - rhs) <= 1e-8


def test_greedy_improvement_is_positive(rng):
    for _ in range(20):
        mdp = random_mdp(6, 3, int(rng.integers(1000)), discount=0.9)
        pi = random_policy(6, 3, rng)
        ev = evaluate_exact(mdp, pi)
        assert ev.adv.max() > 1e-9
        lhs, rhs = eta_difference_identity(mdp, pi, greedy_policy(ev.adv))
        assert lhs > 0 and abs(lhs - rhs) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 10_000), st.floats(0.1, 0.99))
def test_identity_property(S, A, seed, gamma):
    mdp = random_mdp(S, A, seed, discount=gamma)
    r = np.random.default_rng(seed)
    lhs, rhs = eta_difference_identity(mdp, random_policy(S, A, r), random_policy(S, A, r))
    assert abs(lhs - rhs) <= 1e-8


def test_policy_and_value_iteration_agree(rng):
    for _ in range(10):
        mdp = random_mdp(6, 3, int(rng.integers(1000)), discount=0.95)
        pi, ev = policy_iteration(mdp)
        np.testing.assert_allclose(ev.v, value_iteration(mdp), atol=1e-9)
        assert np.all(ev.adv <= 1e-10)


def test_two_state_chain_optimum_by_hand():
    # moving right reaches reward 1 forever: V(0) = 0.1 + 0.9 / (1 - 0.9)
    mdp = chain_mdp(2, discount=0.9)
    _, ev = policy_iteration(mdp)
    assert ev.eta == pytest.approx(0.1 + 0.9 * 1.0 / 0.1, abs=1e-10)
    assert ev.eta == pytest.approx(float(mdp.initial_dist @ value_iteration(mdp)), abs=1e-9)


def test_validation_errors():
    with pytest.raises(ValueError):
        TabularMdp(np.ones((2, 1, 2)), [0, 0], [1, 0], 0.9)
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), [0.0], [1.0], 1.0)
    with pytest.raises(ValueError):
        TabularPolicy([[0.5, 0.6]])
    with pytest.raises(ValueError):
        TabularPolicy([[1.5, -0.5]])
    mdp = random_mdp(3, 2, 0)
    with pytest.raises(ValueError):
        evaluate_exact(mdp, TabularPolicy.uniform(3, 3))


def test_text_format_round_trip(tmp_path):
    mdp = random_mdp(4, 3, 11, discount=0.8)
    path = tmp_path / "m.mdp"
    save_mdp(mdp, path)
    back = load_mdp(path)
    assert np.array_equal(back.transitions, mdp.transitions)
    assert np.array_equal(back.rewards, mdp.rewards)
    assert np.array_equal(back.initial_dist, mdp.initial_dist)
    assert back.discount == mdp.discount
    text = "# comment\n" + format_mdp(mdp).replace("\n", "  # trailing\n", 1)
    assert np.array_equal(parse_mdp(text).transitions, mdp.transitions)


@pytest.mark.parametrize("text", [
    "rho0 1\n",
    "mdp 1 1 0.5\nrho0 1\n",
    "mdp 1 1 0.5\nrho0 1\nr 1\n",
    "mdp 1 1 0.5\nrho0 1\nr 1\nP 0 0 1\nP 0 0 1\n",
    "mdp 1 1 0.5\nrho0 1\nr 1\nQ 0 0 1\n",
])
def test_text_format_errors(text):
    with pytest.raises(ValueError):
        parse_mdp(text)
