import numpy as np
import pytest

from trpolab.envs import random_mdp
from trpolab.mdp import TabularPolicy, random_policy

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running training test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE[number] = (title, rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[number]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, max_states=10, max_actions=5, gamma=None):
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    g = float(rng.uniform(0.5, 0.99)) if gamma is None else gamma
    mdp = random_mdp(S, A, int(rng.integers(2**31)), discount=g)
    return mdp, random_policy(S, A, rng), random_policy(S, A, rng)


def uniform(mdp):
    return TabularPolicy.uniform(mdp.num_states, mdp.num_actions)
