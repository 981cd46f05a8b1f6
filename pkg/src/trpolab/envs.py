"""Built-in environments.

Every environment follows the same small protocol:

    obs = env.reset()
    obs, reward, done = env.step(action)

Randomness inside an environment (initial states, transition noise) comes
from a private generator that can be re-seeded with :meth:`Env.reseed`.
Environments that declare ``supports_restore`` also implement
``save_state``/``restore_state`` which capture the full simulator state,
noise generator included, so a restored environment replays bit-exactly.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp

__all__ = [
    "ActionSpace",
    "Env",
    "TabularEnv",
    "CartPole",
    "PointMass",
    "UnsupportedCapability",
    "cartpole_step",
    "cartpole_derivatives",
    "point_mass_step",
    "chain_mdp",
    "gridworld",
    "random_mdp",
    "make_env",
]


class UnsupportedCapability(RuntimeError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    """Either a continuous box ``[-1, 1]^dim`` or a product of discrete factors."""

    kind: str  # "box" or "discrete"
    dim: int = 0
    factors: tuple = ()

    @classmethod
    def box(cls, dim: int) -> "ActionSpace":
        return cls("box", dim=dim)

    @classmethod
    def discrete(cls, *factors: int) -> "ActionSpace":
        return cls("discrete", dim=len(factors), factors=tuple(int(n) for n in factors))


class Env:
    observation_dim: int
    action_space: ActionSpace
    supports_restore = False
    supports_reseed = True
    max_steps: int | None = None

    def __init__(self):
        self.noise = np.random.default_rng(0)

    def reseed(self, seed) -> None:
        """Reset the environment-noise stream (used for common random numbers)."""
        self.noise = np.random.default_rng(seed)

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, action):
        raise NotImplementedError

    def save_state(self):
        raise UnsupportedCapability(
            f"{type(self).__name__} cannot save its state; vine sampling needs "
            "an environment that can be reset to an arbitrary state"
        )

    def restore_state(self, snapshot) -> None:
        self.save_state()

    def clone(self) -> "Env":
        return copy.deepcopy(self)


# -- tabular -------------------------------------------------------------------


class TabularEnv(Env):
    """Samples a :class:`TabularMdp`.

    Observations are one-hot vectors of length ``S``. The reward returned by
    ``step`` is ``r(s)`` of the state the agent acted in. There is no
    terminal state; episodes are cut by the caller's horizon.
    """

    supports_restore = True

    def __init__(self, mdp: TabularMdp):
        super().__init__()
        self.mdp = mdp
        self.observation_dim = mdp.num_states
        self.action_space = ActionSpace.discrete(mdp.num_actions)
        self._cdf = np.cumsum(mdp.transitions, axis=2)
        self._cdf[..., -1] = 1.0
        self._cdf0 = np.cumsum(mdp.initial_dist)
        self._cdf0[-1] = 1.0
        self.state = 0

    def _obs(self):
        o = np.zeros(self.observation_dim)
        o[self.state] = 1.0
        return o

    def reset(self):
        self.state = int(np.searchsorted(self._cdf0, self.noise.random(), side="right"))
        return self._obs()

    def step(self, action):
        a = int(np.asarray(action).reshape(-1)[0])
        s = self.state
        reward = float(self.mdp.rewards[s])
        self.state = int(np.searchsorted(self._cdf[s, a], self.noise.random(), side="right"))
        return self._obs(), reward, False

    def save_state(self):
        return (self.state, copy.deepcopy(self.noise.bit_generator.state))

    def restore_state(self, snapshot):
        self.state = snapshot[0]
        self.noise.bit_generator.state = copy.deepcopy(snapshot[1])


def chain_mdp(n_states: int, slip_prob: float = 0.0, discount: float = 0.9,
              num_actions: int = 2) -> TabularMdp:
    """Linear chain. Action 0 moves left, action 1 moves right (others stay).

    With probability ``slip_prob`` the move goes the opposite way. Reward 1
    at the right end, 0.1 at the left end, 0 elsewhere. Starts at the left.
    """
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    if not 0.0 <= slip_prob <= 1.0:
        raise ValueError("slip_prob must lie in [0, 1]")
    if num_actions < 1:
        raise ValueError("num_actions must be >= 1")
    n = n_states
    P = np.zeros((n, num_actions, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        for a in range(num_actions):
            if a == 0:
                P[s, a, left] += 1.0 - slip_prob
                P[s, a, right] += slip_prob
            elif a == 1:
                P[s, a, right] += 1.0 - slip_prob
                P[s, a, left] += slip_prob
            else:
                P[s, a, s] = 1.0
    r = np.zeros(n)
    r[0] = 0.1
    r[-1] = 1.0
    rho0 = np.zeros(n)
    rho0[0] = 1.0
    return TabularMdp(P, r, rho0, discount)


def gridworld(width: int, height: int, slip_prob: float = 0.1, discount: float = 0.95,
              goal=None) -> TabularMdp:
    """4-action grid (up, right, down, left); walls bounce. Reward 1 at the goal cell.

    A slip sends the agent in a uniformly random direction instead.
    """
    if width < 1 or height < 1:
        raise ValueError("grid sizes must be >= 1")
    if not 0.0 <= slip_prob <= 1.0:
        raise ValueError("slip_prob must lie in [0, 1]")
    S = width * height
    moves = [(0, -1), (1, 0), (0, 1), (-1, 0)]
    gx, gy = goal if goal is not None else (width - 1, height - 1)
    P = np.zeros((S, 4, S))
    for y in range(height):
        for x in range(width):
            s = y * width + x
            dest = []
            for dx, dy in moves:
                nx = min(max(x + dx, 0), width - 1)
                ny = min(max(y + dy, 0), height - 1)
                dest.append(ny * width + nx)
            for a in range(4):
                P[s, a, dest[a]] += 1.0 - slip_prob
                for d in dest:
                    P[s, a, d] += slip_prob / 4
    r = np.zeros(S)
    r[gy * width + gx] = 1.0
    rho0 = np.zeros(S)
    rho0[0] = 1.0
    return TabularMdp(P, r, rho0, discount)


def random_mdp(num_states: int, num_actions: int, seed: int, discount: float = 0.9) -> TabularMdp:
    """Dirichlet(1) transition rows and initial distribution, uniform [0,1) rewards."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    r = rng.random(num_states)
    rho0 = rng.dirichlet(np.ones(num_states))
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(P, r, rho0 / rho0.sum(), discount)


# -- cart-pole -----------------------------------------------------------------

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
HALF_LENGTH = 0.5
FORCE_MAG = 10.0
DT = 0.02
X_LIMIT = 2.4
ANGLE_LIMIT = 12 * 2 * math.pi / 360


def cartpole_derivatives(state, force):
    """Frictionless Barto cart-pole: returns (x_acc, theta_acc)."""
    _, _, theta, theta_dot = state
    total = CART_MASS + POLE_MASS
    cos, sin = math.cos(theta), math.sin(theta)
    temp = (force + POLE_MASS * HALF_LENGTH * theta_dot**2 * sin) / total
    theta_acc = (GRAVITY * sin - cos * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos**2 / total)
    )
    x_acc = temp - POLE_MASS * HALF_LENGTH * theta_acc * cos / total
    return x_acc, theta_acc


def cartpole_step(state, force, dt=DT):
    """One explicit Euler step. Returns ``(state', reward, failed)``.

    Reward is 1 when the new state is inside the limits, 0 on failure.
    """
    x, x_dot, theta, theta_dot = state
    x_acc, theta_acc = cartpole_derivatives(state, force)
    new = (
        x + dt * x_dot,
        x_dot + dt * x_acc,
        theta + dt * theta_dot,
        theta_dot + dt * theta_acc,
    )
    failed = abs(new[0]) > X_LIMIT or abs(new[2]) > ANGLE_LIMIT
    return new, (0.0 if failed else 1.0), failed


class CartPole(Env):
    """Pole balancing. Discrete forces {-10, +10} N or a continuous variant.

    In the continuous variant the action is a scalar in [-1, 1] (clipped)
    scaled to a force of at most 10 N. Episodes end on failure or after
    ``max_steps`` steps.
    """

    supports_restore = True

    def __init__(self, continuous: bool = False, max_steps: int = 1000):
        super().__init__()
        self.continuous = continuous
        self.max_steps = max_steps
        self.observation_dim = 4
        self.action_space = ActionSpace.box(1) if continuous else ActionSpace.discrete(2)
        self.state = (0.0, 0.0, 0.0, 0.0)
        self.t = 0

    def reset(self):
        self.state = tuple(float(v) for v in self.noise.uniform(-0.05, 0.05, size=4))
        self.t = 0
        return np.array(self.state)

    def force(self, action) -> float:
        a = np.asarray(action).reshape(-1)
        if self.continuous:
            return FORCE_MAG * float(np.clip(a[0], -1.0, 1.0))
        return FORCE_MAG if int(a[0]) == 1 else -FORCE_MAG

    def step(self, action):
        self.state, reward, failed = cartpole_step(self.state, self.force(action))
        self.t += 1
        return np.array(self.state), reward, failed or self.t >= self.max_steps

    def save_state(self):
        return (self.state, self.t, copy.deepcopy(self.noise.bit_generator.state))

    def restore_state(self, snapshot):
        self.state, self.t = snapshot[0], snapshot[1]
        self.noise.bit_generator.state = copy.deepcopy(snapshot[2])


# -- point mass ------------------------------------------------------------------


def point_mass_step(state, action, dt=0.05, noise=None):
    """Planar double integrator. ``state`` is ``[px, py, vx, vy]``.

    The force is clipped to ``[-1, 1]^2``; ``noise`` (optional, shape (2,))
    is added to the velocity update. Reward is ``vx' - 1e-5 * |u|^2``.
    """
    s = np.asarray(state, dtype=float)
    u = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
    vel = s[2:] + dt * u
    if noise is not None:
        vel = vel + noise
    pos = s[:2] + dt * vel
    reward = float(vel[0] - 1e-5 * (u @ u))
    return np.concatenate([pos, vel]), reward, False


class PointMass(Env):
    supports_restore = True

    def __init__(self, noise_std: float = 0.0, dt: float = 0.05, max_steps: int = 200):
        super().__init__()
        self.noise_std = noise_std
        self.dt = dt
        self.max_steps = max_steps
        self.observation_dim = 4
        self.action_space = ActionSpace.box(2)
        self.state = np.zeros(4)
        self.t = 0

    def reset(self):
        self.state = np.zeros(4)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        noise = self.noise.normal(0.0, self.noise_std, size=2) if self.noise_std > 0 else None
        self.state, reward, _ = point_mass_step(self.state, action, self.dt, noise)
        self.t += 1
        return self.state.copy(), reward, self.t >= self.max_steps

    def save_state(self):
        return (self.state.copy(), self.t, copy.deepcopy(self.noise.bit_generator.state))

    def restore_state(self, snapshot):
        self.state, self.t = snapshot[0].copy(), snapshot[1]
        self.noise.bit_generator.state = copy.deepcopy(snapshot[2])


# -- selector ------------------------------------------------------------------------


def make_env(selector: str, discount: float = 0.9) -> Env:
    """Build an environment from a selector string.

    ``cartpole``, ``cartpole-continuous``, ``chain:<n>``, ``gridworld:<w>x<h>``,
    ``random:<S>x<A>:<seed>``, ``pointmass``, or ``file:<path>`` for a tabular
    MDP text file. ``discount`` applies to generated tabular MDPs.
    """
    name, _, arg = selector.partition(":")
    try:
        if name == "cartpole" and not arg:
            return CartPole()
        if name == "cartpole-continuous" and not arg:
            return CartPole(continuous=True)
        if name == "pointmass" and not arg:
            return PointMass()
        if name == "chain":
            return TabularEnv(chain_mdp(int(arg), discount=discount))
        if name == "gridworld":
            w, h = arg.lower().split("x")
            return TabularEnv(gridworld(int(w), int(h), discount=discount))
        if name == "random":
            size, seed = arg.split(":")
            S, A = size.lower().split("x")
            return TabularEnv(random_mdp(int(S), int(A), int(seed), discount=discount))
        if name == "file":
            from .mdp import load_mdp

            return TabularEnv(load_mdp(arg))
    except (ValueError, OSError) as exc:
        raise ValueError(f"bad environment selector {selector!r}: {exc}") from None
    raise ValueError(f"unknown environment selector {selector!r}")
