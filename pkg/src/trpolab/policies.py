"""Parameterized stochastic policies and their derivatives.

A policy is a :class:`NetworkSpec` plus a flat parameter vector ``theta``.
The network maps a state to a vector of distribution parameters ``mu``
(the "head coordinates"):

* ``gaussian``: network output is the mean; a state-independent
  log-standard-deviation vector lives in its own parameter slice.
  Head coordinates are ``[mean, log_std]``.
* ``categorical``: network output is a block of logits, one softmax per
  action factor. Head coordinates are the logits.
* ``tabular``: a categorical head on a one-hot state with no hidden layers
  and no bias, so ``theta`` is exactly the ``(S, A)`` logit table.

Differentiation is a hand-written reverse pass (``vjp``) and forward
tangent pass (``jvp``) through dense tanh layers. These are enough for
score-function gradients and for Fisher-vector products ``J^T M J v``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NetworkSpec",
    "ParamLayout",
    "DistParams",
    "Linearization",
    "param_layout",
    "init_params",
    "forward",
    "log_prob",
    "sample",
    "entropy",
    "kl",
    "grad_log_prob",
    "score_head",
    "kl_and_fisher_head",
    "fisher_head_product",
]

HEADS = ("gaussian", "categorical", "tabular")
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_sizes: tuple = ()
    head: str = "gaussian"
    action_dim: int = 1
    action_factors: tuple = ()
    activation: str = "tanh"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "action_factors", tuple(int(k) for k in self.action_factors))
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("layer widths must be positive")
        if self.head == "gaussian" and self.action_dim < 1:
            raise ValueError("gaussian head needs action_dim >= 1")
        if self.head != "gaussian" and (not self.action_factors or min(self.action_factors) < 1):
            raise ValueError("categorical head needs positive action_factors")
        if self.head == "tabular" and (self.hidden_sizes or self.bias or len(self.action_factors) != 1):
            raise ValueError("tabular head takes one-hot input, one factor, no hidden layers, no bias")

    @classmethod
    def gaussian(cls, input_dim, hidden_sizes, action_dim) -> "NetworkSpec":
        return cls(input_dim, tuple(hidden_sizes), "gaussian", action_dim=action_dim)

    @classmethod
    def categorical(cls, input_dim, hidden_sizes, action_factors) -> "NetworkSpec":
        return cls(input_dim, tuple(hidden_sizes), "categorical", action_factors=tuple(action_factors))

    @classmethod
    def tabular(cls, num_states, num_actions) -> "NetworkSpec":
        return cls(num_states, (), "tabular", action_factors=(num_actions,), bias=False)

    @property
    def output_dim(self) -> int:
        return self.action_dim if self.head == "gaussian" else sum(self.action_factors)

    @property
    def head_dim(self) -> int:
        return 2 * self.action_dim if self.head == "gaussian" else self.output_dim

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_sizes, self.output_dim)


@dataclass(frozen=True)
class ParamLayout:
    slices: dict
    shapes: dict
    size: int

    def unpack(self, theta: np.ndarray) -> dict:
        return {k: theta[s].reshape(self.shapes[k]) for k, s in self.slices.items()}


@functools.lru_cache(maxsize=64)
def param_layout(spec: NetworkSpec) -> ParamLayout:
    slices, shapes = {}, {}
    offset = 0

    def add(name, shape):
        nonlocal offset
        n = int(np.prod(shape))
        slices[name] = slice(offset, offset + n)
        shapes[name] = shape
        offset += n

    dims = spec.layer_dims
    for i in range(len(dims) - 1):
        add(f"W{i}", (dims[i], dims[i + 1]))
        if spec.bias:
            add(f"b{i}", (dims[i + 1],))
    if spec.head == "gaussian":
        add("log_std", (spec.action_dim,))
    return ParamLayout(slices, shapes, offset)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Weights uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; biases and log-std zero.

    The tabular head starts at zero logits (the uniform policy).
    """
    layout = param_layout(spec)
    theta = np.zeros(layout.size)
    if spec.head == "tabular":
        return theta
    dims = spec.layer_dims
    for i in range(len(dims) - 1):
        w = 1.0 / math.sqrt(dims[i])
        sl = layout.slices[f"W{i}"]
        theta[sl] = rng.uniform(-w, w, size=sl.stop - sl.start)
    return theta


# -- distributions -------------------------------------------------------------


@dataclass
class DistParams:
    """Batched distribution parameters; leading axis is the state index."""

    kind: str
    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None
    logits: np.ndarray | None = None
    factors: tuple = ()
    _logp: list | None = field(default=None, repr=False)

    @property
    def std(self):
        return np.exp(self.log_std)

    @property
    def batch_size(self) -> int:
        return (self.mean if self.kind == "gaussian" else self.logits).shape[0]

    def factor_logp(self) -> list:
        """Per-factor log-softmax blocks."""
        if self._logp is None:
            out, start = [], 0
            for k in self.factors:
                z = self.logits[:, start:start + k]
                z = z - z.max(axis=1, keepdims=True)
                out.append(z - np.log(np.sum(np.exp(z), axis=1, keepdims=True)))
                start += k
            self._logp = out
        return self._logp

    @property
    def probs(self) -> list:
        return [np.exp(lp) for lp in self.factor_logp()]

    def head_coords(self) -> np.ndarray:
        if self.kind == "gaussian":
            return np.hstack([self.mean, np.broadcast_to(self.log_std, self.mean.shape)])
        return self.logits

    def take(self, idx) -> "DistParams":
        if self.kind == "gaussian":
            return DistParams(self.kind, mean=self.mean[idx], log_std=self.log_std)
        return DistParams(self.kind, logits=self.logits[idx], factors=self.factors)


def _head_dist(spec: NetworkSpec, out: np.ndarray, theta: np.ndarray, layout: ParamLayout) -> DistParams:
    if spec.head == "gaussian":
        return DistParams("gaussian", mean=out, log_std=theta[layout.slices["log_std"]].copy())
    return DistParams("categorical", logits=out, factors=spec.action_factors)


def _as_batch(spec, states):
    x = np.asarray(states, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"state dimension {x.shape[1]} does not match network input {spec.input_dim}")
    return x, single


def _forward_cache(spec, theta, x, layout):
    params = layout.unpack(theta)
    acts = [x]
    h = x
    n_layers = len(spec.layer_dims) - 1
    for i in range(n_layers):
        z = h @ params[f"W{i}"]
        if spec.bias:
            z = z + params[f"b{i}"]
        h = np.tanh(z) if i < n_layers - 1 else z
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation in layer {i}")
        acts.append(h)
    return params, acts


def forward(spec: NetworkSpec, theta: np.ndarray, states) -> DistParams:
    """Distribution parameters for a batch of states (or a single state)."""
    layout = param_layout(spec)
    x, _ = _as_batch(spec, states)
    _, acts = _forward_cache(spec, theta, x, layout)
    return _head_dist(spec, acts[-1], theta, layout)


def _action_matrix(dist: DistParams, actions):
    a = np.asarray(actions)
    n = dist.batch_size
    if dist.kind == "gaussian":
        return a.reshape(n, -1).astype(float)
    return a.reshape(n, -1).astype(int)


def log_prob(dist: DistParams, actions) -> np.ndarray:
    """Log-density (Gaussian) or log-probability (categorical) per state."""
    a = _action_matrix(dist, actions)
    if dist.kind == "gaussian":
        z = (a - dist.mean) / dist.std
        return -0.5 * np.sum(z * z, axis=1) - np.sum(dist.log_std) - 0.5 * a.shape[1] * _LOG_2PI
    rows = np.arange(a.shape[0])
    total = np.zeros(a.shape[0])
    for j, lp in enumerate(dist.factor_logp()):
        total = total + lp[rows, a[:, j]]
    return total


def sample(dist: DistParams, rng: np.random.Generator) -> np.ndarray:
    """One action per state: (N, d) floats or (N, factors) ints."""
    n = dist.batch_size
    if dist.kind == "gaussian":
        return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
    out = np.empty((n, len(dist.factors)), dtype=int)
    for j, p in enumerate(dist.probs):
        cdf = np.cumsum(p, axis=1)
        u = rng.random(n)[:, None] * cdf[:, -1:]
        out[:, j] = np.minimum(np.sum(cdf <= u, axis=1), p.shape[1] - 1)
    return out


def entropy(dist: DistParams) -> np.ndarray:
    if dist.kind == "gaussian":
        d = dist.mean.shape[1]
        return np.full(dist.batch_size, np.sum(dist.log_std) + 0.5 * d * (1 + _LOG_2PI))
    return -sum(np.sum(np.where(p > 0, p * lp, 0.0), axis=1) for p, lp in zip(dist.probs, dist.factor_logp()))


def kl(old: DistParams, new: DistParams) -> np.ndarray:
    """Per-state ``KL(old || new)`` in closed form."""
    if old.kind != new.kind:
        raise ValueError("distribution kinds differ")
    if old.kind == "gaussian":
        var_o = np.exp(2 * old.log_std)
        var_n = np.exp(2 * new.log_std)
        diff = old.mean - new.mean
        return np.sum(new.log_std - old.log_std + (var_o + diff * diff) / (2 * var_n) - 0.5, axis=1)
    if old.factors != new.factors:
        raise ValueError("categorical factor sizes differ")
    total = 0.0
    for lpo, lpn in zip(old.factor_logp(), new.factor_logp()):
        po = np.exp(lpo)
        total = total + np.sum(np.where(po > 0, po * (lpo - lpn), 0.0), axis=1)
    return total


def score_head(dist: DistParams, actions) -> np.ndarray:
    """Gradient of ``log p(a | mu)`` with respect to the head coordinates, per state."""
    a = _action_matrix(dist, actions)
    if dist.kind == "gaussian":
        z = (a - dist.mean) / dist.std
        return np.hstack([z / dist.std, z * z - 1.0])
    blocks = []
    rows = np.arange(a.shape[0])
    for j, p in enumerate(dist.probs):
        g = -p
        g[rows, a[:, j]] += 1.0
        blocks.append(g)
    return np.hstack(blocks)


def fisher_head_product(new: DistParams, u: np.ndarray, old: DistParams | None = None) -> np.ndarray:
    """Apply the Hessian of ``KL(old || new)`` in the head coordinates of ``new``.

    ``u`` is (N, H). With ``old=None`` (or ``old == new``) this is the head
    Fisher: ``diag(1/sigma^2, 2)`` for Gaussians and ``diag(p) - p p^T`` per
    categorical factor (logit coordinates).
    """
    if new.kind == "gaussian":
        d = new.mean.shape[1]
        um, ur = u[:, :d], u[:, d:]
        inv_var = np.exp(-2 * new.log_std)
        if old is None:
            return np.hstack([inv_var * um, 2.0 * ur])
        delta = new.mean - old.mean
        cross = -2.0 * delta * inv_var
        rr = 2.0 * (np.exp(2 * old.log_std) + delta * delta) * inv_var
        return np.hstack([inv_var * um + cross * ur, cross * um + rr * ur])
    out, start = [], 0
    for p in new.probs:
        k = p.shape[1]
        ub = u[:, start:start + k]
        out.append(p * ub - p * np.sum(p * ub, axis=1, keepdims=True))
        start += k
    return np.hstack(out)


def kl_and_fisher_head(kind: str, mu_new: DistParams, mu_old: DistParams):
    """Closed-form KL(old || new) for each state and the head Hessian product ``v -> M v``.

    ``M`` is the second derivative of the KL in the head coordinates of
    ``mu_new`` evaluated at ``mu_new``; at ``mu_new == mu_old`` it is the Fisher.
    """
    if mu_new.kind != kind or mu_old.kind != kind:
        raise ValueError("distribution kind mismatch")
    if mu_new.head_coords().shape != mu_old.head_coords().shape:
        raise ValueError("head dimension mismatch")
    value = kl(mu_old, mu_new)

    def product(v):
        v = np.asarray(v, dtype=float)
        return fisher_head_product(mu_new, v.reshape(mu_new.batch_size, -1), mu_old).reshape(v.shape)

    return value, product


# -- linearization -------------------------------------------------------------------


class Linearization:
    """Forward pass at fixed ``theta`` with cached activations.

    Provides Jacobian-vector products into head coordinates and the
    transposed products back into parameter space.
    """

    def __init__(self, spec: NetworkSpec, theta: np.ndarray, states):
        self.spec = spec
        self.theta = np.asarray(theta, dtype=float)
        self.layout = param_layout(spec)
        if self.theta.shape != (self.layout.size,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({self.layout.size},)")
        x, _ = _as_batch(spec, states)
        self.params, self.acts = _forward_cache(spec, self.theta, x, self.layout)
        self.dist = _head_dist(spec, self.acts[-1], self.theta, self.layout)
        self.n = x.shape[0]

    def jvp(self, v: np.ndarray) -> np.ndarray:
        """Head-coordinate tangents (N, H) for a parameter direction ``v``."""
        spec, lay = self.spec, self.layout
        dv = lay.unpack(np.asarray(v, dtype=float))
        n_layers = len(spec.layer_dims) - 1
        dh = None
        for i in range(n_layers):
            dz = self.acts[i] @ dv[f"W{i}"]
            if dh is not None:
                dz = dz + dh @ self.params[f"W{i}"]
            if spec.bias:
                dz = dz + dv[f"b{i}"]
            dh = (1.0 - self.acts[i + 1] ** 2) * dz if i < n_layers - 1 else dz
        if spec.head == "gaussian":
            return np.hstack([dh, np.broadcast_to(dv["log_std"], dh.shape)])
        return dh

    def vjp(self, cot: np.ndarray) -> np.ndarray:
        """Sum over states of ``J_i^T cot_i`` for head cotangents ``cot`` (N, H)."""
        spec, lay = self.spec, self.layout
        grad = np.zeros(lay.size)
        cot = np.asarray(cot, dtype=float)
        if spec.head == "gaussian":
            d = spec.action_dim
            grad[lay.slices["log_std"]] = cot[:, d:].sum(axis=0)
            dz = cot[:, :d]
        else:
            dz = cot
        n_layers = len(spec.layer_dims) - 1
        for i in reversed(range(n_layers)):
            grad[lay.slices[f"W{i}"]] = (self.acts[i].T @ dz).ravel()
            if spec.bias:
                grad[lay.slices[f"b{i}"]] = dz.sum(axis=0)
            if i > 0:
                dz = (dz @ self.params[f"W{i}"].T) * (1.0 - self.acts[i] ** 2)
        return grad

    def fvp(self, v: np.ndarray) -> np.ndarray:
        """Mean over states of ``J^T M J v`` with the head Fisher at this ``theta``."""
        return self.vjp(fisher_head_product(self.dist, self.jvp(v))) / self.n

    def grad_log_prob(self, actions, weights=None) -> np.ndarray:
        """``sum_i w_i grad log pi(a_i | s_i)`` (unit weights if omitted)."""
        g = score_head(self.dist, actions)
        if weights is not None:
            g = g * np.asarray(weights, dtype=float)[:, None]
        return self.vjp(g)


def grad_log_prob(spec: NetworkSpec, theta: np.ndarray, state, action) -> np.ndarray:
    """Exact gradient of ``log pi_theta(action | state)`` by reverse accumulation."""
    lin = Linearization(spec, theta, np.atleast_2d(np.asarray(state, dtype=float)))
    return lin.grad_log_prob(np.asarray(action)[None, ...])
