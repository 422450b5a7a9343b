"""Off-policy sample store and the two critics.

``CriticV`` regresses the terminal reward from forward-perturbed buffer
samples ``(x_tau, tau)``; ``CriticQ`` regresses it from recorded rollout
transitions ``(x_tau, a, tau)`` where the action ``a`` is the realized next
state ``x_{tau-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, Trajectories, perturb
from .errors import ContractError
from .nn import DenseNet, MlpSpec, backward_cached, forward_cached


@dataclass
class SampleBuffer:
    """Ever-growing store of terminal samples ``x_0`` with rewards."""

    dim: int
    _x: list = field(default_factory=list, repr=False)
    _r: list = field(default_factory=list, repr=False)
    _it: list = field(default_factory=list, repr=False)
    _cache: tuple | None = field(default=None, repr=False)

    def push(self, x0, reward: float, iteration: int = 0) -> None:
        x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        if x0.shape[0] != self.dim:
            raise ContractError(f"sample dim {x0.shape[0]} != buffer dim {self.dim}")
        if not np.isfinite(reward):
            raise ContractError(f"non-finite reward {reward!r} rejected")
        self._x.append(x0.copy())
        self._r.append(float(reward))
        self._it.append(int(iteration))
        self._cache = None

    def push_many(self, x0, rewards, iteration: int = 0) -> None:
        for x, r in zip(np.atleast_2d(x0), np.asarray(rewards).reshape(-1)):
            self.push(x, r, iteration)

    def __len__(self) -> int:
        return len(self._r)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Immutable snapshot ``(x, rewards, iterations)``."""
        if self._cache is None:
            x = np.array(self._x).reshape(len(self._x), self.dim)
            r = np.array(self._r)
            it = np.array(self._it, dtype=np.int64)
            for a in (x, r, it):
                a.setflags(write=False)
            self._cache = (x, r, it)
        return self._cache

    @property
    def x(self) -> np.ndarray:
        return self.arrays()[0]

    @property
    def rewards(self) -> np.ndarray:
        return self.arrays()[1]

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw with replacement over every retained entry."""
        if len(self) == 0:
            raise ContractError("buffer is empty")
        x, r, _ = self.arrays()
        idx = rng.integers(0, len(self), size=n)
        return x[idx], r[idx]

    def to_csv(self, path) -> None:
        from .io import write_buffer_csv

        write_buffer_csv(self, path)

    @classmethod
    def from_csv(cls, path) -> "SampleBuffer":
        from .io import read_buffer_csv

        return read_buffer_csv(path)


@dataclass
class CriticV:
    """``V(x, tau/T)`` -> scalar."""

    net: DenseNet
    T: int

    @classmethod
    def init(cls, dim: int, T: int, hidden=(64, 64), rng=None, activation="relu") -> "CriticV":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(DenseNet.init(MlpSpec(dim + 1, tuple(hidden), 1, activation), rng), T)

    @property
    def dim(self) -> int:
        return self.net.spec.input_dim - 1

    def copy(self) -> "CriticV":
        return CriticV(self.net.copy(), self.T)

    def inputs(self, x, tau) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(tau, dtype=np.float64), (x.shape[0],)) / self.T
        return np.column_stack([x, t])

    def value(self, x, tau) -> np.ndarray:
        out, _ = forward_cached(self.net, self.inputs(x, tau))
        return out[:, 0]

    def value_and_input_grad(self, x, tau, weights=None):
        """Values and ``grad_x V`` per row (optionally scaled per row)."""
        out, cache = forward_cached(self.net, self.inputs(x, tau))
        g = np.ones_like(out) if weights is None else np.asarray(weights, dtype=np.float64)[:, None]
        _, dx = backward_cached(self.net, cache, g)
        return out[:, 0], dx[:, :-1]


@dataclass
class CriticQ:
    """``Q(s, a, tau/T)`` -> scalar."""

    net: DenseNet
    T: int

    @classmethod
    def init(cls, dim: int, T: int, hidden=(64, 64), rng=None, activation="relu") -> "CriticQ":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(DenseNet.init(MlpSpec(2 * dim + 1, tuple(hidden), 1, activation), rng), T)

    @property
    def dim(self) -> int:
        return (self.net.spec.input_dim - 1) // 2

    def copy(self) -> "CriticQ":
        return CriticQ(self.net.copy(), self.T)

    def inputs(self, s, a, tau) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        t = np.broadcast_to(np.asarray(tau, dtype=np.float64), (s.shape[0],)) / self.T
        return np.column_stack([s, a, t])

    def value(self, s, a, tau) -> np.ndarray:
        out, _ = forward_cached(self.net, self.inputs(s, a, tau))
        return out[:, 0]

    def value_and_grads(self, s, a, tau):
        """Values, ``grad_s Q`` and ``grad_a Q`` per row."""
        out, cache = forward_cached(self.net, self.inputs(s, a, tau))
        _, dx = backward_cached(self.net, cache, np.ones_like(out))
        d = self.dim
        return out[:, 0], dx[:, :d], dx[:, d:2 * d]


def critic_v_loss(critic: CriticV, buffer: SampleBuffer, schedule: NoiseSchedule,
                  minibatch_size: int, rng: np.random.Generator):
    """Squared error of ``V(x_tau, tau)`` against ``R(x_0)`` on perturbed
    buffer samples, ``tau ~ U{1..T}``. Returns ``(loss, param_grad)``."""
    x0, r = buffer.sample(rng, minibatch_size)
    tau = rng.integers(1, schedule.T + 1, size=minibatch_size)
    x_tau = perturb(schedule, x0, tau, rng.standard_normal(x0.shape))
    return critic_v_loss_on(critic, x_tau, tau, r)


def critic_v_loss_on(critic: CriticV, x_tau, tau, targets):
    out, cache = forward_cached(critic.net, critic.inputs(x_tau, tau))
    n = out.shape[0]
    resid = out[:, 0] - targets
    loss = float(np.mean(resid**2))
    grad, _ = backward_cached(critic.net, cache, (2.0 / n) * resid[:, None])
    return loss, grad


def transition_table(trajs: Trajectories) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten rollouts into ``(s, a, tau, R)`` rows over all ``(j, tau)``."""
    if trajs.rewards is None:
        raise ContractError("trajectories carry no rewards")
    T, n = trajs.T, trajs.n
    taus = np.repeat(np.arange(1, T + 1), n)
    s = trajs.states[1:].reshape(T * n, -1)
    a = trajs.states[:-1].reshape(T * n, -1)
    r = np.tile(trajs.rewards, T)
    return s, a, taus, r


def critic_q_loss(critic: CriticQ, trajectories, rows=None):
    """Squared error of ``Q(x_tau, x_{tau-1}, tau)`` against ``R(x_0)``,
    averaged over every recorded transition (or over ``rows`` of the flattened
    transition table when given). Returns ``(loss, param_grad)``."""
    table = trajectories if isinstance(trajectories, tuple) else transition_table(trajectories)
    s, a, tau, r = table
    if s.shape[0] == 0:
        raise ContractError("no transitions")
    if rows is not None:
        s, a, tau, r = s[rows], a[rows], tau[rows], r[rows]
    out, cache = forward_cached(critic.net, critic.inputs(s, a, tau))
    n = out.shape[0]
    resid = out[:, 0] - r
    grad, _ = backward_cached(critic.net, cache, (2.0 / n) * resid[:, None])
    return float(np.mean(resid**2)), grad


def critic_v_input_grad(critic: CriticV, x, tau) -> np.ndarray:
    """``grad_x V(x, tau)``; vector in, vector out, or row-wise for a batch."""
    single = np.ndim(x) == 1
    _, g = critic.value_and_input_grad(x, tau)
    return g[0] if single else g
