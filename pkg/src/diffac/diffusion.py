"""Discrete VP (DDPM) diffusion: forward perturbation, ancestral sampler,
score matching, per-step transition densities and their gradients.

Step indices ``tau`` are 1-based (``1..T``); arrays in :class:`NoiseSchedule`
carry a padding entry at index 0 so that ``alpha_bars[tau]`` reads naturally
(``alpha_bars[0] == 1``, i.e. no perturbation).

A model's time input is ``tau / T`` appended to ``x``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UnsupportedStepError
from .nn import DenseNet, MlpSpec, backward_cached, forward_cached

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta1: float
    betaT: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    # ancestral sampler: x_{tau-1} = a (x_tau - b eps) + z noise
    a: np.ndarray
    b: np.ndarray
    z: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta1": self.beta1, "betaT": self.betaT})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        d = json.loads(text)
        return make_linear_schedule(int(d["T"]), float(d["beta1"]), float(d["betaT"]))

    def check_tau(self, tau, lo: int = 1):
        t = np.asarray(tau)
        if np.any(t < lo) or np.any(t > self.T):
            raise ContractError(f"tau must lie in [{lo}, {self.T}], got {tau}")


def make_linear_schedule(T: int, beta1: float, betaT: float) -> NoiseSchedule:
    if T < 2:
        raise ContractError("T must be >= 2")
    if not 0.0 < beta1 < betaT < 1.0:
        raise ContractError("need 0 < beta1 < betaT < 1")
    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = beta1 + np.arange(T) * (betaT - beta1) / (T - 1)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    a = np.empty(T + 1)
    b = np.empty(T + 1)
    a[0] = b[0] = np.nan
    a[1:] = 1.0 / np.sqrt(alphas[1:])
    b[1:] = betas[1:] / np.sqrt(1.0 - alpha_bars[1:])
    z = np.sqrt(betas)
    return NoiseSchedule(T, float(beta1), float(betaT), betas, alphas, alpha_bars, a, b, z)


def default_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule spanning the same continuous-time VP-SDE as the
    1000-step DDPM schedule (beta from 1e-4 to 0.02), rescaled to ``T`` steps
    so that ``alpha_bars[T]`` stays close to 0. Needs ``T > 20``."""
    if T <= 20:
        raise ContractError("default_schedule needs T > 20; use make_linear_schedule")
    return make_linear_schedule(T, 0.1 / T, 20.0 / T)


def perturb(schedule: NoiseSchedule, x0, tau, noise) -> np.ndarray:
    """Sample of the forward process at step ``tau`` given ``x0``.

    ``tau`` may be a scalar or one step per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    schedule.check_tau(tau, lo=0)
    ab = schedule.alpha_bars[np.asarray(tau)]
    if np.ndim(ab) == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise)


@dataclass
class ScoreModel:
    """Epsilon-prediction network ``eps(x, tau/T)``."""

    net: DenseNet
    T: int

    def __post_init__(self):
        if self.net.spec.input_dim != self.net.spec.output_dim + 1:
            raise ContractError("score net must map (x, t) of dim d+1 to d")

    @classmethod
    def init(cls, dim: int, T: int, hidden=(64, 64), rng=None, activation="relu") -> "ScoreModel":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(DenseNet.init(MlpSpec(dim + 1, tuple(hidden), dim, activation), rng), T)

    @property
    def dim(self) -> int:
        return self.net.spec.output_dim

    def copy(self) -> "ScoreModel":
        return ScoreModel(self.net.copy(), self.T)

    def inputs(self, x: np.ndarray, tau) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(tau, dtype=np.float64), (x.shape[0],)) / self.T
        return np.column_stack([x, t])

    def eps(self, x, tau) -> np.ndarray:
        out, _ = forward_cached(self.net, self.inputs(x, tau))
        return out

    def eps_cached(self, x, tau):
        return forward_cached(self.net, self.inputs(x, tau))

    def param_grad(self, cache, eps_grad) -> np.ndarray:
        """Parameter gradient of ``sum(eps * eps_grad)`` for a cached batch."""
        dparams, _ = backward_cached(self.net, cache, eps_grad)
        return dparams


def _coef(schedule: NoiseSchedule, arr: np.ndarray, tau, n: int) -> np.ndarray:
    v = arr[np.asarray(tau)]
    return np.broadcast_to(v, (n,))[:, None] if np.ndim(v) == 0 else v[:, None]


def step_mean(model: ScoreModel, schedule: NoiseSchedule, x_tau, tau):
    """Mean of the backward kernel and the forward cache used to compute it.

    Returns ``(mu, cache)``. ``tau`` is a scalar or one step per row.
    """
    x_tau = np.atleast_2d(np.asarray(x_tau, dtype=np.float64))
    schedule.check_tau(tau)
    eps, cache = model.eps_cached(x_tau, tau)
    n = x_tau.shape[0]
    a = _coef(schedule, schedule.a, tau, n)
    b = _coef(schedule, schedule.b, tau, n)
    return a * (x_tau - b * eps), cache


def mean_param_grad(model: ScoreModel, schedule: NoiseSchedule, cache, tau, mean_grad) -> np.ndarray:
    """Chain ``d loss / d mu`` (one row per sample) into the score-net parameters.

    ``mu = a (x - b eps)``, hence ``d mu / d eps = -a b``.
    """
    mean_grad = np.atleast_2d(mean_grad)
    n = mean_grad.shape[0]
    ab = _coef(schedule, schedule.a, tau, n) * _coef(schedule, schedule.b, tau, n)
    return model.param_grad(cache, -ab * mean_grad)


def ancestral_step(model: ScoreModel, schedule: NoiseSchedule, x_tau, tau, noise) -> np.ndarray:
    """One DDPM ancestral step; the noise is dropped at ``tau == 1``."""
    x_tau = np.asarray(x_tau, dtype=np.float64)
    single = x_tau.ndim == 1
    mu, _ = step_mean(model, schedule, x_tau, tau)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    zt = np.where(np.asarray(tau) > 1, schedule.z[np.asarray(tau)], 0.0)
    zt = np.broadcast_to(zt, (mu.shape[0],))[:, None]
    out = mu + zt * noise
    return out[0] if single else out


@dataclass
class Trajectories:
    """A batch of recorded backward rollouts.

    ``states[tau]`` is ``x_tau`` for ``tau = 0..T`` with shape (T+1, n, d);
    ``noises[tau]`` is the standard-normal draw injected at step ``tau``
    (zeros at ``tau <= 1``); ``log_probs[tau]`` is ``log P(x_{tau-1} | x_tau)``
    for ``tau >= 2`` (NaN elsewhere). ``rewards`` holds ``R(x_0)`` once an
    environment has scored the batch.
    """

    states: np.ndarray
    noises: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    def __len__(self):
        return self.n

    def __getitem__(self, j: int) -> "Trajectory":
        r = None if self.rewards is None else float(self.rewards[j])
        return Trajectory(self.states[:, j], self.noises[:, j], self.log_probs[:, j], r)

    def to_csv(self, path) -> None:
        from .io import write_trajectories_csv

        write_trajectories_csv(self, path)


@dataclass
class Trajectory:
    states: np.ndarray
    noises: np.ndarray
    log_probs: np.ndarray
    reward: float | None = None


def sample(model: ScoreModel, schedule: NoiseSchedule, n: int, rng: np.random.Generator,
           record: bool = False, x_T=None, noises=None, stop_at: int = 0):
    """Draw ``n`` rollouts ``x_T -> x_0`` with the ancestral sampler.

    Returns ``x_0`` (or ``x_stop_at`` when ``stop_at > 0``) and, with
    ``record``, the full :class:`Trajectories`. ``x_T`` and ``noises``
    (shape (T+1, n, d), row ``tau`` used at step ``tau``) may be supplied to
    share random numbers between runs.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    T, d = schedule.T, model.dim
    x = rng.standard_normal((n, d)) if x_T is None else np.array(x_T, dtype=np.float64)
    if noises is None:
        noises = np.zeros((T + 1, n, d))
        noises[2:] = rng.standard_normal((T - 1, n, d))
    if record:
        states = np.empty((T + 1, n, d))
        states[T] = x
        log_probs = np.full((T + 1, n), np.nan)
    for tau in range(T, stop_at, -1):
        mu, _ = step_mean(model, schedule, x, tau)
        if tau > 1:
            x = mu + schedule.z[tau] * noises[tau]
            if record:
                log_probs[tau] = _gauss_logpdf(x - mu, schedule.z[tau])
        else:
            x = mu
        if record:
            states[tau - 1] = x
    if not record:
        return x, None
    return x, Trajectories(states, np.array(noises), log_probs)


def _gauss_logpdf(resid: np.ndarray, std: float) -> np.ndarray:
    d = resid.shape[-1]
    return -0.5 * d * (LOG_2PI + 2.0 * np.log(std)) - 0.5 * np.sum(resid * resid, axis=-1) / std**2


def _check_stochastic(schedule: NoiseSchedule, tau):
    if np.any(np.asarray(tau) == 1):
        raise UnsupportedStepError("step tau=1 is deterministic and has no transition density")
    schedule.check_tau(tau, lo=2)


def step_log_prob(model: ScoreModel, schedule: NoiseSchedule, x_tau, x_prev, tau):
    """``log N(x_prev; mu(x_tau, tau), z_tau^2 I)``; scalar for vector input."""
    _check_stochastic(schedule, tau)
    single = np.ndim(x_tau) == 1
    mu, _ = step_mean(model, schedule, x_tau, tau)
    std = _coef(schedule, schedule.z, tau, mu.shape[0])
    resid = np.atleast_2d(x_prev) - mu
    d = mu.shape[1]
    lp = -0.5 * d * (LOG_2PI + 2.0 * np.log(std[:, 0])) - 0.5 * np.sum(resid**2, axis=1) / std[:, 0] ** 2
    return float(lp[0]) if single else lp


def step_log_prob_grad(model: ScoreModel, schedule: NoiseSchedule, x_tau, x_prev, tau,
                       weights=None) -> np.ndarray:
    """Parameter gradient of ``sum_j w_j log P(x_prev_j | x_tau_j)``.

    ``weights`` defaults to ones (plain sum over the batch).
    """
    _check_stochastic(schedule, tau)
    mu, cache = step_mean(model, schedule, x_tau, tau)
    var = _coef(schedule, schedule.z, tau, mu.shape[0]) ** 2
    g = (np.atleast_2d(x_prev) - mu) / var
    if weights is not None:
        g = g * np.asarray(weights, dtype=np.float64)[:, None]
    return mean_param_grad(model, schedule, cache, tau, g)


def gaussian_step_kl(model_a: ScoreModel, model_b: ScoreModel, schedule: NoiseSchedule,
                     x_tau, tau):
    """KL between the two backward kernels at ``(x_tau, tau)``; both share
    the variance ``z_tau^2`` so only the means contribute."""
    _check_stochastic(schedule, tau)
    single = np.ndim(x_tau) == 1
    mu_a, _ = step_mean(model_a, schedule, x_tau, tau)
    mu_b, _ = step_mean(model_b, schedule, x_tau, tau)
    var = _coef(schedule, schedule.z, tau, mu_a.shape[0])[:, 0] ** 2
    kl = np.sum((mu_a - mu_b) ** 2, axis=1) / (2.0 * var)
    return float(kl[0]) if single else kl


def score_matching_loss(model: ScoreModel, schedule: NoiseSchedule, x0, rng: np.random.Generator,
                        tau=None, noise=None):
    """Simple epsilon-regression loss and its parameter gradient.

    Each row gets ``tau ~ U{1..T}`` and ``z ~ N(0, I)`` unless supplied; the
    loss is ``mean_j ||eps(x_tau_j, tau_j) - z_j||^2``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    if tau is None:
        tau = rng.integers(1, schedule.T + 1, size=n)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    x_tau = perturb(schedule, x0, tau, noise)
    eps, cache = model.eps_cached(x_tau, tau)
    resid = eps - noise
    loss = float(np.sum(resid * resid) / n)
    grad = model.param_grad(cache, 2.0 * resid / n)
    return loss, grad
