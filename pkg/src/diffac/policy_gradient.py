"""Policy-gradient estimators for SDE policies, the KL regularizer, the two
actor-critic training loops and the approximation-bound diagnostic.

Every estimator returns an *ascent* direction for the expected reward. The
training loops hand ``-PG + eta2 * grad KL`` to Adam as a loss gradient.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .diffusion import (NoiseSchedule, ScoreModel, Trajectories, _coef, mean_param_grad,
                        perturb, sample, step_log_prob_grad, step_mean)
from .envs import RewardEnv
from .errors import ContractError, DivergenceError
from .nn import AdamState, adam_update, per_sample_param_grads, save_net
from .rl import CriticQ, CriticV, SampleBuffer, transition_table
from .training import fit_critic_q, fit_critic_v, fit_score_model

log = logging.getLogger(__name__)

ESTIMATORS = ("vanilla-reinforce", "vanilla-ddpg", "sde-reinforce", "sde-ddpg")


@dataclass
class PGEstimate:
    grad: np.ndarray
    estimator: str
    batch_size: int
    tau_hist: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise ContractError(f"{self.estimator}: non-finite gradient estimate")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad))


def _hist(tau, T: int) -> np.ndarray:
    return np.bincount(np.asarray(tau).reshape(-1), minlength=T + 1)


# -- vanilla estimators on recorded trajectories ----------------------------


def vanilla_reinforce(actor: ScoreModel, schedule: NoiseSchedule, trajs: Trajectories,
                      critic_q: CriticQ | None = None, baseline=0.0) -> PGEstimate:
    """Score-function estimate averaged over every recorded ``(j, tau >= 2)``.

    The return ``G`` is ``R(x_0) - baseline`` or, with ``critic_q``, the critic
    value of the recorded transition.
    """
    T, n = trajs.T, trajs.n
    if T != schedule.T:
        raise ContractError("trajectories were recorded with a different schedule")
    if not np.all(np.isfinite(trajs.log_probs[2:])):
        raise ContractError("trajectories lack log-prob records for tau >= 2")
    x_tau = trajs.states[2:].reshape((T - 1) * n, -1)
    x_prev = trajs.states[1:T].reshape((T - 1) * n, -1)
    taus = np.repeat(np.arange(2, T + 1), n)
    if critic_q is not None:
        G = critic_q.value(x_tau, x_prev, taus)
    else:
        if trajs.rewards is None:
            raise ContractError("trajectories carry no rewards")
        G = np.tile(trajs.rewards - baseline, T - 1)
    grad = step_log_prob_grad(actor, schedule, x_tau, x_prev, taus, weights=G) / G.shape[0]
    return PGEstimate(grad, "vanilla-reinforce", n, _hist(taus, T))


def vanilla_ddpg(actor: ScoreModel, schedule: NoiseSchedule, critic_q: CriticQ,
                 trajs: Trajectories) -> PGEstimate:
    """Pathwise estimate: ``grad_a Q`` at the reparameterized action
    ``a = mu(x_tau) + z_tau * noise`` chained into the actor, over all steps."""
    T, n = trajs.T, trajs.n
    x_tau = trajs.states[1:].reshape(T * n, -1)
    noise = trajs.noises[1:].reshape(T * n, -1)
    taus = np.repeat(np.arange(1, T + 1), n)
    mu, cache = step_mean(actor, schedule, x_tau, taus)
    zt = np.where(taus > 1, schedule.z[taus], 0.0)[:, None]
    _, _, g_a = critic_q.value_and_grads(x_tau, mu + zt * noise, taus)
    grad = mean_param_grad(actor, schedule, cache, taus, g_a) / taus.shape[0]
    return PGEstimate(grad, "vanilla-ddpg", n, _hist(taus, T))


# -- estimators on forward-perturbed buffer states --------------------------


def draw_perturbed_states(buffer: SampleBuffer, schedule: NoiseSchedule, n: int,
                          rng: np.random.Generator, stratify: bool = False):
    """``(x_tau, tau)`` with ``x_0`` from the buffer and ``tau ~ U{2..T}``.

    ``stratify`` cycles ``tau`` through ``2..T`` from a random offset and
    shuffles, so every step is covered as evenly as the batch allows.
    """
    x0, _ = buffer.sample(rng, n)
    k = schedule.T - 1
    if stratify:
        tau = rng.permutation((rng.integers(k) + np.arange(n)) % k + 2)
    else:
        tau = rng.integers(2, schedule.T + 1, size=n)
    return perturb(schedule, x0, tau, rng.standard_normal(x0.shape)), tau


def _one_step(actor, schedule, x_tau, tau, rng):
    mu, cache = step_mean(actor, schedule, x_tau, tau)
    zt = _coef(schedule, schedule.z, tau, mu.shape[0])
    noise = rng.standard_normal(mu.shape)
    return mu, cache, zt, noise, mu + zt * noise


def sde_reinforce(actor: ScoreModel, critic_v: CriticV, buffer: SampleBuffer,
                  schedule: NoiseSchedule, batch: int, rng: np.random.Generator,
                  baseline: bool = False, states=None, stratify: bool = False) -> PGEstimate:
    """Score-function estimate at perturbed states, weighted by
    ``V(x_bar_{tau-1}, tau-1)``; ``baseline`` subtracts ``V(x_tau, tau)``."""
    x_tau, tau = states if states is not None else draw_perturbed_states(
        buffer, schedule, batch, rng, stratify)
    mu, cache, zt, noise, x_bar = _one_step(actor, schedule, x_tau, tau, rng)
    w = critic_v.value(x_bar, tau - 1)
    if baseline:
        w = w - critic_v.value(x_tau, tau)
    # grad log N(x_bar; mu, z^2) w.r.t. mu is noise / z
    g = noise / zt * w[:, None]
    grad = mean_param_grad(actor, schedule, cache, tau, g) / x_tau.shape[0]
    return PGEstimate(grad, "sde-reinforce", x_tau.shape[0], _hist(tau, schedule.T))


def sde_ddpg(actor: ScoreModel, critic_v: CriticV, buffer: SampleBuffer,
             schedule: NoiseSchedule, batch: int, rng: np.random.Generator,
             states=None, stratify: bool = False) -> PGEstimate:
    """Pathwise estimate ``grad_theta V(mu(x_tau) + z noise, tau-1)``."""
    x_tau, tau = states if states is not None else draw_perturbed_states(
        buffer, schedule, batch, rng, stratify)
    mu, cache, zt, noise, x_bar = _one_step(actor, schedule, x_tau, tau, rng)
    _, gx = critic_v.value_and_input_grad(x_bar, tau - 1)
    grad = mean_param_grad(actor, schedule, cache, tau, gx) / x_tau.shape[0]
    return PGEstimate(grad, "sde-ddpg", x_tau.shape[0], _hist(tau, schedule.T))


def mean_kl(actor: ScoreModel, ref: ScoreModel, schedule: NoiseSchedule, states) -> float:
    x_tau, tau = states
    mu_a, _ = step_mean(actor, schedule, x_tau, tau)
    mu_b, _ = step_mean(ref, schedule, x_tau, tau)
    var = _coef(schedule, schedule.z, tau, mu_a.shape[0]) ** 2
    return float(np.mean(np.sum((mu_a - mu_b) ** 2 / (2.0 * var), axis=1)))


def kl_reg_grad(actor: ScoreModel, ref: ScoreModel, schedule: NoiseSchedule, states,
                rng=None) -> np.ndarray:
    """Gradient w.r.t. the actor of the mean step KL to ``ref`` over ``states``.

    ``rng`` is accepted for signature symmetry with the estimators; the
    computation is deterministic.
    """
    x_tau, tau = states
    schedule.check_tau(tau, lo=2)
    mu_a, cache = step_mean(actor, schedule, x_tau, tau)
    mu_b, _ = step_mean(ref, schedule, x_tau, tau)
    var = _coef(schedule, schedule.z, tau, mu_a.shape[0]) ** 2
    g = (mu_a - mu_b) / var / mu_a.shape[0]
    return mean_param_grad(actor, schedule, cache, tau, g)


# -- training loops ----------------------------------------------------------


@dataclass
class TrainConfig:
    n_outer_iters: int = 30
    n_inner_iters: int = 5
    samples_per_iter: int = 34
    lr: float = 3e-4
    eta2: float = 0.05
    critic_steps: int = 100
    critic_lr: float = 3e-4
    critic_batch: int = 256
    score_steps: int = 100
    score_lr: float = 3e-4
    score_batch: int = 256
    pg_batch: int = 256
    estimator: str = "sde-ddpg"
    reinforce_baseline: bool = True
    stratify_tau: bool = False
    eval_samples: int = 512
    seed: int = 0
    record_wallclock: bool = False

    def __post_init__(self):
        for name in ("n_outer_iters", "samples_per_iter", "critic_batch", "score_batch",
                     "pg_batch", "eval_samples"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("n_inner_iters", "critic_steps", "score_steps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not (self.lr > 0 and self.critic_lr > 0 and self.score_lr > 0):
            raise ContractError("learning rates must be positive")
        if self.eta2 < 0:
            raise ContractError("eta2 must be >= 0")
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown estimator {self.estimator!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    actor: ScoreModel
    critic: CriticV | CriticQ | None
    ref: ScoreModel | None
    buffer: SampleBuffer
    metrics: list = field(default_factory=list)
    best_actor: ScoreModel | None = None
    best_reward: float = -np.inf
    final_reward: float = np.nan


class _Streams:
    """Independent RNG streams per component so that, e.g., skipping the
    critic does not shift the actor's random numbers."""

    NAMES = ("sample", "score", "critic", "pg", "eval")

    def __init__(self, seed: int):
        for name, ss in zip(self.NAMES, np.random.SeedSequence(seed).spawn(len(self.NAMES))):
            setattr(self, name, np.random.default_rng(ss))


def _guard(rewards: np.ndarray, it: int, actor: ScoreModel, checkpoint_dir):
    if np.all(np.isfinite(rewards)):
        return
    path = None
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"diverged_iter{it}.ckpt"
        save_net(actor.net, path)
    raise DivergenceError(f"non-finite reward at iteration {it}", checkpoint=path)


def _row(it, config, mean_reward, critic_loss, score_loss, kl, grad_norm, t0):
    ms = (time.perf_counter() - t0) * 1e3 if config.record_wallclock else 0.0
    return {"iter": it, "estimator": config.estimator, "mean_reward": float(mean_reward),
            "critic_loss": float(critic_loss), "score_loss": float(score_loss),
            "kl_to_ref": float(kl), "grad_norm": float(grad_norm), "wallclock_ms": float(ms)}


def _tail_mean(losses: list, k: int = 10) -> float:
    return float(np.mean(losses[-k:])) if losses else 0.0


def _sde_pg(config, actor, critic, buffer, schedule, states, rng):
    if config.estimator == "sde-reinforce":
        return sde_reinforce(actor, critic, buffer, schedule, config.pg_batch, rng,
                             baseline=config.reinforce_baseline, states=states)
    if config.estimator == "sde-ddpg":
        return sde_ddpg(actor, critic, buffer, schedule, config.pg_batch, rng, states=states)
    raise ContractError(f"estimator {config.estimator!r} does not run on perturbed states")


def _finish(result: TrainResult, env, schedule, config, streams):
    x0, _ = sample(result.actor, schedule, config.eval_samples, streams.eval)
    final = float(np.mean(env(x0)))
    result.final_reward = final
    if result.best_actor is None or final >= result.best_reward:
        result.best_actor, result.best_reward = result.actor.copy(), final
    return result


def _track_best(result: TrainResult, mean_reward: float):
    # the batch drawn at the start of iteration k scores the actor as it
    # stood after iteration k-1
    if mean_reward > result.best_reward:
        result.best_reward = mean_reward
        result.best_actor = result.actor.copy()


def diffac_v1(env: RewardEnv, schedule: NoiseSchedule, actor: ScoreModel, critic: CriticV,
              config: TrainConfig, buffer: SampleBuffer | None = None,
              checkpoint_dir=None) -> TrainResult:
    """Sample, refit the actor by score matching on ``D_0``, refit ``V``,
    then take ``n_inner_iters`` policy-gradient steps."""
    streams = _Streams(config.seed)
    buffer = buffer if buffer is not None else SampleBuffer(actor.dim)
    result = TrainResult(actor, critic, None, buffer)
    pg_state = AdamState.fresh(actor.net.params.size, lr=config.lr)
    score_state = AdamState.fresh(actor.net.params.size, lr=config.score_lr)
    critic_state = AdamState.fresh(critic.net.params.size, lr=config.critic_lr)
    for it in range(config.n_outer_iters):
        t0 = time.perf_counter()
        x0, _ = sample(actor, schedule, config.samples_per_iter, streams.sample)
        rewards = env(x0)
        _guard(rewards, it, actor, checkpoint_dir)
        _track_best(result, float(np.mean(rewards)))
        buffer.push_many(x0, rewards, it)
        _, score_losses = fit_score_model(actor, buffer, schedule, config.score_steps,
                                          config.score_batch, streams.score, score_state)
        anchor = actor.copy()
        _, critic_losses = fit_critic_v(critic, buffer, schedule, config.critic_steps,
                                        config.critic_batch, streams.critic, critic_state)
        kl = gnorm = 0.0
        for _ in range(config.n_inner_iters):
            states = draw_perturbed_states(buffer, schedule, config.pg_batch, streams.pg,
                                           config.stratify_tau)
            pg = _sde_pg(config, actor, critic, buffer, schedule, states, streams.pg)
            gnorm = pg.norm
            actor.net.params = adam_update(actor.net.params, -pg.grad, pg_state)
            kl = mean_kl(actor, anchor, schedule, states)
        result.metrics.append(_row(it, config, np.mean(rewards), _tail_mean(critic_losses),
                                   _tail_mean(score_losses), kl, gnorm, t0))
    return _finish(result, env, schedule, config, streams)


def diffac_v2(env: RewardEnv, schedule: NoiseSchedule, actor: ScoreModel, critic: CriticV,
              config: TrainConfig, ref: ScoreModel | None = None,
              buffer: SampleBuffer | None = None, checkpoint_dir=None) -> TrainResult:
    """Like :func:`diffac_v1`, but the score-matching fit goes into a separate
    reference model and the actor is pulled toward it by ``eta2 * KL``."""
    streams = _Streams(config.seed)
    buffer = buffer if buffer is not None else SampleBuffer(actor.dim)
    ref = ref if ref is not None else actor.copy()
    result = TrainResult(actor, critic, ref, buffer)
    pg_state = AdamState.fresh(actor.net.params.size, lr=config.lr)
    score_state = AdamState.fresh(ref.net.params.size, lr=config.score_lr)
    critic_state = AdamState.fresh(critic.net.params.size, lr=config.critic_lr)
    for it in range(config.n_outer_iters):
        t0 = time.perf_counter()
        x0, _ = sample(actor, schedule, config.samples_per_iter, streams.sample)
        rewards = env(x0)
        _guard(rewards, it, actor, checkpoint_dir)
        _track_best(result, float(np.mean(rewards)))
        buffer.push_many(x0, rewards, it)
        _, critic_losses = fit_critic_v(critic, buffer, schedule, config.critic_steps,
                                        config.critic_batch, streams.critic, critic_state)
        _, score_losses = fit_score_model(ref, buffer, schedule, config.score_steps,
                                          config.score_batch, streams.score, score_state)
        kl = gnorm = 0.0
        for _ in range(config.n_inner_iters):
            states = draw_perturbed_states(buffer, schedule, config.pg_batch, streams.pg,
                                           config.stratify_tau)
            pg = _sde_pg(config, actor, critic, buffer, schedule, states, streams.pg)
            loss_grad = -pg.grad
            if config.eta2 > 0:
                loss_grad = loss_grad + config.eta2 * kl_reg_grad(actor, ref, schedule, states)
            gnorm = float(np.linalg.norm(loss_grad))
            actor.net.params = adam_update(actor.net.params, loss_grad, pg_state)
            kl = mean_kl(actor, ref, schedule, states)
        result.metrics.append(_row(it, config, np.mean(rewards), _tail_mean(critic_losses),
                                   _tail_mean(score_losses), kl, gnorm, t0))
    return _finish(result, env, schedule, config, streams)


def vanilla_train(env: RewardEnv, schedule: NoiseSchedule, actor: ScoreModel,
                  config: TrainConfig, critic: CriticQ | None = None,
                  buffer: SampleBuffer | None = None, checkpoint_dir=None) -> TrainResult:
    """Baseline loop on recorded trajectories only (no perturbation).

    ``vanilla-reinforce`` uses the batch-mean reward as baseline when
    ``reinforce_baseline`` is set; ``vanilla-ddpg`` refits ``Q`` on every
    transition recorded so far before its inner steps.
    """
    if config.estimator not in ("vanilla-reinforce", "vanilla-ddpg"):
        raise ContractError(f"vanilla_train cannot run {config.estimator!r}")
    ddpg = config.estimator == "vanilla-ddpg"
    if ddpg and critic is None:
        raise ContractError("vanilla-ddpg needs a CriticQ")
    streams = _Streams(config.seed)
    buffer = buffer if buffer is not None else SampleBuffer(actor.dim)
    result = TrainResult(actor, critic, None, buffer)
    pg_state = AdamState.fresh(actor.net.params.size, lr=config.lr)
    critic_state = None if critic is None else AdamState.fresh(critic.net.params.size,
                                                               lr=config.critic_lr)
    tables = []
    for it in range(config.n_outer_iters):
        t0 = time.perf_counter()
        _, trajs = sample(actor, schedule, config.samples_per_iter, streams.sample, record=True)
        rewards = env(trajs.x0)
        _guard(rewards, it, actor, checkpoint_dir)
        _track_best(result, float(np.mean(rewards)))
        trajs.rewards = rewards
        buffer.push_many(trajs.x0, rewards, it)
        critic_losses = []
        if ddpg:
            tables.append(transition_table(trajs))
            table = tuple(np.concatenate(cols) for cols in zip(*tables))
            critic_state, critic_losses = fit_critic_q(critic, table, config.critic_steps,
                                                       config.critic_batch, streams.critic,
                                                       critic_state)
        anchor = actor.copy()
        baseline = float(np.mean(rewards)) if config.reinforce_baseline else 0.0
        kl = gnorm = 0.0
        for _ in range(config.n_inner_iters):
            if ddpg:
                pg = vanilla_ddpg(actor, schedule, critic, trajs)
            else:
                pg = vanilla_reinforce(actor, schedule, trajs, baseline=baseline)
            gnorm = pg.norm
            actor.net.params = adam_update(actor.net.params, -pg.grad, pg_state)
        if config.n_inner_iters:
            T, n = schedule.T, trajs.n
            states = (trajs.states[2:].reshape((T - 1) * n, -1), np.repeat(np.arange(2, T + 1), n))
            kl = mean_kl(actor, anchor, schedule, states)
        result.metrics.append(_row(it, config, np.mean(rewards), _tail_mean(critic_losses),
                                   0.0, kl, gnorm, t0))
    return _finish(result, env, schedule, config, streams)


def train(algo: str, env: RewardEnv, schedule: NoiseSchedule, actor: ScoreModel, critic,
          config: TrainConfig, ref=None, buffer=None, checkpoint_dir=None) -> TrainResult:
    """Dispatch on ``algo`` (``v1``/``v2``) and the configured estimator."""
    if config.estimator.startswith("vanilla"):
        return vanilla_train(env, schedule, actor, config, critic, buffer, checkpoint_dir)
    if algo == "v1":
        return diffac_v1(env, schedule, actor, critic, config, buffer, checkpoint_dir)
    if algo == "v2":
        return diffac_v2(env, schedule, actor, critic, config, ref, buffer, checkpoint_dir)
    raise ContractError(f"unknown algo {algo!r}")


# -- approximation-bound diagnostic ------------------------------------------


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    slack: float
    kl_per_step: np.ndarray
    m_per_step: np.ndarray
    n_mc: int
    note: str = ("M is the empirical max over sampled paths, a lower estimate of the "
                 "true sup; the KL terms are in bits")

    def __post_init__(self):
        for name in ("lhs", "rhs"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ContractError(f"BoundReport.{name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
                "kl_per_step": [float(v) for v in self.kl_per_step],
                "m_per_step": [float(v) for v in self.m_per_step],
                "n_mc": self.n_mc, "note": self.note}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        return cls(float(d["lhs"]), float(d["rhs"]), float(d["slack"]),
                   np.asarray(d["kl_per_step"], dtype=np.float64),
                   np.asarray(d["m_per_step"], dtype=np.float64), int(d["n_mc"]), d["note"])


def _full_step(model, schedule, x, tau, noise):
    """Backward step keeping the noise at every ``tau``, including ``tau = 1``."""
    mu, _ = step_mean(model, schedule, x, tau)
    return mu + schedule.z[tau] * noise


def _step_grads(actor, schedule, x_tau, x_prev, tau, R, chunk):
    """Summed and per-sample-sup-norm score-times-reward at one step."""
    mu, cache = step_mean(actor, schedule, x_tau, tau)
    g_mu = (x_prev - mu) / schedule.z[tau] ** 2 * R[:, None]
    coef = -schedule.a[tau] * schedule.b[tau]
    total = actor.param_grad(cache, coef * g_mu)
    m = 0.0
    for lo in range(0, g_mu.shape[0], chunk):
        sub = [h[lo:lo + chunk] for h in cache]
        ps = per_sample_param_grads(actor.net, sub, coef * g_mu[lo:lo + chunk])
        m = max(m, float(np.max(np.abs(ps))))
    return total, m


def pg_bound_diagnostic(actor: ScoreModel, ref: ScoreModel, env: RewardEnv,
                        schedule: NoiseSchedule, n_mc: int, rng: np.random.Generator,
                        chunk: int = 512) -> BoundReport:
    """Compare the on-policy gradient with the one taken at states from the
    reference process, and evaluate the KL-based bound on their gap.

    Both estimates share ``x_T`` and every injected noise. For the
    approximate path, step ``tau`` starts from the reference rollout's
    ``x_tau``, takes one actor step, then the reference finishes the rollout.
    Every step, ``tau = 1`` included, injects noise so that each transition
    has a density. ``KL_nu`` averages the kernel KL over reference states.
    """
    if not env.bounded:
        raise ContractError(f"env {env.name!r} has unbounded reward; the bound needs a clip box")
    T, d = schedule.T, actor.dim
    x_T = rng.standard_normal((n_mc, d))
    noises = rng.standard_normal((T + 1, n_mc, d))

    # on-policy rollout
    xs = np.empty((T + 1, n_mc, d))
    xs[T] = x_T
    for tau in range(T, 0, -1):
        xs[tau - 1] = _full_step(actor, schedule, xs[tau], tau, noises[tau])
    R = env(xs[0])

    # reference rollout
    ys = np.empty((T + 1, n_mc, d))
    ys[T] = x_T
    for tau in range(T, 0, -1):
        ys[tau - 1] = _full_step(ref, schedule, ys[tau], tau, noises[tau])

    n_par = actor.net.params.size
    pg = np.zeros(n_par)
    pg_tilde = np.zeros(n_par)
    M = np.zeros(T + 1)
    for tau in range(T, 0, -1):
        g, m_a = _step_grads(actor, schedule, xs[tau], xs[tau - 1], tau, R, chunk)
        pg += g
        # hybrid: reference to x_tau, one actor step, reference to x_0
        h = _full_step(actor, schedule, ys[tau], tau, noises[tau])
        x = h
        for u in range(tau - 1, 0, -1):
            x = _full_step(ref, schedule, x, u, noises[u])
        R_h = env(x)
        g_h, m_h = _step_grads(actor, schedule, ys[tau], h, tau, R_h, chunk)
        pg_tilde += g_h
        M[tau] = max(m_a, m_h)
    pg /= n_mc * T
    pg_tilde /= n_mc * T
    lhs = float(np.max(np.abs(pg_tilde - pg)))

    # KL(ref kernel || actor kernel) at step nu+1, over reference states
    kl = np.zeros(T)
    for nu in range(T):
        tau = nu + 1
        mu_r, _ = step_mean(ref, schedule, ys[tau], tau)
        mu_a, _ = step_mean(actor, schedule, ys[tau], tau)
        kl[nu] = float(np.mean(np.sum((mu_r - mu_a) ** 2, axis=1))) / (2.0 * schedule.z[tau] ** 2)
    kl_bits = kl / np.log(2.0)
    total = kl_bits.sum()
    rhs = 0.0
    for tau in range(1, T + 1):
        rest = max(total - kl_bits[tau - 1], 0.0)
        rhs += M[tau] * np.sqrt(2.0 * np.log(2.0) * rest)
    return BoundReport(lhs, float(rhs), float(rhs - lhs), kl_bits, M[1:], n_mc)


def perturb_last_layer(model: ScoreModel, delta: float, rng: np.random.Generator) -> ScoreModel:
    """Copy of ``model`` with ``delta * xi`` added to its output layer, ``xi ~ N(0, I)``."""
    out = model.copy()
    w, b = out.net.layer_slices(out.net.n_layers - 1)
    n = (w.stop - w.start) + (b.stop - b.start)
    xi = rng.standard_normal(n)
    out.net.params[w.start:b.stop] += delta * xi
    return out
