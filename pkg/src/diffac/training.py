"""Supervised fitting loops shared by the algorithms and the experiments."""

from __future__ import annotations

import numpy as np

from .diffusion import NoiseSchedule, ScoreModel, score_matching_loss
from .nn import AdamState, adam_update
from .rl import CriticQ, CriticV, SampleBuffer, critic_q_loss, critic_v_loss


def adam_for(params: np.ndarray, lr: float, **hyper) -> AdamState:
    return AdamState.fresh(params.size, lr=lr, **hyper)


def _decay(state: AdamState, base_lr: float, step: int, steps: int, final_frac: float):
    """Linear decay from ``base_lr`` to ``final_frac * base_lr`` over ``steps``."""
    if final_frac != 1.0 and steps > 1:
        state.lr = base_lr * (1.0 - (1.0 - final_frac) * step / (steps - 1))


def fit_score_model(model: ScoreModel, data, schedule: NoiseSchedule, steps: int, batch: int,
                    rng: np.random.Generator, state: AdamState | None = None,
                    lr: float = 1e-3, final_lr_frac: float = 1.0) -> tuple[AdamState, list[float]]:
    """Score-match ``model`` in place on ``data`` (array or :class:`SampleBuffer`)."""
    state = state or adam_for(model.net.params, lr)
    base = state.lr
    x = data.x if isinstance(data, SampleBuffer) else np.asarray(data, dtype=np.float64)
    losses = []
    for k in range(steps):
        _decay(state, base, k, steps, final_lr_frac)
        idx = rng.integers(0, x.shape[0], size=batch)
        loss, grad = score_matching_loss(model, schedule, x[idx], rng)
        model.net.params = adam_update(model.net.params, grad, state)
        losses.append(loss)
    return state, losses


def fit_critic_v(critic: CriticV, buffer: SampleBuffer, schedule: NoiseSchedule, steps: int,
                 batch: int, rng: np.random.Generator, state: AdamState | None = None,
                 lr: float = 1e-3, final_lr_frac: float = 1.0) -> tuple[AdamState, list[float]]:
    state = state or adam_for(critic.net.params, lr)
    base = state.lr
    losses = []
    for k in range(steps):
        _decay(state, base, k, steps, final_lr_frac)
        loss, grad = critic_v_loss(critic, buffer, schedule, batch, rng)
        critic.net.params = adam_update(critic.net.params, grad, state)
        losses.append(loss)
    return state, losses


def fit_critic_q(critic: CriticQ, table, steps: int, batch: int, rng: np.random.Generator,
                 state: AdamState | None = None, lr: float = 1e-3,
                 final_lr_frac: float = 1.0) -> tuple[AdamState, list[float]]:
    """Fit ``critic`` on a flattened transition table ``(s, a, tau, R)``."""
    state = state or adam_for(critic.net.params, lr)
    base = state.lr
    n_rows = table[0].shape[0]
    losses = []
    for k in range(steps):
        _decay(state, base, k, steps, final_lr_frac)
        rows = rng.integers(0, n_rows, size=batch)
        loss, grad = critic_q_loss(critic, table, rows)
        critic.net.params = adam_update(critic.net.params, grad, state)
        losses.append(loss)
    return state, losses
