"""Experiment drivers behind the CLI subcommands.

Each ``run_*`` function is a pure function of its config: it derives every
random stream from the configured seeds, writes its artifacts under
``out_dir`` (when given) and returns the in-memory results. Independent
(seed, grid-point) jobs fan out over ``DIFFAC_THREADS`` worker processes and
are merged in job order, so the output does not depend on the worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (AblationConfig, BoundConfig, DataScarceConfig, PgErrorConfig, PlotConfig,
                     PretrainConfig, TrainRunConfig)
from .diffusion import NoiseSchedule, ScoreModel, default_schedule, sample, step_mean
from .envs import LinearGaussianEnv, make_rastrigin_env, quadratic_onestep, sample_box_states, \
    two_component_mixture
from .errors import ContractError
from .io import read_buffer_csv, read_csv, write_csv, write_json, write_metrics_csv
from .nn import DenseNet, MlpSpec, adam_update, backward_cached, forward, forward_cached, load_net, \
    save_net
from .plot import emit_heatmap_svg, emit_svg
from .policy_gradient import (BoundReport, TrainConfig, perturb_last_layer, pg_bound_diagnostic,
                              train)
from .rl import CriticQ, CriticV, SampleBuffer, transition_table
from .training import adam_for, fit_critic_q, fit_critic_v, fit_score_model

log = logging.getLogger(__name__)


def n_workers() -> int:
    raw = os.environ.get("DIFFAC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"DIFFAC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ContractError("DIFFAC_THREADS must be >= 1")
    return n


def fan_out(fn, jobs: list) -> list:
    """``[fn(j) for j in jobs]``, possibly on worker processes; order kept."""
    workers = min(n_workers(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _out(out_dir) -> Path | None:
    if out_dir is None:
        return None
    p = Path(out_dir)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContractError(f"cannot create output dir {p}: {exc}") from None
    return p


# -- pretrain ----------------------------------------------------------------------


@dataclass
class Pretrained:
    actor: ScoreModel
    critic: CriticV
    schedule: NoiseSchedule
    buffer: SampleBuffer
    score_losses: list
    critic_losses: list


def pretrain(cfg: PretrainConfig) -> Pretrained:
    """Score-match an actor on synthetic data, seed ``D_0`` with its samples
    and fit the value critic on that buffer."""
    env = cfg.env.build()
    schedule = cfg.schedule.build()
    d = env.dim
    data_rng, actor_rng, buf_rng, critic_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    if cfg.data == "normal":
        data = data_rng.standard_normal((cfg.data_n, d))
    elif cfg.data == "mixture":
        data = two_component_mixture(d).sample(data_rng, cfg.data_n)
    else:
        if cfg.env.name != "linear_gaussian":
            raise ContractError("data='env' needs the linear_gaussian env")
        data = LinearGaussianEnv(**{k: v for k, v in cfg.env.params.items() if k != "clip"}) \
            .sample(data_rng, cfg.data_n)
    actor = ScoreModel.init(d, schedule.T, cfg.actor.hidden, actor_rng, cfg.actor.activation)
    _, s_losses = fit_score_model(actor, data, schedule, cfg.score_steps, cfg.score_batch,
                                  actor_rng, lr=cfg.score_lr)
    buffer = SampleBuffer(d)
    x0, _ = sample(actor, schedule, cfg.buffer_n, buf_rng)
    buffer.push_many(x0, env(x0), -1)
    critic = CriticV.init(d, schedule.T, cfg.critic.hidden, critic_rng, cfg.critic.activation)
    _, c_losses = fit_critic_v(critic, buffer, schedule, cfg.critic_steps, cfg.critic_batch,
                               critic_rng, lr=cfg.critic_lr)
    return Pretrained(actor, critic, schedule, buffer, s_losses, c_losses)


def save_pretrained(p: Pretrained, out: Path) -> None:
    save_net(p.actor.net, out / "actor.ckpt")
    save_net(p.critic.net, out / "critic.ckpt")
    (out / "schedule.json").write_text(p.schedule.to_json() + "\n")
    p.buffer.to_csv(out / "buffer.csv")
    write_csv(out / "score_loss.csv", ["step", "loss"], enumerate(p.score_losses))
    write_csv(out / "critic_loss.csv", ["step", "loss"], enumerate(p.critic_losses))


def load_pretrained(path) -> Pretrained:
    path = Path(path)
    schedule = NoiseSchedule.from_json((path / "schedule.json").read_text())
    actor = ScoreModel(load_net(path / "actor.ckpt"), schedule.T)
    critic = CriticV(load_net(path / "critic.ckpt"), schedule.T)
    return Pretrained(actor, critic, schedule, read_buffer_csv(path / "buffer.csv"), [], [])


def run_pretrain(cfg: PretrainConfig, out_dir=None) -> Pretrained:
    out = _out(out_dir)
    p = pretrain(cfg)
    if out is not None:
        save_pretrained(p, out)
        write_json(cfg.to_dict(), out / "config.json")
    return p


# -- train -------------------------------------------------------------------------


def run_train(cfg: TrainRunConfig, out_dir=None):
    out = _out(out_dir)
    p = load_pretrained(cfg.pretrain_dir) if cfg.pretrain_dir else pretrain(cfg.pretrain)
    env = cfg.pretrain.env.build()
    critic = p.critic
    if cfg.train.estimator == "vanilla-ddpg":
        critic = CriticQ.init(env.dim, p.schedule.T, cfg.pretrain.critic.hidden,
                              np.random.default_rng(cfg.train.seed), cfg.pretrain.critic.activation)
    elif cfg.train.estimator == "vanilla-reinforce":
        critic = None
    res = train(cfg.algo, env, p.schedule, p.actor, critic, cfg.train, buffer=p.buffer,
                checkpoint_dir=out)
    if out is not None:
        write_metrics_csv(res.metrics, out / "metrics.csv")
        save_net(res.actor.net, out / "last.ckpt")
        save_net(res.best_actor.net, out / "best.ckpt")
        if res.critic is not None:
            save_net(res.critic.net, out / "critic.ckpt")
        (out / "schedule.json").write_text(p.schedule.to_json() + "\n")
        res.buffer.to_csv(out / "buffer.csv")
        write_json({"algo": cfg.algo, "estimator": cfg.train.estimator, "seed": cfg.train.seed,
                    "best_reward": res.best_reward, "final_reward": res.final_reward,
                    "initial_reward": res.metrics[0]["mean_reward"]}, out / "summary.json")
        write_json(cfg.to_dict(), out / "config.json")
        emit_svg([[r["mean_reward"] for r in res.metrics]], [f"{cfg.algo} {cfg.train.estimator}"],
                 out / "reward.svg", title="mean reward per outer iteration",
                 xlabel="iteration", ylabel="mean reward")
    return res


# -- critic gradient error (pg-error) --------------------------------------------


def _mean_input_vjp(actor: ScoreModel, schedule: NoiseSchedule, x, tau, g) -> np.ndarray:
    """``(d mu / d x)^T g`` row-wise for ``mu = a (x - b eps(x))``."""
    _, cache = actor.eps_cached(x, tau)
    n = x.shape[0]
    a = schedule.a[tau][:, None] if np.ndim(tau) else np.full((n, 1), schedule.a[tau])
    b = schedule.b[tau][:, None] if np.ndim(tau) else np.full((n, 1), schedule.b[tau])
    _, dx = backward_cached(actor.net, cache, -a * b * g)
    return a * g + dx[:, :-1]


@dataclass
class _Probe:
    x: np.ndarray
    tau: np.ndarray
    mu: np.ndarray


def _critic_grads(kind: str, critic, actor, schedule, probe: _Probe, gradient: str):
    """Gradient of ``Q(x, pi(x), tau)`` w.r.t. the action (or the state,
    through the policy) where the perturbation critic acts as
    ``Q(x, a, tau) = V(a, tau - 1)``."""
    if kind == "vanilla":
        _, gs, ga = critic.value_and_grads(probe.x, probe.mu, probe.tau)
    else:
        _, ga = critic.value_and_input_grad(probe.mu, probe.tau - 1)
        gs = np.zeros_like(ga)
    if gradient == "action":
        return ga
    return gs + _mean_input_vjp(actor, schedule, probe.x, probe.tau, ga)


def pg_error_cell(job) -> list[tuple]:
    """Rows ``(dim, n, seed, method, error)`` for one (dim, seed) cell."""
    cfg, dim, seed = job
    schedule = default_schedule(cfg.T)
    env = make_rastrigin_env(dim, 1.0 / dim)
    ss = np.random.SeedSequence([seed, dim])
    actor_rng, traj_rng, eval_rng, q_init, v_init, q_fit, v_fit = (
        np.random.default_rng(s) for s in ss.spawn(7))
    actor = ScoreModel.init(dim, cfg.T, cfg.actor.hidden, actor_rng, cfg.actor.activation)
    fit_score_model(actor, actor_rng.standard_normal((5000, dim)), schedule,
                    cfg.actor_pretrain_steps, 256, actor_rng, lr=1e-3)

    _, trajs = sample(actor, schedule, cfg.ref_n, traj_rng, record=True)
    trajs.rewards = env(trajs.x0)
    table = transition_table(trajs)
    _, ev = sample(actor, schedule, cfg.eval_rollouts, eval_rng, record=True)
    tau = eval_rng.integers(2, cfg.T + 1, size=cfg.eval_states)
    j = eval_rng.integers(0, cfg.eval_rollouts, size=cfg.eval_states)
    x = ev.states[tau, j]
    mu, _ = step_mean(actor, schedule, x, tau)
    probe = _Probe(x, tau, mu)

    q0 = CriticQ.init(dim, cfg.T, cfg.critic.hidden, q_init, cfg.critic.activation)
    v0 = CriticV.init(dim, cfg.T, cfg.critic.hidden, v_init, cfg.critic.activation)
    q_seed, v_seed = (int(r.integers(2**63)) for r in (q_fit, v_fit))

    def fit(kind, n):
        # every critic of a kind starts from the same init and stream, so
        # n = ref_n reproduces the reference exactly
        if kind == "vanilla":
            rows = np.concatenate([np.arange(n) + k * cfg.ref_n for k in range(cfg.T)])
            c = q0.copy()
            fit_critic_q(c, tuple(col[rows] for col in table), cfg.critic_steps, cfg.critic_batch,
                         np.random.default_rng(q_seed), lr=cfg.critic_lr,
                         final_lr_frac=cfg.final_lr_frac)
        else:
            buf = SampleBuffer(dim)
            buf.push_many(trajs.x0[:n], trajs.rewards[:n])
            c = v0.copy()
            fit_critic_v(c, buf, schedule, cfg.critic_steps, cfg.critic_batch,
                         np.random.default_rng(v_seed), lr=cfg.critic_lr,
                         final_lr_frac=cfg.final_lr_frac)
        return _critic_grads(kind, c, actor, schedule, probe, cfg.gradient)

    rows = []
    for kind in ("vanilla", "perturbation"):
        ref = fit(kind, cfg.ref_n)
        for n in cfg.ns:
            g = ref if n == cfg.ref_n else fit(kind, n)
            rows.append((dim, n, seed, kind, float(np.mean(np.linalg.norm(g - ref, axis=1)))))
    return rows


PG_ERROR_COLUMNS = ("dim", "n", "seed", "method", "error")


def summarize_pg_error(rows) -> dict:
    """``{(dim, method): (ns, mean errors over seeds)}``."""
    out = {}
    for dim in sorted({r[0] for r in rows}):
        for method in ("vanilla", "perturbation"):
            ns = sorted({r[1] for r in rows if r[0] == dim})
            means = [float(np.mean([r[4] for r in rows if r[0] == dim and r[1] == n
                                    and r[3] == method])) for n in ns]
            out[(dim, method)] = (ns, means)
    return out


def run_pg_error(cfg: PgErrorConfig, out_dir=None) -> list[tuple]:
    out = _out(out_dir)
    jobs = [(cfg, d, s) for d in cfg.dims for s in cfg.seeds]
    rows = [r for cell in fan_out(pg_error_cell, jobs) for r in cell]
    rows.sort(key=lambda r: (r[0], r[3], r[1], r[2]))
    if out is not None:
        write_csv(out / "pg_error.csv", PG_ERROR_COLUMNS, rows)
        summary = summarize_pg_error(rows)
        series, labels = [], []
        for (dim, method), (ns, means) in summary.items():
            series.append((np.log10(ns), means))
            labels.append(f"{method} d={dim}")
        emit_svg(series, labels, out / "pg_error.svg",
                 title=f"critic {cfg.gradient}-gradient error vs data (reconstructed grid)",
                 xlabel="log10 n", ylabel="mean gradient error")
        write_json(cfg.to_dict(), out / "config.json")
    return rows


# -- data-scarce one-step policy ----------------------------------------------------


def box_distance(points: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Euclidean distance from each point to the axis-aligned box."""
    gap = np.maximum(lo - points, 0.0) + np.maximum(points - hi, 0.0)
    return np.linalg.norm(gap, axis=1)


def run_data_scarce(cfg: DataScarceConfig, out_dir=None) -> dict:
    """Train ``a = pi(s)`` on ``-||s + a||^2`` with states from the box only,
    then map the reward of the trained policy over a grid."""
    out = _out(out_dir)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.box
    net = DenseNet.init(MlpSpec(cfg.dim, cfg.policy.hidden, cfg.dim, cfg.policy.activation), rng)
    states = sample_box_states(rng, cfg.n_train, lo, hi, cfg.dim)
    state = adam_for(net.params, cfg.lr)
    losses = []
    for _ in range(cfg.steps):
        s = states[rng.integers(0, cfg.n_train, size=cfg.batch)]
        a, cache = forward_cached(net, s)
        resid = s + a
        losses.append(float(np.mean(np.sum(resid**2, axis=1))))
        grad, _ = backward_cached(net, cache, (2.0 / cfg.batch) * resid)
        net.params = adam_update(net.params, grad, state)

    axis = np.linspace(cfg.grid_lo, cfg.grid_hi, cfg.grid_n)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    grid = np.column_stack([g1.ravel(), g2.ravel()])
    reward = quadratic_onestep(grid, forward(net, grid))
    dist = box_distance(grid, lo, hi)
    inside_states = sample_box_states(np.random.default_rng(cfg.seed + 1), 4096, lo, hi, cfg.dim)
    inside = float(np.mean(quadratic_onestep(inside_states, forward(net, inside_states))))
    far_mask = dist >= cfg.far_distance
    far = float(np.mean(reward[far_mask])) if far_mask.any() else None
    summary = {"inside_mean_reward": inside, "far_mean_reward": far,
               "n_far_points": int(far_mask.sum()), "final_train_loss": losses[-1],
               "grid_n": cfg.grid_n}
    if out is not None:
        write_csv(out / "grid.csv", ["s1", "s2", "reward", "box_distance"],
                  ((p[0], p[1], r, dd) for p, r, dd in zip(grid, reward, dist)))
        write_csv(out / "train_loss.csv", ["step", "loss"], enumerate(losses))
        write_json(summary, out / "summary.json")
        write_json(cfg.to_dict(), out / "config.json")
        emit_heatmap_svg(reward.reshape(cfg.grid_n, cfg.grid_n), (cfg.grid_lo, cfg.grid_hi),
                         out / "data_scarce.svg", box=(lo, hi),
                         title="reward of the box-trained one-step policy")
    return {"grid": grid, "reward": reward, "distance": box_distance(grid, lo, hi), **summary}


# -- eta2 ablation -----------------------------------------------------------------


def collapse_drop(curve) -> float:
    """Drop of the final value below the running peak, relative to ``|peak|``."""
    curve = np.asarray(curve, dtype=np.float64)
    peak = curve.max()
    return float((peak - curve[-1]) / max(abs(peak), 1e-12))


def _ablation_job(job):
    cfg, seed, eta2, pre = job
    tc = TrainConfig.from_dict({**cfg.train.to_dict(), "eta2": eta2, "seed": seed})
    env = cfg.pretrain.env.build()
    buf = SampleBuffer(pre.buffer.dim)
    x, r, it = pre.buffer.arrays()
    for xi, ri, ii in zip(x, r, it):
        buf.push(xi, ri, int(ii))
    res = train("v2", env, pre.schedule, pre.actor.copy(), pre.critic.copy(), tc, buffer=buf)
    curve = [m["mean_reward"] for m in res.metrics] + [res.final_reward]
    return seed, eta2, curve, [m["kl_to_ref"] for m in res.metrics]


def run_ablation(cfg: AblationConfig, out_dir=None) -> dict:
    """Returns ``{(seed, eta2): curve}``; each curve holds the per-iteration
    batch rewards followed by the final evaluation."""
    out = _out(out_dir)
    jobs = []
    for seed in cfg.seeds:
        pcfg = PretrainConfig.from_dict({**cfg.pretrain.to_dict(), "seed": seed})
        pre = pretrain(pcfg)
        jobs += [(cfg, seed, e, pre) for e in cfg.eta2_grid]
    results = fan_out(_ablation_job, jobs)
    curves = {(s, e): c for s, e, c, _ in results}
    if out is not None:
        write_csv(out / "ablation.csv", ["seed", "eta2", "iter", "mean_reward", "kl_to_ref"],
                  ((s, e, i, v, kl[i] if i < len(kl) else "")
                   for s, e, c, kl in results for i, v in enumerate(c)))
        write_csv(out / "ablation_summary.csv",
                  ["seed", "eta2", "initial", "peak", "final", "collapse_drop"],
                  ((s, e, c[0], max(c), c[-1], collapse_drop(c)) for s, e, c, _ in results))
        mean_curves = [np.mean([curves[(s, e)] for s in cfg.seeds], axis=0) for e in cfg.eta2_grid]
        emit_svg(mean_curves, [f"eta2={e:.3g}" for e in cfg.eta2_grid], out / "ablation.svg",
                 title="diffac-v2 reward across eta2 (mean over seeds; last point = final eval)",
                 xlabel="iteration", ylabel="mean reward")
        write_json(cfg.to_dict(), out / "config.json")
    return curves


# -- bound diagnostic ----------------------------------------------------------------


def _bound_job(job) -> list[BoundReport]:
    cfg, seed = job
    schedule = cfg.schedule.build()
    lg_params = {k: v for k, v in cfg.env.params.items()}
    if "clip" in lg_params:
        lg_params["clip"] = tuple(lg_params["clip"])
    lg = LinearGaussianEnv(**lg_params)
    env = lg.as_env()
    fit_rng, pert_rng, mc_rng = (np.random.default_rng(s)
                                 for s in np.random.SeedSequence(seed).spawn(3))
    actor = ScoreModel.init(lg.dim, schedule.T, cfg.actor.hidden, fit_rng, cfg.actor.activation)
    fit_score_model(actor, lg.sample(fit_rng, 2000), schedule, cfg.pretrain_steps, 256, fit_rng,
                    lr=1e-3)
    direction_seed = int(pert_rng.integers(2**63))
    mc_seed = int(mc_rng.integers(2**63))
    reports = []
    for delta in cfg.deltas:
        # same direction and Monte-Carlo stream at every delta
        ref = perturb_last_layer(actor, delta, np.random.default_rng(direction_seed))
        reports.append(pg_bound_diagnostic(actor, ref, env, schedule, cfg.n_mc,
                                           np.random.default_rng(mc_seed)))
    return reports


def run_bound(cfg: BoundConfig, out_dir=None) -> dict:
    """``{seed: [BoundReport per delta]}``."""
    out = _out(out_dir)
    reports = dict(zip(cfg.seeds, fan_out(_bound_job, [(cfg, s) for s in cfg.seeds])))
    if out is not None:
        write_json({"deltas": list(cfg.deltas),
                    "runs": [{"seed": s, "reports": [r.to_dict() for r in reps]}
                             for s, reps in reports.items()]}, out / "bound.json")
        write_json(cfg.to_dict(), out / "config.json")
    return reports


# -- plot ---------------------------------------------------------------------------


def run_plot(cfg: PlotConfig, out_dir=None) -> Path:
    out = _out(out_dir) or Path(".")
    series, labels = [], []
    for path in cfg.inputs:
        header, rows = read_csv(path)
        for col in (cfg.x, cfg.y) + ((cfg.group,) if cfg.group else ()):
            if col not in header:
                raise ContractError(f"{path}: no column {col!r}")
        ix, iy = header.index(cfg.x), header.index(cfg.y)
        if cfg.group:
            ig = header.index(cfg.group)
            for g in sorted({r[ig] for r in rows}):
                sel = [r for r in rows if r[ig] == g]
                series.append(([float(r[ix]) for r in sel], [float(r[iy]) for r in sel]))
                labels.append(f"{cfg.group}={g}")
        else:
            series.append(([float(r[ix]) for r in rows], [float(r[iy]) for r in rows]))
            labels.append(Path(path).stem)
    target = out / cfg.output
    emit_svg(series, labels, target, title=cfg.title, xlabel=cfg.x, ylabel=cfg.y)
    return target
