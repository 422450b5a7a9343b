import json

import numpy as np
import pytest

from diffac.diffusion import ScoreModel, default_schedule, make_linear_schedule, sample, step_mean
from diffac.envs import LinearGaussianEnv, make_rastrigin_env
from diffac.errors import ContractError, DivergenceError
from diffac.io import read_metrics_csv, write_metrics_csv
from diffac.nn import DenseNet, MlpSpec, central_difference, relative_error
from diffac.policy_gradient import (BoundReport, TrainConfig, diffac_v1, diffac_v2,
                                    draw_perturbed_states, kl_reg_grad, mean_kl,
                                    perturb_last_layer, pg_bound_diagnostic, sde_ddpg,
                                    sde_reinforce, train, vanilla_ddpg, vanilla_reinforce,
                                    vanilla_train)
from diffac.rl import CriticQ, CriticV, SampleBuffer
from diffac.training import fit_score_model

from oracles import OneParamToy, batch_means
from test_rl import constant_net, linear_net


SCHED = make_linear_schedule(10, 0.01, 0.4)


def small_actor(rng, act="tanh"):
    m = ScoreModel.init(2, SCHED.T, (8, 8), rng, act)
    m.net.params *= 0.5
    return m


def recorded(rng, actor, n=16):
    _, tr = sample(actor, SCHED, n, rng, record=True)
    tr.rewards = -np.sum((tr.x0 - 0.3) ** 2, axis=1)
    return tr


def buffer_of(rng, n=64):
    buf = SampleBuffer(2)
    x = rng.standard_normal((n, 2))
    buf.push_many(x, -np.sum(x ** 2, axis=1))
    return buf


# -- vanilla estimators ----------------------------------------------------------


def test_vanilla_reinforce_zero_rewards(rng):
    actor = small_actor(rng)
    tr = recorded(rng, actor)
    tr.rewards[:] = 0.0
    est = vanilla_reinforce(actor, SCHED, tr)
    assert not est.grad.any() and est.estimator == "vanilla-reinforce"
    assert est.tau_hist[1] == 0 and est.tau_hist[2] == tr.n


def test_vanilla_reinforce_requires_log_probs(rng):
    actor = small_actor(rng)
    tr = recorded(rng, actor)
    tr.log_probs[3] = np.nan
    with pytest.raises(ContractError):
        vanilla_reinforce(actor, SCHED, tr)


def test_vanilla_reinforce_constant_reward_with_baseline_is_zero(rng):
    actor = small_actor(rng)
    tr = recorded(rng, actor)
    tr.rewards[:] = 1.7
    assert np.allclose(vanilla_reinforce(actor, SCHED, tr, baseline=1.7).grad, 0.0)


def test_vanilla_reinforce_constant_reward_zero_mean(rng):
    actor = small_actor(rng)
    v = rng.standard_normal(actor.net.params.size)

    def one(r):
        tr = recorded(r, actor, 200)
        tr.rewards[:] = 2.0
        return vanilla_reinforce(actor, SCHED, tr).grad @ v

    mean, se = batch_means(one, 50, rng)
    assert abs(mean) < 3 * se


def test_vanilla_reinforce_with_critic_q(rng):
    actor = small_actor(rng)
    tr = recorded(rng, actor)
    q = CriticQ(constant_net(0.0, 5), SCHED.T)
    assert not vanilla_reinforce(actor, SCHED, tr, critic_q=q).grad.any()


def test_vanilla_ddpg_constant_and_sign(rng):
    actor = small_actor(rng)
    tr = recorded(rng, actor)
    assert not vanilla_ddpg(actor, SCHED, CriticQ(constant_net(3.0, 5), SCHED.T), tr).grad.any()
    q = CriticQ.init(2, SCHED.T, (8,), rng, "tanh")
    g = vanilla_ddpg(actor, SCHED, q, tr).grad
    neg = q.copy()
    _, b = neg.net.layer_slices(1)
    w, _ = neg.net.layer_slices(1)
    neg.net.params[w] *= -1
    neg.net.params[b] *= -1
    assert np.allclose(vanilla_ddpg(actor, SCHED, neg, tr).grad, -g, atol=1e-14)


def test_vanilla_ddpg_linear_critic_fd(rng):
    actor = small_actor(rng)
    tr = recorded(rng, actor, 4)
    # Q(s, a, t) = w . a
    w = np.array([0.7, -0.4])
    spec_w = np.concatenate([np.zeros(2), w])
    q = CriticQ(linear_net(spec_w, 1), SCHED.T)
    g = vanilla_ddpg(actor, SCHED, q, tr).grad
    T, n = SCHED.T, tr.n
    x = tr.states[1:].reshape(T * n, 2)
    noise = tr.noises[1:].reshape(T * n, 2)
    taus = np.repeat(np.arange(1, T + 1), n)

    def f(theta):
        m = ScoreModel(actor.net.with_params(theta), T)
        mu, _ = step_mean(m, SCHED, x, taus)
        zt = np.where(taus > 1, SCHED.z[taus], 0.0)[:, None]
        return float(np.mean((mu + zt * noise) @ w))

    assert np.max(relative_error(g, central_difference(f, actor.net.params, 1e-6))) < 1e-5


# -- perturbed-state estimators -----------------------------------------------


def test_sde_estimators_zero_critic(rng):
    actor = small_actor(rng)
    buf = buffer_of(rng)
    zero = CriticV(constant_net(0.0, 3), SCHED.T)
    assert not sde_reinforce(actor, zero, buf, SCHED, 32, rng).grad.any()
    assert not sde_ddpg(actor, zero, buf, SCHED, 32, rng).grad.any()
    const = CriticV(constant_net(4.0, 3), SCHED.T)
    assert not sde_ddpg(actor, const, buf, SCHED, 32, rng).grad.any()


def test_sde_reinforce_constant_critic_zero_mean(rng):
    actor = small_actor(rng)
    buf = buffer_of(rng)
    const = CriticV(constant_net(3.0, 3), SCHED.T)
    v = rng.standard_normal(actor.net.params.size)
    mean, se = batch_means(lambda r: sde_reinforce(actor, const, buf, SCHED, 500, r).grad @ v, 100, rng)
    assert abs(mean) < 3 * se


def test_sde_reinforce_baseline_kills_constant_critic(rng):
    actor = small_actor(rng)
    const = CriticV(constant_net(3.0, 3), SCHED.T)
    est = sde_reinforce(actor, const, buffer_of(rng), SCHED, 64, rng, baseline=True)
    assert np.allclose(est.grad, 0.0)


def test_sde_estimators_empty_buffer(rng):
    actor = small_actor(rng)
    c = CriticV.init(2, SCHED.T)
    for fn in (sde_reinforce, sde_ddpg):
        with pytest.raises(ContractError):
            fn(actor, c, SampleBuffer(2), SCHED, 8, rng)


def test_sde_ddpg_linear_critic_fd(rng):
    actor = small_actor(rng)
    buf = buffer_of(rng)
    w = np.array([1.3, -0.6])
    critic = CriticV(linear_net(w), SCHED.T)
    states = draw_perturbed_states(buf, SCHED, 6, rng)
    g = sde_ddpg(actor, critic, buf, SCHED, 6, np.random.default_rng(5), states=states).grad
    noise = np.random.default_rng(5).standard_normal((6, 2))
    x, tau = states

    def f(theta):
        m = ScoreModel(actor.net.with_params(theta), SCHED.T)
        mu, _ = step_mean(m, SCHED, x, tau)
        return float(np.mean((mu + SCHED.z[tau][:, None] * noise) @ w))

    assert np.max(relative_error(g, central_difference(f, actor.net.params, 1e-6))) < 1e-5


def test_stratified_tau_covers_steps(rng):
    buf = buffer_of(rng)
    _, tau = draw_perturbed_states(buf, SCHED, 90, rng, stratify=True)
    assert np.array_equal(np.bincount(tau, minlength=11)[2:], np.full(9, 10))
    _, tau = draw_perturbed_states(buf, SCHED, 1000, rng)
    assert tau.min() == 2 and tau.max() == SCHED.T


# -- one-parameter toy -------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    return OneParamToy(0)


def test_toy_quadrature_converged(toy):
    assert toy.vanilla_fd(n_nodes=32) == pytest.approx(toy.vanilla_fd(n_nodes=40), rel=1e-5)
    assert toy.sde_fd(n_nodes=30) == pytest.approx(toy.sde_fd(n_nodes=50), rel=1e-6)


def test_toy_vanilla_reinforce_unbiased(toy):
    fd = toy.vanilla_fd() / (toy.schedule.T - 1)

    def one(r):
        _, tr = sample(toy.actor, toy.schedule, 1000, r, record=True)
        tr.rewards = toy.reward(tr.x0)
        return vanilla_reinforce(toy.actor, toy.schedule, tr).grad @ toy.v

    mean, se = batch_means(one, 100, np.random.default_rng(1))
    assert abs(mean - fd) < 3 * se


@pytest.mark.parametrize("name", ["sde-reinforce", "sde-ddpg"])
def test_toy_sde_estimators_unbiased(toy, name):
    fd = toy.sde_fd()
    fn = sde_reinforce if name == "sde-reinforce" else sde_ddpg
    mean, se = batch_means(
        lambda r: fn(toy.actor, toy.critic, toy.buffer, toy.schedule, 1000, r).grad @ toy.v,
        100, np.random.default_rng(2))
    assert abs(mean - fd) < 3 * se


# -- KL regularizer ------------------------------------------------------------------


def test_kl_grad_zero_iff_means_equal(rng):
    a = small_actor(rng)
    states = draw_perturbed_states(buffer_of(rng), SCHED, 32, rng)
    assert not kl_reg_grad(a, a.copy(), SCHED, states).any()
    b = perturb_last_layer(a, 1e-3, rng)
    assert np.abs(kl_reg_grad(a, b, SCHED, states)).max() > 0
    assert mean_kl(a, b, SCHED, states) > 0


def test_kl_grad_fd(rng):
    a = small_actor(rng)
    b = small_actor(rng)
    states = draw_perturbed_states(buffer_of(rng), SCHED, 8, rng)
    g = kl_reg_grad(a, b, SCHED, states)
    f = lambda th: mean_kl(ScoreModel(a.net.with_params(th), SCHED.T), b, SCHED, states)
    assert np.max(relative_error(g, central_difference(f, a.net.params, 1e-6))) < 1e-5


# -- training loops ---------------------------------------------------------------------


def quad_env():
    return LinearGaussianEnv(dim=2, target=0.5).as_env()


def tiny_setup(seed=0):
    rng = np.random.default_rng(seed)
    s = default_schedule(25 + 5)
    actor = ScoreModel.init(2, s.T, (16, 16), rng)
    fit_score_model(actor, rng.standard_normal((500, 2)), s, 200, 64, rng)
    critic = CriticV.init(2, s.T, (16, 16), rng)
    return s, actor, critic


def tiny_config(**kw):
    base = dict(n_outer_iters=3, n_inner_iters=2, samples_per_iter=16, critic_steps=5,
                score_steps=5, critic_batch=32, score_batch=32, pg_batch=32, eval_samples=32)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(eta2=-1.0)
    with pytest.raises(ContractError):
        TrainConfig(n_outer_iters=0)
    with pytest.raises(ContractError):
        TrainConfig(estimator="ppo")
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"lr": 1e-3, "typo": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_v1_zero_inner_is_pure_score_matching():
    s, actor, critic = tiny_setup()
    cfg = tiny_config(n_inner_iters=0)
    manual = actor.copy()
    res = diffac_v1(quad_env(), s, actor, critic, cfg)
    # replay the same streams without critic or policy gradient
    from diffac.policy_gradient import _Streams
    from diffac.nn import AdamState
    streams = _Streams(cfg.seed)
    buf = SampleBuffer(2)
    st_ = AdamState.fresh(manual.net.params.size, lr=cfg.score_lr)
    for it in range(cfg.n_outer_iters):
        x0, _ = sample(manual, s, cfg.samples_per_iter, streams.sample)
        buf.push_many(x0, quad_env()(x0), it)
        fit_score_model(manual, buf, s, cfg.score_steps, cfg.score_batch, streams.score, st_)
    assert np.array_equal(res.actor.net.params, manual.net.params)


@pytest.mark.parametrize("algo,est", [("v1", "sde-ddpg"), ("v2", "sde-reinforce"),
                                      ("v2", "sde-ddpg"), ("v1", "vanilla-reinforce"),
                                      ("v2", "vanilla-ddpg")])
def test_training_deterministic_and_shaped(tmp_path, algo, est):
    outs = []
    for k in range(2):
        s, actor, critic = tiny_setup()
        if est == "vanilla-ddpg":
            critic = CriticQ.init(2, s.T, (16,), np.random.default_rng(3))
        res = train(algo, quad_env(), s, actor, critic, tiny_config(estimator=est))
        write_metrics_csv(res.metrics, tmp_path / f"m{k}.csv")
        outs.append((tmp_path / f"m{k}.csv").read_bytes())
        assert len(res.metrics) == 3
        assert res.best_reward >= res.final_reward
    assert outs[0] == outs[1]
    rows = read_metrics_csv(tmp_path / "m0.csv")
    assert [r["iter"] for r in rows] == [0, 1, 2] and rows[0]["estimator"] == est
    assert all(r["wallclock_ms"] == 0.0 for r in rows)


def test_v2_eta_zero_equals_plain_pg():
    s, actor, critic = tiny_setup()
    res0 = diffac_v2(quad_env(), s, actor.copy(), critic.copy(), tiny_config(eta2=0.0))
    # same loop with a huge-KL reference that is never consulted when eta2 = 0
    far = perturb_last_layer(actor, 10.0, np.random.default_rng(0))
    res1 = diffac_v2(quad_env(), s, actor.copy(), critic.copy(), tiny_config(eta2=0.0), ref=far)
    assert np.array_equal(res0.actor.net.params, res1.actor.net.params)


def test_v2_large_eta_tracks_reference():
    s, actor, critic = tiny_setup()
    cfg = dict(n_outer_iters=4, n_inner_iters=5, lr=3e-3)
    free = diffac_v2(quad_env(), s, actor.copy(), critic.copy(), tiny_config(eta2=0.0, **cfg))
    tied = diffac_v2(quad_env(), s, actor.copy(), critic.copy(), tiny_config(eta2=1e3, **cfg))
    assert tied.metrics[-1]["kl_to_ref"] * 10 < free.metrics[-1]["kl_to_ref"]


def test_divergence_guard(tmp_path):
    s, actor, critic = tiny_setup()
    env = quad_env()
    bad = type(env)(env.name, env.dim, lambda x: np.full(x.shape[0], np.nan))
    with pytest.raises(DivergenceError) as exc:
        diffac_v2(bad, s, actor, critic, tiny_config(), checkpoint_dir=tmp_path)
    assert exc.value.checkpoint is not None and exc.value.checkpoint.exists()


def test_vanilla_train_rejects_sde_estimator():
    s, actor, _ = tiny_setup()
    with pytest.raises(ContractError):
        vanilla_train(quad_env(), s, actor, tiny_config(estimator="sde-ddpg"))
    with pytest.raises(ContractError):
        vanilla_train(quad_env(), s, actor, tiny_config(estimator="vanilla-ddpg"))


# -- bound diagnostic -------------------------------------------------------------------


def bound_setup():
    rng = np.random.default_rng(0)
    s = make_linear_schedule(8, 0.02, 0.5)
    lg = LinearGaussianEnv(dim=1, mean=0.0, std=1.0, target=0.5)
    actor = ScoreModel.init(1, s.T, (8,), rng, "tanh")
    fit_score_model(actor, lg.sample(rng, 500), s, 100, 64, rng)
    return s, lg.as_env(), actor


def test_bound_identical_models():
    s, env, actor = bound_setup()
    rep = pg_bound_diagnostic(actor, actor.copy(), env, s, 200, np.random.default_rng(1))
    assert rep.lhs == 0.0 and np.all(rep.kl_per_step == 0.0) and rep.rhs == 0.0
    assert rep.m_per_step.shape == (s.T,) and np.all(rep.m_per_step > 0)


def test_bound_holds_and_grows_with_delta():
    s, env, actor = bound_setup()
    lhs, rhs, kls = [], [], []
    for delta in (0.01, 0.05, 0.1):
        ref = perturb_last_layer(actor, delta, np.random.default_rng(7))
        rep = pg_bound_diagnostic(actor, ref, env, s, 300, np.random.default_rng(1))
        assert rep.lhs <= rep.rhs and rep.slack >= 0
        lhs.append(rep.lhs)
        rhs.append(rep.rhs)
        kls.append(rep.kl_per_step.sum())
    assert np.all(np.diff(lhs) > 0) and np.all(np.diff(rhs) > 0) and np.all(np.diff(kls) > 0)


def test_bound_rejects_unbounded_env():
    s, _, actor = bound_setup()
    with pytest.raises(ContractError):
        pg_bound_diagnostic(actor, actor, make_rastrigin_env(1), s, 10, np.random.default_rng(0))


def test_bound_report_json_roundtrip(tmp_path):
    from diffac.io import read_json, write_json
    s, env, actor = bound_setup()
    rep = pg_bound_diagnostic(actor, perturb_last_layer(actor, 0.05, np.random.default_rng(2)),
                              env, s, 100, np.random.default_rng(3))
    write_json(rep.to_dict(), tmp_path / "b.json")
    back = BoundReport.from_dict(read_json(tmp_path / "b.json"))
    assert back.lhs == rep.lhs and np.array_equal(back.kl_per_step, rep.kl_per_step)
    with pytest.raises(ContractError):
        BoundReport(-1.0, 0.0, 1.0, np.zeros(2), np.zeros(2), 1)
