import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffac.envs import (GaussianMixture, LinearGaussianEnv, gaussian_mixture_data, make_env,
                         make_rastrigin_env, quadratic_onestep, rastrigin_reward,
                         sample_box_states, two_component_mixture)
from diffac.errors import ContractError
from diffac.nn import central_difference


def test_rastrigin_optimum():
    assert rastrigin_reward(np.zeros(5)) == 0.0


@pytest.mark.parametrize("d", [1, 2, 8])
def test_rastrigin_ones(d):
    # term by term: 1 - 10 cos(2 pi) = -9, plus 10 per coordinate
    expected = -sum(10 + (1.0 - 10 * np.cos(2 * np.pi)) for _ in range(d))
    assert rastrigin_reward(np.ones(d)) == pytest.approx(expected) == pytest.approx(-d)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_rastrigin_even(x):
    x = np.array(x)
    assert rastrigin_reward(x) == pytest.approx(rastrigin_reward(-x), abs=1e-9)
    assert rastrigin_reward(x) <= 1e-12


def test_rastrigin_env_shift_and_batch():
    env = make_rastrigin_env(2, shift=1.0)
    assert env(np.ones((3, 2))) == pytest.approx(np.zeros(3))
    assert env.optimum[1] == 0.0 and np.allclose(env.optimum[0], 1.0)
    with pytest.raises(ContractError):
        env(np.zeros((1, 3)))


def test_quadratic_onestep():
    s = np.array([1.5, 1.5])
    assert quadratic_onestep(s, -s) == 0.0
    assert quadratic_onestep(s, np.zeros(2)) == pytest.approx(-4.5)
    with pytest.raises(ContractError):
        quadratic_onestep(s, np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_quadratic_nonpositive(s, a):
    assert quadratic_onestep(np.array(s), np.array(a)) <= 0.0


def test_box_states(rng):
    x = sample_box_states(rng, 10**4, 1.0, 2.0, 3)
    assert np.all((x >= 1.0) & (x < 2.0))
    se = np.sqrt(1 / 12 / 10**4)
    assert np.all(np.abs(x.mean(0) - 1.5) < 3 * se)
    a = sample_box_states(np.random.default_rng(3), 5, 0, 1, 2)
    b = sample_box_states(np.random.default_rng(3), 5, 0, 1, 2)
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        sample_box_states(rng, 5, 1.0, 1.0, 2)


def test_mixture_validation():
    with pytest.raises(ContractError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])


def test_single_component_score_is_linear():
    g = GaussianMixture([1.0], [[1.0, -1.0]], [0.5])
    ab = 0.3
    x = np.array([[0.0, 0.0], [1.0, 2.0]])
    var = ab * 0.25 + 1 - ab
    expected = -(x - np.sqrt(ab) * np.array([1.0, -1.0])) / var
    assert np.allclose(g.score(x, ab), expected)


def test_symmetric_mixture_score_is_odd(rng):
    g = GaussianMixture([0.5, 0.5], [[1.2], [-1.2]], [0.3, 0.3])
    x = rng.standard_normal((50, 1)) * 2
    assert np.allclose(g.score(x, 0.7), -g.score(-x, 0.7))


def test_mixture_score_matches_fd_of_log_density(rng):
    g = two_component_mixture(2)
    probes = rng.standard_normal((1000, 2)) * 1.5
    for ab in (1.0, 0.5, 0.01):
        sc = g.score(probes, ab)
        for i in range(0, 1000, 97):
            num = central_difference(lambda v: float(g.log_density(v, ab)[0]), probes[i], 1e-5)
            assert np.max(np.abs(num - sc[i])) < 1e-6


def test_mixture_data_and_moments(rng):
    x, g = gaussian_mixture_data(rng, 10**5, [(0.3, [0.0, 1.0], 0.5), (0.7, [2.0, -1.0], 1.0)])
    mean, cov = g.moments()
    assert np.allclose(x.mean(0), mean, atol=0.02)
    assert np.allclose(np.cov(x.T), cov, atol=0.03)


def test_mixture_log_density_integrates_to_one():
    g = two_component_mixture(1)
    y = np.linspace(-8, 8, 20001)
    p = np.exp(g.log_density(y[:, None], 0.4))
    assert np.sum((p[1:] + p[:-1]) / 2 * np.diff(y)) == pytest.approx(1.0, abs=1e-8)


def test_linear_gaussian_value_matches_monte_carlo(rng):
    lg = LinearGaussianEnv(dim=1, mean=0.3, std=0.8, target=0.5)
    ab = 0.4
    x0 = lg.sample(rng, 10**6)
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * rng.standard_normal(x0.shape)
    r = -((x0 - 0.5) ** 2)[:, 0]
    sel = np.abs(xt[:, 0] - 0.2) < 0.01
    assert lg.value(np.array([[0.2]]), ab)[0] == pytest.approx(r[sel].mean(), abs=0.02)


def test_linear_gaussian_eps_star_matches_mixture():
    lg = LinearGaussianEnv(dim=2, mean=0.5, std=0.7)
    g = GaussianMixture([1.0], [[0.5, 0.5]], [0.7])
    x = np.array([[0.1, -0.4], [1.0, 2.0]])
    assert np.allclose(lg.eps_star(x, 0.3), g.eps_star(x, 0.3))


def test_make_env():
    assert make_env("rastrigin", {"dim": 3}).dim == 3
    env = make_env("linear_gaussian", {"dim": 1, "clip": [-5, 5]})
    assert env.bounded and env.clip == (-5, 5)
    assert env(np.array([[100.0]]))[0] == pytest.approx(-(5 - 0.5) ** 2)
    with pytest.raises(ContractError):
        make_env("nope")
    with pytest.raises(ContractError):
        make_env("rastrigin", {"dims": 2})
    with pytest.raises(ContractError):
        make_env("linear_gaussian", {"bogus": 1})
