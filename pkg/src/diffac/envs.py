"""Reward environments and analytic data distributions for the toy studies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError


@dataclass
class RewardEnv:
    """A terminal reward ``R(x_0)`` on ``R^dim``, vectorized over rows."""

    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]
    optimum: tuple[np.ndarray, float] | None = None
    clip: tuple[float, float] | None = None
    params: dict = field(default_factory=dict)

    def reward(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ContractError(f"{self.name}: expected dim {self.dim}, got {x.shape[1]}")
        if self.clip is not None:
            x = np.clip(x, *self.clip)
        return self.fn(x)

    def __call__(self, x):
        return self.reward(x)

    @property
    def bounded(self) -> bool:
        return self.clip is not None


def rastrigin_reward(x, scale: float = 1.0) -> np.ndarray | float:
    """Negated Rastrigin function (maximum 0 at the origin)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    val = -(10.0 * d + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x), axis=-1))
    return scale * val


def quadratic_onestep(s, a) -> np.ndarray | float:
    """Reward ``-||s + a||^2`` of the one-step MDP; optimal action is ``-s``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape != a.shape:
        raise ContractError(f"state shape {s.shape} != action shape {a.shape}")
    return -np.sum((s + a) ** 2, axis=-1)


def sample_box_states(rng: np.random.Generator, n: int, lo: float, hi: float, dim: int) -> np.ndarray:
    if not lo < hi:
        raise ContractError("need lo < hi")
    return rng.uniform(lo, hi, size=(n, dim))


def make_rastrigin_env(dim: int, scale: float = 1.0, shift: float = 0.0) -> RewardEnv:
    """Rastrigin reward with its optimum moved to ``shift * ones(dim)``."""
    center = np.full(dim, float(shift))
    return RewardEnv(
        "rastrigin", dim, lambda x: rastrigin_reward(x - center, scale),
        optimum=(center, 0.0), params={"dim": dim, "scale": scale, "shift": shift},
    )


# -- Gaussian mixtures -------------------------------------------------------


@dataclass
class GaussianMixture:
    """Mixture of axis-aligned Gaussians with closed-form perturbed score.

    Under the forward process a component ``N(m, diag(s^2))`` at step ``tau``
    becomes ``N(sqrt(ab) m, diag(ab s^2 + 1 - ab))``, so the perturbed data
    distribution stays a mixture with the same weights.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.asarray(self.stds, dtype=np.float64)
        if stds.ndim <= 1:
            stds = np.broadcast_to(stds.reshape(-1, 1), self.means.shape)
        self.stds = np.array(stds)
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ContractError("mixture weights must be non-negative and sum to 1")
        if not (len(self.weights) == self.means.shape[0] == self.stds.shape[0]):
            raise ContractError("weights, means and stds disagree on component count")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + self.stds[k] * rng.standard_normal((n, self.dim))

    def _perturbed(self, alpha_bar: float):
        m = np.sqrt(alpha_bar) * self.means
        var = alpha_bar * self.stds**2 + (1.0 - alpha_bar)
        return m, var

    def _component_logpdf(self, x, m, var):
        diff = x[:, None, :] - m[None, :, :]
        return -0.5 * np.sum(diff**2 / var + np.log(2.0 * np.pi * var), axis=2)

    def log_density(self, x, alpha_bar: float = 1.0) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m, var = self._perturbed(alpha_bar)
        lp = self._component_logpdf(x, m, var) + np.log(self.weights)
        mx = lp.max(axis=1, keepdims=True)
        return (mx + np.log(np.exp(lp - mx).sum(axis=1, keepdims=True)))[:, 0]

    def score(self, x, alpha_bar: float = 1.0) -> np.ndarray:
        """``grad_x log p_tau(x)`` of the perturbed mixture."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m, var = self._perturbed(alpha_bar)
        lp = self._component_logpdf(x, m, var) + np.log(self.weights)
        lp -= lp.max(axis=1, keepdims=True)
        resp = np.exp(lp)
        resp /= resp.sum(axis=1, keepdims=True)
        comp = -(x[:, None, :] - m[None, :, :]) / var[None, :, :]
        return np.sum(resp[:, :, None] * comp, axis=1)

    def eps_star(self, x, alpha_bar: float) -> np.ndarray:
        """Optimal epsilon-prediction ``-sqrt(1 - ab) * score``."""
        return -np.sqrt(1.0 - alpha_bar) * self.score(x, alpha_bar)

    def moments(self, alpha_bar: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Exact mean and covariance of the perturbed mixture."""
        m, var = self._perturbed(alpha_bar)
        mean = self.weights @ m
        cov = np.zeros((self.dim, self.dim))
        for w, mk, vk in zip(self.weights, m, var):
            cov += w * (np.diag(vk) + np.outer(mk - mean, mk - mean))
        return mean, cov


def gaussian_mixture_data(rng: np.random.Generator, n: int, components) -> tuple[np.ndarray, GaussianMixture]:
    """Draw ``n`` points from a mixture given as ``GaussianMixture`` or a list
    of ``(weight, mean, std)`` triples."""
    if not isinstance(components, GaussianMixture):
        w, m, s = zip(*components)
        components = GaussianMixture(np.array(w), np.array(m), np.array(s))
    return components.sample(rng, n), components


def two_component_mixture(dim: int = 2) -> GaussianMixture:
    """The asymmetric 2-component mixture used by the consistency checks."""
    m1 = np.full(dim, 1.5)
    m2 = np.full(dim, -1.0)
    m2[0] = 1.0 if dim > 1 else -1.0
    return GaussianMixture([0.4, 0.6], [m1, m2], [0.4, 0.6])


# -- linear-Gaussian env ----------------------------------------------------


@dataclass
class LinearGaussianEnv:
    """Gaussian data ``N(mean, std^2 I)`` with reward ``-||clip(x) - target||^2``.

    The clip box keeps the reward bounded. ``value`` gives the exact
    ``E[R(x_0) | x_tau]`` under the forward process (ignoring the clip,
    which only matters beyond the box edge).
    """

    dim: int = 1
    mean: float = 0.0
    std: float = 1.0
    target: float = 0.5
    clip: tuple[float, float] = (-5.0, 5.0)

    def as_env(self) -> RewardEnv:
        target = self.target
        return RewardEnv(
            "linear_gaussian", self.dim,
            lambda x: -np.sum((x - target) ** 2, axis=1),
            optimum=(np.full(self.dim, target), 0.0), clip=self.clip,
            params={"dim": self.dim, "mean": self.mean, "std": self.std, "target": self.target},
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def posterior(self, x_tau, alpha_bar: float) -> tuple[np.ndarray, float]:
        """Mean and per-coordinate variance of ``x_0 | x_tau``."""
        x_tau = np.atleast_2d(np.asarray(x_tau, dtype=np.float64))
        s2 = self.std**2
        sa = np.sqrt(alpha_bar)
        denom = alpha_bar * s2 + 1.0 - alpha_bar
        post_mean = self.mean + sa * s2 * (x_tau - sa * self.mean) / denom
        post_var = s2 * (1.0 - alpha_bar) / denom
        return post_mean, post_var

    def value(self, x_tau, alpha_bar: float) -> np.ndarray:
        pm, pv = self.posterior(x_tau, alpha_bar)
        return -(np.sum((pm - self.target) ** 2, axis=1) + self.dim * pv)

    def eps_star(self, x_tau, alpha_bar: float) -> np.ndarray:
        x_tau = np.atleast_2d(np.asarray(x_tau, dtype=np.float64))
        denom = alpha_bar * self.std**2 + 1.0 - alpha_bar
        return np.sqrt(1.0 - alpha_bar) * (x_tau - np.sqrt(alpha_bar) * self.mean) / denom


def make_env(name: str, params: dict | None = None) -> RewardEnv:
    """Construct an environment by name: ``rastrigin``, ``linear_gaussian``."""
    params = dict(params or {})
    if name == "rastrigin":
        unknown = set(params) - {"dim", "scale", "shift"}
        if unknown:
            raise ContractError(f"unknown rastrigin params {sorted(unknown)}")
        return make_rastrigin_env(int(params.get("dim", 2)), float(params.get("scale", 1.0)),
                                  float(params.get("shift", 0.0)))
    if name == "linear_gaussian":
        if "clip" in params:
            params["clip"] = tuple(params["clip"])
        try:
            return LinearGaussianEnv(**params).as_env()
        except TypeError as exc:
            raise ContractError(f"bad linear_gaussian params: {exc}") from None
    raise ContractError(f"unknown env {name!r}")
