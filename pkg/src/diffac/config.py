"""Run configurations for the CLI commands.

Every config is a dataclass loaded from JSON with unknown keys rejected at
every nesting level. A partial nested section (say ``{"train": {"seed": 3}}``)
overrides only the keys it names on top of the command's defaults.
``estimate_seconds`` is a coarse single-core cost model;
when ``budget_seconds`` is set, a config whose estimate exceeds it is
rejected before any compute starts.
"""

from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import NoiseSchedule, default_schedule, make_linear_schedule
from .envs import RewardEnv, make_env
from .errors import ContractError
from .io import read_json
from .policy_gradient import ESTIMATORS, TrainConfig

# seconds per (row x parameter) of one forward+backward pass; measured on
# one core for 64x64 nets and kept deliberately round
ROW_PARAM_SECONDS = 1.2e-9
# forward-only passes (sampling) cost roughly a third of that
ROW_PARAM_FWD_SECONDS = 0.4e-9


def _mlp_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass
class EnvSpec:
    name: str = "rastrigin"
    params: dict = field(default_factory=lambda: {"dim": 2})

    def build(self) -> RewardEnv:
        return make_env(self.name, self.params)

    @property
    def dim(self) -> int:
        return int(self.params.get("dim", 2 if self.name == "rastrigin" else 1))


@dataclass
class ScheduleSpec:
    """``beta1``/``betaT`` default to the ``0.1/T .. 20/T`` schedule."""

    T: int = 100
    beta1: float | None = None
    betaT: float | None = None

    def __post_init__(self):
        if (self.beta1 is None) != (self.betaT is None):
            raise ContractError("give both beta1 and betaT or neither")

    def build(self) -> NoiseSchedule:
        if self.beta1 is None:
            return default_schedule(self.T)
        return make_linear_schedule(self.T, self.beta1, self.betaT)


@dataclass
class NetSpec:
    hidden: tuple = (64, 64)
    activation: str = "relu"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ContractError("hidden sizes must be positive")

    def n_params(self, d_in: int, d_out: int) -> int:
        return _mlp_params([d_in, *self.hidden, d_out])


_NESTED: dict[tuple[str, str], type] = {}


def _overlay(f, v, where: str):
    """A partial nested section overrides only the keys it names; the rest
    come from the enclosing config's default for that field."""
    if not isinstance(v, dict):
        raise ContractError(f"{where}: expected an object, got {type(v).__name__}")
    if f.default_factory is MISSING:
        return v
    base = f.default_factory()
    if isinstance(base, EnvSpec) and v.get("name", base.name) != base.name:
        return v  # a different env starts from its own parameter defaults
    return {**_dump(base), **v}


def _load(cls, d, where: str):
    if not isinstance(d, dict):
        raise ContractError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ContractError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    defaults = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        sub = _NESTED.get((cls.__name__, k))
        if sub is not None:
            v = _overlay(defaults[k], v, f"{where}.{k}")
        if sub is TrainConfig:
            kw[k] = TrainConfig.from_dict(v)
        elif sub is not None:
            kw[k] = _load(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ContractError(f"{where}: {exc}") from None


def _dump(obj) -> dict:
    out = asdict(obj)

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    return clean(out)


class _Config:
    budget_seconds: float | None

    @classmethod
    def from_dict(cls, d: dict):
        cfg = _load(cls, d, cls.__name__)
        cfg.check_budget()
        return cfg

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(read_json(path))

    def to_dict(self) -> dict:
        return _dump(self)

    def estimate_seconds(self) -> float:
        raise NotImplementedError

    def check_budget(self) -> None:
        if self.budget_seconds is None:
            return
        est = self.estimate_seconds()
        if est > self.budget_seconds:
            raise ContractError(
                f"estimated {est:.0f}s exceeds budget_seconds={self.budget_seconds:g}")


@dataclass
class PretrainConfig(_Config):
    """Score-model pretraining on synthetic data plus an initial buffer and critic."""

    env: EnvSpec = field(default_factory=EnvSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    actor: NetSpec = field(default_factory=NetSpec)
    critic: NetSpec = field(default_factory=NetSpec)
    data: str = "normal"
    data_n: int = 5000
    score_steps: int = 3000
    score_batch: int = 256
    score_lr: float = 1e-3
    buffer_n: int = 500
    critic_steps: int = 2000
    critic_batch: int = 256
    critic_lr: float = 1e-3
    seed: int = 0
    budget_seconds: float | None = None

    def __post_init__(self):
        if self.data not in ("normal", "mixture", "env"):
            raise ContractError(f"unknown pretrain data {self.data!r}")
        for name in ("data_n", "score_batch", "buffer_n", "critic_batch"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.score_steps < 0 or self.critic_steps < 0:
            raise ContractError("step counts must be >= 0")

    def estimate_seconds(self) -> float:
        d = self.env.dim
        pa = self.actor.n_params(d + 1, d)
        pc = self.critic.n_params(d + 1, 1)
        return (ROW_PARAM_SECONDS * (self.score_steps * self.score_batch * pa
                                     + self.critic_steps * self.critic_batch * pc)
                + ROW_PARAM_FWD_SECONDS * self.buffer_n * self.schedule.T * pa)


@dataclass
class TrainRunConfig(_Config):
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pretrain_dir: str | None = None
    algo: str = "v2"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(n_inner_iters=10))
    budget_seconds: float | None = None

    def __post_init__(self):
        if self.algo not in ("v1", "v2"):
            raise ContractError(f"unknown algo {self.algo!r}")

    def estimate_seconds(self) -> float:
        t = self.train
        d = self.pretrain.env.dim
        pa = self.pretrain.actor.n_params(d + 1, d)
        pc = self.pretrain.critic.n_params(d + 1, 1)
        T = self.pretrain.schedule.T
        per_iter = (ROW_PARAM_FWD_SECONDS * t.samples_per_iter * T * pa
                    + ROW_PARAM_SECONDS * (t.critic_steps * t.critic_batch * pc
                                           + t.score_steps * t.score_batch * pa
                                           + t.n_inner_iters * t.pg_batch * (pa + pc)))
        pre = 0.0 if self.pretrain_dir else self.pretrain.estimate_seconds()
        return pre + t.n_outer_iters * per_iter + ROW_PARAM_FWD_SECONDS * t.eval_samples * T * pa


@dataclass
class PgErrorConfig(_Config):
    """Critic policy-gradient error versus data budget (reconstructed grid)."""

    dims: tuple = (2, 8, 32)
    ns: tuple = (100, 1000, 3000)
    ref_n: int = 10000
    seeds: tuple = (0, 1, 2)
    T: int = 100
    actor: NetSpec = field(default_factory=NetSpec)
    critic: NetSpec = field(default_factory=NetSpec)
    actor_pretrain_steps: int = 1500
    critic_steps: int = 20000
    critic_batch: int = 256
    critic_lr: float = 1e-3
    final_lr_frac: float = 0.01
    eval_rollouts: int = 200
    eval_states: int = 2000
    gradient: str = "action"
    budget_seconds: float | None = None

    def __post_init__(self):
        if self.gradient not in ("action", "state"):
            raise ContractError("gradient must be 'action' or 'state'")
        if not self.dims or not self.ns or not self.seeds:
            raise ContractError("dims, ns and seeds must be non-empty")
        if max(self.ns) > self.ref_n or min(self.ns) < 1:
            raise ContractError("every n must lie in [1, ref_n]")
        if min(self.dims) < 1:
            raise ContractError("dims must be positive")

    def estimate_seconds(self) -> float:
        total = 0.0
        for d in self.dims:
            pa = self.actor.n_params(d + 1, d)
            pq = self.critic.n_params(2 * d + 1, 1)
            pv = self.critic.n_params(d + 1, 1)
            fits = (len(self.ns) + 1) * self.critic_steps * self.critic_batch * (pq + pv)
            total += (ROW_PARAM_SECONDS * (fits + self.actor_pretrain_steps * 256 * pa)
                      + ROW_PARAM_FWD_SECONDS * (self.ref_n + self.eval_rollouts) * self.T * pa)
        return total * len(self.seeds)


@dataclass
class DataScarceConfig(_Config):
    """One-step policy trained on box states only, evaluated on a grid."""

    dim: int = 2
    box: tuple = (1.0, 2.0)
    n_train: int = 4096
    steps: int = 3000
    batch: int = 256
    lr: float = 1e-3
    policy: NetSpec = field(default_factory=NetSpec)
    grid_lo: float = -3.0
    grid_hi: float = 3.0
    grid_n: int = 25
    far_distance: float = 2.0
    seed: int = 0
    budget_seconds: float | None = None

    def __post_init__(self):
        if self.dim != 2:
            raise ContractError("the heat grid is two-dimensional")
        if len(self.box) != 2 or not self.box[0] < self.box[1]:
            raise ContractError("box must be (lo, hi) with lo < hi")
        if not self.grid_lo < self.grid_hi or self.grid_n < 2:
            raise ContractError("bad grid")

    def estimate_seconds(self) -> float:
        p = self.policy.n_params(self.dim, self.dim)
        return ROW_PARAM_SECONDS * self.steps * self.batch * p


@dataclass
class AblationConfig(_Config):
    """diffac_v2 across a grid of KL coefficients ``base_eta2 * m``."""

    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    # a faster step than ``train`` so that unregularized drift shows within
    # 30 outer iterations
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, n_inner_iters=10))
    base_eta2: float = 0.05
    multipliers: tuple = (5e-5, 5e-4, 5e-3, 0.01, 0.5, 1.0, 5.0, 50.0)
    seeds: tuple = (0, 1, 2)
    budget_seconds: float | None = None

    def __post_init__(self):
        if len(self.multipliers) < 3:
            raise ContractError("need at least three grid values for an interior point")
        if min(self.multipliers) < 0 or list(self.multipliers) != sorted(self.multipliers):
            raise ContractError("multipliers must be non-negative and ascending")

    @property
    def eta2_grid(self) -> list[float]:
        return [self.base_eta2 * m for m in self.multipliers]

    def estimate_seconds(self) -> float:
        run = TrainRunConfig(pretrain=self.pretrain, pretrain_dir="x", train=self.train)
        return len(self.seeds) * (self.pretrain.estimate_seconds()
                                  + len(self.multipliers) * run.estimate_seconds())


@dataclass
class BoundConfig(_Config):
    """Approximation-bound diagnostic over a reference-perturbation sweep."""

    env: EnvSpec = field(default_factory=lambda: EnvSpec(
        "linear_gaussian", {"dim": 1, "mean": 0.0, "std": 1.0, "target": 0.5}))
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec(8, 0.02, 0.5))
    actor: NetSpec = field(default_factory=lambda: NetSpec((16,), "tanh"))
    pretrain_steps: int = 500
    deltas: tuple = (0.0, 0.01, 0.05, 0.1)
    n_mc: int = 2000
    seeds: tuple = tuple(range(10))
    budget_seconds: float | None = None

    def __post_init__(self):
        if self.env.name != "linear_gaussian":
            raise ContractError("the bound needs the clipped linear_gaussian env")
        if min(self.deltas) < 0 or list(self.deltas) != sorted(self.deltas):
            raise ContractError("deltas must be non-negative and ascending")

    def estimate_seconds(self) -> float:
        d = self.env.dim
        pa = self.actor.n_params(d + 1, d)
        T = self.schedule.T
        per = ROW_PARAM_SECONDS * self.n_mc * T * T * pa
        return len(self.seeds) * (len(self.deltas) * per
                                  + ROW_PARAM_SECONDS * self.pretrain_steps * 256 * pa)


@dataclass
class PlotConfig(_Config):
    """Line chart of column ``y`` against ``x`` from CSVs, one series per
    input file or per value of ``group``."""

    inputs: tuple = ()
    x: str = "iter"
    y: str = "mean_reward"
    group: str | None = None
    output: str = "plot.svg"
    title: str = ""
    budget_seconds: float | None = None

    def __post_init__(self):
        if not self.inputs:
            raise ContractError("plot needs at least one input CSV")

    def estimate_seconds(self) -> float:
        return 0.0


_NESTED.update({
    ("PretrainConfig", "env"): EnvSpec,
    ("PretrainConfig", "schedule"): ScheduleSpec,
    ("PretrainConfig", "actor"): NetSpec,
    ("PretrainConfig", "critic"): NetSpec,
    ("TrainRunConfig", "pretrain"): PretrainConfig,
    ("TrainRunConfig", "train"): TrainConfig,
    ("PgErrorConfig", "actor"): NetSpec,
    ("PgErrorConfig", "critic"): NetSpec,
    ("DataScarceConfig", "policy"): NetSpec,
    ("AblationConfig", "pretrain"): PretrainConfig,
    ("AblationConfig", "train"): TrainConfig,
    ("BoundConfig", "env"): EnvSpec,
    ("BoundConfig", "schedule"): ScheduleSpec,
    ("BoundConfig", "actor"): NetSpec,
})

COMMAND_CONFIGS = {
    "pretrain": PretrainConfig,
    "train": TrainRunConfig,
    "pg-error": PgErrorConfig,
    "data-scarce": DataScarceConfig,
    "ablation-eta2": AblationConfig,
    "bound": BoundConfig,
    "plot": PlotConfig,
}


def load_config(command: str, path=None):
    cls = COMMAND_CONFIGS[command]
    if path is None:
        cfg = cls()
        cfg.check_budget()
        return cfg
    return cls.from_file(Path(path))


__all__ = ["ESTIMATORS", "COMMAND_CONFIGS", "load_config", "EnvSpec", "ScheduleSpec", "NetSpec",
           "PretrainConfig", "TrainRunConfig", "PgErrorConfig", "DataScarceConfig",
           "AblationConfig", "BoundConfig", "PlotConfig"]
