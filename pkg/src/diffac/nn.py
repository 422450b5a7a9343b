"""Dense feed-forward networks with exact reverse-mode gradients.

Networks keep every parameter in one flat float64 array, so optimizers,
checkpoints and gradient checks all operate on plain vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)

ACTIVATIONS = {"relu": kernels.RELU, "tanh": kernels.TANH}
_CKPT_MAGIC = "DIFFAC-NET"
_CKPT_VERSION = "v1"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", self.activation.lower())
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError("input_dim and output_dim must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ContractError("hidden_dims must be a non-empty list of positive ints")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    def layout(self) -> np.ndarray:
        rows = []
        off = 0
        for n_in, n_out in self.layer_sizes:
            rows.append((n_in, n_out, off, off + n_in * n_out))
            off += n_in * n_out + n_out
        return np.array(rows, dtype=np.int64)


@dataclass
class DenseNet:
    """An MLP whose parameters live in a single flat vector."""

    spec: MlpSpec
    params: np.ndarray
    _layout: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ContractError(
                f"params length {self.params.shape} != {self.spec.n_params} for {self.spec}"
            )
        self._layout = self.spec.layout()

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "DenseNet":
        """He-uniform weights (Glorot-uniform for tanh), zero biases."""
        params = np.zeros(spec.n_params)
        for n_in, n_out, w_off, _ in spec.layout():
            if spec.activation == "relu":
                limit = np.sqrt(6.0 / n_in)
            else:
                limit = np.sqrt(6.0 / (n_in + n_out))
            params[w_off:w_off + n_in * n_out] = rng.uniform(-limit, limit, n_in * n_out)
        return cls(spec, params)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "DenseNet":
        return cls(spec, np.zeros(spec.n_params))

    def copy(self) -> "DenseNet":
        return DenseNet(self.spec, self.params.copy())

    def with_params(self, params: np.ndarray) -> "DenseNet":
        return DenseNet(self.spec, params)

    def layer_slices(self, layer: int) -> tuple[slice, slice]:
        """Slices of the weight block and bias block of ``layer``."""
        n_in, n_out, w_off, b_off = (int(v) for v in self._layout[layer])
        return slice(w_off, w_off + n_in * n_out), slice(b_off, b_off + n_out)

    @property
    def n_layers(self) -> int:
        return len(self._layout)

    @property
    def act_code(self) -> int:
        return ACTIVATIONS[self.spec.activation]

    def __call__(self, x):
        return forward(self, x)


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ContractError(
            f"input of shape {x.shape[1:] if not single else x.shape[1:]} "
            f"does not match input_dim={net.spec.input_dim}"
        )
    return np.ascontiguousarray(x), single


def forward_cached(net: DenseNet, x) -> tuple[np.ndarray, list]:
    """Forward pass on a (B, in) batch, also returning the activation cache."""
    xb, _ = _as_batch(net, x)
    return kernels.mlp_forward(net.params, net._layout, net.act_code, xb)


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the net on a vector or a (B, in) batch."""
    xb, single = _as_batch(net, x)
    out, _ = kernels.mlp_forward(net.params, net._layout, net.act_code, xb)
    return out[0] if single else out


def backward_cached(net: DenseNet, cache: list, output_grad) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass reusing a cache from :func:`forward_cached`."""
    g = np.ascontiguousarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache[0].shape[0], net.spec.output_dim):
        raise ContractError(f"output_grad shape {g.shape} does not match the forward batch")
    dparams, dx = kernels.mlp_backward(net.params, net._layout, net.act_code, cache, g)
    if not np.all(np.isfinite(dparams)):
        _raise_nonfinite(net, dparams)
    return dparams, dx


def backward(net: DenseNet, x, output_grad) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(forward(net, x) * output_grad)``.

    Returns ``(param_grad, input_grad)``. For a batch input the parameter
    gradient is summed over rows and ``input_grad`` has one row per input.
    """
    xb, single = _as_batch(net, x)
    _, cache = kernels.mlp_forward(net.params, net._layout, net.act_code, xb)
    g = np.asarray(output_grad, dtype=np.float64)
    if single and g.ndim == 1:
        g = g[None, :]
    dparams, dx = backward_cached(net, cache, g)
    return dparams, (dx[0] if single else dx)


def _raise_nonfinite(net: DenseNet, dparams: np.ndarray):
    for li in range(net.n_layers):
        w, b = net.layer_slices(li)
        if not (np.all(np.isfinite(dparams[w])) and np.all(np.isfinite(dparams[b]))):
            raise NumericError(f"non-finite gradient in layer {li}", layer=li)
    raise NumericError("non-finite gradient", layer=None)


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 8.0
    rejected: int = 0

    @classmethod
    def fresh(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)


def clip_by_global_norm(grad: np.ndarray, clip_norm: float | None) -> np.ndarray:
    if clip_norm is None:
        return grad
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > clip_norm:
        return grad * (clip_norm / norm)
    return grad


def adam_update(params: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam step on a flat parameter vector; returns the new vector.

    ``grad`` is the gradient of a loss (the step descends). A non-finite
    gradient leaves parameters and moments untouched and bumps
    ``state.rejected``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ContractError(f"grad shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        state.rejected += 1
        log.warning("adam: rejected non-finite gradient (total rejected: %d)", state.rejected)
        return params
    g = clip_by_global_norm(grad, state.clip_norm)
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(net: DenseNet, grad: np.ndarray, state: AdamState) -> tuple[DenseNet, AdamState]:
    net.params = adam_update(net.params, grad, state)
    return net, state


# -- gradient checking -----------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def central_difference(f, theta: np.ndarray, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        fp = f(theta)
        theta[i] = old - eps
        fm = f(theta)
        theta[i] = old
        out[i] = (fp - fm) / (2.0 * eps)
    return out


def finite_diff_check(net: DenseNet, x, eps: float = 1e-5, output_grad=None,
                      grad_fn=None) -> float:
    """Max relative error between ``backward`` and central differences.

    The scalar checked is ``sum(forward(net, x) * output_grad)`` (all-ones
    weights by default). ``grad_fn(net, x, output_grad) -> param_grad`` lets a
    test swap in a different (e.g. deliberately broken) gradient routine.
    """
    if not 0.0 < eps < 1e-2:
        raise ContractError("eps must lie in (0, 1e-2)")
    xb, _ = _as_batch(net, x)
    if output_grad is None:
        output_grad = np.ones((xb.shape[0], net.spec.output_dim))
    output_grad = np.broadcast_to(np.asarray(output_grad, dtype=np.float64),
                                  (xb.shape[0], net.spec.output_dim))
    if grad_fn is None:
        analytic, _ = backward(net, xb, output_grad)
    else:
        analytic = grad_fn(net, xb, output_grad)

    def scalar(theta):
        return float(np.sum(forward(net.with_params(theta), xb) * output_grad))

    numeric = central_difference(scalar, net.params, eps)
    return float(np.max(relative_error(analytic, numeric)))


def min_kink_distance(net: DenseNet, x) -> float:
    """Smallest |pre-activation| over hidden ReLU units for the batch ``x``.

    Finite differences are only trustworthy when this exceeds the step size
    times the local sensitivity; tests use it to reject unlucky draws.
    """
    xb, _ = _as_batch(net, x)
    h = xb
    best = np.inf
    for li in range(net.n_layers - 1):
        w, b = net.layer_slices(li)
        n_in, n_out = net.spec.layer_sizes[li]
        z = h @ net.params[w].reshape(n_out, n_in).T + net.params[b]
        best = min(best, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0) if net.spec.activation == "relu" else np.tanh(z)
    return best


# -- checkpoints -----------------------------------------------------------


def save_net(net: DenseNet, path) -> None:
    """Write the text header line followed by little-endian float64 params."""
    s = net.spec
    header = (
        f"{_CKPT_MAGIC} {_CKPT_VERSION} {s.input_dim} "
        f"{','.join(str(h) for h in s.hidden_dims)} {s.output_dim} {s.activation}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(net.params.astype("<f8").tobytes())


def load_net(path) -> DenseNet:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    fields = data[:nl].decode("ascii").split()
    if len(fields) != 6 or fields[0] != _CKPT_MAGIC or fields[1] != _CKPT_VERSION:
        raise ContractError(f"{path}: not a {_CKPT_MAGIC} {_CKPT_VERSION} checkpoint")
    spec = MlpSpec(
        input_dim=int(fields[2]),
        hidden_dims=tuple(int(h) for h in fields[3].split(",")),
        output_dim=int(fields[4]),
        activation=fields[5],
    )
    params = np.frombuffer(data[nl + 1:], dtype="<f8").astype(np.float64)
    return DenseNet(spec, params)


def mlp(input_dim: int, hidden_dims: Sequence[int], output_dim: int,
        rng: np.random.Generator, activation: str = "relu") -> DenseNet:
    return DenseNet.init(MlpSpec(input_dim, tuple(hidden_dims), output_dim, activation), rng)


def per_sample_param_grads(net: DenseNet, cache: list, output_grad) -> np.ndarray:
    """Row ``j`` is the parameter gradient of ``output[j] . output_grad[j]``.

    Plain numpy; memory is ``B * n_params`` doubles, so callers chunk.
    """
    g = np.atleast_2d(np.asarray(output_grad, dtype=np.float64))
    batch = g.shape[0]
    out = np.empty((batch, net.spec.n_params))
    act = net.spec.activation
    for li in range(net.n_layers - 1, -1, -1):
        w_sl, b_sl = net.layer_slices(li)
        n_in, n_out = net.spec.layer_sizes[li]
        h_in = cache[li]
        out[:, w_sl] = np.einsum("bo,bi->boi", g, h_in).reshape(batch, -1)
        out[:, b_sl] = g
        g = g @ net.params[w_sl].reshape(n_out, n_in)
        if li > 0:
            g = g * (h_in > 0.0) if act == "relu" else g * (1.0 - h_in * h_in)
    return out
