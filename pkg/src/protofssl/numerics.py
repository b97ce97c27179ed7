"""Small differentiable toolkit: an MLP embedding network with hand-written
backward passes, RMSprop, and the distance/softmax primitives.

Tensors are plain numpy arrays. The main path runs in float32; passing
``dtype=np.float64`` to :func:`init_params` (or calling
:meth:`ParameterSet.astype`) gives the 64-bit shadow used by gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError, StateError

PROB_FLOOR = 1e-12


@dataclass
class NetworkConfig:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    embedding_dim: int = 16
    use_batch_norm: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.input_dim < 1 or self.embedding_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("network dimensions must be positive integers")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigurationError("bn_momentum must lie in [0, 1)")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    rms_epsilon: float = 1e-7
    l2_coefficient: float = 1e-4
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0.0 < self.rms_decay < 1.0:
            raise ConfigurationError("rms_decay must lie in (0, 1)")
        if self.rms_epsilon <= 0:
            raise ConfigurationError("rms_epsilon must be > 0")
        if self.l2_coefficient < 0 or self.prox_mu < 0:
            raise ConfigurationError("l2_coefficient and prox_mu must be >= 0")


@dataclass
class ParameterSet:
    """Trainable tensors plus matching gradient and RMSprop state.

    ``buffers`` holds batch-norm running statistics. They are not trained
    but are averaged by FedAvg like the weights.
    """

    names: list[str]
    layers: list[np.ndarray]
    grads: list[np.ndarray]
    rms_state: list[np.ndarray]
    buffer_names: list[str] = field(default_factory=list)
    buffers: list[np.ndarray] = field(default_factory=list)
    cache: dict | None = field(default=None, repr=False, compare=False)

    @property
    def dtype(self):
        return self.layers[0].dtype

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            list(self.names),
            [a.copy() for a in self.layers],
            [a.copy() for a in self.grads],
            [a.copy() for a in self.rms_state],
            list(self.buffer_names),
            [a.copy() for a in self.buffers],
        )

    def astype(self, dtype) -> "ParameterSet":
        cast = lambda xs: [a.astype(dtype) for a in xs]  # noqa: E731
        return ParameterSet(list(self.names), cast(self.layers), cast(self.grads),
                            cast(self.rms_state), list(self.buffer_names), cast(self.buffers))

    def zero_grads(self):
        for g in self.grads:
            g.fill(0)

    def fresh_optimizer_state(self) -> "ParameterSet":
        """Copy of the weights with zeroed gradients and RMSprop state."""
        out = self.copy()
        out.zero_grads()
        for s in out.rms_state:
            s.fill(0)
        return out

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.layers))

    def state_arrays(self) -> list[np.ndarray]:
        """Everything FedAvg averages: weights then running statistics."""
        return [*self.layers, *self.buffers]


def init_params(config: NetworkConfig, seed=0, dtype=np.float32) -> ParameterSet:
    """He-uniform weights (fan-in), zero biases, unit BN scale."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    names, layers, buf_names, buffers = [], [], [], []
    dims = config.layer_dims()
    for i, (fan_in, fan_out) in enumerate(dims):
        limit = math.sqrt(6.0 / fan_in)
        names += [f"dense{i}.weight", f"dense{i}.bias"]
        layers += [rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype),
                   np.zeros(fan_out, dtype=dtype)]
        if config.use_batch_norm and i < len(dims) - 1:
            names += [f"bn{i}.gamma", f"bn{i}.beta"]
            layers += [np.ones(fan_out, dtype=dtype), np.zeros(fan_out, dtype=dtype)]
            buf_names += [f"bn{i}.running_mean", f"bn{i}.running_var"]
            buffers += [np.zeros(fan_out, dtype=dtype), np.ones(fan_out, dtype=dtype)]
    return ParameterSet(names, layers, [np.zeros_like(a) for a in layers],
                        [np.zeros_like(a) for a in layers], buf_names, buffers)


def _check_shapes(params: ParameterSet, config: NetworkConfig):
    expected = _expected_shapes(config)
    if len(expected) != len(params.layers):
        raise DimensionError(
            f"parameter set has {len(params.layers)} tensors, config implies {len(expected)}")
    for name, arr, shape in zip(params.names, params.layers, expected):
        if arr.shape != shape:
            raise DimensionError(f"layer {name}: shape {arr.shape} does not match config {shape}")


def _expected_shapes(config: NetworkConfig) -> list[tuple[int, ...]]:
    shapes = []
    dims = config.layer_dims()
    for i, (fan_in, fan_out) in enumerate(dims):
        shapes += [(fan_in, fan_out), (fan_out,)]
        if config.use_batch_norm and i < len(dims) - 1:
            shapes += [(fan_out,), (fan_out,)]
    return shapes


def forward(params: ParameterSet, config: NetworkConfig, batch, training: bool = True) -> np.ndarray:
    """Embed ``batch`` (B x input_dim) and cache activations for :func:`backward`.

    In training mode batch norm uses batch statistics and updates the running
    averages; otherwise it uses the running averages.
    """
    _check_shapes(params, config)
    x = np.asarray(batch, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise DimensionError(
            f"layer dense0.weight: batch shape {x.shape} does not match input_dim {config.input_dim}")
    steps = []
    idx = 0
    buf = 0
    n_dense = len(config.layer_dims())
    h = x
    for i in range(n_dense):
        w, b = params.layers[idx], params.layers[idx + 1]
        steps.append(("dense", idx, h))
        h = h @ w + b
        idx += 2
        if i == n_dense - 1:
            break
        if config.use_batch_norm:
            gamma, beta = params.layers[idx], params.layers[idx + 1]
            rmean, rvar = params.buffers[buf], params.buffers[buf + 1]
            if training:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                m = params.dtype.type(config.bn_momentum)
                rmean *= m
                rmean += (1 - m) * mu
                rvar *= m
                rvar += (1 - m) * var
            else:
                mu, var = rmean, rvar
            inv_std = 1.0 / np.sqrt(var + params.dtype.type(config.bn_eps))
            xhat = (h - mu) * inv_std
            steps.append(("bn", idx, xhat, inv_std, training))
            h = gamma * xhat + beta
            idx += 2
            buf += 2
        steps.append(("relu", h > 0))
        h = np.maximum(h, 0)
    params.cache = {"steps": steps, "out_shape": h.shape}
    return h


def backward(params: ParameterSet, config: NetworkConfig, upstream_grad) -> np.ndarray:
    """Accumulate d(loss)/d(params) into ``params.grads``; return d(loss)/d(batch)."""
    if params.cache is None:
        raise StateError("backward called before forward")
    g = np.asarray(upstream_grad, dtype=params.dtype)
    if g.shape != params.cache["out_shape"]:
        raise DimensionError(
            f"upstream gradient shape {g.shape} does not match embeddings {params.cache['out_shape']}")
    for step in reversed(params.cache["steps"]):
        kind = step[0]
        if kind == "relu":
            g = g * step[1]
        elif kind == "bn":
            _, idx, xhat, inv_std, training = step
            gamma = params.layers[idx]
            params.grads[idx] += (g * xhat).sum(axis=0)
            params.grads[idx + 1] += g.sum(axis=0)
            dxhat = g * gamma
            if training:
                n = g.shape[0]
                g = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv_std
        else:
            _, idx, h_in = step
            params.grads[idx] += h_in.T @ g
            params.grads[idx + 1] += g.sum(axis=0)
            g = g @ params.layers[idx].T
    params.cache = None
    return g


def rmsprop_step(params: ParameterSet, opt: OptimizerConfig, anchor: ParameterSet | None = None) -> ParameterSet:
    """One RMSprop update in place; returns ``params`` with gradients cleared."""
    if opt.prox_mu > 0 and anchor is None:
        raise ConfigurationError("prox_mu > 0 requires the round-start global weights as anchor")
    t = params.dtype.type
    lr, rho, eps = t(opt.learning_rate), t(opt.rms_decay), t(opt.rms_epsilon)
    l2, mu = t(opt.l2_coefficient), t(opt.prox_mu)
    for i, (w, g, s) in enumerate(zip(params.layers, params.grads, params.rms_state)):
        eff = g + l2 * w
        if opt.prox_mu > 0:
            eff = eff + mu * (w - anchor.layers[i])
        s *= rho
        s += (1 - rho) * eff * eff
        w -= lr * eff / np.sqrt(s + eps)
        g.fill(0)
    return params


def pairwise_sq_dist(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a))
    b = np.atleast_2d(np.asarray(b))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sq_dist: inner dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    return kernels.pairwise_sq_dist(a, b)


def log_softmax(logits) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits))
    return kernels.log_softmax_rows(z)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    out = np.exp(log_softmax(z))
    out /= out.sum(axis=1, keepdims=True)
    return out.reshape(z.shape)


def cross_entropy(target, pred) -> float:
    """Mean over rows of -sum_k target_k log(max(pred_k, PROB_FLOOR))."""
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    if t.shape != p.shape:
        raise DimensionError(f"cross_entropy: target {t.shape} vs pred {p.shape}")
    return float(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean())
