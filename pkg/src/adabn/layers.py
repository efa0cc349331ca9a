"""Layers with explicit forward/backward passes and the sequential ``Model``.

Every layer's ``forward`` returns ``(output, cache)``; the cache must be handed
back unchanged to ``backward``. Caches are tied to the layer instance and to the
parameter version at forward time, so reusing one after an update raises
:class:`~adabn.errors.ContractViolationError`.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (
    ContractViolationError,
    DimensionError,
    PreconditionError,
    SingularityError,
)
from .tensor import Tensor, conv2d, conv2d_backward, conv_output_size, reduce_moments


@dataclass
class Cache:
    owner: int
    version: int
    values: dict[str, Any] = field(default_factory=dict)


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self._version = 0

    def _cache(self, **values) -> Cache:
        return Cache(owner=id(self), version=self._version, values=values)

    def _check_cache(self, cache: Cache) -> dict[str, Any]:
        if not isinstance(cache, Cache) or cache.owner != id(self):
            raise ContractViolationError(f"{self.name}: cache was produced by a different layer")
        if cache.version != self._version:
            raise ContractViolationError(f"{self.name}: stale cache, parameters changed since forward")
        return cache.values

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self._version += 1

    def forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Cache]:
        raise NotImplementedError

    def backward(self, grad_out: Tensor, cache: Cache) -> tuple[Tensor, dict[str, Tensor]]:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def describe(self) -> dict[str, Any]:
        return {"kind": self.kind, "name": self.name}

    def buffers(self) -> dict[str, Tensor]:
        return {}


class Linear(Layer):
    """``y = x @ W + b`` with ``W`` of shape (in_features, out_features)."""

    kind = "linear"

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(in_features, out_features))
        self.params["bias"] = np.zeros(out_features)

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]

    @property
    def bias(self) -> Tensor:
        return self.params["bias"]

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"{self.name}: expected (N, {self.in_features}) input, got {x.shape}")
        return x @ self.weight + self.bias, self._cache(x=x)

    def backward(self, grad_out, cache):
        x = self._check_cache(cache)["x"]
        grads = {"weight": x.T @ grad_out, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.weight.T, grads

    def output_shape(self, input_shape):
        return (self.out_features,)

    def describe(self):
        return {**super().describe(), "in_features": self.in_features, "out_features": self.out_features}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, rng: np.random.Generator | None = None):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        self.params["kernel"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           size=(out_channels, in_channels, kernel_size, kernel_size))
        self.params["bias"] = np.zeros(out_channels)

    def forward(self, x, training=False):
        y = conv2d(x, self.params["kernel"], self.stride) + self.params["bias"][None, :, None, None]
        return y, self._cache(x=x)

    def backward(self, grad_out, cache):
        x = self._check_cache(cache)["x"]
        grad_x, grad_k = conv2d_backward(x, self.params["kernel"], self.stride, grad_out)
        return grad_x, {"kernel": grad_k, "bias": grad_out.sum(axis=(0, 2, 3))}

    def output_shape(self, input_shape):
        _, h, w = input_shape
        k, s = self.kernel_size, self.stride
        return (self.out_channels, conv_output_size(h, k, s), conv_output_size(w, k, s))

    def describe(self):
        return {**super().describe(), "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        mask = x > 0
        return np.where(mask, x, 0.0), self._cache(mask=mask)

    def backward(self, grad_out, cache):
        return grad_out * self._check_cache(cache)["mask"], {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), self._cache(shape=x.shape)

    def backward(self, grad_out, cache):
        return grad_out.reshape(self._check_cache(cache)["shape"]), {}

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


def _feature_axes(x: Tensor) -> tuple[int, ...]:
    # features are columns of 2-D input and channels of 4-D input
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise DimensionError(f"batch norm expects 2-D or 4-D input, got shape {x.shape}")


def _per_feature(v: Tensor, ndim: int) -> Tensor:
    return v if ndim == 2 else v[None, :, None, None]


class BatchNorm(Layer):
    """Per-feature batch normalization.

    In training mode the batch mean and (biased) variance normalize the input
    and the running averages are updated with ``momentum``. In eval mode the
    layer normalizes with ``eval_stats`` when set (a domain's statistics, see
    :func:`adabn.engine.apply_domain`) and with the running averages otherwise.
    """

    kind = "batchnorm"

    def __init__(self, name: str, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        if eps <= 0:
            raise PreconditionError("eps must be positive")
        if not 0 < momentum <= 1:
            raise PreconditionError("momentum must lie in (0, 1]")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.eval_stats: tuple[Tensor, Tensor] | None = None
        self.active_domain: str | None = None

    @property
    def gamma(self) -> Tensor:
        return self.params["gamma"]

    @property
    def beta(self) -> Tensor:
        return self.params["beta"]

    def current_stats(self) -> tuple[Tensor, Tensor]:
        return self.eval_stats if self.eval_stats is not None else (self.running_mean, self.running_var)

    def forward(self, x, training=False):
        if training:
            return bn_forward_train(self, x)
        mean, var = self.current_stats()
        y = bn_forward_eval(self, x, (mean, var))
        return y, self._cache(x=x, mean=mean, var=var, training=False)

    def backward(self, grad_out, cache):
        values = self._check_cache(cache)
        if not values["training"]:
            # eval mode: fixed statistics, the layer is affine in x
            x, mean, var = values["x"], values["mean"], values["var"]
            inv = 1.0 / np.sqrt(var + self.eps)
            axes = _feature_axes(grad_out)
            x_hat = (x - _per_feature(mean, x.ndim)) * _per_feature(inv, x.ndim)
            grads = {"gamma": (grad_out * x_hat).sum(axis=axes), "beta": grad_out.sum(axis=axes)}
            return grad_out * _per_feature(self.gamma * inv, x.ndim), grads
        x_hat, inv_std = values["x_hat"], values["inv_std"]
        axes = _feature_axes(grad_out)
        m = grad_out.size // self.num_features
        grads = {"gamma": (grad_out * x_hat).sum(axis=axes), "beta": grad_out.sum(axis=axes)}
        g_hat = grad_out * _per_feature(self.gamma, grad_out.ndim)
        # d/dx of (x - mean)/sqrt(var+eps) with mean and var taken from the batch
        sum_g = _per_feature(g_hat.sum(axis=axes), g_hat.ndim)
        sum_gx = _per_feature((g_hat * x_hat).sum(axis=axes), g_hat.ndim)
        grad_x = _per_feature(inv_std, g_hat.ndim) / m * (m * g_hat - sum_g - x_hat * sum_gx)
        return grad_x, grads

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise DimensionError(f"{self.name}: expects {self.num_features} features, got shape {input_shape}")
        return input_shape

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self):
        return {**super().describe(), "num_features": self.num_features, "eps": self.eps,
                "momentum": self.momentum}


def bn_forward_train(layer: BatchNorm, x: Tensor) -> tuple[Tensor, Cache]:
    axes = _feature_axes(x)
    if x.shape[1] != layer.num_features:
        raise DimensionError(f"{layer.name}: expects {layer.num_features} features, got shape {x.shape}")
    if x.shape[0] < 2:
        raise PreconditionError(f"{layer.name}: training-mode batch norm needs batch size >= 2, got {x.shape[0]}")
    mean, var = reduce_moments(x, axes)
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    x_hat = (x - _per_feature(mean, x.ndim)) * _per_feature(inv_std, x.ndim)
    y = x_hat * _per_feature(layer.gamma, x.ndim) + _per_feature(layer.beta, x.ndim)
    mom = layer.momentum
    layer.running_mean = (1.0 - mom) * layer.running_mean + mom * mean
    layer.running_var = (1.0 - mom) * layer.running_var + mom * var
    return y, layer._cache(x_hat=x_hat, inv_std=inv_std, training=True)


def bn_forward_eval(layer: BatchNorm, x: Tensor, stats: tuple[Tensor, Tensor]) -> Tensor:
    """Normalize ``x`` with supplied (mean, variance); batch moments are never used."""
    mean, var = (np.asarray(s, dtype=np.float64) for s in stats)
    _feature_axes(x)
    p = layer.num_features
    if mean.shape != (p,) or var.shape != (p,):
        raise DimensionError(f"{layer.name}: stats must have length {p}, got {mean.shape} and {var.shape}")
    if x.shape[1] != p:
        raise DimensionError(f"{layer.name}: expects {p} features, got shape {x.shape}")
    if np.any(var < 0):
        raise PreconditionError(f"{layer.name}: negative variance in supplied stats")
    scale = layer.gamma / np.sqrt(var + layer.eps)
    return (x - _per_feature(mean, x.ndim)) * _per_feature(scale, x.ndim) + _per_feature(layer.beta, x.ndim)


class SoftmaxCrossEntropy:
    """Mean softmax cross-entropy over a batch of logits."""

    def forward(self, logits: Tensor, labels: np.ndarray) -> tuple[float, dict]:
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        loss = -log_probs[np.arange(n), labels].mean()
        return float(loss), {"probs": np.exp(log_probs), "labels": labels}

    def backward(self, cache: dict) -> Tensor:
        probs, labels = cache["probs"], cache["labels"]
        n = probs.shape[0]
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return grad / n


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def compose_bn_linear(mean: Tensor, std: Tensor, linear: Linear) -> tuple[Tensor, Tensor]:
    """Fold a parameter-free standardization into the following linear layer.

    With ``Sigma = diag(std)`` returns ``Wa = W.T @ inv(Sigma)`` and
    ``ba = -W.T @ inv(Sigma) @ mean + b`` so that
    ``Wa @ x + ba == W.T @ ((x - mean) / std) + b``. Assumes unit scale and zero
    shift in the normalization.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise SingularityError("standard deviations must be strictly positive")
    if mean.shape != (linear.in_features,) or std.shape != (linear.in_features,):
        raise DimensionError(f"stats must have length {linear.in_features}")
    wa = linear.weight.T / std[None, :]
    ba = -wa @ mean + linear.bias
    return wa, ba


LAYER_KINDS = {cls.kind: cls for cls in (Linear, Conv2d, ReLU, Flatten, BatchNorm)}


def layer_from_descriptor(desc: dict[str, Any]) -> Layer:
    desc = dict(desc)
    kind = desc.pop("kind")
    name = desc.pop("name")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(name, **desc)


class Model:
    """Ordered stack of uniquely named layers."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        names = [layer.name for layer in layers]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate layer names: {sorted(dupes)}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def bn_layers(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        for layer in self.layers:
            x, _ = layer.forward(x, training)
        return x

    def forward_train(self, x: Tensor) -> tuple[Tensor, list[Cache]]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, True)
            caches.append(cache)
        return x, caches

    def backward(self, grad: Tensor, caches: list[Cache]) -> dict[str, dict[str, Tensor]]:
        grads: dict[str, dict[str, Tensor]] = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, g = layer.backward(grad, cache)
            if g:
                grads[layer.name] = g
        return grads

    def run_range(self, x: Tensor, start: int, stop: int) -> Tensor:
        """Eval-mode pass through ``layers[start:stop]``."""
        for layer in self.layers[start:stop]:
            x, _ = layer.forward(x, False)
        return x

    def activations(self, x: Tensor, names: list[str]) -> dict[str, Tensor]:
        """Eval-mode outputs of the named layers."""
        wanted = set(names)
        missing = wanted - {layer.name for layer in self.layers}
        if missing:
            raise KeyError(f"unknown layers: {sorted(missing)}")
        out = {}
        for layer in self.layers:
            x, _ = layer.forward(x, False)
            if layer.name in wanted:
                out[layer.name] = x
                if len(out) == len(wanted):
                    break
        return out

    def predict(self, x: Tensor, chunk: int = 1024) -> Tensor:
        parts = [self.forward(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        return np.concatenate(parts, axis=0)

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def named_buffers(self) -> dict[str, Tensor]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.buffers().items()}

    def describe(self) -> dict[str, Any]:
        return {"input_shape": list(self.input_shape), "layers": [layer.describe() for layer in self.layers]}

    @classmethod
    def from_descriptor(cls, desc: dict[str, Any]) -> "Model":
        return cls([layer_from_descriptor(d) for d in desc["layers"]], tuple(desc["input_shape"]))


def mlp(in_features: int, classes: int, hidden: tuple[int, ...] = (32, 32), seed: int = 0,
        eps: float = 1e-5, momentum: float = 0.1) -> Model:
    """Linear -> BN -> ReLU blocks followed by a linear classifier."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    width = in_features
    for i, h in enumerate(hidden, start=1):
        layers += [Linear(f"fc{i}", width, h, rng), BatchNorm(f"bn{i}", h, eps, momentum), ReLU(f"relu{i}")]
        width = h
    layers.append(Linear("head", width, classes, rng))
    return Model(layers, (in_features,))


def cnn(in_channels: int, image_size: int, classes: int, channels: tuple[int, int] = (8, 16), seed: int = 0,
        eps: float = 1e-5, momentum: float = 0.1) -> Model:
    """Two conv -> BN -> ReLU blocks (second with stride 2) and a linear head."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers: list[Layer] = [
        Conv2d("conv1", in_channels, c1, 3, 1, rng), BatchNorm("bn1", c1, eps, momentum), ReLU("relu1"),
        Conv2d("conv2", c1, c2, 3, 2, rng), BatchNorm("bn2", c2, eps, momentum), ReLU("relu2"),
        Flatten("flatten"),
    ]
    shape: tuple[int, ...] = (in_channels, image_size, image_size)
    for layer in layers:
        shape = layer.output_shape(shape)
    layers.append(Linear("head", shape[0], classes, rng))
    return Model(layers, (in_channels, image_size, image_size))
