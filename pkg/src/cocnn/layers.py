"""Non-convolution ops (functional form) and the layer objects networks are built from.

Layers follow a small protocol: ``forward(x, train)`` caches what backward
needs, ``backward(grad)`` stores parameter gradients in ``self.grads`` and
returns the input gradient, and ``cost(shape, prefix)`` does static shape
propagation for the cost model without touching any data.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import coconv as _coconv
from . import conv as _conv
from .coconv import CoConvSpec, CostEntry, count_coconv_cost, count_conv_cost
from .conv import ConvGeometry
from .tensor import GeometryError, ShapeError, conv_output_shape

_KEEP_CACHE = True


@contextlib.contextmanager
def inference_mode():
    """Skip caching activations for backward (forward-only benchmarks, big generators)."""
    global _KEEP_CACHE
    prev, _KEEP_CACHE = _KEEP_CACHE, False
    try:
        yield
    finally:
        _KEEP_CACHE = prev


# ------------------------------------------------------------------ functional

class DegenerateBatchError(ValueError):
    pass


@dataclass
class NormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def batchnorm_apply(x, state: NormState, mode="train", update_stats=True):
    """Batch normalisation over (N, H, W). Returns ``(y, state, cache)``.

    In train mode the running statistics in ``state`` are updated in place
    unless ``update_stats`` is False (used to freeze them for gradient checks).
    """
    c = x.shape[1]
    if state.gamma.shape != (c,):
        raise ShapeError(f"norm state has {state.gamma.shape[0]} channels, input has {c}")
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatchError("batch statistics need at least two values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            mom = state.momentum
            state.running_mean *= 1 - mom
            state.running_mean += mom * mean
            state.running_var *= 1 - mom
            state.running_var += mom * var * (m / (m - 1))
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = xhat * state.gamma.reshape(1, -1, 1, 1) + state.beta.reshape(1, -1, 1, 1)
    return y, state, (xhat, inv_std, state.gamma, mode)


def batchnorm_backward(grad, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, mode = cache
    g_beta = grad.sum(axis=(0, 2, 3))
    g_gamma = (grad * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std).reshape(1, -1, 1, 1)
    if mode == "eval":
        return grad * scale, g_gamma, g_beta
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    gx = scale * (grad - (g_beta / m).reshape(1, -1, 1, 1) - xhat * (g_gamma / m).reshape(1, -1, 1, 1))
    return gx, g_gamma, g_beta


def activation_apply(x, kind="relu", slope=0.2):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, slope * x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad, x, kind="relu", slope=0.2):
    if kind == "relu":
        return grad * (x > 0)
    return np.where(x >= 0, grad, slope * grad)


def pool_apply(x, kind="maxpool", kernel=3, stride=2, padding=1):
    """``kind`` is ``"maxpool"`` or ``"global_avg"``. Returns ``(y, cache)``."""
    if kind == "global_avg":
        return x.mean(axis=(2, 3), keepdims=True), ("global_avg", x.shape)
    if kind != "maxpool":
        raise ValueError(f"unknown pool {kind!r}")
    if padding > kernel // 2:
        raise GeometryError("pool padding larger than half the window")
    geom = ConvGeometry(x.shape[1], x.shape[1], kernel, kernel, stride, padding)
    h_out, w_out = conv_output_shape(x.shape[2:], geom)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    best = None
    arg = np.zeros((x.shape[0], x.shape[1], h_out, w_out), dtype=np.int16)
    for t in range(kernel * kernel):
        i, j = divmod(t, kernel)
        win = xp[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride]
        if best is None:
            best = win.copy()
        else:
            better = win > best
            best[better] = win[better]
            arg[better] = t
    return best, ("maxpool", x.shape, kernel, stride, padding, arg)


def pool_backward(grad, cache):
    if cache[0] == "global_avg":
        n, c, h, w = cache[1]
        return np.broadcast_to(grad / (h * w), (n, c, h, w)).copy()
    _, shape, kernel, stride, padding, arg = cache
    n, c, h, w = shape
    h_out, w_out = grad.shape[2:]
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    for t in range(kernel * kernel):
        i, j = divmod(t, kernel)
        gp[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride] += grad * (arg == t)
    return gp[:, :, padding:padding + h, padding:padding + w]


def upsample_nearest2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(grad):
    n, c, h, w = grad.shape
    return grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def fully_connected(x, weights, bias=None):
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input {x.shape} does not match weights {weights.shape}")
    y = x @ weights
    if bias is not None:
        y = y + bias
    return y


def fully_connected_backward(x, weights, grad):
    return grad @ weights.T, x.T @ grad, grad.sum(axis=0)


def pixel_norm(x, eps=1e-8):
    r = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    return x * r, (x, r)


def pixel_norm_backward(grad, cache):
    x, r = cache
    c = x.shape[1]
    return r * grad - x * r ** 3 * (grad * x).sum(axis=1, keepdims=True) / c


# ---------------------------------------------------------------------- layers

class Layer:
    """Leaf layer: owns ``params``/``grads`` dicts keyed by short names."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.param_shapes: dict[str, tuple] = {}
        self.no_decay: set[str] = set()
        self._cache = None

    def children(self) -> list[Layer]:
        return []

    def named_parameters(self, prefix=""):
        base = f"{prefix}{self.name}" if self.name else prefix.rstrip(".")
        for key in self.param_shapes:
            yield (f"{base}.{key}" if base else key), self, key
        for child in self.children():
            yield from child.named_parameters(f"{base}." if base else "")

    def modules(self):
        yield self
        for child in self.children():
            yield from child.modules()

    def init_params(self, rng, dtype):
        for key, shape in self.param_shapes.items():
            self.params[key] = self._init(key, shape, rng).astype(dtype)
        for child in self.children():
            child.init_params(rng, dtype)

    def _init(self, key, shape, rng):
        return np.zeros(shape)

    def _keep(self, value):
        self._cache = value if _KEEP_CACHE else None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def cost(self, shape, prefix=""):
        return self.output_shape(shape), []

    def param_count(self) -> int:
        return sum(int(np.prod(layer.param_shapes[key])) for _, layer, key in self.named_parameters())


class Conv2d(Layer):
    """Standard/dilated convolution. ``gain`` switches on runtime weight scaling."""

    kind = "conv"

    def __init__(self, name, geom: ConvGeometry, gain: float | None = None):
        super().__init__(name)
        self.geom = geom
        self.param_shapes["weight"] = geom.weight_shape
        if geom.has_bias:
            self.param_shapes["bias"] = (geom.m_out,)
            self.no_decay.add("bias")
        self.fan_in = geom.m_in * geom.k_h * geom.k_w
        self.gain = gain
        self.scale = gain / math.sqrt(self.fan_in) if gain is not None else 1.0

    def _init(self, key, shape, rng):
        if key == "bias":
            return np.zeros(shape)
        if self.gain is not None:
            return rng.standard_normal(shape)
        return rng.normal(0.0, math.sqrt(2.0 / self.fan_in), size=shape)

    def _weight(self):
        w = self.params["weight"]
        return w * w.dtype.type(self.scale) if self.gain is not None else w

    def forward(self, x, train=False):
        w = self._weight()
        self._keep((x, w))
        return _conv.conv2d_forward(x, w, self.params.get("bias"), self.geom)

    def backward(self, grad):
        x, w = self._cache
        gx, gw, gb = _conv.conv2d_backward(x, w, self.geom, grad)
        self.grads["weight"] = gw * self.scale if self.gain is not None else gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx

    def output_shape(self, shape):
        _, h, w = shape
        return (self.geom.m_out, *conv_output_shape((h, w), self.geom))

    def cost(self, shape, prefix=""):
        out = self.output_shape(shape)
        return out, count_conv_cost(self.geom, out[1:], prefix + self.name).breakdown


class CoConv2d(Layer):
    kind = "coconv"

    def __init__(self, name, spec: CoConvSpec, gain: float | None = None):
        super().__init__(name)
        self.spec = spec
        for i in range(spec.n_levels):
            self.param_shapes[f"level{i}.weight"] = spec.level_geometry(i).weight_shape
        if spec.has_bias:
            self.param_shapes["bias"] = (spec.m_out,)
            self.no_decay.add("bias")
        self.fan_in = spec.m_in * spec.k_h * spec.k_w
        self.gain = gain
        self.scale = gain / math.sqrt(self.fan_in) if gain is not None else 1.0

    _init = Conv2d._init

    def _weights(self):
        ws = [self.params[f"level{i}.weight"] for i in range(self.spec.n_levels)]
        if self.gain is not None:
            ws = [w * w.dtype.type(self.scale) for w in ws]
        return ws

    def forward(self, x, train=False):
        ws = self._weights()
        self._keep((x, ws))
        return _coconv.coconv_forward(x, ws, self.spec, self.params.get("bias"))

    def backward(self, grad):
        x, ws = self._cache
        gx, gws, gb = _coconv.coconv_backward(x, ws, self.spec, grad)
        for i, gw in enumerate(gws):
            self.grads[f"level{i}.weight"] = gw * self.scale if self.gain is not None else gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx

    def output_shape(self, shape):
        _, h, w = shape
        return (self.spec.m_out, *self.spec.output_shape((h, w)))

    def cost(self, shape, prefix=""):
        out = self.output_shape(shape)
        return out, count_coconv_cost(self.spec, out[1:], prefix + self.name).breakdown


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, name, channels, momentum=0.1, eps=1e-5, zero_gamma=False):
        super().__init__(name)
        self.channels = channels
        self.param_shapes = {"gamma": (channels,), "beta": (channels,)}
        self.no_decay = {"gamma", "beta"}
        self.momentum, self.eps = momentum, eps
        self.zero_gamma = zero_gamma
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.frozen = False

    def init_params(self, rng, dtype):
        super().init_params(rng, dtype)
        self.running_mean = np.zeros(self.channels, dtype)
        self.running_var = np.ones(self.channels, dtype)

    def _init(self, key, shape, rng):
        if key == "gamma" and not self.zero_gamma:
            return np.ones(shape)
        return np.zeros(shape)

    def state(self) -> NormState:
        return NormState(self.params["gamma"], self.params["beta"], self.running_mean,
                         self.running_var, self.momentum, self.eps)

    def forward(self, x, train=False):
        y, _, cache = batchnorm_apply(x, self.state(), "train" if train else "eval",
                                      update_stats=not self.frozen)
        self._keep(cache)
        return y

    def backward(self, grad):
        gx, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(grad, self._cache)
        return gx

    def cost(self, shape, prefix=""):
        return shape, [CostEntry(prefix + self.name, 2 * self.channels, 0)]


class Activation(Layer):
    kind = "act"

    def __init__(self, name, kind="relu", slope=0.2):
        super().__init__(name)
        self.fn, self.slope = kind, slope

    def forward(self, x, train=False):
        self._keep(x)
        return activation_apply(x, self.fn, self.slope)

    def backward(self, grad):
        return activation_backward(grad, self._cache, self.fn, self.slope)

    def kink_signature(self):
        return None if self._cache is None else (self._cache > 0 if self.fn == "relu" else self._cache >= 0)


class MaxPool2d(Layer):
    kind = "pool"

    def __init__(self, name, kernel=3, stride=2, padding=1):
        super().__init__(name)
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, train=False):
        y, cache = pool_apply(x, "maxpool", self.kernel, self.stride, self.padding)
        self._keep(cache)
        return y

    def backward(self, grad):
        return pool_backward(grad, self._cache)

    def kink_signature(self):
        return None if self._cache is None else self._cache[-1].copy()

    def output_shape(self, shape):
        c, h, w = shape
        g = ConvGeometry(c, c, self.kernel, self.kernel, self.stride, self.padding)
        return (c, *conv_output_shape((h, w), g))


class GlobalAvgPool(Layer):
    """Global average pool fused with flatten: (N, C, H, W) -> (N, C)."""

    kind = "pool"

    def forward(self, x, train=False):
        y, cache = pool_apply(x, "global_avg")
        self._keep(cache)
        return y.reshape(x.shape[0], x.shape[1])

    def backward(self, grad):
        return pool_backward(grad.reshape(*grad.shape, 1, 1), self._cache)

    def output_shape(self, shape):
        return (shape[0],)


class Linear(Layer):
    kind = "fc"

    def __init__(self, name, f_in, f_out, bias=True, gain: float | None = None):
        super().__init__(name)
        self.f_in, self.f_out = f_in, f_out
        self.param_shapes["weight"] = (f_in, f_out)
        if bias:
            self.param_shapes["bias"] = (f_out,)
            self.no_decay.add("bias")
        self.gain = gain
        self.scale = gain / math.sqrt(f_in) if gain is not None else 1.0

    def _init(self, key, shape, rng):
        if key == "bias":
            return np.zeros(shape)
        if self.gain is not None:
            return rng.standard_normal(shape)
        bound = 1.0 / math.sqrt(self.f_in)
        return rng.uniform(-bound, bound, size=shape)

    def forward(self, x, train=False):
        w = self.params["weight"]
        if self.gain is not None:
            w = w * w.dtype.type(self.scale)
        self._keep((x, w))
        return fully_connected(x, w, self.params.get("bias"))

    def backward(self, grad):
        x, w = self._cache
        gx, gw, gb = fully_connected_backward(x, w, grad)
        self.grads["weight"] = gw * self.scale if self.gain is not None else gw
        if "bias" in self.param_shapes:
            self.grads["bias"] = gb
        return gx

    def output_shape(self, shape):
        if tuple(shape) != (self.f_in,):
            raise ShapeError(f"{self.name}: expected ({self.f_in},) features, got {shape}")
        return (self.f_out,)

    def cost(self, shape, prefix=""):
        out = self.output_shape(shape)
        params = self.f_in * self.f_out + (self.f_out if "bias" in self.param_shapes else 0)
        return out, [CostEntry(prefix + self.name, params, self.f_in * self.f_out)]


class Upsample2x(Layer):
    kind = "upsample"

    def forward(self, x, train=False):
        return upsample_nearest2x(x)

    def backward(self, grad):
        return upsample_backward(grad)

    def output_shape(self, shape):
        c, h, w = shape
        return (c, 2 * h, 2 * w)


class PixelNorm(Layer):
    kind = "pixnorm"

    def forward(self, x, train=False):
        y, cache = pixel_norm(x)
        self._keep(cache)
        return y

    def backward(self, grad):
        return pixel_norm_backward(grad, self._cache)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, name, shape):
        super().__init__(name)
        self.shape = tuple(shape)

    def forward(self, x, train=False):
        self._keep(x.shape)
        return x.reshape(x.shape[0], *self.shape)

    def backward(self, grad):
        return grad.reshape(self._cache)

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {shape} to {self.shape}")
        return self.shape


class Sequential(Layer):
    kind = "seq"

    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def cost(self, shape, prefix=""):
        entries = []
        sub = f"{prefix}{self.name}." if self.name else prefix
        for layer in self.layers:
            shape, e = layer.cost(shape, sub)
            entries.extend(e)
        return shape, entries
