"""Differentiable layers with hand-written backward passes.

Every layer follows the same contract::

    y = layer.forward(x, mode="train")    # caches what backward needs
    dx = layer.backward(dy)               # accumulates into Parameter.grad
    layer.parameters()                    # stable, ordered list of Parameter

Arrays are NCHW. Layers compute in the dtype of their parameters, so a
float64 copy of a network (see :func:`cast_layer`) runs the same code path at
double precision for gradient checking.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import InvalidShapeError

MODES = ("train", "eval")


class CorruptIndexError(ValueError):
    """Raised when unpooling switches point outside their 2x2 window."""


class Parameter:
    """A learnable array and its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)

    def __iter__(self):
        # unpacks as (value, grad)
        yield self.value
        yield self.grad

    @property
    def size(self):
        return self.value.size

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class. Subclasses register ``self.params`` / ``self.buffers``
    dicts and, for containers, ``self.children`` as ``(name, layer)`` pairs."""

    params = {}
    buffers = {}
    children = ()

    def forward(self, x, mode="train"):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, shape):
        return tuple(shape)

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children:
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children:
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def dtype(self):
        for p in self.parameters():
            return p.value.dtype
        return None

    def __repr__(self):
        return f"{type(self).__name__}()"


def cast_layer(layer, dtype):
    """Cast every parameter, gradient and buffer of ``layer`` in place."""
    for p in layer.parameters():
        p.value = p.value.astype(dtype)
        p.grad = p.grad.astype(dtype)
    _cast_buffers(layer, dtype)
    return layer


def _cast_buffers(layer, dtype):
    for name in list(layer.buffers):
        layer.buffers[name] = layer.buffers[name].astype(dtype)
    for _, child in layer.children:
        _cast_buffers(child, dtype)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _same_dtype(x, like):
    x = np.asarray(x)
    if like is not None and x.dtype != like:
        return x.astype(like)
    return x


# -- convolution -------------------------------------------------------------


def _im2col(xp, kh, kw, stride):
    # columns are ordered (kh, kw, C) so the innermost copy runs along
    # channels, which are contiguous in the NHWC view
    n, c = xp.shape[:2]
    nhwc = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(nhwc, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def _weight_matrix(weight):
    """(C_out, C_in, kh, kw) -> (C_out, kh * kw * C_in), matching :func:`_im2col`."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, kh, kw)."""
    out, _ = _conv2d_forward(x, weight, bias, stride, padding)
    return out


def _conv2d_forward(x, weight, bias, stride, padding):
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(
            f"conv expects {weight.shape[1]} input channels, got input {x.shape}")
    co, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise InvalidShapeError(f"input {x.shape} smaller than kernel {kh}x{kw}")
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = cols @ _weight_matrix(weight).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, co).transpose(0, 3, 1, 2))
    return out, cols


def _conv2d_backward(grad, cols, x_shape, weight, stride, padding):
    n, ci, h, w = x_shape
    co, _, kh, kw = weight.shape
    ho, wo = grad.shape[2:]
    gm = grad.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (gm.T @ cols).reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
    db = gm.sum(axis=0)
    if stride == 1 and kh - 1 - padding >= 0 and kw - 1 - padding >= 0:
        # dx is a full correlation of grad with the flipped, transposed kernel
        gp = np.pad(grad, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
        wt = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv2d_forward(gp, wt, None, 1, 0)
        return dx, dw, db
    dcols = (gm @ _weight_matrix(weight)).reshape(n, ho, wo, kh, kw, ci)
    dxp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


class Conv2d(Layer):
    """2-D convolution. ``padding="same"`` keeps H x W at stride 1 for odd kernels."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding="same",
                 bias=True, rng=None, dtype=np.float32):
        if padding == "same":
            if kernel_size % 2 == 0:
                raise ValueError("'same' padding needs an odd kernel size")
            padding = kernel_size // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = np.random.default_rng() if rng is None else rng
        k2 = kernel_size * kernel_size
        self.params = {"weight": Parameter(glorot_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size),
            in_channels * k2, out_channels * k2, dtype))}
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def forward(self, x, mode="train"):
        _check_mode(mode)
        x = _same_dtype(x, self.dtype)
        b = self.params.get("bias")
        out, cols = _conv2d_forward(x, self.params["weight"].value,
                                    None if b is None else b.value, self.stride, self.padding)
        self._cache = (cols, x.shape)
        return out

    def backward(self, grad):
        cols, x_shape = self._cache
        w = self.params["weight"]
        dx, dw, db = _conv2d_backward(grad, cols, x_shape, w.value, self.stride, self.padding)
        w.grad += dw
        if "bias" in self.params:
            self.params["bias"].grad += db
        return dx

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise InvalidShapeError(f"conv expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (n, self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def __repr__(self):
        k = self.kernel_size
        return f"Conv2d({self.in_channels}->{self.out_channels}, {k}x{k})"


class ConvTranspose2(Layer):
    """2x2, stride-2 transposed convolution; doubles H and W.

    ``weight`` has shape (C_in, C_out, 2, 2), so the forward pass is exactly
    the adjoint of ``conv2d(., weight, stride=2)``.
    """

    def __init__(self, in_channels, out_channels, bias=True, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = np.random.default_rng() if rng is None else rng
        self.params = {"weight": Parameter(glorot_uniform(
            rng, (in_channels, out_channels, 2, 2), in_channels * 4, out_channels * 4, dtype))}
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_channels, dtype=dtype))
        self._x = None

    def forward(self, x, mode="train"):
        _check_mode(mode)
        x = _same_dtype(x, self.dtype)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise InvalidShapeError(
                f"transposed conv expects {self.in_channels} channels, got input {x.shape}")
        n, ci, h, w = x.shape
        co = self.out_channels
        xm = x.transpose(0, 2, 3, 1).reshape(-1, ci)
        out = (xm @ self.params["weight"].value.reshape(ci, -1)).reshape(n, h, w, co, 2, 2)
        out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * w)
        if "bias" in self.params:
            out = out + self.params["bias"].value.reshape(1, co, 1, 1)
        self._x = xm, x.shape
        return np.ascontiguousarray(out)

    def backward(self, grad):
        xm, (n, ci, h, w) = self._x
        co = self.out_channels
        gm = grad.reshape(n, co, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, -1)
        wgt = self.params["weight"]
        wgt.grad += (xm.T @ gm).reshape(wgt.shape)
        if "bias" in self.params:
            self.params["bias"].grad += grad.sum(axis=(0, 2, 3))
        dx = gm @ wgt.value.reshape(ci, -1).T
        return np.ascontiguousarray(dx.reshape(n, h, w, ci).transpose(0, 3, 1, 2))

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise InvalidShapeError(f"transposed conv expects {self.in_channels} channels, got {c}")
        return (n, self.out_channels, 2 * h, 2 * w)

    def __repr__(self):
        return f"ConvTranspose2({self.in_channels}->{self.out_channels})"


class FullyConnected(Layer):
    """``y = W x`` on channel vectors; W has shape (out, in). No bias by default.

    Accepts ``(N, C)`` or ``(N, C, 1, 1)`` input and returns the same rank.
    """

    def __init__(self, in_features, out_features, bias=False, rng=None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        rng = np.random.default_rng() if rng is None else rng
        self.params = {"weight": Parameter(glorot_uniform(
            rng, (out_features, in_features), in_features, out_features, dtype))}
        if bias:
            self.params["bias"] = Parameter(np.zeros(out_features, dtype=dtype))
        self._cache = None

    def forward(self, x, mode="train"):
        _check_mode(mode)
        x = _same_dtype(x, self.dtype)
        shape = x.shape
        x2 = x.reshape(shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
        if x2.shape[1] != self.in_features:
            raise InvalidShapeError(
                f"fully connected expects {self.in_features} features, got input {shape}")
        y = x2 @ self.params["weight"].value.T
        if "bias" in self.params:
            y = y + self.params["bias"].value
        self._cache = (x2, shape)
        return y.reshape(self.output_shape(shape))

    def backward(self, grad):
        x2, shape = self._cache
        g2 = grad.reshape(x2.shape[0], self.out_features)
        w = self.params["weight"]
        w.grad += g2.T @ x2
        if "bias" in self.params:
            self.params["bias"].grad += g2.sum(axis=0)
        return (g2 @ w.value).reshape(shape)

    def output_shape(self, shape):
        if len(shape) == 1:
            return (self.out_features,)
        return (shape[0], self.out_features) + tuple(shape[2:])

    def __repr__(self):
        return f"FullyConnected({self.in_features}->{self.out_features})"


# -- activations -------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def softmax_channels(x):
    """Softmax over axis 1, shifted by the per-pixel maximum."""
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class ReLU(Layer):
    def forward(self, x, mode="train"):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * self._mask


class Sigmoid(Layer):
    def forward(self, x, mode="train"):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        y = self._y
        return grad * y * (1 - y)


class Softmax(Layer):
    def forward(self, x, mode="train"):
        self._p = softmax_channels(x)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))


# -- normalization -----------------------------------------------------------


class BatchNorm2d(Layer):
    """Per-channel batch normalization with learnable affine (gamma, beta)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": Parameter(np.ones(channels, dtype=dtype)),
                       "beta": Parameter(np.zeros(channels, dtype=dtype))}
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}
        self._cache = None

    def forward(self, x, mode="train"):
        _check_mode(mode)
        x = _same_dtype(x, self.dtype)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise InvalidShapeError(f"batch norm expects {self.channels} channels, got {x.shape}")
        gamma = self.params["gamma"].value.reshape(1, -1, 1, 1)
        beta = self.params["beta"].value.reshape(1, -1, 1, 1)
        if mode == "train":
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise InvalidShapeError(
                    f"train-mode batch norm needs >= 2 values per channel, got {x.shape}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"]
                                            + mom * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"]
                                           + mom * var * (m / (m - 1))).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std, mode)
        return gamma * xhat + beta

    def backward(self, grad):
        xhat, inv_std, mode = self._cache
        gamma = self.params["gamma"]
        self.params["beta"].grad += grad.sum(axis=(0, 2, 3))
        gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
        dxhat = grad * gamma.value.reshape(1, -1, 1, 1)
        inv = inv_std.reshape(1, -1, 1, 1)
        if mode == "eval":
            return dxhat * inv
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv * (dxhat - s1 / m - xhat * s2 / m)

    def __repr__(self):
        return f"BatchNorm2d({self.channels})"


# -- pooling -----------------------------------------------------------------


def max_pool2(x):
    """2x2 / stride-2 max pooling.

    Returns ``(pooled, indices)`` where ``indices`` holds the row-major position
    of each maximum inside its window (0..3; 3 is the bottom-right cell).
    Ties resolve to the first position.
    """
    x = np.asarray(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidShapeError(f"max_pool2 needs even spatial extents, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    pooled = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return pooled, idx


def max_unpool2(x, indices):
    """Scatter ``x`` to the positions recorded by :func:`max_pool2`; zeros elsewhere.

    Channel ``c`` of ``x`` uses the switches of channel ``c mod C_idx``, which
    lets a decoder unpool a stream whose channel count differs from the
    encoder's (e.g. after a concatenating SE block).
    """
    x = np.asarray(x)
    indices = np.asarray(indices)
    n, c, h, w = x.shape
    if indices.shape[0] != n or indices.shape[2:] != (h, w):
        raise InvalidShapeError(f"switches {indices.shape} do not match input {x.shape}")
    if indices.size and (indices.min() < 0 or indices.max() > 3):
        raise CorruptIndexError("unpooling index outside the 2x2 window")
    idx = _match_switch_channels(indices, c)
    onehot = idx[..., None] == np.arange(4)
    out = np.where(onehot, x[..., None], 0).astype(x.dtype)
    return out.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h, 2 * w)


def _match_switch_channels(indices, c):
    ci = indices.shape[1]
    if ci == c:
        return indices
    return indices[:, np.arange(c) % ci]


def _gather_windows(grad, indices):
    n, c, h2, w2 = grad.shape
    win = grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h2 // 2, w2 // 2, 4)
    idx = _match_switch_channels(indices, c).astype(np.intp)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


class MaxPool2(Layer):
    """Max pooling layer; keeps its switches in ``self.indices`` for a paired unpool."""

    def __init__(self):
        self.indices = None

    def forward(self, x, mode="train"):
        out, self.indices = max_pool2(x)
        return out

    def backward(self, grad):
        return max_unpool2(grad, self.indices)

    def output_shape(self, shape):
        n, c, h, w = shape
        if h % 2 or w % 2:
            raise InvalidShapeError(f"max_pool2 needs even spatial extents, got {shape}")
        return (n, c, h // 2, w // 2)


class MaxUnpool2(Layer):
    """Unpooling that reads the switches of its paired :class:`MaxPool2`."""

    def __init__(self, pool):
        self.pool = pool

    def forward(self, x, mode="train"):
        self._indices = self.pool.indices
        return max_unpool2(x, self._indices)

    def backward(self, grad):
        return _gather_windows(grad, self._indices)

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, 2 * h, 2 * w)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)
        self.children = [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return "Sequential(" + ", ".join(map(repr, self.layers)) + ")"
