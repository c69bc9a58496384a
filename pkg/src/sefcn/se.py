"""Squeeze & excitation recalibration blocks for fully convolutional networks.

* :class:`ChannelSE` (cSE): squeeze spatially by global average pooling,
  excite channels through a bias-free ``C -> C/r -> C`` bottleneck.
* :class:`SpatialSE` (sSE): squeeze channels with a bias-free 1x1 conv,
  excite every pixel.
* :class:`ConcurrentSE` (scSE): run both on the same input and aggregate.
"""
from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, FullyConnected, Layer, ReLU, Sigmoid
from .tensor import InvalidShapeError, concat_channels, global_spatial_mean, \
    scale_channels, scale_spatial

SE_MODES = ("none", "cse", "sse", "scse")
AGGREGATIONS = ("maxout", "addition", "multiplication", "concatenation")


class SEConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SEConfig:
    mode: str = "scse"
    r: int = 2
    aggregation: str = "maxout"

    def __post_init__(self):
        if self.mode not in SE_MODES:
            raise SEConfigError(f"unknown SE mode {self.mode!r}; expected one of {SE_MODES}")
        if not isinstance(self.r, (int, np.integer)) or isinstance(self.r, bool) or self.r < 1:
            raise SEConfigError(f"bottleneck ratio r must be a positive integer, got {self.r!r}")
        if self.aggregation not in AGGREGATIONS:
            raise SEConfigError(
                f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")

    def output_channels(self, channels):
        if self.mode == "scse" and self.aggregation == "concatenation":
            return 2 * channels
        return channels


def se_param_count(mode, channels, r=2):
    """Weights added by one SE block on a ``channels``-wide feature map."""
    if mode == "none":
        return 0
    if mode == "sse":
        return channels
    _check_ratio(channels, r)
    cse = 2 * channels * (channels // r)
    if mode == "cse":
        return cse
    if mode == "scse":
        return cse + channels
    raise SEConfigError(f"unknown SE mode {mode!r}")


def _check_ratio(channels, r):
    if channels % r:
        raise SEConfigError(f"r={r} does not divide the channel count {channels}")


class ChannelSE(Layer):
    def __init__(self, channels, r=2, rng=None, dtype=np.float32):
        _check_ratio(channels, r)
        self.channels = channels
        self.r = r
        rng = np.random.default_rng() if rng is None else rng
        # ``reduce`` is W_2 (C -> C/r), ``expand`` is W_1 (C/r -> C)
        self.reduce = FullyConnected(channels, channels // r, rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.expand = FullyConnected(channels // r, channels, rng=rng, dtype=dtype)
        self.gate = Sigmoid()
        self.children = [("reduce", self.reduce), ("expand", self.expand)]
        self.scale = None

    def forward(self, u, mode="train"):
        if u.ndim != 4 or u.shape[1] != self.channels:
            raise InvalidShapeError(f"cSE built for {self.channels} channels, got {u.shape}")
        z = global_spatial_mean(u)
        s = self.gate.forward(self.expand.forward(self.relu.forward(self.reduce.forward(z))))
        self._u = u
        self.scale = s
        return scale_channels(u, s)

    def backward(self, grad):
        u, s = self._u, self.scale
        grad_s = (grad * u).sum(axis=(2, 3), keepdims=True)
        grad_z = self.reduce.backward(self.relu.backward(
            self.expand.backward(self.gate.backward(grad_s))))
        h, w = u.shape[2:]
        return grad * s + grad_z / (h * w)

    def __repr__(self):
        return f"ChannelSE({self.channels}, r={self.r})"


class SpatialSE(Layer):
    def __init__(self, channels, rng=None, dtype=np.float32):
        self.channels = channels
        self.squeeze = Conv2d(channels, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.gate = Sigmoid()
        self.children = [("squeeze", self.squeeze)]
        self.scale = None

    def forward(self, u, mode="train"):
        if u.ndim != 4 or u.shape[1] != self.channels:
            raise InvalidShapeError(f"sSE built for {self.channels} channels, got {u.shape}")
        m = self.gate.forward(self.squeeze.forward(u, mode))
        self._u = u
        self.scale = m
        return scale_spatial(u, m)

    def backward(self, grad):
        u, m = self._u, self.scale
        grad_m = (grad * u).sum(axis=1, keepdims=True)
        return grad * m + self.squeeze.backward(self.gate.backward(grad_m))

    def __repr__(self):
        return f"SpatialSE({self.channels})"


class ConcurrentSE(Layer):
    def __init__(self, channels, r=2, aggregation="maxout", rng=None, dtype=np.float32):
        if aggregation not in AGGREGATIONS:
            raise SEConfigError(f"unknown aggregation {aggregation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.channels = channels
        self.aggregation = aggregation
        self.cse = ChannelSE(channels, r, rng=rng, dtype=dtype)
        self.sse = SpatialSE(channels, rng=rng, dtype=dtype)
        self.children = [("cse", self.cse), ("sse", self.sse)]

    @property
    def scale(self):
        return self.sse.scale

    def forward(self, u, mode="train"):
        a = self.cse.forward(u, mode)
        b = self.sse.forward(u, mode)
        self._ab = a, b
        agg = self.aggregation
        if agg == "maxout":
            return np.maximum(a, b)
        if agg == "addition":
            return a + b
        if agg == "multiplication":
            return a * b
        return concat_channels(a, b)

    def backward(self, grad):
        a, b = self._ab
        agg = self.aggregation
        if agg == "maxout":
            take_a = a >= b
            ga, gb = grad * take_a, grad * ~take_a
        elif agg == "addition":
            ga = gb = grad
        elif agg == "multiplication":
            ga, gb = grad * b, grad * a
        else:
            ga, gb = grad[:, :self.channels], grad[:, self.channels:]
        return self.cse.backward(ga) + self.sse.backward(gb)

    def output_shape(self, shape):
        if self.aggregation == "concatenation":
            n, c, h, w = shape
            return (n, 2 * c, h, w)
        return tuple(shape)

    def __repr__(self):
        return f"ConcurrentSE({self.channels}, r={self.cse.r}, {self.aggregation})"


def make_se_block(config, channels, rng=None, dtype=np.float32):
    """Instantiate the block described by ``config``; ``None`` for mode "none"."""
    if config.mode == "none":
        return None
    if config.mode == "cse":
        return ChannelSE(channels, config.r, rng=rng, dtype=dtype)
    if config.mode == "sse":
        return SpatialSE(channels, rng=rng, dtype=dtype)
    return ConcurrentSE(channels, config.r, config.aggregation, rng=rng, dtype=dtype)
