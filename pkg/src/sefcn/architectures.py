"""Encoder/decoder segmentation networks (U-Net, SD-Net, FC-DenseNet flavours)
with SE blocks attachable at six positions.

Positions::

    P1 encoders            P4 classifier input
    P2 decoders            P5 encoders + decoders   (default)
    P3 bottleneck          P6 all of the above

``skip_config`` 1 feeds the recalibrated encoder output to the decoder skip,
``skip_config`` 2 the un-recalibrated one.
"""
import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConvTranspose2, Layer, MaxPool2, MaxUnpool2, \
    ReLU, Sequential, Softmax, cast_layer
from .se import SEConfig, make_se_block, se_param_count
from .tensor import InvalidShapeError

FAMILIES = ("unet", "sdnet", "fcdensenet")
POSITIONS = ("P1", "P2", "P3", "P4", "P5", "P6")
BLOCK_KINDS = ("encoder", "decoder", "bottleneck", "classifier")

_SE_SITES = {
    "P1": {"encoder"},
    "P2": {"decoder"},
    "P3": {"bottleneck"},
    "P4": {"classifier"},
    "P5": {"encoder", "decoder"},
    "P6": {"encoder", "decoder", "bottleneck", "classifier"},
}


class ConfigurationError(ValueError):
    pass


class InputSizeError(InvalidShapeError):
    pass


def se_sites(position):
    if position not in _SE_SITES:
        raise ConfigurationError(f"unknown SE position {position!r}; expected one of {POSITIONS}")
    return _SE_SITES[position]


@dataclass
class NetworkSpec:
    family: str = "sdnet"
    depth: int = 4
    channels: int = 64
    num_classes: int = 2
    in_channels: int = 1
    se: SEConfig = field(default_factory=SEConfig)
    position: str = "P5"
    skip_config: int = 1

    def __post_init__(self):
        if isinstance(self.se, dict):
            self.se = SEConfig(**self.se)
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unsupported family {self.family!r}; expected one of {FAMILIES}")
        for name in ("depth", "channels", "num_classes", "in_channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        se_sites(self.position)
        if self.skip_config not in (1, 2):
            raise ConfigurationError(f"skip_config must be 1 or 2, got {self.skip_config!r}")
        if self.se.mode in ("cse", "scse") and self.channels % self.se.r:
            raise ConfigurationError(
                f"r={self.se.r} does not divide the block width {self.channels}")

    def to_dict(self):
        d = asdict(self)
        d["se"] = asdict(self.se)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network keys: {sorted(unknown)}")
        d = dict(d)
        if "se" in d:
            se = d["se"]
            if isinstance(se, dict):
                unknown = set(se) - {"mode", "r", "aggregation"}
                if unknown:
                    raise ConfigurationError(f"unknown se keys: {sorted(unknown)}")
                d["se"] = SEConfig(**se)
        return cls(**d)


@dataclass
class BlockDescriptor:
    kind: str
    index: int
    layers: Sequential
    se: Layer = None
    in_channels: int = 0
    out_channels: int = 0

    @property
    def se_attached(self):
        return self.se is not None

    @property
    def name(self):
        if self.kind in ("bottleneck", "classifier"):
            return self.kind
        return f"{self.kind}{self.index}"

    @property
    def se_id(self):
        """Short id used for excitation dumps: sE-k, sD-k, sB, sC."""
        return {"encoder": f"sE-{self.index}", "decoder": f"sD-{self.index}",
                "bottleneck": "sB", "classifier": "sC"}[self.kind]

    @property
    def stream_channels(self):
        """Channels leaving the block after SE (doubled by concatenation)."""
        if self.se is not None and self.kind != "classifier":
            return self.se.output_shape((1, self.out_channels, 1, 1))[1]
        return self.out_channels


class DenseBlock(Layer):
    """Two 5x5 conv units with dense connectivity, then a 1x1 reduction.

    Each unit is conv -> batch-norm -> ReLU; every unit sees the
    concatenation of the block input and all previous unit outputs.
    """

    def __init__(self, in_channels, out_channels, growth=None, rng=None, dtype=np.float32):
        growth = out_channels if growth is None else growth
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.unit1 = Sequential(Conv2d(in_channels, growth, 5, rng=rng, dtype=dtype),
                                BatchNorm2d(growth, dtype=dtype), ReLU())
        self.unit2 = Sequential(Conv2d(in_channels + growth, growth, 5, rng=rng, dtype=dtype),
                                BatchNorm2d(growth, dtype=dtype), ReLU())
        self.reduce = Sequential(Conv2d(in_channels + 2 * growth, out_channels, 1,
                                        rng=rng, dtype=dtype),
                                 BatchNorm2d(out_channels, dtype=dtype), ReLU())
        self.children = [("unit1", self.unit1), ("unit2", self.unit2), ("reduce", self.reduce)]
        self.growth = growth

    def forward(self, x, mode="train"):
        x = np.asarray(x)
        h1 = self.unit1.forward(x, mode)
        c1 = np.concatenate([x, h1], axis=1)
        h2 = self.unit2.forward(c1, mode)
        c2 = np.concatenate([c1, h2], axis=1)
        return self.reduce.forward(c2, mode)

    def backward(self, grad):
        g2 = self.reduce.backward(grad)
        split = self.in_channels + self.growth
        g1 = g2[:, :split] + self.unit2.backward(g2[:, split:])
        return g1[:, :self.in_channels] + self.unit1.backward(g1[:, self.in_channels:])

    def output_shape(self, shape):
        n, c, h, w = shape
        s1 = self.unit1.output_shape(shape)
        s2 = self.unit2.output_shape((n, c + s1[1], h, w))
        return self.reduce.output_shape((n, c + s1[1] + s2[1], h, w))

    def __repr__(self):
        return (f"DenseBlock({self.in_channels}: conv5x5->{self.growth} ++ input, "
                f"conv5x5->{self.growth} ++ previous, conv1x1->{self.out_channels})")


def build_block(family, kind, in_channels, out_channels, rng=None, dtype=np.float32):
    """Layer composition of one encoder/decoder/bottleneck block."""
    if kind not in ("encoder", "decoder", "bottleneck"):
        raise ConfigurationError(f"unsupported block kind {kind!r}")
    if family == "unet":
        return Sequential(Conv2d(in_channels, out_channels, 3, rng=rng, dtype=dtype), ReLU(),
                          Conv2d(out_channels, out_channels, 3, rng=rng, dtype=dtype), ReLU())
    if family == "sdnet":
        return Sequential(Conv2d(in_channels, out_channels, 7, rng=rng, dtype=dtype),
                          BatchNorm2d(out_channels, dtype=dtype), ReLU())
    if family == "fcdensenet":
        return Sequential(DenseBlock(in_channels, out_channels, rng=rng, dtype=dtype))
    raise ConfigurationError(f"unsupported family {family!r}")


class SegmentationNetwork(Layer):
    """Assembled encoder / bottleneck / decoder / classifier network.

    ``forward`` returns per-pixel class probabilities (softmax over channels);
    ``backward`` takes the gradient of the loss w.r.t. those probabilities.
    """

    def __init__(self, spec, seed=0, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        sites = se_sites(spec.position)
        c = spec.channels

        def se_for(kind, width):
            return make_se_block(spec.se, width, rng=rng, dtype=dtype) if kind in sites else None

        self.encoders, self.pools = [], []
        stream = spec.in_channels
        skip_widths = []
        for k in range(1, spec.depth + 1):
            blk = BlockDescriptor("encoder", k, build_block(spec.family, "encoder", stream, c,
                                                            rng=rng, dtype=dtype),
                                  se_for("encoder", c), stream, c)
            self.encoders.append(blk)
            self.pools.append(MaxPool2())
            stream = blk.stream_channels
            skip_widths.append(stream if spec.skip_config == 1 else c)

        self.bottleneck = BlockDescriptor(
            "bottleneck", 0, build_block(spec.family, "bottleneck", stream, c, rng=rng, dtype=dtype),
            se_for("bottleneck", c), stream, c)
        stream = self.bottleneck.stream_channels

        self.decoders, self.upsamplers = [], []
        for k in range(1, spec.depth + 1):
            enc_idx = spec.depth - k
            if spec.family == "sdnet":
                up = MaxUnpool2(self.pools[enc_idx])
                up_width = stream
            else:
                up = ConvTranspose2(stream, c, rng=rng, dtype=dtype)
                up_width = c
            self.upsamplers.append(up)
            cin = up_width + skip_widths[enc_idx]
            blk = BlockDescriptor("decoder", k, build_block(spec.family, "decoder", cin, c,
                                                            rng=rng, dtype=dtype),
                                  se_for("decoder", c), cin, c)
            self.decoders.append(blk)
            stream = blk.stream_channels

        # classifier SE recalibrates the map entering the 1x1 conv, not the probabilities
        cls_se = make_se_block(spec.se, stream, rng=rng, dtype=dtype) \
            if "classifier" in sites else None
        cls_in = cls_se.output_shape((1, stream, 1, 1))[1] if cls_se is not None else stream
        self.classifier = BlockDescriptor(
            "classifier", 0, Sequential(Conv2d(cls_in, spec.num_classes, 1, rng=rng, dtype=dtype)),
            cls_se, stream, spec.num_classes)
        self.softmax = Softmax()

        self.children = []
        for blk in self.blocks:
            self.children.append((blk.name, blk.layers))
            if blk.se is not None:
                self.children.append((f"{blk.name}.se", blk.se))
        for k, up in enumerate(self.upsamplers, 1):
            if up.params:
                self.children.append((f"upsample{k}", up))

    # -- structure ----------------------------------------------------------

    @property
    def blocks(self):
        return [*self.encoders, self.bottleneck, *self.decoders, self.classifier]

    def se_blocks(self):
        return [blk for blk in self.blocks if blk.se is not None]

    def find_se(self, se_id):
        for blk in self.blocks:
            if blk.se_id == se_id:
                return blk
        raise KeyError(se_id)

    def astype(self, dtype):
        """Deep copy of the network with every array cast to ``dtype``."""
        return cast_layer(copy.deepcopy(self), dtype)

    def named_state(self):
        """Checkpointed arrays: learnable parameters, then running statistics."""
        state = [(name, p.value) for name, p in self.named_parameters()]
        state += list(self.named_buffers())
        return state

    def load_state(self, arrays):
        """Load arrays in :meth:`named_state` order (in place)."""
        names = self.named_state()
        for i, ((name, ref), arr) in enumerate(zip(names, arrays)):
            if tuple(arr.shape) != tuple(ref.shape):
                raise InvalidShapeError(
                    f"tensor #{i} {name!r}: checkpoint shape {tuple(arr.shape)} "
                    f"!= network shape {tuple(ref.shape)}")
        if len(arrays) != len(names):
            first = names[len(arrays)][0] if len(arrays) < len(names) else "(none)"
            raise InvalidShapeError(
                f"checkpoint holds {len(arrays)} tensors, network needs {len(names)}; "
                f"first unmatched network tensor: {first}")
        dtype = self.dtype
        params = self.parameters()
        for p, arr in zip(params, arrays[:len(params)]):
            p.value = np.array(arr, dtype=dtype)
        self._load_buffers(arrays[len(params):], dtype)

    def _load_buffers(self, arrays, dtype):
        it = iter(arrays)

        def visit(layer):
            for name in layer.buffers:
                layer.buffers[name] = np.array(next(it), dtype=dtype)
            for _, child in layer.children:
                visit(child)

        visit(self)

    # -- shapes -------------------------------------------------------------

    def check_input_shape(self, shape):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise InvalidShapeError(f"network expects {self.spec.in_channels} input channels, got {c}")
        div = 2 ** self.spec.depth
        if h % div or w % div:
            raise InputSizeError(
                f"spatial extent {h}x{w} is not divisible by 2**depth = {div}")

    def infer_shapes(self, shape):
        """Static shape of every block output (after SE) for an input ``shape``."""
        self.check_input_shape(shape)
        shapes = {}
        skips = []
        s = tuple(shape)
        for blk, pool in zip(self.encoders, self.pools):
            u = blk.layers.output_shape(s)
            uh = blk.se.output_shape(u) if blk.se is not None else u
            shapes[blk.name] = uh
            skips.append(uh if self.spec.skip_config == 1 else u)
            s = pool.output_shape(uh)
        u = self.bottleneck.layers.output_shape(s)
        s = self.bottleneck.se.output_shape(u) if self.bottleneck.se is not None else u
        shapes["bottleneck"] = s
        for k, (blk, up) in enumerate(zip(self.decoders, self.upsamplers)):
            s = up.output_shape(s)
            skip = skips[self.spec.depth - 1 - k]
            s = (s[0], s[1] + skip[1], s[2], s[3])
            u = blk.layers.output_shape(s)
            s = blk.se.output_shape(u) if blk.se is not None else u
            shapes[blk.name] = s
        if self.classifier.se is not None:
            s = self.classifier.se.output_shape(s)
        shapes["classifier"] = self.classifier.layers.output_shape(s)
        return shapes

    # -- passes -------------------------------------------------------------

    def forward(self, x, mode="train", record=None):
        """Run the network. ``record`` (a dict) receives every block's output."""
        x = np.asarray(x)
        if x.ndim != 4:
            raise InvalidShapeError(f"network input must be (N, C, H, W), got {x.shape}")
        self.check_input_shape(x.shape)
        x = x.astype(self.dtype, copy=False)
        skips = []
        h = x
        for blk, pool in zip(self.encoders, self.pools):
            u = blk.layers.forward(h, mode)
            uh = blk.se.forward(u, mode) if blk.se is not None else u
            skips.append(uh if self.spec.skip_config == 1 else u)
            if record is not None:
                record[blk.name] = uh
            h = pool.forward(uh, mode)
        h = self._run_block(self.bottleneck, h, mode, record)
        self._skip_widths = []
        for k, (blk, up) in enumerate(zip(self.decoders, self.upsamplers)):
            upsampled = up.forward(h, mode)
            skip = skips[self.spec.depth - 1 - k]
            self._skip_widths.append(upsampled.shape[1])
            h = self._run_block(blk, np.concatenate([upsampled, skip], axis=1), mode, record)
        if self.classifier.se is not None:
            h = self.classifier.se.forward(h, mode)
        logits = self.classifier.layers.forward(h, mode)
        if record is not None:
            record["classifier"] = logits
        return self.softmax.forward(logits, mode)

    @staticmethod
    def _run_block(blk, h, mode, record):
        u = blk.layers.forward(h, mode)
        out = blk.se.forward(u, mode) if blk.se is not None else u
        if record is not None:
            record[blk.name] = out
        return out

    def backward(self, grad):
        g = self.classifier.layers.backward(self.softmax.backward(grad))
        if self.classifier.se is not None:
            g = self.classifier.se.backward(g)
        depth = self.spec.depth
        skip_grads = [None] * depth
        for k in reversed(range(depth)):
            blk, up = self.decoders[k], self.upsamplers[k]
            if blk.se is not None:
                g = blk.se.backward(g)
            g = blk.layers.backward(g)
            split = self._skip_widths[k]
            skip_grads[depth - 1 - k] = g[:, split:]
            g = up.backward(g[:, :split])
        if self.bottleneck.se is not None:
            g = self.bottleneck.se.backward(g)
        g = self.bottleneck.layers.backward(g)
        for k in reversed(range(depth)):
            blk, pool = self.encoders[k], self.pools[k]
            g = pool.backward(g)
            if self.spec.skip_config == 1 or blk.se is None:
                g = g + skip_grads[k]
                if blk.se is not None:
                    g = blk.se.backward(g)
            else:
                g = blk.se.backward(g) + skip_grads[k]
            g = blk.layers.backward(g)
        return g

    def __repr__(self):
        s = self.spec
        return (f"SegmentationNetwork({s.family}, depth={s.depth}, C={s.channels}, "
                f"se={s.se.mode}/{s.position})")


def assemble_network(spec, seed=0, dtype=np.float32):
    return SegmentationNetwork(spec, seed=seed, dtype=dtype)


@dataclass
class ParameterCount:
    total: int
    se_total: int
    per_block: list

    @property
    def base_total(self):
        return self.total - self.se_total

    @property
    def percentage(self):
        return 100.0 * self.se_total / self.base_total if self.base_total else 0.0


def count_parameters(network):
    """Parameter totals, per-block breakdown and SE overhead of ``network``."""
    spec = network.spec
    per_block = []
    se_total = 0
    for blk in network.blocks:
        body = sum(p.size for p in blk.layers.parameters())
        se_actual = sum(p.size for p in blk.se.parameters()) if blk.se is not None else 0
        se_formula = se_param_count(spec.se.mode, blk.se.channels, spec.se.r) \
            if blk.se is not None else 0
        assert se_actual == se_formula, (blk.name, se_actual, se_formula)
        se_total += se_formula
        per_block.append({"block": blk.name, "in_channels": blk.in_channels,
                          "out_channels": blk.stream_channels, "params": body,
                          "se_params": se_formula})
    for k, up in enumerate(network.upsamplers, 1):
        n = sum(p.size for p in up.parameters())
        if n:
            per_block.append({"block": f"upsample{k}", "in_channels": up.in_channels,
                              "out_channels": up.out_channels, "params": n, "se_params": 0})
    total = sum(p.size for p in network.parameters())
    return ParameterCount(total=total, se_total=se_total, per_block=per_block)
