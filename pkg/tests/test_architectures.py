import itertools

import numpy as np
import pytest

from sefcn.architectures import FAMILIES, POSITIONS, ConfigurationError, DenseBlock, \
    InputSizeError, NetworkSpec, assemble_network, build_block, count_parameters, se_sites
from sefcn.layers import BatchNorm2d, Conv2d, ReLU
from sefcn.losses import combined_loss
from sefcn.se import AGGREGATIONS, SEConfig, se_param_count
from sefcn.tensor import InvalidShapeError


def spec(**kw):
    base = dict(family="sdnet", channels=8, num_classes=3)
    base.update(kw)
    return NetworkSpec(**base)


def layer_summary(seq):
    out = []
    for layer in seq:
        if isinstance(layer, Conv2d):
            out.append(f"conv{layer.kernel_size}({layer.in_channels}->{layer.out_channels})")
        else:
            out.append(type(layer).__name__)
    return out


def test_unet_block_composition():
    assert layer_summary(build_block("unet", "encoder", 1, 64)) == [
        "conv3(1->64)", "ReLU", "conv3(64->64)", "ReLU"]


def test_sdnet_block_composition():
    assert layer_summary(build_block("sdnet", "encoder", 64, 64)) == [
        "conv7(64->64)", "BatchNorm2d", "ReLU"]


def test_fcdensenet_block_channel_arithmetic():
    (blk,) = build_block("fcdensenet", "decoder", 128, 64)
    assert isinstance(blk, DenseBlock)
    convs = [blk.unit1.layers[0], blk.unit2.layers[0], blk.reduce.layers[0]]
    assert [(c.kernel_size, c.in_channels, c.out_channels) for c in convs] == [
        (5, 128, 64), (5, 192, 64), (1, 256, 64)]
    assert blk.output_shape((2, 128, 8, 8)) == (2, 64, 8, 8)


def test_build_block_errors():
    with pytest.raises(ConfigurationError):
        build_block("resnet", "encoder", 1, 8)
    with pytest.raises(ConfigurationError):
        build_block("unet", "classifier", 1, 8)


@pytest.mark.parametrize("position,n_se", [("P1", 4), ("P2", 4), ("P3", 1), ("P4", 1),
                                           ("P5", 8), ("P6", 10)])
def test_se_site_counts(position, n_se):
    net = assemble_network(spec(position=position))
    assert len(net.se_blocks()) == n_se
    sites = se_sites(position)
    for blk in net.blocks:
        assert blk.se_attached == (blk.kind in sites)


@pytest.mark.parametrize("family", FAMILIES)
def test_forward_is_a_distribution(family, rng):
    net = assemble_network(spec(family=family, channels=4))
    probs = net.forward(rng.random((1, 1, 64, 64)), "eval")
    assert probs.shape == (1, 3, 64, 64)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-5)


@pytest.mark.parametrize("family,position", list(itertools.product(FAMILIES, POSITIONS)))
def test_forward_backward_finite(family, position, rng):
    net = assemble_network(spec(family=family, channels=4, position=position))
    x = rng.random((2, 1, 32, 32))
    y = rng.integers(0, 3, (2, 32, 32))
    probs = net.forward(x)
    _, grad = combined_loss(probs, y, np.ones(3), return_grad=True)
    net.zero_grad()
    dx = net.backward(grad)
    assert dx.shape == x.shape and np.all(np.isfinite(dx))
    assert all(np.all(np.isfinite(p.grad)) for p in net.parameters())


@pytest.mark.parametrize("family,position,aggregation,skip", list(itertools.product(
    FAMILIES, POSITIONS, ["maxout", "concatenation"], [1, 2])))
def test_static_shapes_equal_dynamic(family, position, aggregation, skip):
    net = assemble_network(spec(family=family, channels=4, position=position, skip_config=skip,
                                se=SEConfig("scse", 2, aggregation)))
    record = {}
    net.forward(np.zeros((1, 1, 16, 16), np.float32), "eval", record=record)
    static = net.infer_shapes((1, 1, 16, 16))
    assert {k: tuple(v.shape) for k, v in record.items()} == static


@pytest.mark.parametrize("family,position", list(itertools.product(FAMILIES, POSITIONS)))
def test_se_increment_is_exact(family, position):
    counts = {m: count_parameters(assemble_network(spec(family=family, position=position,
                                                        se=SEConfig(m))))
              for m in ("none", "cse", "sse", "scse")}
    n_sites = len(assemble_network(spec(family=family, position=position)).se_blocks())
    for m in ("cse", "sse", "scse"):
        added = counts[m].total - counts["none"].total
        assert added == counts[m].se_total == n_sites * se_param_count(m, 8, 2)
        assert counts[m].base_total == counts["none"].total
    assert counts["scse"].se_total - counts["cse"].se_total == counts["sse"].se_total


def test_c64_p5_increments():
    for family in FAMILIES:
        totals = {m: count_parameters(assemble_network(NetworkSpec(family=family, se=SEConfig(m))))
                  for m in ("cse", "sse", "scse")}
        assert [totals[m].se_total for m in ("cse", "sse", "scse")] == [32768, 512, 33280]


@pytest.mark.parametrize("aggregation", [a for a in AGGREGATIONS if a != "concatenation"])
def test_skip_config_changes_nothing_but_the_tap(aggregation, rng):
    nets = [assemble_network(spec(skip_config=s, se=SEConfig("scse", 2, aggregation)))
            for s in (1, 2)]
    assert count_parameters(nets[0]).total == count_parameters(nets[1]).total
    x = rng.random((1, 1, 16, 16))
    assert nets[0].forward(x, "eval").shape == nets[1].forward(x, "eval").shape


def test_concatenation_skip_tap_changes_decoder_width():
    widths = [count_parameters(assemble_network(spec(skip_config=s, se=SEConfig(
        "scse", 2, "concatenation")))).per_block for s in (1, 2)]
    dec = [{r["block"]: r["in_channels"] for r in w}["decoder4"] for w in widths]
    assert dec == [8 * 2 + 8 * 2, 8 * 2 + 8]


def test_skip_config_two_taps_pre_se(rng):
    net = assemble_network(spec(skip_config=2, se=SEConfig("sse")))
    blk = net.encoders[0]
    seen = {}
    original = net.decoders[-1].layers.forward

    def spy(x, mode="train"):
        seen["x"] = x
        return original(x, mode)

    net.decoders[-1].layers.forward = spy
    x = rng.random((1, 1, 16, 16))
    net.forward(x, "eval")
    pre_se = blk.layers.forward(x, "eval")
    np.testing.assert_allclose(seen["x"][:, 8:], pre_se, rtol=1e-5)


def test_input_size_must_divide(rng):
    net = assemble_network(spec())
    with pytest.raises(InputSizeError, match="divisible"):
        net.forward(rng.random((1, 1, 24, 32)))
    with pytest.raises(InvalidShapeError):
        net.forward(rng.random((1, 2, 16, 16)))


def test_spec_validation_and_roundtrip():
    s = spec(family="unet", position="P6", se=SEConfig("scse", 4, "addition"))
    assert NetworkSpec.from_dict(s.to_dict()) == s
    for bad in ({"family": "vgg"}, {"position": "P7"}, {"skip_config": 3}, {"depth": 0},
                {"num_classes": 1}, {"channels": 6, "se": {"mode": "cse", "r": 4}}):
        with pytest.raises(ValueError):
            NetworkSpec.from_dict({**spec().to_dict(), **bad})
    with pytest.raises(ConfigurationError, match="unknown"):
        NetworkSpec.from_dict({"width": 3})


def test_state_roundtrip_and_mismatch(rng):
    a = assemble_network(spec(), seed=1)
    b = assemble_network(spec(), seed=2)
    a.forward(rng.random((2, 1, 16, 16)))  # move running statistics
    b.load_state([arr for _, arr in a.named_state()])
    x = rng.random((1, 1, 16, 16))
    np.testing.assert_array_equal(a.forward(x, "eval"), b.forward(x, "eval"))
    deeper = assemble_network(spec(depth=3))
    with pytest.raises(InvalidShapeError, match="tensor #"):
        deeper.load_state([arr for _, arr in a.named_state()])


def test_same_seed_same_weights():
    a, b = assemble_network(spec(), seed=5), assemble_network(spec(), seed=5)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))


def test_find_se_ids():
    net = assemble_network(spec(position="P6"))
    assert net.find_se("sE-1") is net.encoders[0]
    assert net.find_se("sD-4") is net.decoders[-1]
    assert net.find_se("sB").kind == "bottleneck" and net.find_se("sC").kind == "classifier"
    assert net.infer_shapes((1, 1, 32, 32))["encoder1"] == (1, 8, 32, 32)
    assert isinstance(net.encoders[0].layers.layers[1], BatchNorm2d)
    assert isinstance(net.encoders[0].layers.layers[2], ReLU)
