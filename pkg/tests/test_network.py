import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from octdenoise.image_core import BScan
from octdenoise.network import (
    NetworkConfig, ResidualBlock, StandardBlock, build_network, count_parameters,
    count_parameters_analytic, denoise, forward, get_weights, load_weights, save_weights, set_weights,
)

SMALL = NetworkConfig(width_scale=1 / 8, levels=3)


@pytest.fixture(scope="module")
def small_net():
    return build_network(SMALL, seed=1)


@pytest.mark.parametrize("c_in, c_out, expected", [(1, 64, 640), (64, 64, 36_928)])
def test_single_conv_counts(c_in, c_out, expected):
    assert count_parameters(nn.Conv2d(c_in, c_out, 3)) == expected


def test_toy_count_matches_hand_sum():
    # width 1/4 -> 16 filters, two levels; 3x3 conv 16->16 = 2320, 1x1 = 272
    layers = [
        160, 2320, 2320,                      # standard block from 1 channel, stride conv
        2320, 2320, 2320, 64, 2320,           # residual block (two convs, projection, two BNs), stride
        2320, 2320,                           # latent block
        2320, 2320, 2320, 64, 2320,           # residual up block, transpose conv
        2320, 2320, 2320,                     # standard up block, transpose conv
        272, 2320, 272, 2320,                 # multi-scale taps
        49,                                   # 1x1 head from 48 channels
    ]
    cfg = NetworkConfig(width_scale=1 / 4, levels=2)
    assert sum(layers) == 40_321
    assert count_parameters(build_network(cfg)) == sum(layers)
    assert count_parameters_analytic(cfg)["trainable"] == sum(layers)


@pytest.mark.parametrize("cfg", [
    NetworkConfig(),
    NetworkConfig(width_scale=0.25),
    NetworkConfig(levels=2, width_scale=0.5),
    NetworkConfig(skip_mode="concat", width_scale=0.25),
    NetworkConfig(kernel=5, width_scale=1 / 8, levels=1),
])
def test_counts_match_analytic(cfg):
    net = build_network(cfg)
    analytic = count_parameters_analytic(cfg)
    assert count_parameters(net) == analytic["trainable"]
    assert count_parameters(net, include_running_stats=True) == analytic["with_running_stats"]


def test_default_count_window():
    n = count_parameters(build_network(NetworkConfig()))
    assert 820_000 <= n <= 1_050_000


def test_graph_order_is_deterministic():
    a = [n for n, _ in build_network(SMALL, 0).named_parameters()]
    b = [n for n, _ in build_network(SMALL, 5).named_parameters()]
    assert a == b


@pytest.mark.parametrize("kw", [dict(width_scale=1 / 32), dict(kernel=4), dict(levels=0),
                                dict(skip_mode="mul"), dict(levels=4)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        NetworkConfig(**kw)


def test_zero_network_outputs_zero():
    net = build_network(SMALL)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = forward(net, torch.rand(2, 1, 32, 24))
    assert torch.count_nonzero(out) == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12))
def test_shape_invariance(small_net, hm, wm):
    x = torch.rand(1, 1, 8 * hm, 8 * wm) * 2 - 1
    out = forward(small_net, x)
    assert out.shape == x.shape
    assert torch.all(out.abs() < 1)


@pytest.mark.parametrize("shape", [(17, 23), (50, 31)])
def test_indivisible_inputs_are_padded(small_net, shape):
    assert forward(small_net, torch.rand(1, 1, *shape)).shape[-2:] == shape


def test_padding_can_be_disabled():
    net = build_network(NetworkConfig(width_scale=1 / 8, levels=2, pad_input=False))
    with pytest.raises(ValueError):
        forward(net, torch.rand(1, 1, 18, 16))


@pytest.mark.parametrize("cls", [StandardBlock, ResidualBlock])
@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_blocks_preserve_dims(cls, dilation):
    block = cls(3, 8, 3, dilation)
    assert block(torch.rand(2, 3, 19, 13)).shape == (2, 8, 19, 13)


@pytest.mark.parametrize("train", [True, False])
def test_zeroed_residual_branch_leaves_projection(train):
    torch.manual_seed(0)
    block = ResidualBlock(4, 8, 3, 2)
    with torch.no_grad():
        block.conv2.weight.zero_()
        block.conv2.bias.zero_()
    block.train(train)
    x = torch.rand(2, 4, 12, 12)
    assert torch.equal(block(x), block.projection(x))


def test_eval_forward_is_pure(small_net):
    x = torch.rand(2, 1, 32, 32)
    a = forward(small_net, x)
    b = forward(small_net, x)
    assert torch.equal(a, b)


def test_weights_roundtrip_bit_identical(tmp_path, small_net):
    save_weights(get_weights(small_net), tmp_path / "w.octw")
    fresh = build_network(SMALL, seed=99)
    load_weights(tmp_path / "w.octw", fresh)
    x = torch.rand(1, 1, 40, 32)
    assert forward(fresh, x).numpy().tobytes() == forward(small_net, x).numpy().tobytes()


def test_load_rejects_wrong_shapes(tmp_path):
    save_weights(get_weights(build_network(SMALL)), tmp_path / "w.octw")
    with pytest.raises(ValueError):
        load_weights(tmp_path / "w.octw", build_network(NetworkConfig(width_scale=0.25, levels=3)))


def test_set_weights_rejects_missing_keys(small_net):
    weights = get_weights(small_net)
    weights.pop(next(iter(weights)))
    with pytest.raises(ValueError):
        set_weights(build_network(SMALL), weights)


def test_denoise_returns_valid_scan(small_net):
    px = np.random.default_rng(0).random((37, 45)).astype(np.float32)
    out = denoise(small_net, BScan(px))
    assert out.shape == (37, 45)
    assert out.meta.kind == "denoised"
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1
    assert out.pixels.tobytes() == denoise(small_net, BScan(px)).pixels.tobytes()


def test_full_size_scan(small_net):
    out = forward(small_net, torch.rand(1, 1, 496, 384))
    assert out.shape == (1, 1, 496, 384)
