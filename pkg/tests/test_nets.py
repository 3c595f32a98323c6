import json

import pytest
import torch
from torch import nn

from mti.nets import (
    REFERENCE_TOTALS,
    NetworkConfig,
    build_discriminator,
    build_unet,
    count_parameters,
    load_generator,
    method_parameter_total,
    save_checkpoint,
)

TOY = NetworkConfig(base_filters=4, depth=2, slice_size=16, dropout_stages=0, disc_filters=8, disc_layers=2)


def test_single_conv_tally():
    # 2 -> 4 channels, 3x3: 2*4*9 weights + 4 biases
    assert count_parameters(nn.Conv2d(2, 4, 3)) == 76


def test_unet_hand_tallies():
    # depth 1: conv 3->4 (112) and deconv 4->3 (111)
    assert count_parameters(build_unet(NetworkConfig(base_filters=4, depth=1, slice_size=8))) == 223
    # depth 2: 112 + (296 + BN 16) + (292 + BN 8) + deconv 8->3 (219)
    net = build_unet(TOY)
    assert count_parameters(net) == 943
    assert count_parameters(net, include_statistics=True) == 943 + 24


def test_discriminator_hand_tally():
    # in 6 channels: 440 + (1168 + 32) + (4640 + 64) + 289
    assert count_parameters(build_discriminator(TOY)) == 6633


def test_multitask_delta():
    st, mt = build_unet(TOY), build_unet(TOY.with_tasks(2))
    assert count_parameters(mt) - count_parameters(st) == 3 * 8 * 9 + 3
    full = NetworkConfig()
    assert method_parameter_total("unet_mt", full) - method_parameter_total("unet_st", full) == 5403


@pytest.mark.parametrize("method", sorted(REFERENCE_TOTALS))
def test_reference_totals(method):
    assert method_parameter_total(method) == REFERENCE_TOTALS[method]


@pytest.mark.parametrize("n_tasks", [1, 2])
def test_forward_shapes_and_range(n_tasks):
    cfg = TOY.with_tasks(n_tasks)
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    y = build_unet(cfg)(x)
    assert y.shape == (2, 3 * n_tasks, 16, 16)
    assert y.abs().max() <= 1
    scores = build_discriminator(cfg)(x, y)
    assert scores.shape[:2] == (2, 1)
    assert (scores >= 0).all() and (scores <= 1).all()


def test_sigmoid_output_and_odd_kernel():
    cfg = NetworkConfig(base_filters=2, depth=3, slice_size=32, kernel_size=5, output_activation="sigmoid")
    y = build_unet(cfg)(torch.zeros(1, 3, 32, 32))
    assert y.shape == (1, 3, 32, 32) and (y >= 0).all()


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(slice_size=100, depth=3)
    with pytest.raises(ValueError):
        NetworkConfig(out_channels=4)
    with pytest.raises(ValueError):
        NetworkConfig(output_activation="relu")
    with pytest.raises(ValueError):
        NetworkConfig(depth=0)


def test_seeded_construction_is_deterministic():
    a, b = build_unet(TOY), build_unet(TOY)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    c = build_unet(NetworkConfig(**{**TOY.__dict__, "seed": 1}))
    assert not torch.equal(next(a.parameters()), next(c.parameters()))


def test_discriminator_is_not_constant():
    disc = build_discriminator(TOY).eval()
    x = torch.rand(2, 3, 16, 16)
    assert not torch.allclose(disc(x, x), disc(x, -x))


def test_checkpoint_round_trip(tmp_path):
    net = build_unet(TOY).eval()
    path = save_checkpoint(net, tmp_path / "g.pt", session="1A/unet_st/fold0")
    back = load_generator(path).eval()
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(net(x), back(x))
    meta = json.loads(path.with_suffix(".json").read_text())
    assert meta["param_count"] == 943 and meta["session"] == "1A/unet_st/fold0"
