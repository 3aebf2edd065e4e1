import numpy as np
import pytest

from lexnet import nn
from lexnet.backbone import (Backbone, BackboneConfig, BlockSpec, block_param_count, lexnet_config,
                             resnet_twin_config)

LEXNET_CUMULATIVE = [88, 3_088, 7_760, 19_520, 38_080]


def test_reference_cumulative_counts():
    bb = Backbone(lexnet_config())
    assert [row[2] for row in bb.cumulative_params()] == LEXNET_CUMULATIVE
    assert bb.count_params() == 38_080
    assert [row[1] for row in bb.cumulative_params()] == [8, 16, 16, 32, 32]


def test_block_counts():
    assert block_param_count(BlockSpec(8, 16)) == 3_000
    assert block_param_count(BlockSpec(16, 16)) == 4_672
    assert block_param_count(BlockSpec(16, 32)) == 11_760
    assert block_param_count(BlockSpec(32, 32)) == 18_560
    assert block_param_count(BlockSpec(8, 16, "standard_res")) == 3_680
    assert block_param_count(BlockSpec(16, 32, "standard_res")) == 14_528


def test_expansion_block_composition():
    # 8 -> 16: conv1 8*8*9, bn 16, depthwise 72, conv2 16*16*9, bn 32
    assert 576 + 16 + 72 + 2304 + 32 == block_param_count(BlockSpec(8, 16))
    bb = Backbone(lexnet_config())
    ghost = bb.blocks[0].ghost.weight
    assert ghost.size == 72


def test_stem_and_bn_counts():
    bb = Backbone(lexnet_config())
    assert sum(p.size for p in bb.stem.params) == 72 + 16
    assert sum(p.size for p in bb.stem.bn.params) == 16


def test_twin_is_larger_at_every_expansion():
    lex, twin = Backbone(lexnet_config()), Backbone(resnet_twin_config())
    assert twin.count_params() > lex.count_params()
    assert twin.config.final_activation == "relu"
    assert lex.config.final_activation == "sigmoid"


def test_config_validation():
    with pytest.raises(ValueError):
        BlockSpec(8, 24)
    with pytest.raises(ValueError):
        BlockSpec(8, 16, "bottleneck")
    with pytest.raises(ValueError):
        BlockSpec(8, 16, stride=2)
    with pytest.raises(ValueError):
        BackboneConfig(stem_channels=8, blocks=(BlockSpec(16, 32),))


def test_config_round_trip():
    for cfg in (lexnet_config(), resnet_twin_config(), lexnet_config((8, 16), stem_channels=4)):
        assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("make", [lexnet_config, resnet_twin_config])
def test_every_layer_keeps_20x2(make):
    bb = Backbone(make())
    x = np.random.default_rng(0).random((4, 1, 20, 2)).astype(np.float32)
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    acts = bb._acts()
    h, _ = bb.stem.forward(h, True, acts[0])
    assert h.shape[1:3] == (20, 2)
    for block, act in zip(bb.blocks, acts[1:]):
        h, _ = block.forward(h, True, act)
        assert h.shape[1:3] == (20, 2)
    assert h.shape == (4, 20, 2, 32)


def test_sigmoid_output_range_and_finiteness():
    bb = Backbone(lexnet_config())
    x = np.random.default_rng(1).random((8, 1, 20, 2)).astype(np.float32)
    z, _ = bb.forward(x, train=True)
    assert np.all(np.isfinite(z))
    assert z.min() >= 0 and z.max() <= 1


def test_inference_needs_statistics():
    bb = Backbone(lexnet_config())
    with pytest.raises(nn.UninitializedStatsError):
        bb.forward(np.zeros((1, 1, 20, 2), np.float32), train=False)


def test_input_shape_checked():
    with pytest.raises(nn.DimensionError):
        Backbone(lexnet_config()).forward(np.zeros((1, 20, 2)), True)


@pytest.mark.parametrize("make", [lexnet_config, resnet_twin_config])
def test_backbone_gradients(make):
    cfg = make(widths=(4, 4, 8, 8), stem_channels=2)
    bb = Backbone(cfg, np.random.default_rng(3), np.float64)
    r = np.random.default_rng(4)
    x = r.random((3, 1, 20, 2))
    proj = r.standard_normal((3, 20, 2, 8))
    z, caches = bb.forward(x, True)
    dx = bb.backward(proj, caches)
    f = lambda: float((bb.forward(x, True)[0] * proj).sum())
    assert nn.finite_diff_check(f, x, dx, eps=1e-6) < 1e-3
    for p in bb.params:
        idx = [tuple(r.integers(0, s) for s in p.data.shape) for _ in range(3)]
        num = nn.numeric_gradient(f, p.data, 1e-6, idx)
        ana = np.array([p.grad[i] for i in idx])
        assert nn.relative_error(ana, np.array([num[i] for i in idx])) < 1e-3, p.name
