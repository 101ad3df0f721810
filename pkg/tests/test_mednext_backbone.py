import numpy as np
import pytest
import torch

from medpeft.checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from medpeft.errors import ArchitectureMismatch, ChannelMismatch, InvalidConfig
from medpeft.mednext_backbone import (
    BlockKind,
    BlockSpec,
    MedNeXtBlock,
    ModelConfig,
    build_backbone,
    count_parameters,
    mednext_s,
    tiny_config,
)

GOLDEN_TINY_TOTAL = 8979  # cfg(in=2, classes=3, base=4, levels=3, 2 blocks/stage)


def tiny():
    return ModelConfig(in_channels=2, n_classes=3, base_channels=4,
                       n_levels=3, blocks_per_stage=2)


# ---- block level ------------------------------------------------------------

def test_block_shapes():
    basic = MedNeXtBlock(BlockSpec(8, 8, BlockKind.BASIC))
    assert basic(torch.randn(1, 8, 16, 16, 16)).shape == (1, 8, 16, 16, 16)
    down = MedNeXtBlock(BlockSpec(8, 16, BlockKind.DOWN))
    assert down(torch.randn(1, 8, 16, 16, 16)).shape == (1, 16, 8, 8, 8)
    assert down(torch.randn(1, 8, 15, 15, 15)).shape == (1, 16, 8, 8, 8)  # ceil
    up = MedNeXtBlock(BlockSpec(16, 8, BlockKind.UP))
    assert up(torch.randn(1, 16, 8, 8, 8)).shape == (1, 8, 16, 16, 16)


def test_block_channel_arithmetic_validated():
    with pytest.raises(InvalidConfig):
        BlockSpec(8, 12, BlockKind.DOWN).validate()
    with pytest.raises(InvalidConfig):
        BlockSpec(8, 8, BlockKind.UP).validate()
    with pytest.raises(InvalidConfig):
        BlockSpec(8, 16, BlockKind.BASIC).validate()


def test_block_channel_mismatch_at_forward():
    basic = MedNeXtBlock(BlockSpec(8, 8, BlockKind.BASIC))
    with pytest.raises(ChannelMismatch):
        basic(torch.randn(1, 4, 8, 8, 8))


def test_zero_inner_weights_reduce_to_residual():
    for spec in (BlockSpec(8, 8, BlockKind.BASIC), BlockSpec(8, 16, BlockKind.DOWN)):
        blk = MedNeXtBlock(spec)
        torch.nn.init.zeros_(blk.expand.weight)
        torch.nn.init.zeros_(blk.expand.bias)
        torch.nn.init.zeros_(blk.compress.weight)
        torch.nn.init.zeros_(blk.compress.bias)
        x = torch.randn(2, 8, 8, 8, 8)
        expect = x if blk.res_proj is None else blk.res_proj(x)
        assert torch.equal(blk(x), expect)


# ---- network level ------------------------------------------------------------

def test_backbone_output_shapes():
    m = build_backbone(tiny())
    assert m(torch.randn(1, 2, 16, 16, 16)).shape == (1, 3, 16, 16, 16)
    big = build_backbone(ModelConfig(in_channels=4, n_classes=4, base_channels=8,
                                     n_levels=4, blocks_per_stage=1))
    assert big(torch.randn(1, 4, 32, 32, 32)).shape == (1, 4, 32, 32, 32)


def test_backbone_invalid_config():
    with pytest.raises(InvalidConfig):
        build_backbone(ModelConfig(kernel_size=4))
    with pytest.raises(InvalidConfig):
        build_backbone(ModelConfig(n_levels=0))
    with pytest.raises(InvalidConfig):
        build_backbone(ModelConfig(spatial_mix="grouped"))


def test_parameter_count_closed_forms():
    conv = torch.nn.Conv3d(4, 32, 1)
    assert sum(p.numel() for p in conv.parameters()) == 4 * 32 + 32 == 160
    dw = torch.nn.Conv3d(32, 32, 3, groups=32)
    assert sum(p.numel() for p in dw.parameters()) == 32 * 27 + 32 == 896


def test_parameter_count_golden_tiny():
    pc = count_parameters(build_backbone(tiny()))
    assert pc.total == GOLDEN_TINY_TOTAL
    assert pc.total == sum(pc.by_submodule.values())


def test_parameter_count_block_closed_form():
    # depthwise basic block at width C: 4C^2 + 33C
    for c in (4, 8, 16):
        blk = MedNeXtBlock(BlockSpec(c, c, BlockKind.BASIC))
        assert sum(p.numel() for p in blk.parameters()) == 4 * c * c + 33 * c


def test_mednext_s_parameter_total():
    total = count_parameters(build_backbone(mednext_s())).total
    assert total == 31_364_804


def test_gradient_reaches_every_parameter():
    torch.manual_seed(0)
    m = build_backbone(tiny())
    out = m(torch.randn(1, 2, 8, 8, 8))
    loss = (out * torch.randn_like(out)).sum()
    loss.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().max() > 0, name


def test_finite_difference_gradients():
    from gradcheck import finite_difference_check

    torch.manual_seed(3)
    m = build_backbone(tiny()).double()
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
    proj = torch.randn(1, 3, 8, 8, 8, dtype=torch.float64)
    finite_difference_check(lambda: (m(x) * proj).sum(), list(m.parameters()),
                            n_checks=20, seed=0)


def test_translation_covariance_with_wrap():
    torch.manual_seed(1)
    cfg = ModelConfig(in_channels=2, n_classes=3, base_channels=4, n_levels=3,
                      blocks_per_stage=2, padding_mode="circular")
    m = build_backbone(cfg).eval()
    shift = 1 << (cfg.n_levels - 1)
    x = torch.randn(1, 2, 16, 16, 16)
    with torch.no_grad():
        y = m(x)
        y_shifted = m(torch.roll(x, shifts=(shift,) * 3, dims=(2, 3, 4)))
    err = (torch.roll(y, shifts=(shift,) * 3, dims=(2, 3, 4)) - y_shifted).abs().max()
    assert err < 1e-4


def test_deep_supervision_flag():
    cfg = ModelConfig(in_channels=2, n_classes=3, base_channels=4, n_levels=3,
                      blocks_per_stage=1, deep_supervision=True)
    m = build_backbone(cfg)
    logits, deep = m(torch.randn(1, 2, 16, 16, 16), return_deep=True)
    assert logits.shape == (1, 3, 16, 16, 16)
    for d in deep:
        assert d.shape[1] == 3


# ---- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    torch.manual_seed(0)
    m = build_backbone(tiny())
    x = torch.randn(1, 2, 16, 16, 16)
    with torch.no_grad():
        before = m(x)
    save_checkpoint(tmp_path / "m.ckpt", m, {"kind": "backbone",
                                             "model_config": tiny().to_dict()})
    m2 = build_backbone(tiny())
    apply_checkpoint(m2, load_checkpoint(tmp_path / "m.ckpt"))
    with torch.no_grad():
        after = m2(x)
    assert torch.equal(before, after)


def test_checkpoint_manifest_contents(tmp_path):
    m = build_backbone(tiny())
    save_checkpoint(tmp_path / "m.ckpt", m, {"kind": "backbone"})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.manifest["format_version"] == 1
    assert ck.manifest["parameter_count"] == GOLDEN_TINY_TOTAL
    assert ck.parameter_count == GOLDEN_TINY_TOTAL
    assert set(ck.manifest["tensor_names"]) == {n for n, _ in m.named_parameters()}


def test_checkpoint_architecture_mismatch(tmp_path):
    m = build_backbone(tiny())
    save_checkpoint(tmp_path / "m.ckpt", m)
    other = build_backbone(ModelConfig(in_channels=2, n_classes=3,
                                       base_channels=8, n_levels=3))
    with pytest.raises(ArchitectureMismatch):
        apply_checkpoint(other, load_checkpoint(tmp_path / "m.ckpt"))
