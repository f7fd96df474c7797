import pytest
import torch

from hrcloud.backbone import BasicBlock, FuseLayer, HRBackbone, ResidualUnit, ShapeError, Stem, Transition
from hrcloud.config import BackboneConfig
from oracles import gradient_check

CFG = BackboneConfig(base_width=2, stem_width=4)


def _zero_residual(block):
    for m in block.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.weight)
        if isinstance(m, torch.nn.BatchNorm2d):
            torch.nn.init.zeros_(m.bias)


@pytest.mark.parametrize("side, out", [(352, 88), (32, 8)])
def test_stem_quarter_resolution(side, out):
    stem = Stem(BackboneConfig(stem_width=6))
    y = stem(torch.rand(1, 3, side, side))
    assert y.shape == (1, 6, out, out)


def test_stem_rejects_indivisible():
    with pytest.raises(ShapeError, match="divisible by 32"):
        Stem(CFG)(torch.rand(1, 3, 353, 353))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_basic_block_residual_identity(mode):
    block = BasicBlock(4, 4, CFG)
    _zero_residual(block)
    getattr(block, mode)()
    x = torch.randn(2, 4, 8, 8)
    torch.testing.assert_close(block(x), x, rtol=0, atol=0)


def test_basic_block_shape_and_finiteness():
    block = BasicBlock(5, 4, CFG)
    x = torch.randn(2, 5, 6, 6)
    y = block(x)
    assert y.shape == x.shape and torch.isfinite(y).all()
    with pytest.raises(ShapeError):
        block(torch.randn(2, 3, 6, 6))


def test_residual_unit_formula():
    unit = ResidualUnit(3, CFG).eval()
    x = torch.randn(1, 3, 5, 5)
    ref = x + unit.bn2(unit.conv2(torch.relu(unit.bn1(unit.conv1(x)))))
    torch.testing.assert_close(unit(x), ref)


def test_fusion_single_branch_is_relu():
    fuse = FuseLayer([4], CFG)
    x = torch.randn(1, 4, 8, 8)
    torch.testing.assert_close(fuse([x])[0], torch.relu(x))


def test_fusion_decoupled_when_cross_weights_zero():
    fuse = FuseLayer([2, 4], CFG)
    _zero_residual(fuse)
    h1, h2 = torch.randn(2, 2, 88, 88), torch.randn(2, 4, 44, 44)
    g1, g2 = fuse([h1, h2])
    torch.testing.assert_close(g1, torch.relu(h1))
    torch.testing.assert_close(g2, torch.relu(h2))


def test_fusion_mixes_both_inputs():
    fuse = FuseLayer([2, 4], CFG).eval()
    h1, h2 = torch.randn(1, 2, 88, 88), torch.randn(1, 4, 44, 44)
    g1, g2 = fuse([h1, h2])
    assert g1.shape == h1.shape and g2.shape == h2.shape
    # each output depends on both inputs
    g1b, g2b = fuse([h1, h2 + 1.0])
    assert not torch.equal(g1, g1b)
    g1c, g2c = fuse([h1 + 1.0, h2])
    assert not torch.equal(g2, g2c)
    with pytest.raises(ShapeError):
        fuse([h1])


def test_fusion_formula_two_branches():
    fuse = FuseLayer([2, 4], CFG).eval()
    h1, h2 = torch.randn(1, 2, 8, 8), torch.randn(1, 4, 4, 4)
    t21 = torch.nn.functional.interpolate(fuse.transforms[0][1](h2), size=(8, 8), mode="bilinear", align_corners=False)
    t12 = fuse.transforms[1][0](h1)
    g1, g2 = fuse([h1, h2])
    torch.testing.assert_close(g1, torch.relu(h1 + t21))
    torch.testing.assert_close(g2, torch.relu(h2 + t12))


def test_transition_shapes_and_contract():
    cfg = BackboneConfig(base_width=8)
    assert Transition(8, 16, cfg, level=0)(torch.rand(1, 8, 88, 88)).shape == (1, 16, 44, 44)
    assert Transition(16, 32, cfg, level=1)(torch.rand(1, 16, 44, 44)).shape == (1, 32, 22, 22)
    with pytest.raises(ValueError):
        Transition(64, 128, cfg, level=3)


@pytest.mark.parametrize(
    "side, widths",
    [(352, (18, 36, 72, 144)), (32, (4, 8, 16, 32))],
)
def test_backbone_shapes(side, widths):
    bb = HRBackbone(BackboneConfig(base_width=widths[0], stem_width=16))
    feats = bb(torch.rand(2, 3, side, side))
    expected = [(w, side // 2 ** (k + 2), side // 2 ** (k + 2)) for k, w in enumerate(widths)]
    assert [tuple(f.shape[1:]) for f in feats] == expected


def test_single_resolution_backbone():
    bb = HRBackbone(BackboneConfig(base_width=4, stem_width=8), multi_resolution=False)
    feats = bb(torch.rand(2, 3, 64, 64))
    assert len(feats) == 1 and feats[0].shape == (2, 4, 16, 16)
    assert len(bb.transitions) == 0


def test_parameter_count_is_config_function():
    a = sum(p.numel() for p in HRBackbone(CFG).parameters())
    b = sum(p.numel() for p in HRBackbone(CFG).parameters())
    c = sum(p.numel() for p in HRBackbone(BackboneConfig(base_width=2, stem_width=4, block_units=2)).parameters())
    assert a == b and c < a


def _double(module):
    module.double().train()
    return module


def test_gradients_stem_block_fusion():
    torch.manual_seed(1)
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    stem = _double(Stem(CFG))
    w = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    worst, n = gradient_check(lambda: (stem(x) * w).sum(), stem.parameters())
    assert worst < 1e-5 and n > 0

    block = _double(BasicBlock(3, 2, CFG))
    h = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    w = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    worst, _ = gradient_check(lambda: (block(h) * w).sum(), block.parameters())
    assert worst < 1e-5

    fuse = _double(FuseLayer([2, 4, 8], CFG))
    hs = [torch.randn(2, c, s, s, dtype=torch.float64) for c, s in ((2, 8), (4, 4), (8, 2))]
    ws = [torch.randn_like(t) for t in hs]
    worst, _ = gradient_check(lambda: sum((o * v).sum() for o, v in zip(fuse(hs), ws)), fuse.parameters())
    assert worst < 1e-5


def test_gradients_full_backbone():
    # batch 4 at 64x64 keeps the 2x2 lowest branch's batch statistics well conditioned
    torch.manual_seed(2)
    bb = _double(HRBackbone(BackboneConfig(base_width=2, stem_width=4, block_units=1)))
    x = torch.rand(4, 3, 64, 64, dtype=torch.float64)
    ws = [torch.randn(4, c, s, s, dtype=torch.float64) for c, s in ((2, 16), (4, 8), (8, 4), (16, 2))]

    def loss():
        return sum((f * v).sum() for f, v in zip(bb(x), ws))

    worst, n = gradient_check(loss, bb.parameters(), coords=2)
    assert worst < 1e-5 and n > 200, (worst, n)
