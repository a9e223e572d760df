import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from linedraw.backbones import StubExtractor
from linedraw.networks import (
    DepthDecoderConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    build_depth_decoder,
    build_discriminator,
    build_generator,
    check_decoder_structure,
    depth_from_drawing,
    patch_output_size,
    receptive_field,
)

# Layer table for G_Geom written out by hand: (type, kernel, stride, in, out).
DECODER_TABLE = [
    ("conv", 7, 1, 768, 512),
    ("convT", 4, 2, 512, 256),
    *[("res", 3, 1, 256, 256)] * 9,
    ("convT", 3, 2, 256, 128),
    ("convT", 3, 2, 128, 64),
    ("convT", 3, 2, 64, 64),
    ("conv", 7, 1, 64, 3),
]


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def test_generator_preserves_size_and_range():
    g = build_generator(GeneratorConfig()).eval()
    x = torch.rand(1, 3, 256, 256) * 2 - 1
    with torch.no_grad():
        y = g(x)
    assert y.shape == x.shape
    assert y.min() >= -1 and y.max() <= 1


def test_generator_is_fully_convolutional():
    g = build_generator(GeneratorConfig(base_channels=8)).eval()
    with torch.no_grad():
        y = g(torch.zeros(1, 3, 512, 512))
    assert y.shape == (1, 3, 512, 512)


@settings(max_examples=8, deadline=None)
@given(st.integers(2, 24), st.integers(2, 24))
def test_generator_size_property(h4, w4):
    g = build_generator(GeneratorConfig(base_channels=4, residual_blocks=1)).eval()
    with torch.no_grad():
        y = g(torch.rand(1, 3, 4 * h4, 4 * w4) * 2 - 1)
    assert y.shape[-2:] == (4 * h4, 4 * w4)
    assert y.abs().max() <= 1


def test_generator_seeded_init():
    a = build_generator(GeneratorConfig(seed=3))
    b = build_generator(GeneratorConfig(seed=3))
    c = build_generator(GeneratorConfig(seed=4))
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_generator_rejects_zero_blocks():
    with pytest.raises(ValueError):
        build_generator(GeneratorConfig(residual_blocks=0))


@pytest.mark.parametrize("side", [256, 128])
def test_discriminator_output_size(side):
    expected = side
    for k, s, p in [(4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1)]:
        expected = conv_out(expected, k, s, p)
    assert expected == {256: 30, 128: 14}[side]
    d = build_discriminator().eval()
    with torch.no_grad():
        out = d(torch.zeros(1, 3, side, side))
    assert out.shape == (1, 1, expected, expected)
    assert patch_output_size(side) == expected


def test_discriminator_receptive_field_is_70():
    assert receptive_field() == 70


def test_discriminator_impulse_probe_marks_70x70():
    d = build_discriminator(DiscriminatorConfig(seed=1)).double().eval()
    x = (torch.rand(1, 3, 256, 256, dtype=torch.float64) * 2 - 1).requires_grad_()
    d(x)[0, 0, 15, 15].backward()
    mask = x.grad.abs().sum(1)[0] > 0
    rows = torch.nonzero(mask.any(1)).flatten()
    cols = torch.nonzero(mask.any(0)).flatten()
    assert rows.max() - rows.min() + 1 == 70
    assert cols.max() - cols.min() + 1 == 70
    # each layer's padding shifts the window by pad * (stride product before it)
    assert rows.min().item() == 15 * 8 - (1 + 2 + 4 + 8 + 8)


def test_decoder_structure_matches_table():
    dec = build_depth_decoder()
    assert dec.structure() == DECODER_TABLE
    check_decoder_structure(dec)
    n_bn = sum(isinstance(m, torch.nn.BatchNorm2d) for m in dec.modules())
    assert n_bn == 6 + 2 * 9


@pytest.mark.parametrize("side,expected", [(14, 224), (16, 256), (4, 64)])
def test_decoder_output_size(side, expected):
    trace = conv_out(side, 7, 1, 3)
    trace = (trace - 1) * 2 - 2 + 4  # 4x4 stride-2 transpose, padding 1
    for _ in range(3):
        trace = (trace - 1) * 2 - 2 + 3 + 1  # 3x3 stride-2 transpose, padding 1, output padding 1
    assert trace == expected
    dec = build_depth_decoder().eval()
    with torch.no_grad():
        out = dec(torch.randn(1, 768, side, side))
    assert out.shape == (1, 3, expected, expected)


def test_decoder_literal_padding_variant():
    dec = build_depth_decoder(DepthDecoderConfig(padding="literal")).eval()
    assert dec.structure() == DECODER_TABLE
    trace = conv_out(14, 7, 1, 4)  # 16
    trace = (trace - 1) * 2 + 4  # 34
    for _ in range(3):
        trace = (trace - 1) * 2 - 2 + 3
    with torch.no_grad():
        out = dec(torch.randn(1, 768, 14, 14))
    assert out.shape[-1] == trace == 265


def test_decoder_zero_features_bounded():
    dec = build_depth_decoder().eval()
    with torch.no_grad():
        out = dec(torch.zeros(2, 768, 14, 14))
    assert torch.isfinite(out).all()
    assert out.abs().max() <= 1


def test_decoder_rejects_wrong_channels():
    with pytest.raises(ValueError):
        build_depth_decoder()(torch.zeros(1, 512, 14, 14))


def test_decoder_structure_check_catches_tampering():
    dec = build_depth_decoder()
    dec.model[0] = torch.nn.Conv2d(768, 512, 5, padding=2)
    with pytest.raises(ValueError):
        check_decoder_structure(dec)


def test_depth_from_drawing_resolution_and_determinism():
    ext = StubExtractor(0)
    dec = build_depth_decoder().eval()
    drawing = torch.rand(1, 3, 256, 256) * 2 - 1
    with torch.no_grad():
        a = depth_from_drawing(drawing, ext, dec)
        b = depth_from_drawing(drawing, ext, dec)
    assert a.shape == (1, 1, 256, 256)
    assert torch.equal(a, b)
    assert a.abs().max() <= 1
    with torch.no_grad():
        c = depth_from_drawing(torch.rand(1, 3, 96, 80) * 2 - 1, ext, dec)
    assert c.shape == (1, 1, 96, 80)


def test_depth_from_drawing_gradient_matches_finite_differences():
    ext = StubExtractor(0).double()
    dec = build_depth_decoder(DepthDecoderConfig(seed=5)).double().eval()
    x = (torch.rand(1, 3, 16, 16, dtype=torch.float64) * 1.6 - 0.8).requires_grad_()
    depth_from_drawing(x, ext, dec).sum().backward()
    grad = x.grad
    assert grad.abs().sum() > 0
    h = 1e-5
    for idx in [(0, 0, 3, 4), (0, 1, 8, 8), (0, 2, 15, 0), (0, 0, 11, 13)]:
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (depth_from_drawing(xp, ext, dec).sum() - depth_from_drawing(xm, ext, dec).sum()) / (2 * h)
        assert abs(fd.item() - grad[idx].item()) <= 1e-4 * max(abs(fd.item()), 1e-6) + 1e-9
