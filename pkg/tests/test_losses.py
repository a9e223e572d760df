import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from linedraw.losses import (
    LossBundle,
    LossWeights,
    NonFiniteLoss,
    appearance_loss,
    geometry_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    semantic_loss,
    total_objective,
)


def full(v, shape=(2, 1, 30, 30)):
    return torch.full(shape, float(v))


@pytest.mark.parametrize("real,fake,expected", [(1, 0, 0.0), (0.5, 0.5, 0.5), (0, 1, 2.0)])
def test_lsgan_discriminator(real, fake, expected):
    assert lsgan_discriminator_loss(full(real), full(fake)).item() == pytest.approx(expected)


@pytest.mark.parametrize("fake,expected", [(1, 0.0), (0, 1.0), (0.5, 0.25)])
def test_lsgan_generator(fake, expected):
    assert lsgan_generator_loss(full(fake)).item() == pytest.approx(expected)


def test_lsgan_rejects_nan():
    bad = full(0.0)
    bad[0, 0, 3, 3] = float("nan")
    with pytest.raises(NonFiniteLoss):
        lsgan_generator_loss(bad)
    with pytest.raises(NonFiniteLoss):
        lsgan_discriminator_loss(full(1.0), bad)


def test_geometry_loss_values():
    t = torch.rand(2, 1, 8, 8) * 2 - 1
    assert geometry_loss(t, t).item() == 0.0
    assert geometry_loss(t + 0.5, t).item() == pytest.approx(0.5, abs=1e-6)
    assert geometry_loss(full(-1, (1, 1, 4, 4)), full(1, (1, 1, 4, 4))).item() == pytest.approx(2.0)


def test_geometry_loss_broadcasts_single_channel_target():
    t = torch.rand(2, 1, 8, 8)
    pred = t.expand(-1, 3, -1, -1) + 0.25
    assert geometry_loss(pred, t).item() == pytest.approx(0.25, abs=1e-6)


def test_geometry_loss_shape_mismatch():
    with pytest.raises(ValueError):
        geometry_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4))


def _unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm()


def test_semantic_loss_closed_forms():
    e1 = torch.zeros(1, 512, dtype=torch.float64)
    e2 = torch.zeros(1, 512, dtype=torch.float64)
    e1[0, 0] = 1
    e2[0, 1] = 1
    assert semantic_loss(e1, e1).item() == 0.0
    assert semantic_loss(e1, e2).item() == pytest.approx(2 / 512)
    assert semantic_loss(e1, -e1).item() == pytest.approx(4 / 512)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**31 - 1))
def test_semantic_loss_matches_cosine_identity(dim, seed):
    rng = np.random.default_rng(seed)
    a = _unit(rng.normal(size=dim))[None]
    b = _unit(rng.normal(size=dim))[None]
    cos = float((a * b).sum())
    assert semantic_loss(a, b).item() == pytest.approx(2 * (1 - cos) / dim, rel=1e-9, abs=1e-12)


def test_semantic_loss_dim_mismatch():
    with pytest.raises(ValueError):
        semantic_loss(torch.zeros(1, 512), torch.zeros(1, 256))


def test_appearance_loss():
    a = torch.rand(2, 3, 8, 8) * 2 - 1
    b = torch.rand(2, 3, 8, 8) * 2 - 1
    assert appearance_loss(a, a, b, b).item() == 0.0
    assert appearance_loss(a + 0.1, a, b, b).item() == pytest.approx(0.1, abs=1e-6)
    assert appearance_loss(a + 1.0, a, b - 1.0, b).item() == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(ValueError):
        appearance_loss(a, b[:, :1], b, b)


def test_total_objective_examples():
    bundle = LossBundle(clip=3, geom=2, gan_g=1, cycle=4)
    assert total_objective(bundle, LossWeights()) == pytest.approx(51.4)
    assert total_objective(LossBundle(), LossWeights()) == 0
    assert total_objective(bundle, LossWeights(0, 0, 0, 0)) == 0


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_geom=-1)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 100), min_size=4, max_size=4),
    st.lists(st.floats(0, 20), min_size=4, max_size=4),
    st.sampled_from(["clip", "geom", "gan_g", "cycle"]),
    st.floats(1e-3, 10),
)
def test_total_objective_is_linear_in_each_component(comps, weights, which, delta):
    w = LossWeights(*weights)
    coef = {"clip": w.lambda_clip, "geom": w.lambda_geom, "gan_g": w.lambda_gan, "cycle": w.lambda_cycle}
    base = LossBundle(clip=comps[0], geom=comps[1], gan_g=comps[2], cycle=comps[3])
    bumped = LossBundle(**{**base.as_floats(), which: getattr(base, which) + delta})
    diff = total_objective(bumped, w) - total_objective(base, w)
    assert math.isclose(diff, coef[which] * delta, rel_tol=1e-9, abs_tol=1e-9)
