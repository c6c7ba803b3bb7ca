import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from f3dgs.factors import expand_multi_set
from f3dgs.masking import (MaskSet, apply_mask, apply_mask_backward, binarize_ste, mask_loss,
                           mask_loss_grad, pack_bits, packed_size, prune, ste_backward, unpack_bits)
from f3dgs.renderer import Camera, RasterSettings, render_gaussians
from helpers import fd_grad, random_cp, rel_err


def test_binarize_boundaries():
    tau = 0.01
    assert binarize_ste(np.array([tau]), tau)[0] == 1.0
    assert binarize_ste(np.array([tau - 10]), tau)[0] == 0.0
    assert binarize_ste(np.array([tau + 10]), tau)[0] == 1.0


def test_ste_gradient_is_sigmoid_derivative():
    assert ste_backward(np.array([0.0]), np.array([1.0]))[0] == 0.25
    m = np.array([0.3, -1.2, 2.0])
    sig_sum = lambda: float(np.sum(1 / (1 + np.exp(-m))))
    assert rel_err(ste_backward(m, np.ones(3)), fd_grad(sig_sum, m)) < 1e-4
    assert rel_err(mask_loss_grad(m), fd_grad(lambda: mask_loss(m), m)) < 1e-4


def test_mask_loss_values():
    assert mask_loss(np.zeros((3, 3, 3))) == 13.5
    assert mask_loss(np.full((3, 3, 3), -20.0)) < 27 * 1e-8
    m = np.random.default_rng(0).normal(size=(3, 3, 3))
    direct = sum(1 / (1 + math.exp(-v)) for v in m.reshape(-1))
    assert abs(mask_loss(m) - direct) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20), st.integers(0, 19), st.floats(0.01, 5))
def test_mask_loss_monotone(values, idx, bump):
    m = np.array(values)
    idx %= len(m)
    up = m.copy()
    up[idx] += bump
    assert mask_loss(up) >= mask_loss(m)


def test_pack_alternating_pattern():
    bits = np.array([1, 0] * 4, dtype=np.uint8)
    assert pack_bits(bits) == b"\x55"
    assert packed_size(27) == 4
    assert len(pack_bits(np.ones((3, 3, 3)))) == 4


@pytest.mark.parametrize("n", range(1, 9))
def test_packed_size_formula(n):
    m = np.random.default_rng(n).integers(0, 2, (n, n, n))
    data = pack_bits(m)
    assert len(data) == math.ceil(n**3 / 8)
    np.testing.assert_array_equal(unpack_bits(data, n), m)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_pack_roundtrip_property(n, terms, seed):
    shape = (n, n, n) if terms == 1 else (terms, n, n, n)
    m = np.random.default_rng(seed).integers(0, 2, shape)
    np.testing.assert_array_equal(unpack_bits(pack_bits(m), n, terms), m)


def test_maskset_single_authority_and_freeze():
    with pytest.raises(ValueError):
        MaskSet()
    ms = MaskSet.init([2, 3])
    assert not ms.frozen and ms.values[1].shape == (3, 3, 3)
    assert np.all(ms.flat() == 1)  # 0.1 >= tau
    ms.values[0][0, 0, 0] = -1.0
    fz = ms.freeze()
    assert fz.frozen and fz.values is None
    assert [len(b) for b in fz.bits] == [1, 4]
    np.testing.assert_array_equal(fz.flat(), ms.flat())
    with pytest.raises(ValueError):
        fz.loss()
    with pytest.raises(ValueError):
        MaskSet(bits=[b"\x00"], resolutions=[3])


def _gaussians(seed=0, n=3):
    rng = np.random.default_rng(seed)
    blocks = [random_cp(rng, n, 2), random_cp(rng, 2, 2)]
    e = expand_multi_set(blocks)
    e.opacities = rng.uniform(0, 1, len(e))
    e.sh = rng.normal(0, 0.1, (len(e), 48))
    return e, [b.n for b in blocks]


def test_apply_mask_identity_and_zero():
    e, ns = _gaussians()
    ones = [np.ones((n, n, n)) for n in ns]
    out = apply_mask(e, ones)
    np.testing.assert_array_equal(out.scales, e.scales)
    np.testing.assert_array_equal(out.opacities, e.opacities)
    zeros = apply_mask(e, [np.zeros((n, n, n)) for n in ns])
    assert np.all(zeros.opacities == 0) and np.all(zeros.scales == 0)
    np.testing.assert_array_equal(zeros.positions, e.positions)
    with pytest.raises(ValueError):
        apply_mask(e, [np.ones((2, 2, 2))])


def test_apply_mask_backward_finite_difference():
    rng = np.random.default_rng(1)
    s, o, m = rng.normal(size=(5, 3)), rng.uniform(size=5), rng.uniform(size=5)
    gs, go = rng.normal(size=(5, 3)), rng.normal(size=5)
    f = lambda: float(np.sum(gs * s * m[:, None]) + np.sum(go * o * m))
    a, b, c = apply_mask_backward(s, o, m, gs, go)
    assert rel_err(c, fd_grad(f, m)) < 1e-4
    assert rel_err(a, fd_grad(f, s)) < 1e-4
    assert rel_err(b, fd_grad(f, o)) < 1e-4


def test_prune_counts_popcount_and_opacity():
    e, ns = _gaussians(2)
    rng = np.random.default_rng(3)
    masks = [rng.integers(0, 2, (n, n, n)) for n in ns]
    flat = np.concatenate([m.reshape(-1) for m in masks])
    masked = apply_mask(e, masks)
    out = prune(masked, masks, alpha_min=0.3)
    expected = np.flatnonzero((flat == 1) & (e.opacities >= 0.3))
    assert len(out) == len(expected)
    np.testing.assert_array_equal(out.origin, e.origin[expected])
    untouched = prune(e, [np.ones((n, n, n)) for n in ns], alpha_min=0.0)
    np.testing.assert_array_equal(untouched.positions, e.positions)


def test_pruned_render_matches_masked_render():
    rng = np.random.default_rng(4)
    blocks = [random_cp(rng, 3, 2)]
    for b in blocks:
        b.p_x[:] = np.linspace(-0.6, 0.6, 3)
        b.p_y[:] = np.linspace(-0.5, 0.5, 3)
        b.p_z[:] = np.linspace(-0.3, 0.3, 3)
        for s in (b.s_x, b.s_y, b.s_z):
            s[:] = rng.uniform(0.4, 0.6, s.shape)
    e = expand_multi_set(blocks)
    e.opacities = rng.uniform(0.2, 0.9, len(e))
    e.sh = rng.normal(0, 0.3, (len(e), 48))
    masks = [rng.integers(0, 2, (3, 3, 3))]
    cam = Camera.look_at([0, 0, 4], [0, 0, 0], [0, 1, 0], 40, 40, 32, 32)
    exact = RasterSettings.exact()
    masked = apply_mask(e, masks)
    kept = prune(masked, masks, alpha_min=0.0)
    a = render_gaussians(masked.positions, masked.scales, masked.rotations, masked.sh,
                         masked.opacities, cam, settings=exact).image
    b = render_gaussians(kept.positions, kept.scales, kept.rotations, kept.sh, kept.opacities,
                         cam, settings=exact).image
    assert np.max(np.abs(a - b)) < 1e-6
