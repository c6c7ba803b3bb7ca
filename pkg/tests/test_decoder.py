import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sph_harm_y

from f3dgs.decoder import (C0, OUT_WIDTH, decode, decode_forward, decoder_backward, eval_sh_color,
                           eval_sh_colors, eval_sh_colors_backward, init_decoder, sh_basis,
                           sh_basis_grad)
from helpers import fd_grad, rel_err


def scipy_real_sh(dirs):
    """Real SH from scipy's complex harmonics (Condon-Shortley phase kept)."""
    x, y, z = dirs.T
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    cols = []
    for l in range(4):
        for m in range(-l, l + 1):
            c = sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                cols.append(np.sqrt(2) * c.imag)
            elif m == 0:
                cols.append(c.real)
            else:
                cols.append(np.sqrt(2) * c.real)
    return np.stack(cols, axis=1)


def unit_dirs(rng, m):
    v = rng.normal(size=(m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_sh_basis_matches_scipy():
    dirs = unit_dirs(np.random.default_rng(0), 200)
    assert np.max(np.abs(sh_basis(dirs) - scipy_real_sh(dirs))) < 1e-10


def test_sh_basis_gradient_finite_difference():
    d = unit_dirs(np.random.default_rng(1), 1)[0].copy()
    w = np.random.default_rng(2).normal(size=16)
    num = fd_grad(lambda: float(sh_basis(d[None])[0] @ w), d)
    ana = np.einsum("k,kj->j", w, sh_basis_grad(d[None])[0])
    assert rel_err(ana, num) < 1e-4


def test_degree_zero_color():
    sh = np.zeros(48)
    sh[0:3] = [0.5, -0.5, 0.0]  # basis 0 of each channel
    rgb = eval_sh_color(sh, [0, 0, 1])
    np.testing.assert_allclose(rgb, [0.5 + 0.5 * C0, 0.5 - 0.5 * C0, 0.5])


def test_color_is_clipped():
    sh = np.zeros(48)
    sh[0:3] = [10.0, -10.0, 0.0]
    assert eval_sh_color(sh, [1, 0, 0]).tolist() == [1.0, 0.0, 0.5]


def test_view_direction_checks():
    sh = np.ones(48) * 0.01
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        eval_sh_color(sh, [0, 0, 1.0001])
    assert rec
    with pytest.raises(ValueError):
        eval_sh_color(sh, [0, 0, 1.1])


def test_sh_color_gradients_finite_difference():
    rng = np.random.default_rng(3)
    sh = rng.normal(0, 0.05, (4, 48))
    dirs = unit_dirs(rng, 4)
    w = rng.normal(size=(4, 3))
    gs, gd = eval_sh_colors_backward(sh, dirs, w)
    f = lambda: float(np.sum(w * eval_sh_colors(sh, dirs)))
    assert rel_err(gs, fd_grad(f, sh)) < 1e-4
    assert rel_err(gd, fd_grad(f, dirs)) < 1e-4


def test_decoder_shapes_and_ranges():
    p = init_decoder(8, (128,), seed=0)
    assert [w.shape for w in p.weights] == [(8, 128), (128, OUT_WIDTH)]
    assert p.num_params() == 8 * 128 + 128 + 128 * 49 + 49
    feats = np.random.default_rng(0).normal(size=(100, 8)).astype(np.float32)
    sh, op = decode(feats, p)
    assert sh.shape == (100, 48) and op.shape == (100,)
    assert np.all((op > 0) & (op < 1))
    vm = init_decoder(8, (128, 128), seed=0)
    assert len(vm.weights) == 3


def test_decoder_matches_manual_forward():
    rng = np.random.default_rng(4)
    p = init_decoder(5, (7, 6), seed=1, dtype=np.float64)
    for b in p.biases:
        b[:] = rng.normal(size=b.shape)
    x = rng.normal(size=(3, 5))
    h = np.maximum(x @ p.weights[0] + p.biases[0], 0)
    h = np.maximum(h @ p.weights[1] + p.biases[1], 0)
    out = h @ p.weights[2] + p.biases[2]
    sh, op = decode(x, p)
    np.testing.assert_allclose(sh, out[:, :48], rtol=1e-12)
    np.testing.assert_allclose(op, 1 / (1 + np.exp(-out[:, 48])), rtol=1e-12)


def test_extreme_logits_stay_inside_unit_interval():
    p = init_decoder(2, (4,), seed=0, dtype=np.float64)
    p.biases[-1][48] = 1000.0
    _, op = decode(np.zeros((1, 2)), p)
    assert 0 < op[0] < 1
    p.biases[-1][48] = -1000.0
    _, op = decode(np.zeros((1, 2)), p)
    assert 0 < op[0] < 1


def test_decoder_rejects_wrong_width():
    p = init_decoder(4, seed=0)
    with pytest.raises(ValueError):
        decode(np.zeros((2, 5)), p)


@pytest.mark.parametrize("hidden", [(6,), (5, 4)])
def test_decoder_gradients_finite_difference(hidden):
    rng = np.random.default_rng(5)
    p = init_decoder(3, hidden, seed=2, dtype=np.float64, out_gain=1.0)
    for b in p.biases:
        b[:] = rng.normal(0, 0.5, b.shape)
    x = rng.normal(size=(4, 3))
    w_sh = rng.normal(size=(4, 48))
    w_op = rng.normal(size=4)

    def f():
        sh, op = decode(x, p)
        return float(np.sum(w_sh * sh) + np.sum(w_op * op))

    gx, gp = decoder_backward(x, p, w_sh, w_op)
    assert rel_err(gx, fd_grad(f, x)) < 1e-4
    for name, arr in p.arrays().items():
        assert rel_err(gp.arrays()[name], fd_grad(f, arr)) < 1e-4, name


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_basis_zero_is_constant(x, y, z):
    v = np.array([x, y, z])
    if np.linalg.norm(v) < 1e-3:
        return
    v /= np.linalg.norm(v)
    b = sh_basis(v[None])[0]
    assert b[0] == C0
    # addition theorem: sum of squares per degree is (2l + 1) / (4 pi)
    for l, (lo, hi) in enumerate([(0, 1), (1, 4), (4, 9), (9, 16)]):
        assert abs(np.sum(b[lo:hi] ** 2) - (2 * l + 1) / (4 * np.pi)) < 1e-12


def test_decode_forward_cache_reused_in_backward():
    p = init_decoder(3, seed=0, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(5, 3))
    _, _, cache = decode_forward(x, p)
    g1 = decoder_backward(x, p, np.ones((5, 48)), np.ones(5), cache)[0]
    g2 = decoder_backward(x, p, np.ones((5, 48)), np.ones(5))[0]
    np.testing.assert_array_equal(g1, g2)


def test_even_degrees_are_antipodal_symmetric():
    rng = np.random.default_rng(6)
    sh = rng.normal(0, 0.1, (48,)).reshape(16, 3)
    sh[1:4] = 0
    sh[9:16] = 0  # drop the odd degrees 1 and 3
    dirs = unit_dirs(rng, 10)
    flat = np.broadcast_to(sh.reshape(-1), (10, 48))
    np.testing.assert_allclose(eval_sh_colors(flat, dirs), eval_sh_colors(flat, -dirs), atol=1e-12)


def test_decode_is_row_independent():
    p = init_decoder(4, seed=3, dtype=np.float64)
    x = np.random.default_rng(7).normal(size=(32, 4))
    perm = np.random.default_rng(8).permutation(32)
    sh, op = decode(x, p)
    sh_p, op_p = decode(x[perm], p)
    np.testing.assert_array_equal(sh[perm], sh_p)
    np.testing.assert_array_equal(op[perm], op_p)
