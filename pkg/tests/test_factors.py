import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from f3dgs.factors import (FactorSetCP, FactorSetVM, backprop_expansion, backprop_rotations,
                           backprop_triple_product, expand_block, expand_cp_coordinates,
                           expand_cp_rotations, expand_multi_set, expand_vm_coordinates,
                           expand_vm_features)
from helpers import fd_grad, loop_expand_cp, loop_expand_vm, random_cp, random_vm, rel_err


def test_cp_two_by_two_grid_order():
    b = FactorSetCP.from_coordinates([0.0, 1.0], [10.0, 20.0], [5.0, 6.0], dtype=np.float64)
    pts = expand_cp_coordinates(b)
    assert pts.shape == (8, 3)
    assert pts[0].tolist() == [0, 10, 5]
    assert pts[1].tolist() == [0, 10, 6]  # k fastest
    assert pts[2].tolist() == [0, 20, 5]
    assert pts[7].tolist() == [1, 20, 6]


def test_cp_constant_factors_give_constant_attributes():
    b = FactorSetCP.from_coordinates([0, 1, 2], [0, 1, 2], [0, 1, 2], d=4, scale=8.0,
                                     dtype=np.float64)
    e = expand_block(b)
    assert np.allclose(e.scales, 8.0)
    assert np.allclose(e.features, 1.0)
    assert np.all(e.rotations == [1, 0, 0, 0])


@pytest.mark.parametrize("n,d", [(1, 1), (2, 3), (3, 8), (4, 5)])
def test_cp_expansion_matches_loops_exactly(n, d):
    b = random_cp(np.random.default_rng(n * 10 + d), n, d)
    e = expand_block(b)
    ref = loop_expand_cp(b)
    for key in ("positions", "scales", "rotations", "features"):
        np.testing.assert_array_equal(getattr(e, key), ref[key])


@pytest.mark.parametrize("mode", ["per-term", "shared"])
@pytest.mark.parametrize("n,d", [(1, 2), (2, 3), (4, 8)])
def test_vm_expansion_matches_loops_exactly(mode, n, d):
    b = random_vm(np.random.default_rng(n + d), n, d)
    e = expand_block(b, mode)
    ref = loop_expand_vm(b, mode)
    for key in ("positions", "scales", "rotations", "features"):
        np.testing.assert_array_equal(getattr(e, key), ref[key])


def test_float32_products_stay_exact():
    b = random_cp(np.random.default_rng(3), 3, 4, dtype=np.float32)
    e = expand_block(b)
    ref = loop_expand_cp(b)
    for key in ("positions", "scales", "features"):
        assert getattr(e, key).dtype == np.float32
        np.testing.assert_array_equal(getattr(e, key), ref[key])
    np.testing.assert_allclose(e.rotations, ref["rotations"], atol=1e-6)


def test_vm_per_term_counts_and_origin():
    b = random_vm(np.random.default_rng(0), 3, 2)
    e = expand_block(b, "per-term", block_id=4)
    assert len(e) == 3 * 27
    assert np.all(e.origin[:, 0] == 4)
    assert e.origin[27].tolist() == [4, 0, 0, 0, 1]
    assert expand_vm_features(b, "shared").shape == (27, 2)


def test_vm_lift_reproduces_cp_grid():
    cp = random_cp(np.random.default_rng(1), 3, 2)
    vm = FactorSetVM.from_cp(cp)
    grid = expand_cp_coordinates(cp)
    per_term = expand_vm_coordinates(vm, "per-term").reshape(3, 27, 3)
    for t in range(3):
        np.testing.assert_array_equal(per_term[t], grid)


def test_zero_quaternion_maps_to_identity():
    b = random_cp(np.random.default_rng(2), 2, 1)
    b.q_x[0] = 0.0
    q, raw = expand_cp_rotations(b, return_raw=True)
    assert np.all(q[:4] == [1, 0, 0, 0])
    g = backprop_rotations(raw, np.ones_like(raw))
    assert np.all(g[:4] == 0)


def test_mismatched_coordinate_lengths_rejected():
    with pytest.raises(ValueError):
        FactorSetCP.from_coordinates([0, 1], [0, 1, 2], [0, 1])
    b = random_cp(np.random.default_rng(0), 2, 2)
    arrs = b.arrays()
    arrs["f_y"] = np.ones((2, 3))
    with pytest.raises(ValueError):
        FactorSetCP(**arrs)
    arrs = b.arrays()
    arrs["p_z"] = np.array([0.0, np.nan])
    with pytest.raises(ValueError):
        FactorSetCP(**arrs)


def test_multi_set_offsets_and_width_check():
    rng = np.random.default_rng(5)
    blocks = [random_cp(rng, 2, 3), random_cp(rng, 3, 3)]
    e = expand_multi_set(blocks)
    assert len(e) == 8 + 27
    assert e.extras["offsets"].tolist() == [0, 8, 35]
    assert np.all(e.origin[8:, 0] == 1)
    with pytest.raises(ValueError):
        expand_multi_set([random_cp(rng, 2, 3), random_cp(rng, 2, 4)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_translation_moves_every_position(n, tx, ty, tz):
    b = random_cp(np.random.default_rng(n), n, 1)
    moved = b.copy()
    moved.p_x += tx
    moved.p_y += ty
    moved.p_z += tz
    delta = expand_cp_coordinates(moved) - expand_cp_coordinates(b)
    np.testing.assert_allclose(delta, np.broadcast_to([tx, ty, tz], delta.shape), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.sampled_from(["CP", "per-term", "shared"]))
def test_gaussian_count_matches_definition(n, d, kind):
    rng = np.random.default_rng(n * d)
    if kind == "CP":
        b, mode, expected = random_cp(rng, n, d), "per-term", n**3
    else:
        b, mode = random_vm(rng, n, d), kind
        expected = 3 * n**3 if kind == "per-term" else n**3
    assert len(expand_block(b, mode)) == expected == b.num_gaussians(mode)


# --- adjoints -----------------------------------------------------------------------------


def test_triple_product_adjoint_finite_difference():
    rng = np.random.default_rng(0)
    a, b, c = (rng.normal(size=(3, 4)) for _ in range(3))
    w = rng.normal(size=(27, 4))

    def f():
        return float(np.sum(w * (a[:, None, None] * b[None, :, None] * c[None, None, :]).reshape(27, 4)))

    ga, gb, gc = backprop_triple_product(a, b, c, w)
    assert rel_err(ga, fd_grad(f, a)) < 1e-4
    assert rel_err(gb, fd_grad(f, b)) < 1e-4
    assert rel_err(gc, fd_grad(f, c)) < 1e-4


def _expansion_loss(block, mode, weights):
    e = expand_block(block, mode)
    return sum(float(np.sum(weights[k] * getattr(e, k))) for k in weights)


@pytest.mark.parametrize("kind", ["CP", "per-term", "shared"])
def test_expansion_adjoint_finite_difference(kind):
    rng = np.random.default_rng(7)
    if kind == "CP":
        block, mode = random_cp(rng, 2, 3), "per-term"
    else:
        block, mode = random_vm(rng, 2, 3), kind
    e = expand_block(block, mode)
    weights = {k: rng.normal(size=getattr(e, k).shape)
               for k in ("positions", "scales", "rotations", "features")}
    grads = backprop_expansion(block, weights, mode)
    for name, arr in block.arrays().items():
        num = fd_grad(lambda: _expansion_loss(block, mode, weights), arr)
        assert rel_err(grads[name], num) < 1e-4, name


def test_backprop_rejects_bad_shapes():
    b = random_cp(np.random.default_rng(0), 2, 2)
    with pytest.raises(ValueError):
        backprop_expansion(b, {"positions": np.zeros((7, 3))})
    with pytest.raises(ValueError):
        backprop_expansion(b, {"colors": np.zeros((8, 3))})


def test_zero_upstream_and_scalar_chain_rule():
    b = random_cp(np.random.default_rng(8), 1, 2)
    zero = {k: np.zeros_like(getattr(expand_block(b), k)) for k in ("positions", "scales", "rotations", "features")}
    assert all(np.all(g == 0) for g in backprop_expansion(b, zero).values())
    up = np.array([[0.7, -1.3, 2.0]])
    g = backprop_expansion(b, {"scales": up})
    np.testing.assert_allclose(g["s_x"], up * b.s_y * b.s_z, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_axis_permutation_permutes_gaussians(n, seed):
    rng = np.random.default_rng(seed)
    b = random_cp(rng, n, 2)
    perm = rng.permutation(n)
    moved = b.copy()
    for name in ("p_x", "s_x", "q_x", "f_x"):
        getattr(moved, name)[:] = getattr(b, name)[perm]
    rows = lambda e: sorted(map(tuple, np.concatenate([e.positions, e.scales, e.rotations, e.features], 1)))
    assert rows(expand_block(moved)) == rows(expand_block(b))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1), st.sampled_from([np.float32, np.float64]))
def test_rotations_are_unit_quaternions(n, seed, dtype):
    b = random_cp(np.random.default_rng(seed), n, 1, dtype=dtype)
    q = expand_cp_rotations(b)
    assert np.max(np.abs(np.linalg.norm(q.astype(np.float64), axis=1) - 1)) < 1e-6
