import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsr.exceptions import ConfigurationError, ShapeError
from dynsr.nn.layers import (AvgPool, Conv2d, PixelShuffle, ResBlock, SubPixelConv, Swish,
                             avg_pool, avg_pool_backward, conv2d_backward, conv2d_forward,
                             icnr_init, pixel_shuffle, pixel_unshuffle, resnet_block, swish,
                             swish_backward, to_nchw, to_nhwc, he_normal)
from oracles import central_difference, conv2d_loops


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30)


# -- convolution ----------------------------------------------------------------------
def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv2d_forward(x, w), x)


def test_zero_input_zero_output():
    w = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    assert np.all(conv2d_forward(np.zeros((1, 2, 8, 8)), w) == 0.0)


@pytest.mark.parametrize("groups,k", [(1, 3), (2, 3), (1, 5), (2, 1)])
def test_conv_matches_loop_oracle(groups, k):
    r = np.random.default_rng(k + groups)
    x = r.normal(size=(2, 4, 6, 6))
    w = r.normal(size=(6, 4 // groups, k, k))
    assert _rel_err(conv2d_forward(x, w, groups), conv2d_loops(x, w, groups)) < 1e-6


def test_conv_backward_finite_differences():
    r = np.random.default_rng(1)
    x = r.normal(size=(2, 4, 6, 6))
    w = r.normal(size=(4, 4, 3, 3))
    probe = r.normal(size=(2, 4, 6, 6))
    dx, dw = conv2d_backward(probe, x, w)
    fx = central_difference(lambda: np.sum(probe * conv2d_forward(x, w)), x, 1e-3)
    fw = central_difference(lambda: np.sum(probe * conv2d_forward(x, w)), w, 1e-3)
    assert _rel_err(dx, fx) < 1e-5
    assert _rel_err(dw, fw) < 1e-5


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.sampled_from([1, 3, 5, 7]), groups=st.sampled_from([1, 2]),
       hw=st.integers(4, 9))
def test_conv_backward_randomized_shapes(seed, k, groups, hw):
    r = np.random.default_rng(seed)
    x = r.normal(size=(1, 2 * groups, hw, hw + 1))
    w = r.normal(size=(2 * groups, 2, k, k))
    probe = r.normal(size=(1, 2 * groups, hw, hw + 1))
    dx, dw = conv2d_backward(probe, x, w, groups)
    f = lambda: np.sum(probe * conv2d_forward(x, w, groups))
    assert _rel_err(dx, central_difference(f, x, 1e-4)) < 1e-4
    assert _rel_err(dw, central_difference(f, w, 1e-4)) < 1e-4


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((3, 4, 4)), np.zeros((2, 3, 3, 3)))


def test_conv_groups_must_divide():
    with pytest.raises(ConfigurationError):
        Conv2d(3, 4, 3, groups=2)


# -- activation -----------------------------------------------------------------------
def test_swish_values():
    assert swish(0.0) == 0.0
    assert swish(20.0) == pytest.approx(20.0, abs=1e-7)
    assert swish(1.0) == pytest.approx(0.7310586, abs=1e-6)


def test_swish_backward_finite_differences():
    x = np.linspace(-6, 6, 41)
    fd = (swish(x + 1e-6) - swish(x - 1e-6)) / 2e-6
    assert np.allclose(swish_backward(np.ones_like(x), x), fd, rtol=1e-6, atol=1e-9)


# -- pooling ---------------------------------------------------------------------------
def test_pool_constant_and_shape():
    y = avg_pool(np.full((1, 3, 64, 64), 2.5))
    assert y.shape == (1, 3, 16, 16) and np.all(y == 2.5)


def test_pool_block_mean():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert avg_pool(x)[0, 0, 0, 0] == 7.5


def test_pool_backward_is_adjoint():
    r = np.random.default_rng(2)
    x, dy = r.normal(size=(2, 3, 8, 8)), r.normal(size=(2, 3, 2, 2))
    assert np.sum(avg_pool(x) * dy) == pytest.approx(np.sum(x * avg_pool_backward(dy)), rel=1e-12)


def test_pool_rejects_indivisible():
    with pytest.raises(ShapeError):
        avg_pool(np.zeros((1, 1, 6, 6)))


# -- pixel shuffle ----------------------------------------------------------------------
def test_shuffle_r1_identity():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    assert np.array_equal(pixel_shuffle(x, 1), x)


def test_shuffle_shape_rule():
    assert pixel_shuffle(np.zeros((1, 32, 16, 16)), 4).shape == (1, 2, 64, 64)


def test_shuffle_two_by_two():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    assert np.array_equal(pixel_shuffle(x, 2)[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_shuffle_index_formula():
    r, c, hgt, wid = 3, 2, 4, 5
    x = np.random.default_rng(3).normal(size=(1, c * r * r, hgt, wid))
    y = pixel_shuffle(x, r)
    for ch in range(c):
        for i in range(hgt):
            for j in range(wid):
                for a in range(r):
                    for b in range(r):
                        assert y[0, ch, r * i + a, r * j + b] == x[0, ch * r * r + a * r + b, i, j]


def test_unshuffle_inverts_shuffle():
    x = np.random.default_rng(4).normal(size=(2, 32, 3, 5))
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(x, 4), 4), x)


# -- ICNR ----------------------------------------------------------------------------------
def test_icnr_two_distinct_subkernels():
    w = icnr_init((32, 8, 3, 3), 4, np.random.default_rng(0))
    distinct = np.unique(w.reshape(32, -1), axis=0)
    assert len(distinct) == 2
    for d in distinct:
        assert sum(np.array_equal(row, d) for row in w.reshape(32, -1)) == 16


def test_icnr_r1_is_base():
    a = icnr_init((4, 2, 3, 3), 1, np.random.default_rng(7))
    b = he_normal((4, 2, 3, 3), np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_icnr_output_blockwise_constant():
    r = np.random.default_rng(5)
    layer = SubPixelConv(8, 2, 4, 3, r, dtype=np.float64)
    y = to_nchw(layer.forward(to_nhwc(r.normal(size=(2, 8, 6, 6)))))
    blocks = y.reshape(2, 2, 6, 4, 6, 4)
    spread = blocks.max(axis=(3, 5)) - blocks.min(axis=(3, 5))
    assert spread.max() <= 1e-6


def test_icnr_indivisible_channels():
    with pytest.raises(ConfigurationError):
        icnr_init((6, 2, 3, 3), 2, np.random.default_rng(0))


# -- residual block ---------------------------------------------------------------------
def test_resblock_zero_in_zero_out():
    blk = ResBlock(3, 4, 3, np.random.default_rng(0), dtype=np.float64)
    assert np.all(resnet_block(np.zeros((1, 3, 8, 8)), blk) == 0.0)


def test_resblock_pure_shortcut():
    blk = ResBlock(3, 3, 3, np.random.default_rng(0), dtype=np.float64)
    blk.set_parameter("conv1.weight", np.zeros((3, 3, 3, 3)))
    blk.set_parameter("conv2.weight", np.zeros((3, 3, 3, 3)))
    blk.set_parameter("skip.weight", np.eye(3).reshape(3, 3, 1, 1))
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
    assert np.array_equal(resnet_block(x, blk), x)


def test_resblock_composition():
    r = np.random.default_rng(2)
    blk = ResBlock(2, 4, 3, r, dtype=np.float64)
    x = r.normal(size=(1, 2, 8, 8))
    main = conv2d_forward(swish(conv2d_forward(x, blk.conv1.weight)), blk.conv2.weight)
    expect = main + conv2d_forward(x, blk.skip.weight)
    assert _rel_err(resnet_block(x, blk), expect) < 1e-6


@pytest.mark.parametrize("make", [
    lambda r: Conv2d(4, 6, 3, groups=2, rng=r, dtype=np.float64),
    lambda r: ResBlock(4, 6, 3, r, dtype=np.float64),
    lambda r: SubPixelConv(4, 2, 2, 3, r, dtype=np.float64),
    lambda r: Swish(),
    lambda r: AvgPool(2),
    lambda r: PixelShuffle(2),
])
def test_module_backward_finite_differences(make):
    r = np.random.default_rng(9)
    mod = make(r)
    x = r.normal(size=(2, 8, 8, 4))          # channels-last
    probe = r.normal(size=mod.forward(x).shape)
    mod.zero_grad()
    mod.forward(x)
    dx = mod.backward(probe)
    f = lambda: np.sum(probe * mod.forward(x))
    assert _rel_err(dx, central_difference(f, x, 1e-5)) < 1e-4
    for name, p in mod.named_parameters():
        grad = dict(mod.named_gradients())[name]
        assert _rel_err(grad, central_difference(f, p, 1e-5)) < 1e-4


def test_set_parameter_validation():
    blk = ResBlock(2, 2, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        blk.set_parameter("conv1.weight", np.zeros((1, 1, 1, 1)))
    with pytest.raises(KeyError):
        blk.set_parameter("conv9.weight", np.zeros((2, 2, 3, 3)))
