from __future__ import annotations

import numpy as np
import pytest

from envc.core import (
    LEAKY_SLOPE,
    AdamState,
    Graph,
    Parameter,
    ShapeError,
    Tensor,
    adam_step,
    conv2d,
    conv_transpose2d,
    generator,
    grid_sample_bilinear,
    gradcheck,
    leaky_relu,
    mean,
    no_grad,
    round_half_away,
    softmax,
    tsum,
)


def naive_conv(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    bs, cin, h, wd = xp.shape
    cout, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((bs, cout, ho, wo))
    for n in range(bs):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 6))
    w = np.eye(4).reshape(4, 4, 1, 1)
    y = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64))
    np.testing.assert_array_equal(y.data, x)


def test_conv_averaging_keeps_constant_interior():
    x = np.full((1, 1, 6, 6), 3.5)
    w = np.full((1, 1, 3, 3), 1 / 9)
    y = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding=1).data
    np.testing.assert_allclose(y[0, 0, 1:-1, 1:-1], 3.5, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride, pad)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad), atol=1e-6)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))
    y = rng.normal(size=(2, 4, 4, 4))
    fwd = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
    # the transposed weight layout [Cin, Cout, kh, kw] is the conv weight read backwards
    back = conv_transpose2d(Tensor(y, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
    assert back.shape == x.shape
    assert abs((fwd * y).sum() - (x * back).sum()) < 1e-9


def test_conv_transpose_doubles_size():
    x = Tensor(np.ones((1, 2, 4, 4)))
    w = Tensor(np.ones((2, 3, 4, 4)))
    assert conv_transpose2d(x, w, stride=2, padding=1).shape == (1, 3, 8, 8)


def test_conv_shape_error_names_dimension():
    with pytest.raises(ShapeError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_grid_sample_integer_positions_are_identity():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(1, 2, 4, 5))
    ys, xs = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
    coords = np.stack([xs, ys])[None].astype(np.float64)
    out = grid_sample_bilinear(Tensor(src, dtype=np.float64), Tensor(coords, dtype=np.float64))
    np.testing.assert_allclose(out.data, src, atol=0)


def test_grid_sample_midpoint():
    src = Tensor(np.array([[[[0.0, 4.0]]]]), dtype=np.float64)
    coords = Tensor(np.array([[[[0.5]], [[0.0]]]]), dtype=np.float64)
    assert grid_sample_bilinear(src, coords).data.item() == 2.0


def test_grid_sample_clamps_to_border():
    src = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), dtype=np.float64)
    coords = Tensor(np.array([[[[-5.0, 9.0]], [[-2.0, 7.0]]]]), dtype=np.float64)
    np.testing.assert_array_equal(grid_sample_bilinear(src, coords).data.ravel(), [1.0, 4.0])


def test_grid_sample_matches_closed_form_and_fd():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(1, 1, 4, 4))
    coords = rng.uniform(0.05, 2.95, size=(1, 2, 5, 10))
    out = grid_sample_bilinear(Tensor(src, dtype=np.float64), Tensor(coords, dtype=np.float64)).data.ravel()
    for k, (x, y) in enumerate(zip(coords[0, 0].ravel(), coords[0, 1].ravel())):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        s = src[0, 0]
        ref = (1 - fx) * (1 - fy) * s[y0, x0] + fx * (1 - fy) * s[y0, x0 + 1] + (1 - fx) * fy * s[y0 + 1, x0] + fx * fy * s[y0 + 1, x0 + 1]
        assert abs(out[k] - ref) < 1e-12
    s = Tensor(src, dtype=np.float64)
    err = gradcheck(lambda c: mean(grid_sample_bilinear(s, c) * grid_sample_bilinear(s, c)), coords, n_coords=None)
    assert err < 1e-5


def test_softmax_examples():
    u = softmax(Tensor(np.zeros(12)), axis=0).data
    np.testing.assert_allclose(u, 1 / 12, atol=1e-7)
    assert softmax(Tensor(np.array([10.0, 0.0, 0.0])), axis=0).data[0] > 0.9999
    r = softmax(Tensor(np.random.default_rng(0).normal(size=(3, 7, 4)) * 20), axis=1).data
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(r >= 0)


def test_gradcheck_quadratic():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert gradcheck(lambda t: tsum(t * t), x, n_coords=None) < 1e-8


def test_gradcheck_conv_relu_mean():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), dtype=np.float64)
    x = rng.normal(size=(1, 2, 5, 5))
    assert gradcheck(lambda t: mean(leaky_relu(conv2d(t, w, padding=1))), x, eps=1e-4, n_coords=None) < 1e-6


def test_gradcheck_rejects_non_finite():
    from envc.core import log

    with pytest.raises(ValueError):
        gradcheck(lambda t: tsum(log(t)), -np.ones(3))


def test_leaky_relu_subgradient_at_zero_uses_negative_branch():
    with Graph() as g:
        x = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        g.backward(tsum(leaky_relu(x)))
    np.testing.assert_array_equal(x.grad, LEAKY_SLOPE)


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.5]), requires_grad=True)
    st = AdamState()
    adam_step([p], st, 1e-3, grads=[np.zeros(1)])
    assert p.data[0] == np.float32(1.5) and st.step == 1


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([0.0]), requires_grad=True, dtype=np.float64)
    adam_step([p], AdamState(), 1e-3, grads=[np.ones(1)])
    assert abs(p.data[0] + 1e-3) < 1e-10


def test_adam_two_steps_hand_computed():
    p = Parameter(np.array([1.0]), requires_grad=True, dtype=np.float64)
    st = AdamState()
    g, lr, b1, b2, eps = 0.5, 1e-2, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        adam_step([p], st, lr, grads=[np.array([g])])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    assert abs(p.data[0] - theta) < 1e-12


def test_adam_skips_non_finite():
    p = Parameter(np.array([1.0]), requires_grad=True)
    st = AdamState()
    assert adam_step([p], st, 1e-3, grads=[np.array([np.nan])]) is False
    assert st.skipped == 1 and st.step == 0 and p.data[0] == 1.0


def test_adam_ignores_frozen_parameters():
    p = Parameter(np.array([1.0]))
    p.requires_grad = False
    adam_step([p], AdamState(), 1e-1, grads=[np.ones(1)])
    assert p.data[0] == 1.0


def test_backward_is_bit_reproducible():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 3, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    grads = []
    for _ in range(2):
        with Graph() as g:
            xt = Tensor(x, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            g.backward(mean(leaky_relu(conv2d(xt, wt, padding=1))))
        grads.append((xt.grad.copy(), wt.grad.copy()))
    assert all(np.array_equal(a, b) for a, b in zip(grads[0], grads[1]))


def test_no_grad_records_nothing():
    with Graph() as g:
        with no_grad():
            _ = Tensor(np.ones(2), requires_grad=True) * 2.0
        assert len(g) == 0


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])), [1, -1, 2, -3, 0])


def test_generator_is_reproducible_and_split():
    a = generator(7, 1, 2).random(4)
    b = generator(7, 1, 2).random(4)
    c = generator(7, 1, 3).random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
