import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wfnet import autodiff as ad
from wfnet.autodiff import Parameter, Tensor, ShapeError, grad_check


def rand(rng, *shape):
    return rng.normal(size=shape)


# ---------------------------------------------------------------- conv2d


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 5, 5)))
    out = ad.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x.data)


def test_conv2d_output_shape():
    rng = np.random.default_rng(0)
    out = ad.conv2d(Tensor(rand(rng, 2, 3, 8, 8)), Tensor(rand(rng, 4, 3, 3, 3)), Tensor(np.zeros(4)), pad=1)
    assert out.shape == (2, 4, 8, 8)


def sliding_window_oracle(x, k, b, stride=1, pad=0):
    nb, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((nb, cout, ho, wo))
    for n in range(nb):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = float(np.dot(patch.ravel(), k[o].ravel())) + b[o]
    return out


def test_conv2d_matches_window_oracle_small():
    rng = np.random.default_rng(1)
    x, k, b = rand(rng, 1, 1, 3, 3), rand(rng, 1, 1, 2, 2), rand(rng, 1)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.data, sliding_window_oracle(x, k, b), rtol=0, atol=1e-14)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2)])
def test_conv2d_matches_window_oracle_general(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, k, b = rand(rng, 2, 3, 7, 6), rand(rng, 4, 3, 3, 2), rand(rng, 4)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, sliding_window_oracle(x, k, b, stride, pad), atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="Cin"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_rejects_oversized_kernel():
    with pytest.raises(ShapeError, match="kH"):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------- linear


def test_linear_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(ad.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x.data)


def test_linear_hand_case():
    out = ad.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 3.0]))
    assert out.data.tolist() == [[4.0, 5.0]]


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(2)
    x, w, b = rand(rng, 4, 3), rand(rng, 3, 5), rand(rng, 5)
    expect = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            acc = b[j]
            for k in range(3):
                acc += x[i, k] * w[k, j]
            expect[i, j] = acc
    np.testing.assert_allclose(ad.linear(Tensor(x), Tensor(w), Tensor(b)).data, expect, atol=1e-14)


def test_linear_rejects_mismatch():
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------- cross-entropy


def test_cross_entropy_uniform_logits():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert loss.item() == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_is_stable_for_large_logits():
    loss = ad.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_matches_extended_precision_oracle():
    rng = np.random.default_rng(3)
    logits = rand(rng, 3, 4)
    labels = [2, 0, 3]
    mpmath.mp.dps = 50
    terms = []
    for row, y in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        terms.append(-mpmath.log(mpmath.exp(z[y]) / sum(mpmath.exp(v) for v in z)))
    expect = float(sum(terms) / len(terms))
    assert ad.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(expect, rel=1e-14)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="labels"):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- sigmoid


def test_sigmoid_values():
    s = ad.sigmoid(Tensor([0.0, 3.0, -3.0])).data
    assert s[0] == 0.5
    assert s[1] == pytest.approx(1.0 / (1.0 + math.exp(-3.0)), abs=1e-15)
    assert s[1] == pytest.approx(0.952574, abs=1e-6)
    assert s[2] == pytest.approx(1.0 - s[1], abs=1e-15)


def test_sigmoid_extreme_inputs_are_finite():
    s = ad.sigmoid(Tensor([-1e6, 1e6])).data
    assert np.all(np.isfinite(s))
    assert s[0] >= 0.0 and s[1] == 1.0


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Parameter(np.random.default_rng(0).normal(size=(2, 3)))
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_leaves_frozen_parameter_untouched():
    w = Parameter(np.ones((3, 2)), trainable=False)
    x = Parameter(np.ones((1, 3)))
    ad.backward(ad.sum(ad.linear(x, w)))
    assert np.array_equal(w.grad, np.zeros((3, 2)))
    assert np.array_equal(x.grad, np.full((1, 3), 2.0))


def test_backward_rejects_non_scalar():
    x = Parameter(np.ones(3))
    with pytest.raises(ShapeError, match="scalar"):
        ad.backward(ad.relu(x))


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(0)
    w = Parameter(rand(rng, 3, 4))
    x = Tensor(rand(rng, 2, 3))
    h = ad.relu(ad.linear(x, w))
    loss = ad.mean(ad.mul(h, h))
    tape = ad.backward(loss)
    assert tape.nodes[-1] is loss
    for e in tape.entries:
        assert all(i < e.output for i in e.inputs)
    assert [e.op for e in tape.entries][-1] == "mul_scalar"


def test_gradients_accumulate_across_backward_calls():
    x = Parameter(np.array([1.0, 2.0]))
    ad.backward(ad.sum(x))
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_no_grad_records_nothing():
    x = Parameter(np.ones(2))
    with ad.no_grad():
        y = ad.sum(x)
    assert not y.requires_grad


# ---------------------------------------------------------------- gradient checks


def test_grad_check_linear_cross_entropy():
    rng = np.random.default_rng(4)
    x = Parameter(rand(rng, 2, 3))
    w = Parameter(rand(rng, 3, 4))
    b = Parameter(rand(rng, 4))
    err = grad_check(lambda: ad.softmax_cross_entropy(ad.linear(x, w, b), [1, 3]), [x, w, b], n_samples=None)
    assert err < 1e-6


def test_grad_check_conv_pool_linear_stack():
    rng = np.random.default_rng(5)
    x = Parameter(rand(rng, 2, 2, 6, 6))
    k = Parameter(rand(rng, 3, 2, 3, 3))
    kb = Parameter(rand(rng, 3))
    w = Parameter(rand(rng, 27, 4))
    wb = Parameter(rand(rng, 4))

    def f():
        h = ad.maxpool2d(ad.relu(ad.conv2d(x, k, kb, pad=1)), 2)
        return ad.softmax_cross_entropy(ad.linear(ad.reshape(h, (2, -1)), w, wb), [0, 3])

    assert grad_check(f, [x, k, kb, w, wb], n_samples=30) < 1e-5


def _scalarize(t: Tensor, rng) -> Tensor:
    # random projection keeps every output coordinate in the loss
    proj = Tensor(rng.normal(size=t.shape))
    return ad.sum(ad.mul(t, proj))


SHAPES = [(3,), (2, 5), (2, 3, 4)]


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize(
    "op",
    [
        ad.sigmoid,
        ad.relu,
        ad.gelu,
        ad.softmax,
        ad.reciprocal,
        lambda t: ad.mul_scalar(t, -2.5),
        lambda t: ad.add_scalar(t, 0.7),
        lambda t: ad.reshape(t, (-1,)),
        lambda t: ad.expand_batch(t, 3),
        lambda t: ad.mean(t),
        lambda t: ad.sum(t, axis=-1),
        lambda t: t[..., :1],
    ],
    ids=["sigmoid", "relu", "gelu", "softmax", "reciprocal", "mul_scalar", "add_scalar", "reshape",
         "expand_batch", "mean", "sum_axis", "getitem"],
)
def test_unary_ops_match_finite_differences(op, shape):
    rng = np.random.default_rng(len(shape))
    data = rng.normal(size=shape)
    if op is ad.reciprocal:
        data = np.sign(data) * (np.abs(data) + 0.5)
    if op is ad.relu:
        data = np.sign(data) * (np.abs(data) + 1e-3)
    x = Parameter(data)
    out_rng = np.random.default_rng(7)
    proj = op(Tensor(data)).shape
    p = Tensor(out_rng.normal(size=proj))
    assert grad_check(lambda: ad.sum(ad.mul(op(x), p)), [x], n_samples=None) < 1e-4


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul], ids=["add", "sub", "mul"])
def test_binary_ops_match_finite_differences(op, shape):
    rng = np.random.default_rng(len(shape))
    a, b = Parameter(rng.normal(size=shape)), Parameter(rng.normal(size=shape))
    p = Tensor(rng.normal(size=shape))
    assert grad_check(lambda: ad.sum(ad.mul(op(a, b), p)), [a, b], n_samples=None) < 1e-4


@pytest.mark.parametrize("shape", [(4, 3), (2, 3, 5), (2, 2, 3, 4)])
def test_layer_norm_matches_finite_differences(shape):
    rng = np.random.default_rng(shape[-1])
    x = Parameter(rng.normal(size=shape))
    g = Parameter(rng.normal(size=shape[-1]))
    b = Parameter(rng.normal(size=shape[-1]))
    assert grad_check(lambda: _scalarize(ad.layer_norm(x, g, b), np.random.default_rng(1)), [x, g, b],
                      n_samples=None) < 1e-4


@pytest.mark.parametrize("lead", [(), (2,), (2, 3)])
def test_matmul_and_attention_match_finite_differences(lead):
    rng = np.random.default_rng(len(lead))
    q = Parameter(rng.normal(size=(*lead, 4, 3)))
    k = Parameter(rng.normal(size=(*lead, 4, 3)))
    v = Parameter(rng.normal(size=(*lead, 4, 2)))
    f = lambda: _scalarize(ad.scaled_dot_product_attention(q, k, v), np.random.default_rng(2))  # noqa: E731
    assert grad_check(f, [q, k, v], n_samples=None) < 1e-4


@pytest.mark.parametrize("lead", [(3,), (2, 3), (2, 2, 3)])
def test_linear_and_bias_ops_match_finite_differences(lead):
    rng = np.random.default_rng(sum(lead))
    x = Parameter(rng.normal(size=(*lead, 4)))
    w = Parameter(rng.normal(size=(4, 2)))
    b = Parameter(rng.normal(size=2))
    bias = Parameter(rng.normal(size=(lead[-1], 2)))

    def f():
        h = ad.linear(x, w, b)
        if h.ndim >= 2:
            h = ad.add_bias(h, bias)
        return _scalarize(h, np.random.default_rng(3))

    assert grad_check(f, [x, w, b, bias], n_samples=None) < 1e-4


@pytest.mark.parametrize("shape,axis", [((4, 3), 0), ((2, 3, 4), 1), ((3, 2, 2, 2), 0)])
def test_scale_axis_take_concat_transpose_match_finite_differences(shape, axis):
    rng = np.random.default_rng(shape[0])
    w = Parameter(rng.normal(size=shape))
    m = Parameter(rng.normal(size=shape[axis]))
    other = Parameter(rng.normal(size=shape))

    def f():
        s = ad.scale_axis(w, m, axis)
        c = ad.concat([s, other], axis=0)
        t = ad.take(c, [0, 2, 1, 0], axis=0)
        return _scalarize(ad.transpose(t, tuple(reversed(range(t.ndim)))), np.random.default_rng(4))

    assert grad_check(f, [w, m, other], n_samples=None) < 1e-4


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 4, 6), (2, 1, 6, 2)])
def test_conv_and_pool_match_finite_differences(shape):
    rng = np.random.default_rng(shape[1])
    x = Parameter(rng.normal(size=shape))
    k = Parameter(rng.normal(size=(2, shape[1], 3, 3)))
    b = Parameter(rng.normal(size=2))
    f = lambda: _scalarize(ad.maxpool2d(ad.conv2d(x, k, b, pad=1), 2), np.random.default_rng(5))  # noqa: E731
    assert grad_check(f, [x, k, b], n_samples=None) < 1e-4


@pytest.mark.parametrize("shape", [(2, 3), (4, 5), (1, 7)])
def test_cross_entropy_gradient_matches_finite_differences(shape):
    rng = np.random.default_rng(shape[1])
    z = Parameter(rng.normal(size=shape) * 3)
    labels = rng.integers(0, shape[1], shape[0])
    assert grad_check(lambda: ad.softmax_cross_entropy(z, labels), [z], n_samples=None) < 1e-4


def test_grad_check_rejects_eps_out_of_range():
    x = Parameter(np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda: ad.sum(x), [x], eps=1e-2)


# ---------------------------------------------------------------- invariants


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-700, 700, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x, k, b = rand(rng, 2, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    a = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), pad=1).data
    c = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), pad=1).data
    assert np.array_equal(a, c)


def test_frozen_parameter_survives_optimizer_steps():
    from wfnet.models import Adam, SGD

    rng = np.random.default_rng(0)
    frozen = Parameter(rng.normal(size=(3, 2)), trainable=False)
    live = Parameter(rng.normal(size=(1, 3)))
    before = frozen.data.copy()
    live_before = live.data.copy()
    for opt in (SGD([frozen, live], 0.1), Adam([frozen, live], 0.1)):
        for _ in range(5):
            opt.zero_grad()
            ad.backward(ad.sum(ad.linear(live, frozen)))
            opt.step()
    assert np.array_equal(frozen.data, before)
    assert not np.array_equal(live.data, live_before)


def test_elementwise_ops_reject_broadcasting():
    with pytest.raises(ShapeError, match="broadcasting"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
