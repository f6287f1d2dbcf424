import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfcn import tensor as T
from rfcn.gradcheck import check_scalar_function, finite_difference_gradient, relative_error
from rfcn.tensor import DimensionError, Record, Tensor, backward, no_record


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grad_of(fn, *xs, seed=None):
    with Record() as rec:
        y = fn(*xs)
    return backward(rec, y, seed, wrt=list(xs))


# --- forward examples -------------------------------------------------------------


def test_identity_kernel_conv():
    x = Tensor(np.ones((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k, Tensor(np.zeros(1)), stride=1, pad=0)
    np.testing.assert_array_equal(out.data, np.ones((1, 3, 3)))


def test_full_window_sum():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1) and out.data.item() == 10.0


def test_vgg_first_layer_shape():
    # total padding 40 split 20/20: (240 + 40 - 11) // 4 + 1 = 68, (360 + 40 - 11) // 4 + 1 = 98
    assert T.conv_output_size(240, 11, 4, 40) == 68
    assert T.conv_output_size(360, 11, 4, 40) == 98
    x = Tensor(np.zeros((3, 240, 360)))
    k = Tensor(np.zeros((2, 3, 11, 11)))
    assert T.conv2d(x, k, stride=4, pad=40).shape == (2, 68, 98)


def test_odd_padding_goes_mostly_after():
    # total padding 1: nothing before, one zero row/column after
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 2))), pad=1)
    assert out.shape == (1, 2, 3)
    np.testing.assert_array_equal(out.data[0], [[3.0, 5.0, 3.0], [0.0, 0.0, 0.0]])


def test_kernel_stamping():
    out = T.transposed_conv2d(Tensor(np.ones((1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), 1, target_hw=(2, 2))
    np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))


@pytest.mark.parametrize("F,S", [(10, 4), (20, 8), (4, 2)])
def test_bilinear_kernel_preserves_constants(F, S):
    k = Tensor(T.bilinear_kernel(F, S)[None, None])
    x = Tensor(np.full((1, 9, 9), 3.0))
    out = T.transposed_conv2d(x, k, S, target_hw=(9 * S, 9 * S)).data[0]
    inner = out[F:-F, F:-F]
    np.testing.assert_allclose(inner, 3.0, atol=1e-12)


def test_maxpool_example():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert T.maxpool2d(x, 2).data.item() == 4.0


def test_maxpool_ties_route_to_first_element():
    x = leaf(np.full((1, 4, 4), 2.0))
    (g,) = grad_of(lambda t: T.maxpool2d(t, 2), x)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x.data), 2).data, np.full((1, 2, 2), 2.0))
    expect = np.zeros((1, 4, 4))
    expect[0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(g, expect)


def test_maxpool_gradient_matches_differences(rng):
    x = leaf(rng.permutation(36).reshape(1, 6, 6) * 0.1)
    (g,) = grad_of(lambda t: T.maxpool2d(t, 2), x)
    num = finite_difference_gradient(lambda _: T.maxpool2d(Tensor(x.data), 2).data.sum(), x, 1e-5)
    assert relative_error(g, num).max() <= 1e-6


def test_activation_values():
    z = Tensor(np.zeros(1))
    assert T.sigmoid(z).data.item() == 0.5
    assert T.tanh(z).data.item() == 0.0
    assert T.relu(Tensor(np.array([-3.0]))).data.item() == 0.0
    with pytest.raises(ValueError):
        T.apply_activation("softsign", z)


def test_sigmoid_gradient_at_zero():
    (g,) = grad_of(T.sigmoid, leaf([0.0]))
    assert g.item() == 0.25
    num = finite_difference_gradient(lambda v: T.sigmoid(Tensor(v)).data.sum(), leaf([0.0]), 1e-5)
    assert abs(num.item() - 0.25) < 1e-8


def test_dense_identity_and_elementwise():
    x = Tensor(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(T.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    np.testing.assert_array_equal(T.mul(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))).data, [3.0, 8.0])


def test_flatten_round_trip():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    back = T.reshape(T.flatten(x), (2, 3))
    np.testing.assert_array_equal(back.data, x.data)


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(DimensionError):
        T.dense(Tensor(np.zeros(4)), Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        T.transposed_conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), 2, target_hw=(9, 9))


# --- backward ----------------------------------------------------------------------


def test_product_rule_accumulates():
    x = leaf([2.0])
    (g,) = grad_of(lambda t: T.mul(t, t), x)
    assert g.item() == 4.0


def test_backward_rejects_empty_record_and_bad_seed():
    with pytest.raises(ValueError):
        backward(Record(), Tensor(np.zeros(1)))
    x = leaf([1.0, 2.0])
    with Record() as rec:
        y = T.tanh(x)
    with pytest.raises(DimensionError):
        backward(rec, y, np.ones(3))


def test_unreached_tensor_gets_zeros():
    x, unused = leaf([1.0]), leaf([5.0, 6.0])
    with Record() as rec:
        y = T.sigmoid(x)
    gx, gu = backward(rec, y, wrt=[x, unused])
    np.testing.assert_array_equal(gu, [0.0, 0.0])


def test_no_record_tracks_nothing():
    x = leaf([1.0])
    with Record() as rec:
        with no_record():
            T.sigmoid(x)
        T.tanh(x)
    assert [n.op for n in rec.nodes] == ["tanh"]


def test_reverse_order_visit():
    x = leaf([0.3])
    with Record() as rec:
        a = T.tanh(x)
        b = T.sigmoid(a)
        c = T.scale(b, 2.0)
    assert [n.op for n in rec.nodes] == ["tanh", "sigmoid", "scale"]
    order = []
    for n in rec.nodes:
        f = n.vjp
        n.vjp = lambda g, f=f, op=n.op: (order.append(op), f(g))[1]
    backward(rec, c)
    assert order == ["scale", "sigmoid", "tanh"]


def test_aliased_partials_are_not_mutated():
    # add returns the same array for both inputs; accumulation must not corrupt it
    x = leaf([1.0, 2.0])
    with Record() as rec:
        s = T.add(x, x)
        y = T.add(s, x)
    (g,) = backward(rec, y, wrt=[x])
    np.testing.assert_array_equal(g, [3.0, 3.0])


def test_finite_difference_examples():
    x = Tensor(np.array([3.0]))
    g = finite_difference_gradient(lambda v: float(v[0] ** 2), x, 1e-5)
    assert abs(g.item() - 6.0) < 1e-8
    z = Tensor(np.zeros(4))
    g = finite_difference_gradient(lambda v: float(T._sigmoid(v).sum()), z, 1e-5)
    np.testing.assert_allclose(g, 0.25, atol=1e-10)


def test_finite_differences_agree_with_conv_gradient(rng):
    x, k = leaf(rng.standard_normal((1, 4, 4))), leaf(rng.standard_normal((1, 1, 3, 3)))
    r = rng.standard_normal((1, 2, 2))
    gx, gk = grad_of(lambda a, b: T.conv2d(a, b), x, k, seed=r)
    num = finite_difference_gradient(lambda _: float((T.conv2d(Tensor(x.data), Tensor(k.data)).data * r).sum()), x)
    assert relative_error(gx, num).max() <= 1e-6


# --- properties ----------------------------------------------------------------------


@given(
    c=st.integers(1, 3), f=st.integers(1, 3), k=st.integers(1, 4), stride=st.integers(1, 3),
    h=st.integers(4, 9), w=st.integers(4, 9), seed=st.integers(0, 10_000),
)
def test_transposed_conv_is_adjoint_of_conv(c, f, k, stride, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w))
    kern = rng.standard_normal((f, c, k, k))
    ax = T.conv2d(Tensor(x), Tensor(kern), stride=stride).data
    y = rng.standard_normal(ax.shape)
    # with an exact-fit input the transposed map returns to h×w; crop to the covered region otherwise
    aty = T.transposed_conv2d(Tensor(y), Tensor(kern), stride).data
    covered = np.zeros_like(x)
    covered[:, : aty.shape[1], : aty.shape[2]] = aty
    assert abs(np.sum(ax * y) - np.sum(x * covered)) <= 1e-10 * max(1.0, np.abs(ax * y).sum())


@given(seed=st.integers(0, 10_000), stride=st.integers(1, 3), pad=st.integers(0, 3))
def test_conv_gradient_matches_differences(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x, k, b = leaf(rng.standard_normal((2, 5, 5))), leaf(rng.standard_normal((2, 2, 3, 3))), leaf(rng.standard_normal(2))

    def run():
        out = T.conv2d(x, k, b, stride=stride, pad=pad)
        r = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return out, r, float((out.data * r).sum())

    assert check_scalar_function("conv", run, [x, k, b], budget=60).passed


@given(seed=st.integers(0, 10_000))
def test_activation_gradients_away_from_kinks(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(8)
    v = np.where(np.abs(v) < 1e-3, 0.5, v)
    x = leaf(v)
    for kind in ("sigmoid", "tanh", "relu", "identity"):
        def run(kind=kind):
            out = T.tanh(T.apply_activation(kind, x)) if kind == "identity" else T.apply_activation(kind, x)
            return out, np.ones(8), float(out.data.sum())

        assert check_scalar_function(kind, run, [x]).passed


@given(seed=st.integers(0, 10_000))
def test_gradient_linearity(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal(5))
    (gf,) = grad_of(T.tanh, x)
    (gg,) = grad_of(T.sigmoid, x)
    (gs,) = grad_of(lambda t: T.add(T.tanh(t), T.sigmoid(t)), x)
    np.testing.assert_array_equal(gs, gf + gg)


@given(seed=st.integers(0, 10_000))
def test_determinism(seed):
    def run():
        rng = np.random.default_rng(seed)
        x, k = leaf(rng.standard_normal((1, 6, 6))), leaf(rng.standard_normal((2, 1, 3, 3)))
        with Record() as rec:
            y = T.maxpool2d(T.relu(T.conv2d(x, k, pad=2)), 2)
        return y.data, backward(rec, y, wrt=[x, k])

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


@given(seed=st.integers(0, 10_000))
def test_outputs_stay_finite(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal(6) * 1e3)
    for kind in ("sigmoid", "tanh", "relu"):
        assert np.isfinite(T.apply_activation(kind, x).data).all()
