import numpy as np
import pytest
from hypothesis import given, strategies as st

from vsm import functional as F
from vsm.functional import DimensionError
from vsm.gradcheck import check_gradients, numerical_grad, relative_error
from vsm.tensor import (
    GraphConsumedError,
    Tensor,
    concat,
    get_precision,
    logsumexp,
    matmul,
    no_grad,
    precision,
    scatter_rows,
    stack,
    where,
)

pytestmark = pytest.mark.usefixtures("f64")

seeds = st.integers(0, 2**31 - 1)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def conv_oracle(x, k, stride, padding):
    """Direct nested-loop cross-correlation with TF-style SAME padding."""
    b, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        top, left = ph // 2, pw // 2
    else:
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = left = 0
    out = np.zeros((b, oh, ow, cout))
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            y, xx = i * stride + di - top, j * stride + dj - left
                            if 0 <= y < h and 0 <= xx < w:
                                acc += float(np.dot(x[n, y, xx, :], k[di, dj, :, o]))
                    out[n, i, j, o] = acc
    return out


# conv2d ----------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, "same")
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_input(rng):
    out = F.conv2d(Tensor(np.zeros((2, 5, 5, 3))), param(rng, 3, 3, 3, 4), 1, "same")
    assert not out.data.any()


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 4, 4, 1))
    k = rng.standard_normal((3, 3, 1, 1))
    out = F.conv2d(Tensor(x), Tensor(k), 1, "same")
    np.testing.assert_allclose(out.data, conv_oracle(x, k, 1, "same"), atol=1e-12)


@given(seeds, st.sampled_from([1, 2]), st.sampled_from(["same", "valid"]), st.integers(1, 3))
def test_conv_oracle_random_geometry(seed, stride, padding, k):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 5, 6, 2))
    kernel = r.standard_normal((k, k, 2, 3))
    out = F.conv2d(Tensor(x), Tensor(kernel), stride, padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, kernel, stride, padding), atol=1e-10)


@given(seeds, st.sampled_from([1, 2]), st.sampled_from(["same", "valid"]))
def test_conv_gradients(seed, stride, padding):
    r = np.random.default_rng(seed)
    x, k = param(r, 2, 5, 5, 2), param(r, 3, 3, 2, 3)
    weights = r.standard_normal(F.conv2d(x, k, stride, padding).shape)
    err = check_gradients(lambda: (F.conv2d(x, k, stride, padding) * weights).sum(), [x, k], eps=1e-5)
    assert err < 1e-5


def test_conv_channel_mismatch_names_axes(rng):
    with pytest.raises(DimensionError, match="channel"):
        F.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


# maxpool ---------------------------------------------------------------------


def test_maxpool_example():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    np.testing.assert_array_equal(F.maxpool2d(x, 2, 2).data.ravel(), [4.0])


def test_maxpool_same_padding_odd_size():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3, 1))
    out = F.maxpool2d(x, 2, 2, "same")
    assert out.shape == (1, 2, 2, 1)
    np.testing.assert_array_equal(out.data[0, :, :, 0], [[4, 5], [7, 8]])


def test_maxpool_tie_routes_to_first_index():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    F.maxpool2d(x, 2, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1, 0], [0, 0]])


@given(seeds, st.sampled_from([(2, 2), (3, 2), (2, 1)]), st.sampled_from(["same", "valid"]))
def test_maxpool_gradients(seed, geometry, padding):
    window, stride = geometry
    r = np.random.default_rng(seed)
    x = param(r, 2, 5, 4, 3)  # continuous values: no ties
    weights = r.standard_normal(F.maxpool2d(x, window, stride, padding).shape)
    err = check_gradients(lambda: (F.maxpool2d(x, window, stride, padding) * weights).sum(), [x], eps=1e-5)
    assert err < 1e-5


# elementwise, reductions, linear algebra ---------------------------------------------

UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 0.5).log(),
    "sqrt": lambda t: (t * t + 0.5).sqrt(),
    "pow": lambda t: (t * t + 0.5) ** 1.5,
    "neg_div": lambda t: 1.0 / (t * t + 1.0) - t,
    "elu": F.elu,
    "leaky_relu": F.leaky_relu,
    "relu": F.relu,
    "sigmoid": F.sigmoid,
    "softmax": lambda t: F.softmax(t, axis=-1),
    "log_softmax": lambda t: F.log_softmax(t, axis=0),
    "logsumexp": lambda t: logsumexp(t, axis=1),
    "mean": lambda t: t.mean(axis=0),
    "transpose": lambda t: t.T * np.arange(t.shape[0]),
    "getitem": lambda t: t[np.array([0, 2, 0]), 1:] * 2.0,
    "clamp_min": lambda t: t.clamp_min(0.3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=seeds)
def test_unary_gradients(name, seed):
    r = np.random.default_rng(seed)
    x = param(r, 3, 4)
    if name in ("relu", "leaky_relu", "clamp_min"):
        # keep entries away from the kink so central differences are valid
        x.data[np.abs(x.data) < 0.05] += 0.2
        x.data[np.abs(x.data - 0.3) < 0.05] += 0.2
    op = UNARY[name]
    weights = r.standard_normal(op(x).shape)
    assert check_gradients(lambda: (op(x) * weights).sum(), [x], eps=1e-5) < 1e-5


@given(seed=seeds)
def test_broadcast_binary_gradients(seed):
    r = np.random.default_rng(seed)
    a, b, c = param(r, 3, 1, 4), param(r, 5, 1), param(r, 4)

    def fn():
        return ((a + b) * c - a / (b * b + 1.0) + (c - a) * 0.5).sum()

    assert check_gradients(fn, [a, b, c], eps=1e-5) < 1e-5


@given(seed=seeds)
def test_matmul_concat_stack_where_scatter_gradients(seed):
    r = np.random.default_rng(seed)
    a, b, v = param(r, 3, 4), param(r, 4, 2), param(r, 4)
    mask = r.random((3, 2)) > 0.5

    def fn():
        m = matmul(a, b)
        mv = matmul(a, v)
        joined = concat([m, mv.reshape(3, 1)], axis=1)
        stacked = stack([joined, joined * 2.0])
        picked = where(mask, m, m * m)
        scattered = scatter_rows(picked[:2], [0, 2], 4)
        return stacked.sum() + (picked * 0.3).sum() + (scattered * np.arange(8.0).reshape(4, 2)).sum()

    assert check_gradients(fn, [a, b, v], eps=1e-5) < 1e-5


@given(seed=seeds)
def test_linear_and_distance_gradients(seed):
    r = np.random.default_rng(seed)
    x, w, bias = param(r, 2, 3, 4), param(r, 4, 5), param(r, 5)
    p = param(r, 1, 6, 5)

    def fn():
        h = F.linear(x, w, bias).reshape(6, 1, 5)
        return F.squared_distance(h, p).sum() + F.cosine_distance(h, p).sum()

    assert check_gradients(fn, [x, w, bias, p], eps=1e-5) < 1e-5


def test_batch_norm_gradients_and_running_stats(rng):
    x, gamma, beta = param(rng, 4, 3, 3, 2), param(rng, 2), param(rng, 2)
    mean, var = np.zeros(2), np.ones(2)
    weights = rng.standard_normal((4, 3, 3, 2))

    def fn():
        return (F.batch_norm(x, gamma, beta, mean.copy(), var.copy(), True) * weights).sum()

    assert check_gradients(fn, [x, gamma, beta], eps=1e-5) < 1e-5
    F.batch_norm(x, gamma, beta, mean, var, True)
    assert not np.allclose(mean, 0)
    out = F.batch_norm(x, gamma, beta, mean, var, False)
    assert out.shape == x.shape


def test_dropout_masks_and_scales(rng):
    x = Tensor(np.ones((1000,)), requires_grad=True)
    out = F.dropout(x, 0.25, True, np.random.default_rng(0))
    kept = out.data != 0
    np.testing.assert_allclose(out.data[kept], 1 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.05
    out.sum().backward()
    np.testing.assert_allclose(x.grad, out.data)
    assert F.dropout(x, 0.25, False) is x
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, True, rng)


# graph semantics -------------------------------------------------------------------


def test_shared_leaf_accumulates_additively():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)
    (x * 1.0).sum().backward()  # separate graph: adds into the same leaf
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.array(1.5), requires_grad=True)
    y = x.exp()
    z = y * y + y
    z.backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(3.0) + np.exp(1.5))


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 2.0).sum()
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_non_scalar_backward_raises():
    with pytest.raises(ValueError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_all_reachable_leaves_get_grad(rng):
    leaves = [param(rng, 2, 2) for _ in range(3)]
    (matmul(leaves[0], leaves[1]) * leaves[2]).sum().backward()
    for leaf in leaves:
        assert leaf.grad is not None and leaf.grad.shape == leaf.shape


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_precision_switch():
    with precision("f32"):
        assert Tensor([1.0]).dtype == np.float32
        assert get_precision() == "f32"
    assert Tensor([1.0]).dtype == np.float64


def test_numerical_grad_subset_and_relative_error():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    g = numerical_grad(lambda: (x * x).sum(), x, eps=1e-5, indices=[(0,), (2,)])
    np.testing.assert_allclose(g, [2.0, 6.0], rtol=1e-8)
    assert relative_error(np.zeros(2), np.full(2, 1e-9)) < 1e-2


# spec examples for linear, activations and backward ----------------------------------


def test_linear_identity_and_bias_only(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(F.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    out = F.linear(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(np.array([1.5, -2.0])))
    np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (3, 1)))


def test_linear_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    expected = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            expected[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(4))
    np.testing.assert_allclose(F.linear(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-12)


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_activation_examples():
    np.testing.assert_array_equal(F.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    assert F.elu(Tensor(0.0)).item() == 0.0
    assert F.relu(Tensor(-1.0)).item() == 0.0
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), atol=1e-12)
    np.testing.assert_allclose(F.leaky_relu(Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])
    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (y * 0.0 + 5.0).sum().backward()
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_composite_conv_pool_linear_softmax(rng):
    x = Tensor(rng.standard_normal((2, 6, 6, 1)))
    k, w, b = param(rng, 3, 3, 1, 2), param(rng, 18, 3), param(rng, 3)

    def fn():
        h = F.maxpool2d(F.conv2d(x, k), 2, 2)
        logits = F.linear(h.reshape(2, -1), w, b)
        return -F.log_softmax(logits, axis=1)[np.arange(2), np.array([0, 2])].sum()

    assert check_gradients(fn, [k, w, b], eps=1e-4) < 1e-5


def test_maxpool_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 6, 6, 2))
    out = F.maxpool2d(Tensor(x), 2, 2, "same").data
    for i in range(3):
        for j in range(3):
            np.testing.assert_array_equal(out[0, i, j], x[0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(0, 1)))
