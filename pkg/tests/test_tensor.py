import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capsprom import tensor as T
from capsprom.tensor import Tensor, ShapeError

from oracles import naive_conv1d, naive_maxpool, numeric_grad, rel_err


def gradcheck(build, *arrays, tol=1e-4):
    """Compare autodiff gradients of scalar ``build(*tensors)`` with central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()

    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays])
    for leaf, num in zip(leaves, numeric):
        assert rel_err(leaf.grad, num) < tol, (leaf.grad, num)


def test_add_elementwise_and_identity():
    np.testing.assert_array_equal((T.tensor([1.0, 2.0]) + T.tensor([3.0, 4.0])).data, [4, 6])
    x = T.tensor([1.5, -2.0])
    np.testing.assert_array_equal((x + 0).data, x.data)


def test_product_rule():
    a = T.tensor([2.0], requires_grad=True)
    (a * T.tensor([3.0])).sum().backward()
    np.testing.assert_array_equal(a.grad, [3.0])


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        T.tensor(np.ones((2, 3))) + T.tensor(np.ones((2,)))


def test_broadcast_gradient_sums_over_expanded_axes():
    rng = np.random.default_rng(0)
    gradcheck(lambda a, b: T.reduce_sum(T.mul(a, b) + b), rng.normal(size=(4, 3)), rng.normal(size=(3,)))
    gradcheck(lambda a, b: T.reduce_sum(T.div(a, b)), rng.normal(size=(2, 3)), rng.uniform(1, 2, size=(2, 1)))
    gradcheck(lambda a, b: T.reduce_sum(T.sub(a, b) * a), rng.normal(size=(2, 3)), rng.normal(size=(1, 3)))


def test_matmul_examples():
    m = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((T.tensor(np.eye(2)) @ m).data, m.data)
    np.testing.assert_array_equal((T.tensor([[1.0, 2.0]]) @ T.tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(ShapeError):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(3, 2))
    gradcheck(lambda a, b: T.reduce_sum(T.matmul(a, b) * r), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))


def test_conv1d_shape_arithmetic():
    w = T.tensor(np.zeros((9, 1, 1)))
    assert T.conv1d(T.tensor(np.zeros((81, 1))), w).shape == (73, 1)
    assert T.conv1d(T.tensor(np.zeros((73, 1))), w, stride=2).shape == (33, 1)


def test_conv1d_window_sum():
    out = T.conv1d(T.tensor(np.ones((3, 1))), T.tensor(np.ones((2, 1, 1))), T.tensor([0.0]))
    np.testing.assert_array_equal(out.data.ravel(), [2.0, 2.0])


def test_conv1d_too_short():
    with pytest.raises(ShapeError):
        T.conv1d(T.tensor(np.ones((3, 2))), T.tensor(np.ones((4, 2, 1))))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_matches_naive_loops(stride):
    rng = np.random.default_rng(stride)
    for _ in range(5):
        L, cin, cout = rng.integers(9, 65), rng.integers(1, 9), rng.integers(1, 9)
        K = int(rng.integers(1, 10))
        x, w, b = rng.normal(size=(L, cin)), rng.normal(size=(K, cin, cout)), rng.normal(size=cout)
        got = T.conv1d(T.tensor(x), T.tensor(w), T.tensor(b), stride=stride).data
        assert np.max(np.abs(got - naive_conv1d(x, w, b, stride))) < 1e-10


def test_conv1d_batched_equals_per_sample():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(4, 20, 3)), rng.normal(size=(5, 3, 6)), rng.normal(size=6)
    batched = T.conv1d(T.tensor(x), T.tensor(w), T.tensor(b), stride=2).data
    for n in range(4):
        np.testing.assert_allclose(batched[n], naive_conv1d(x[n], w, b, 2), atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_gradient(stride):
    rng = np.random.default_rng(10 + stride)
    r = rng.normal(size=((12 - 4) // stride + 1, 3))
    gradcheck(
        lambda x, w, b: T.reduce_sum(T.conv1d(x, w, b, stride=stride) * r),
        rng.normal(size=(12, 2)),
        rng.normal(size=(4, 2, 3)),
        rng.normal(size=3),
    )


def test_maxpool_definition_and_oracle():
    out = T.maxpool1d(T.tensor(np.array([1.0, 3.0, 2.0, 0.0])[:, None]), 2)
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 2.0])
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = rng.normal(size=(int(rng.integers(4, 40)), 3))
        np.testing.assert_array_equal(T.maxpool1d(T.tensor(x), 2).data, naive_maxpool(x, 2, 2))
        np.testing.assert_array_equal(T.maxpool1d(T.tensor(x), 3, 1).data, naive_maxpool(x, 3, 1))


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 3)])
def test_maxpool_gradient(window, stride):
    rng = np.random.default_rng(5)
    x = rng.permutation(60).reshape(15, 4) * 0.1  # distinct values keep argmax stable under h
    r = rng.normal(size=T.maxpool1d(T.tensor(x), window, stride).shape)
    gradcheck(lambda a: T.reduce_sum(T.maxpool1d(a, window, stride) * r), x)


def test_activations():
    np.testing.assert_array_equal(T.relu(T.tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert T.sigmoid(T.tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(T.softmax(T.tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = T.sigmoid(T.tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0
    assert np.isfinite(T.softplus(T.tensor([1000.0, -1000.0])).data).all()


@pytest.mark.parametrize(
    "op",
    [
        lambda x: T.relu(x),
        lambda x: T.sigmoid(x),
        lambda x: T.softplus(x),
        lambda x: T.softmax(x, axis=0),
        lambda x: T.softmax(x, axis=1),
        lambda x: T.exp(x),
        lambda x: T.square(x),
        lambda x: T.l2_norm(x, axis=1),
        lambda x: T.l2_norm(x, axis=0, keepdims=True),
        lambda x: T.mean(x, axis=1),
        lambda x: T.reduce_sum(x, axis=(0, 1), keepdims=True),
        lambda x: T.reshape(x, (2, 2, 3)),
        lambda x: T.transpose(x),
        lambda x: T.sqrt(T.square(x) + 1.0),
        lambda x: T.log(T.square(x) + 1.0),
    ],
)
def test_unary_gradients(op):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 3))
    x[np.abs(x) < 0.05] += 0.2  # keep away from relu kink
    probe = rng.normal(size=op(T.tensor(x)).shape)
    gradcheck(lambda a: T.reduce_sum(op(a) * probe), x)


def test_reductions():
    assert T.l2_norm(T.tensor([3.0, 4.0])).item() == 5.0
    np.testing.assert_array_equal(T.reduce_sum(T.tensor(np.ones((2, 3))), axis=1).data, [3, 3])
    with pytest.raises(ShapeError):
        T.reduce_sum(T.tensor(np.ones((2, 3))), axis=2)


def test_l2_norm_zero_vector_has_zero_gradient():
    x = T.tensor(np.zeros(3), requires_grad=True)
    T.l2_norm(x).backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_reshape():
    x = T.tensor(np.arange(33 * 256, dtype=float).reshape(33, 256))
    y = T.reshape(x, (33, 32, 8))
    assert y.data[1, 2, 3] == x.data[1, 2 * 8 + 3]
    z = T.tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.reshape(T.reshape(z, (6,)), (2, 3)).data, z.data)
    with pytest.raises(ShapeError):
        T.reshape(T.tensor(np.ones(4)), (3,))


def test_backward_examples():
    x = T.tensor([0.0, 0.0, 0.0], requires_grad=True)
    T.reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = T.tensor([1.0, 2.0], requires_grad=True)
    T.reduce_sum(y * y).backward()
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_accumulates_and_requires_scalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    T.reduce_sum(x * 3.0).backward()
    T.reduce_sum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6, 6])
    x.zero_grad()
    assert x.grad is None
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_every_reachable_tensor_gets_grad():
    a = T.tensor([1.0, 2.0], requires_grad=True)
    h = T.relu(a * 2.0)
    loss = T.reduce_sum(h)
    loss.backward()
    assert all(n.grad is not None and n.grad.shape == n.shape for n in T.graph(loss))


def test_graph_is_topological():
    a = T.tensor([1.0], requires_grad=True)
    b = a * a
    c = b + a
    order = T.graph(T.reduce_sum(c))
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_diamond_graph_gradient():
    a = T.tensor([3.0], requires_grad=True)
    b = a * a
    T.reduce_sum(b * b + b).backward()  # a^4 + a^2
    np.testing.assert_allclose(a.grad, [4 * 27 + 6])


def test_no_grad_records_nothing():
    a = T.tensor([1.0], requires_grad=True)
    with T.no_grad():
        b = a * 2.0
    assert not b.requires_grad


def test_einsum_gradients():
    rng = np.random.default_rng(7)
    probe = rng.normal(size=(2, 3, 2, 4))
    gradcheck(
        lambda u, W: T.reduce_sum(T.einsum("nid,ijed->nije", u, W) * probe),
        rng.normal(size=(2, 3, 5)),
        rng.normal(size=(3, 2, 4, 5)),
    )
    # index summed by one operand alone
    gradcheck(lambda a, b: T.reduce_sum(T.einsum("ij,k->k", a, b) * 1.5), rng.normal(size=(2, 3)), rng.normal(size=4))


def test_take_rows_gradient_is_sparse():
    table = T.tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    rows = T.take_rows(table, np.array([0, 1, 1]))
    T.reduce_sum(rows).backward()
    np.testing.assert_array_equal(table.grad, [[1] * 3, [2] * 3, [0] * 3, [0] * 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_softmax_is_distribution(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(rows, cols))
    for axis in (0, 1):
        s = T.softmax(T.tensor(x), axis=axis).data
        assert np.all(s >= 0)
        assert np.all(np.abs(s.sum(axis=axis) - 1) < 1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_reshape_roundtrip(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    flat = T.reshape(T.tensor(x), (x.size,))
    np.testing.assert_array_equal(T.reshape(flat, shape).data, x)
