import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgan import autodiff as ad
from ecgan.autodiff import Graph, GraphStateError, NumericError, ShapeError, Tensor


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------- forward examples

def test_square_forward():
    g = Graph(lambda x: x * x)
    assert ad.forward(g, {"x": Tensor(3.0)})["output"].item() == 9.0


def test_identity_matmul():
    g = Graph(lambda a, x: ad.matmul(a, x))
    out = ad.forward(g, {"a": Tensor(np.eye(2)), "x": Tensor([1.0, 2.0])})["output"]
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_mean_forward():
    g = Graph(lambda x: ad.mean(x))
    assert ad.forward(g, {"x": Tensor([1.0, 2.0, 3.0, 4.0])})["output"].item() == 2.5


def test_graph_nodes_are_topologically_ordered():
    g = Graph(lambda x, y: ad.mean(ad.tanh(x * y) + x))
    ad.forward(g, {"x": Tensor(np.ones(3), requires_grad=True), "y": Tensor(np.arange(3.0))})
    seen = set(range(2))  # the two bound inputs
    for node in g.nodes:
        assert all(i in seen for i in node.inputs)
        seen.add(node.output)
    assert [n.op for n in g.nodes] == ["mul", "tanh", "add", "mean"]


# ---------------------------------------------------------------- backward examples

def test_square_backward():
    x = Tensor(3.0, requires_grad=True)
    g = Graph(lambda x: x * x)
    ad.forward(g, {"x": x})
    assert ad.backward(g)["x"] == pytest.approx(6.0)


def test_mean_backward():
    g = Graph(lambda x: ad.mean(x))
    ad.forward(g, {"x": Tensor(np.arange(4.0), requires_grad=True)})
    np.testing.assert_allclose(ad.backward(g)["x"], 0.25)


def test_l1_backward_subgradient():
    g = Graph(lambda x, t: ad.l1_loss(x, t))
    ad.forward(g, {"x": Tensor([0.0, 2.0], requires_grad=True), "t": Tensor([1.0, 1.0])})
    np.testing.assert_allclose(ad.backward(g)["x"], [-0.5, 0.5])


def test_l1_subgradient_at_zero_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.l1_loss(x, Tensor([1.0, 0.0])).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.5])


def test_backward_before_forward_raises():
    with pytest.raises(GraphStateError):
        ad.backward(Graph(lambda x: x * x))


def test_backward_is_additive():
    rng = np.random.default_rng(0)
    w = param(rng, 4)
    x = rng.normal(size=4)

    def f1():
        return ad.sum_(ad.tanh(w * x))

    def f2():
        return ad.mean(w * w)

    f1().backward()
    g1 = w.grad.copy()
    w.grad = None
    f2().backward()
    g2 = w.grad.copy()
    w.grad = None
    (f1() + f2()).backward()
    np.testing.assert_allclose(w.grad, g1 + g2, rtol=1e-12)


def test_non_requires_grad_untouched():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.full(3, 2.0))
    ad.sum_(a * b).backward()
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(a * a)
    assert not y.requires_grad


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises_numeric_error():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        ad.mul(Tensor([1e200]), Tensor([1e200]))


# ---------------------------------------------------------------- finite differences

def test_finite_diff_square():
    g = Graph(lambda x: x * x)
    assert ad.finite_diff_check(g, {"x": Tensor(3.0, requires_grad=True)}, epsilon=1e-5) < 1e-6


def test_finite_diff_rejects_bad_epsilon():
    g = Graph(lambda x: x * x)
    with pytest.raises(ValueError):
        ad.finite_diff_check(g, {"x": Tensor(1.0, requires_grad=True)}, epsilon=0.1)


OP_CASES = {
    "add": lambda r: (lambda a, b: ad.add(a, b), {"a": param(r, 3, 4), "b": param(r, 4)}),
    "sub": lambda r: (lambda a, b: ad.sub(a, b), {"a": param(r, 2, 3, 4), "b": param(r, 3, 4)}),
    "mul": lambda r: (lambda a, b: ad.mul(a, b), {"a": param(r, 3, 4), "b": param(r, 3, 4)}),
    "matmul": lambda r: (lambda a, b: ad.matmul(a, b), {"a": param(r, 2, 3, 4), "b": param(r, 4, 5)}),
    "conv1d": lambda r: (lambda x, w: ad.conv1d(x, w), {"x": param(r, 2, 3, 9), "w": param(r, 4, 3, 6)}),
    "instance_norm": lambda r: (lambda x: ad.instance_norm(x), {"x": param(r, 2, 3, 8)}),
    "relu": lambda r: (lambda x: ad.relu(x), {"x": param(r, 5, 4)}),
    "tanh": lambda r: (lambda x: ad.tanh(x), {"x": param(r, 5, 4)}),
    "sigmoid": lambda r: (lambda x: ad.sigmoid(x), {"x": param(r, 5, 4)}),
    "global_avg_pool": lambda r: (lambda x: ad.global_avg_pool(x), {"x": param(r, 2, 3, 7)}),
    "concat": lambda r: (lambda a, b: ad.concat([a, b], axis=1), {"a": param(r, 2, 3), "b": param(r, 2, 2)}),
    "slice": lambda r: (lambda x: ad.slice_(x, (slice(None), slice(1, 4))), {"x": param(r, 3, 5)}),
    "mean": lambda r: (lambda x: ad.mean(x, axis=1), {"x": param(r, 3, 5)}),
    "sum": lambda r: (lambda x: ad.sum_(x, axis=0), {"x": param(r, 3, 5)}),
    "reshape": lambda r: (lambda x: ad.reshape(x, (5, 3)), {"x": param(r, 3, 5)}),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_match_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    fn, inputs = OP_CASES[op](rng)
    proj = np.random.default_rng(seed + 100)
    weights = {}

    # a random projection of the output avoids exactly-cancelling gradients
    def loss(**kw):
        out = fn(**kw)
        if op not in weights:
            weights[op] = Tensor(proj.normal(size=out.shape))
        return ad.sum_(out * weights[op])

    assert ad.finite_diff_check(Graph(loss), inputs, epsilon=1e-5) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(3, 4))
    labels = rng.integers(0, 3, size=5)
    g1 = Graph(lambda x: ad.l1_loss(x, Tensor(target)))
    assert ad.finite_diff_check(g1, {"x": param(rng, 3, 4)}) < 1e-4
    g2 = Graph(lambda z: ad.softmax_cross_entropy(z, labels))
    assert ad.finite_diff_check(g2, {"z": param(rng, 5, 3)}) < 1e-4


def test_conv_instance_norm_relu_chain():
    rng = np.random.default_rng(1)
    proj = Tensor(rng.normal(size=(2, 4, 10)))
    w = param(rng, 4, 2, 6)
    g = Graph(lambda x: ad.sum_(ad.relu(ad.instance_norm(ad.conv1d(x, w))) * proj))
    err = ad.finite_diff_check(g, {"x": param(rng, 2, 2, 10)}, wrt=["x", w], epsilon=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------- op semantics

def test_conv1d_same_padding_matches_numpy():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 12))
    w = rng.normal(size=(1, 1, 6))
    out = ad.conv1d(Tensor(x), Tensor(w)).data[0, 0]
    padded = np.concatenate([np.zeros(2), x[0, 0], np.zeros(3)])
    ref = np.array([padded[i:i + 6] @ w[0, 0] for i in range(12)])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_instance_norm_moments():
    rng = np.random.default_rng(4)
    y = ad.instance_norm(Tensor(rng.normal(3.0, 2.0, size=(4, 3, 50)))).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-9
    # eps = 1e-5 shrinks the variance by var/(var+eps)
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-5


def test_softmax_cross_entropy_values():
    loss = ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [1])
    assert loss.item() == pytest.approx(np.log(2))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_sigmoid_matches_logistic(values):
    x = np.array(values)
    np.testing.assert_allclose(ad.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-12, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5))
def test_broadcast_gradient_shapes(rows, cols):
    a = Tensor(np.ones((rows, cols)), requires_grad=True)
    b = Tensor(np.ones(cols), requires_grad=True)
    ad.sum_(a * b).backward()
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape
    np.testing.assert_array_equal(b.grad, np.full(cols, rows))
