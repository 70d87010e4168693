import numpy as np
import pytest

from charattack import autodiff as ad
from charattack.autodiff import Graph, GraphError, ShapeError, Tensor, finite_diff_check
from charattack.model import GoldTarget

from conftest import tiny_model


def test_square_forward_and_backward():
    g = Graph(lambda x: ad.square(x))
    assert g.forward(x=3.0) == pytest.approx(9.0)
    assert g.backward()["x"] == pytest.approx(6.0)


def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_sum_gradient_is_ones():
    g = Graph(lambda x: ad.reduce_sum(x))
    g.forward(x=np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(g.backward()["x"], np.ones((2, 3)))


def test_two_layer_net_matches_straight_line_arithmetic():
    rng = np.random.default_rng(0)
    w1, b1, w2 = rng.normal(size=(4, 5)), rng.normal(size=5), rng.normal(size=(5, 3))
    x = rng.normal(size=(2, 4))

    def net(x, w1, b1, w2):
        return ad.reduce_sum(ad.log_softmax(ad.tanh(x @ w1 + b1) @ w2))

    value = Graph(net).forward(x=x, w1=w1, b1=b1, w2=w2)
    # the same arithmetic by hand, element by element
    total = 0.0
    for r in range(2):
        hidden = [np.tanh(sum(x[r, i] * w1[i, j] for i in range(4)) + b1[j]) for j in range(5)]
        logits = [sum(hidden[j] * w2[j, k] for j in range(5)) for k in range(3)]
        top = max(logits)
        lse = top + np.log(sum(np.exp(v - top) for v in logits))
        total += sum(v - lse for v in logits)
    assert float(value) == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("op", [
    lambda x: ad.reduce_sum(ad.sigmoid(x) * ad.tanh(x)),
    lambda x: ad.reduce_sum(ad.softmax(x, axis=0) * ad.relu(x + 0.3)),
    lambda x: ad.reduce_sum(ad.max_pool(ad.reshape(x, (2, 3)), axis=1)),
    lambda x: ad.reduce_sum(ad.concat([x, ad.square(x)], axis=0)),
    lambda x: ad.reduce_sum(ad.stack([x, x * 2.0], axis=1)[:, 1]),
])
def test_ops_match_finite_differences(op):
    x = np.array([0.3, -1.2, 0.7, 2.0, -0.4, 0.1])
    assert finite_diff_check(op, x) < 1e-6


def test_conv_chars_gradients():
    rng = np.random.default_rng(1)
    w, b = rng.normal(size=(6, 4)), rng.normal(size=4)
    f = lambda x: ad.reduce_sum(ad.tanh(ad.conv_chars(ad.reshape(x, (2, 5, 3)), Tensor(w), Tensor(b), 2)))  # noqa: E731
    assert finite_diff_check(f, rng.normal(size=30)) < 1e-6


def test_finite_diff_check_analytic_cases():
    assert finite_diff_check(lambda x: ad.reduce_sum(ad.square(x)), np.array([3.0]), eps=1e-5) < 1e-6
    assert finite_diff_check(lambda x: ad.reduce_sum(x * 0.0) + 4.0, np.array([1.0, 2.0])) == 0.0


def test_finite_diff_on_model_loss_four_words():
    model, _ = tiny_model()
    grid = model.encode(["die", "gute", "nacht", "gut"])
    f, x0 = model.input_function(grid, GoldTarget(model.vocab.encode_target(["the", "good", "night"])))
    assert finite_diff_check(f, x0, coords=40, rng=np.random.default_rng(0)) < 1e-4


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    g = Graph(lambda x: ad.reduce_sum(x), input_shapes={"x": (2,)})
    with pytest.raises(ShapeError):
        g.forward(x=np.ones(3))
    with pytest.raises(GraphError):
        Graph(lambda x: x).backward()


def test_backward_needs_scalar():
    with pytest.raises(GraphError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.reduce_sum(x * 2.0)
    y.backward()
    assert x.grad is None
