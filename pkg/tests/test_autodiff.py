import numpy as np
import pytest

from apan import autodiff as ad
from apan.autodiff import AdamState, ShapeError, Tensor, adam_step, gradcheck


def _p(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


UNARY = {
    "neg": lambda a: ad.neg(a),
    "scale": lambda a: ad.scale(a, -1.7),
    "sqrt": lambda a: ad.sqrt(a),
    "reciprocal": lambda a: ad.reciprocal(a),
    "sigmoid": lambda a: ad.sigmoid(a),
    "log_sigmoid": lambda a: ad.log_sigmoid(a),
    "transpose": lambda a: ad.transpose(a),
    "reshape": lambda a: ad.reshape(a, (a.shape[0] * a.shape[1],)),
    "take": lambda a: ad.take(a, np.array([0, 2, 2, 1])),
    "mean": lambda a: ad.mean(a),
    "var": lambda a: ad.var(a),
    "softmax": lambda a: ad.softmax(a),
    "mean_all": lambda a: ad.mean_all(a),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(sorted(UNARY).index(name))
    a = _p(rng, 4, 3, positive=name in ("sqrt", "reciprocal"))
    # random weights give every output entry its own coefficient
    w = Tensor(np.random.default_rng(7).normal(size=UNARY[name](a).shape))
    report = gradcheck(lambda: ad.sum_all(ad.mul(UNARY[name](a), w)), [a])
    assert max(report.values()) < 1e-6, report


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4, 4))
    data[np.abs(data) < 0.1] = 0.5
    a = Tensor(data, requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)))
    assert max(gradcheck(lambda: ad.sum_all(ad.mul(ad.relu(a), w)), [a]).values()) < 1e-6


@pytest.mark.parametrize("op", ["add", "mul", "matmul", "concat", "broadcast_add", "batched_matmul"])
def test_binary_op_gradients(op):
    rng = np.random.default_rng(11)
    if op == "batched_matmul":
        a, b = _p(rng, 3, 2, 4), _p(rng, 3, 4, 5)
    elif op == "matmul":
        a, b = _p(rng, 4, 4), _p(rng, 4, 4)
    elif op == "broadcast_add":
        a, b = _p(rng, 3, 4), _p(rng, 4)
    else:
        a, b = _p(rng, 4, 3), _p(rng, 4, 3)
    fn = {"add": ad.add, "broadcast_add": ad.add, "mul": ad.mul, "matmul": ad.matmul,
          "batched_matmul": ad.matmul, "concat": lambda x, y: ad.concat([x, y])}[op]
    w = Tensor(rng.normal(size=fn(a, b).shape))
    report = gradcheck(lambda: ad.sum_all(ad.mul(fn(a, b), w)), [a, b])
    assert max(report.values()) < 1e-6, report


def test_sum_of_product_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = _p(rng, 4, 4), _p(rng, 4, 4)
    report = gradcheck(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])
    assert max(report.values()) < 1e-6


def test_softmax_uniform_and_normalised():
    assert ad.softmax(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]
    rng = np.random.default_rng(0)
    out = ad.softmax(Tensor(rng.normal(scale=30, size=(200, 7)))).data
    assert np.all(np.abs(out.sum(axis=-1) - 1) < 1e-12)
    assert np.all((out >= 0) & (out <= 1))
    mild = ad.softmax(Tensor(rng.normal(size=(200, 7)))).data
    assert np.all((mild > 0) & (mild < 1))


def test_dropout_eval_is_identity():
    a = Tensor(np.arange(6.0))
    assert ad.dropout(a, 0.5, False, None) is a


def test_dropout_preserves_expectation():
    rng = np.random.default_rng(0)
    out = ad.dropout(Tensor(np.ones(100_000)), 0.1, True, rng).data
    assert abs(out.mean() - 1.0) < 0.01
    survivors = out[out > 0]
    assert np.allclose(survivors, 1 / 0.9)
    assert abs((out == 0).mean() - 0.1) < 0.01


def test_dropout_gradient_uses_same_mask():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    out = ad.dropout(a, 0.3, True, np.random.default_rng(9))
    ad.backward(ad.sum_all(out))
    assert np.allclose(a.grad, out.data / a.data, rtol=1e-12, atol=0)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        ad.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_backward_sum_gives_ones():
    w = Tensor(np.random.default_rng(0).normal(size=(3, 3)), requires_grad=True)
    ad.backward(ad.sum_all(w))
    assert np.array_equal(w.grad, np.ones((3, 3)))


def test_sigmoid_slope_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    ad.backward(ad.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_accumulates():
    w = Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.sum_all(w))
    ad.backward(ad.sum_all(w))
    assert w.grad.tolist() == [2.0, 2.0, 2.0]


def test_backward_non_scalar():
    with pytest.raises(ShapeError):
        ad.backward(Tensor(np.ones(3), requires_grad=True))


def test_shape_errors_name_op():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_sigmoid_stable_for_large_inputs():
    out = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert out.tolist() == [0.0, 1.0]
    assert np.all(np.isfinite(ad.log_sigmoid(Tensor(np.array([-800.0, 800.0]))).data))


def test_adam_first_step_is_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step([p], AdamState(lr=1e-3))
    assert 1.0 - p.data[0] == pytest.approx(1e-3, rel=1e-4)
    assert p.grad is None


def test_adam_zero_grad_keeps_param():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    adam_step([p], AdamState())
    assert p.data[0] == 2.0


def test_adam_minimises_square():
    x = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    for _ in range(100):
        ad.backward(ad.sum_all(ad.mul(x, x)))
        adam_step([x], state)
    assert abs(x.data[0]) < 0.1


def test_adam_missing_grad():
    p = Tensor(np.ones(2), requires_grad=True, name="w")
    with pytest.raises(ValueError, match="w"):
        adam_step([p], AdamState())
