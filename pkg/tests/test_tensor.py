import math

import numpy as np
import pytest

from algcd import tensor as tn
from algcd.errors import DegenerateVectorError, DimensionError, GraphError, NumericError
from algcd.gradcheck import grad_check
from algcd.tensor import Tensor

SEEDS = range(20)


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(tn.matmul(eye, Tensor([[3.0], [4.0]])).data, [[3], [4]])
    out = tn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_errors():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 1\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    # zero inner extent never gets as far as the product
    with pytest.raises(DimensionError):
        tn.matmul(Tensor(np.ones((1, 0))), Tensor(np.ones((0, 1))))


def test_softmax_examples():
    np.testing.assert_allclose(tn.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(tn.softmax_rows(Tensor([[0.70711, 0.0]])).data,
                               [[0.66972, 0.33028]], atol=1e-4)
    big = tn.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-12)


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(3)
    for _ in range(50):
        y = tn.softmax_rows(Tensor(rng.standard_normal((5, 7)) * 10)).data
        assert np.all((y >= 0) & (y <= 1))
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_nonfinite(bad):
    with pytest.raises(NumericError):
        tn.softmax_rows(Tensor([[0.0, bad]]))


def test_gelu_examples():
    assert tn.gelu(Tensor([0.0])).data[0] == 0.0
    x = 12.0
    assert abs(tn.gelu(Tensor([x])).data[0] - x) / x < 1e-6
    c = math.sqrt(2 / math.pi)
    want = 0.5 * (1 + math.tanh(c * (1 + 0.044715)))
    assert tn.gelu(Tensor([1.0])).data[0] == pytest.approx(want, abs=1e-12)


def test_l2_normalize_examples():
    np.testing.assert_allclose(tn.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_allclose(tn.l2_normalize_rows(Tensor(u)).data, u)
    rng = np.random.default_rng(0)
    y = tn.l2_normalize_rows(Tensor(rng.standard_normal((10, 6)))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-9)


def test_l2_normalize_zero_row_names_index():
    with pytest.raises(DegenerateVectorError) as info:
        tn.l2_normalize_rows(Tensor([[1.0, 0.0], [0.0, 0.0]]))
    assert "row 1" in str(info.value)


def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tn.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x = Tensor([[1.0, 2.0]], requires_grad=True)
    tn.scale(tn.matmul(x, x.T), 0.5).backward()
    np.testing.assert_allclose(x.grad, [[1.0, 2.0]])


def test_backward_twice_raises():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    loss = tn.tsum(tn.mul(x, x))
    loss.backward()
    g = x.grad.copy()
    with pytest.raises(GraphError):
        loss.backward()
    np.testing.assert_array_equal(x.grad, g)


def test_backward_needs_scalar_and_graph():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(GraphError):
        tn.mul(x, x).backward()
    with pytest.raises(GraphError):
        tn.tsum(Tensor([[1.0, 2.0]])).backward()


def test_shared_subexpression_accumulates():
    x = Tensor([[2.0]], requires_grad=True)
    y = tn.mul(x, x)
    tn.tsum(tn.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [[8.0]])


def test_broadcasting_is_narrow():
    m = Tensor(np.ones((3, 2)), requires_grad=True)
    r = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    out = tn.add(m, r)
    np.testing.assert_array_equal(out.data, [[2, 3]] * 3)
    tn.tsum(out).backward()
    np.testing.assert_array_equal(r.grad, [[3.0, 3.0]])
    np.testing.assert_array_equal(tn.add(r, Tensor(np.ones((3, 2)))).data, [[2, 3]] * 3)
    np.testing.assert_array_equal((2.0 * Tensor(np.ones((2, 2)))).data, 2 * np.ones((2, 2)))
    with pytest.raises(DimensionError):
        tn.add(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 1))))
    with pytest.raises(DimensionError):
        tn.mul(Tensor(np.ones((3, 2))), Tensor(np.ones((1, 2))))
    with pytest.raises(DimensionError):
        tn.add(Tensor(np.ones((2,))), Tensor(np.ones((3,))))


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((0, 3)))


def test_ops_are_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    one = tn.softmax_rows(tn.gelu(tn.matmul(Tensor(a), Tensor(b)))).data
    two = tn.softmax_rows(tn.gelu(tn.matmul(Tensor(a), Tensor(b)))).data
    assert np.array_equal(one, two)


# ---------------------------------------------------------------------------
# gradient checks, 20 seeded instances per primitive


def _case(name, r):
    if name == "matmul":
        a, b, w = leaf(r, 3, 4), leaf(r, 4, 2), Tensor(r.standard_normal((3, 2)))
        return [a, b], lambda: tn.tsum(tn.mul(tn.matmul(a, b), w))
    if name == "concat":
        a, b, w = leaf(r, 2, 3), leaf(r, 2, 2), Tensor(r.standard_normal((2, 5)))
        return [a, b], lambda: tn.tsum(tn.mul(tn.gelu(tn.concat([a, b])), w))
    if name == "add":
        a, b, w = leaf(r, 3, 4), leaf(r, 1, 4), Tensor(r.standard_normal((3, 4)))
        return [a, b], lambda: tn.tsum(tn.mul(tn.gelu(tn.add(a, b)), w))
    if name == "mul":
        a, b, w = leaf(r, 3, 4), leaf(r, 3, 4), Tensor(r.standard_normal((3, 4)))
        return [a, b], lambda: tn.tsum(tn.mul(tn.mul(a, b), w))
    if name == "cosine":
        a, b, w = leaf(r, 3, 6), leaf(r, 3, 6), Tensor(r.standard_normal((3, 1)))
        return [a, b], lambda: tn.tsum(tn.mul(tn.cosine_similarity_rows(a, b), w))
    if name == "cross_entropy":
        x = leaf(r, 4, 5)
        target = np.eye(5)[r.integers(0, 5, size=4)]
        return [x], lambda: tn.cross_entropy(target, x)
    if name == "mean":
        x = leaf(r, 4, 3)
        return [x], lambda: tn.mean(tn.gelu(x))
    x = leaf(r, 3, 5)
    w = Tensor(r.standard_normal((3, 5)))
    op = {"softmax_rows": tn.softmax_rows, "gelu": tn.gelu, "l2_normalize_rows": tn.l2_normalize_rows,
          "scale": lambda t: tn.gelu(tn.scale(t, 1.7))}[name]
    return [x], lambda: tn.tsum(tn.mul(op(x), w))


PRIMITIVES = ("matmul", "softmax_rows", "gelu", "l2_normalize_rows", "concat", "add", "mul",
              "scale", "mean", "cross_entropy", "cosine")


@pytest.mark.parametrize("name", PRIMITIVES)
def test_grad_check_primitives(name):
    worst = 0.0
    for seed in SEEDS:
        leaves, f = _case(name, np.random.default_rng(seed))
        worst = max(worst, grad_check(f, leaves))
    assert worst < 1e-4, f"{name}: {worst}"


def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3)))
    assert grad_check(lambda: tn.tsum(tn.mul(x, x)), [x]) < 1e-8


def test_grad_check_catches_corrupt_adjoint():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)) + 3.0)

    def bad_square(a):
        return Tensor.from_op(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,))

    assert grad_check(lambda: tn.tsum(bad_square(x)), [x]) > 1e-2
