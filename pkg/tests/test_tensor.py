import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cagematch import geom
from cagematch import tensor as T
from cagematch.tensor import DimensionError, NumericError, Tensor

finite = st.floats(-10, 10, allow_nan=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_grad(self):
        A, B = leaf([[1.0, 2.0]]), Tensor([[3.0], [4.0]])
        T.reduce_sum(T.matmul(A, B)).backward()
        np.testing.assert_allclose(A.grad, [[3.0, 4.0]])
        assert T.check_gradients(lambda: T.reduce_sum(T.matmul(A, B)), [A]) < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_grad(self, rng):
        a, b = leaf(rng.normal(size=(4, 2, 3))), leaf(rng.normal(size=(3, 5)))
        assert T.check_gradients(lambda: T.reduce_sum(T.square(T.matmul(a, b))), [a, b]) < 1e-6


class TestReduce:
    def test_mean_axis0(self):
        np.testing.assert_array_equal(T.reduce_mean(Tensor([[1.0, 3.0], [3.0, 5.0]]), axis=0).data, [2, 4])
        np.testing.assert_array_equal(T.reduce_mean(Tensor([[7.0]]), axis=0).data, [7])

    def test_mean_grad(self):
        x = leaf(np.arange(4.0))
        T.reduce_mean(x).backward()
        np.testing.assert_array_equal(x.grad, np.full(4, 0.25))

    def test_empty_mean(self):
        with pytest.raises(DimensionError):
            T.reduce_mean(Tensor(np.zeros((0, 3))), axis=0)

    def test_max_grad_goes_to_argmax(self):
        x = leaf([[1.0, 5.0], [3.0, 2.0]])
        T.reduce_sum(T.reduce_max(x, axis=0)).backward()
        np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0]])


class TestElementwise:
    def test_leaky(self):
        np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0])

    def test_add(self):
        np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])

    def test_square_grad(self):
        x = leaf(3.0)
        T.square(x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_div_by_zero(self):
        with pytest.raises(NumericError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_sqrt_negative(self):
        with pytest.raises(NumericError):
            T.sqrt(Tensor([-1.0]))

    def test_broadcast_grad(self, rng):
        a, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(1, 3)))
        f = lambda: T.reduce_sum(T.square(a * b - a / (T.square(b) + 1.0)))
        assert T.check_gradients(f, [a, b]) < 1e-6


class TestNorm:
    def test_pythagorean(self):
        assert T.l2_norm_lastdim(Tensor([3.0, 4.0, 0.0])).data[0] == pytest.approx(5.0)

    def test_zero_guard(self):
        x = leaf([0.0, 0.0, 0.0])
        out = T.l2_norm_lastdim(x)
        out.backward()
        assert out.data[0] == 0.0
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_grad_unit(self):
        x = leaf([1.0, 0.0, 0.0])
        T.reduce_sum(T.l2_norm_lastdim(x)).backward()
        np.testing.assert_allclose(x.grad, [1.0, 0.0, 0.0])
        assert T.check_gradients(lambda: T.reduce_sum(T.l2_norm_lastdim(x)), [x]) < 1e-6


class TestCheckGradients:
    def test_sum_of_squares(self, rng):
        x = leaf(rng.normal(size=10))
        assert T.check_gradients(lambda: T.reduce_sum(T.square(x)), [x]) < 1e-6

    def test_constant(self):
        x = leaf([1.0, 2.0])
        assert T.check_gradients(lambda: Tensor(3.0) + 0.0 * T.reduce_sum(x), [x]) == 0.0

    def test_chamfer(self, rng):
        a, b = leaf(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3)))
        assert T.check_gradients(lambda: geom.chamfer(a, b), [a]) < 1e-4

    def test_softmax(self, rng):
        x = leaf(rng.normal(size=(6, 4)))
        w = rng.normal(size=(6, 4))
        assert T.check_gradients(lambda: T.reduce_sum(T.softmax(x) * w), [x]) < 1e-6

    def test_take_and_concat(self, rng):
        x = leaf(rng.normal(size=(6, 3)))
        idx = np.array([0, 0, 5, 2])
        f = lambda: T.reduce_sum(T.square(T.concat([T.take(x, idx), x], axis=0)))
        assert T.check_gradients(f, [x]) < 1e-6


def test_backward_twice_accumulates():
    x = leaf(2.0)
    T.square(x).backward()
    T.square(x).backward()
    assert x.grad == pytest.approx(8.0)


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert y._node is None


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        T.exp(Tensor([1e6]))


def test_checkpoint_roundtrip(tmp_path, rng):
    d = {"b/x": Tensor(rng.normal(size=(3, 2))), "a": Tensor(np.arange(4.0))}
    p = tmp_path / "m.smck"
    T.save_checkpoint(p, d)
    back = T.load_checkpoint(p)
    assert list(back) == ["a", "b/x"]
    for k in d:
        np.testing.assert_array_equal(back[k], d[k].data)
    first = p.read_bytes()
    T.save_checkpoint(p, {k: Tensor(v) for k, v in back.items()})
    assert p.read_bytes() == first


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=finite))
def test_sum_grad_is_ones(x):
    t = leaf(x)
    T.reduce_sum(t).backward()
    np.testing.assert_array_equal(t.grad, np.ones_like(x))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.just(3)), elements=finite))
def test_norm_nonnegative(x):
    assert np.all(T.l2_norm_lastdim(Tensor(x)).data >= 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=finite))
def test_softmax_rows_stochastic(x):
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
