import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from cglmha import tensor as T
from cglmha.errors import ContractError, NumericError, ShapeError
from cglmha.tensor import Tensor


def f64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def grad_of(fn, *arrays):
    ts = [f64(a, grad=True) for a in arrays]
    T.backward(fn(*ts))
    return [t.grad for t in ts]


def check_grad(fn, *arrays, tol=1e-6):
    """Autodiff gradient of sum(fn(...)) against central differences."""
    ts = [f64(a, grad=True) for a in arrays]
    T.backward(T.reduce_sum(fn(*ts)))
    for t in ts:
        num = T.finite_diff_grad(lambda: T.reduce_sum(fn(*ts)).item(), t, 1e-6)
        assert T.relative_error(t.grad, num) < tol


class TestTensor:
    def test_zero_dimension_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_default_dtype_float32(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.ones(2)).dtype == np.float64

    def test_data_is_row_major(self):
        t = Tensor(np.asfortranarray(np.arange(6.0).reshape(2, 3)))
        assert t.data.flags.c_contiguous
        assert t.data.reshape(-1).tolist() == [0, 1, 2, 3, 4, 5]


class TestMatmul:
    def test_identity(self):
        B = [[5.0, 6.0], [7.0, 8.0]]
        assert T.matmul(f64(np.eye(2)), f64(B)).data.tolist() == B

    def test_against_triple_loop(self):
        A, B = [[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]
        expect = oracles.matmul(A, B)
        assert expect == [[19, 22], [43, 50]]
        assert T.matmul(f64(A), f64(B)).data.tolist() == expect

    def test_zero_annihilates(self, rng):
        out = T.matmul(f64(np.zeros((2, 2))), f64(rng.normal(size=(2, 2))))
        assert not out.data.any()

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_random_against_triple_loop(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        A, B = r.normal(size=(m, k)), r.normal(size=(k, n))
        np.testing.assert_allclose(T.matmul(f64(A), f64(B)).data, oracles.matmul(A.tolist(), B.tolist()), atol=1e-12)

    def test_backward_rule(self, rng):
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        gA, gB = grad_of(lambda a, b: T.reduce_sum(T.matmul(a, b)), A, B)
        np.testing.assert_allclose(gA, np.ones((3, 2)) @ B.T)
        np.testing.assert_allclose(gB, A.T @ np.ones((3, 2)))


class TestElementwise:
    def test_sigmoid_tanh_at_zero(self):
        assert T.sigmoid(f64([0.0])).data[0] == 0.5
        assert T.tanh(f64([0.0])).data[0] == 0.0

    def test_sigmoid_two_extended_precision(self):
        mpmath.mp.dps = 40
        expect = float(1 / (1 + mpmath.exp(-2)))
        assert abs(expect - 0.880797) < 1e-6
        assert abs(T.sigmoid(f64([2.0])).data[0] - expect) < 1e-15

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(f64([-800.0, 800.0])).data
        assert out.tolist() == [0.0, 1.0]

    def test_dispatch(self):
        x = f64([1.0, -2.0])
        assert T.elementwise("relu", x).data.tolist() == [1.0, 0.0]
        assert T.elementwise("scale", x, c=3).data.tolist() == [3.0, -6.0]
        assert T.elementwise("sub", x, x).data.tolist() == [0.0, 0.0]

    def test_no_implicit_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(f64(np.ones((2, 3))), f64(np.ones(3)))
        with pytest.raises(ShapeError):
            T.mul(f64(np.ones((2, 1))), f64(np.ones((2, 3))))

    def test_tanh_backward_rule(self):
        x = np.array([-1.5, 0.2, 0.9])
        (g,) = grad_of(lambda t: T.reduce_sum(T.tanh(t)), x)
        np.testing.assert_allclose(g, 1 - np.tanh(x) ** 2)

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "exp"])
    def test_unary_gradients(self, op, rng):
        check_grad(lambda t: T.elementwise(op, t), rng.normal(size=(3, 4)))

    def test_relu_gradient_away_from_kink(self):
        check_grad(T.relu, np.array([-2.0, -0.5, 0.3, 1.7]))

    def test_log_gradient(self, rng):
        check_grad(T.log, rng.uniform(0.5, 2.0, size=5))

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_gradients(self, op, rng):
        check_grad(lambda a, b: T.elementwise(op, a, b), rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(f64([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_known_values(self):
        np.testing.assert_allclose(T.softmax(f64([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)
        np.testing.assert_allclose(T.softmax(f64([1.0, 2.0, 3.0])).data, oracles.softmax([1, 2, 3]), atol=1e-15)

    def test_overflow_safe(self):
        assert T.softmax(f64([1000.0, 1000.0])).data.tolist() == [0.5, 0.5]

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                      elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_probability_vector(self, x, c):
        axis = x.ndim - 1
        p = T.softmax(f64(x), axis).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-6)
        np.testing.assert_allclose(T.softmax(f64(x + c), axis).data, p, atol=1e-9)

    def test_gradient(self, rng):
        w = rng.normal(size=(2, 4))
        check_grad(lambda t: T.mul(T.softmax(t, axis=1), f64(w)), rng.normal(size=(2, 4)))

    def test_masked_exact_zero_and_error(self):
        keep = np.array([[True, False, True]])
        p = T.masked_softmax(f64([[1.0, 50.0, 2.0]]), keep, axis=1).data
        assert p[0, 1] == 0.0
        np.testing.assert_allclose(p[0, [0, 2]], oracles.softmax([1.0, 2.0]))
        with pytest.raises(ContractError):
            T.masked_softmax(f64([[1.0, 2.0]]), np.array([[False, False]]), axis=1)

    def test_log_softmax_matches(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(T.log_softmax(f64(x), 1).data, np.log(T.softmax(f64(x), 1).data), atol=1e-12)
        check_grad(lambda t: T.log_softmax(t, 1), x)


class TestShapeOps:
    def test_concat_single_and_order(self, rng):
        A, B = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        assert np.array_equal(T.concat([f64(A)], 1).data, A)
        out = T.concat([f64(A), f64(B)], 1).data
        assert out.shape == (2, 6)
        assert np.array_equal(out[:, :3], A)

    def test_concat_heads_shape(self, rng):
        heads = [f64(rng.normal(size=(20, 32))) for _ in range(4)]
        assert T.concat(heads, 1).shape == (20, 128)

    def test_concat_incompatible(self):
        with pytest.raises(ShapeError):
            T.concat([f64(np.ones((2, 3))), f64(np.ones((3, 3)))], 1)

    def test_concat_stack_gradients(self, rng):
        w = rng.normal(size=(2, 5))
        check_grad(lambda a, b: T.mul(T.concat([a, b], 1), f64(w)), rng.normal(size=(2, 2)), rng.normal(size=(2, 3)))
        w = rng.normal(size=(2, 2, 3))
        check_grad(lambda a, b: T.mul(T.stack([a, b], 1), f64(w)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))

    def test_narrow_take_pad(self, rng):
        x = rng.normal(size=(2, 5, 3))
        assert np.array_equal(T.narrow(f64(x), 1, 1, 3).data, x[:, 1:4])
        assert np.array_equal(T.take(f64(x), 2, 1).data, x[:, 2])
        p = T.pad_zeros(f64(x), 1, 1, 2).data
        assert p.shape == (2, 8, 3) and not p[:, 0].any() and not p[:, -2:].any()
        check_grad(lambda t: T.pad_zeros(T.narrow(t, 1, 1, 3), 1, 2, 1), x)
        check_grad(lambda t: T.take(t, 4, 1), x)

    def test_reshape_transpose_sum_mean(self, rng):
        x = rng.normal(size=(2, 3, 4))
        check_grad(lambda t: T.transpose(T.reshape(t, (6, 4))), x)
        check_grad(lambda t: T.reduce_sum(t, axis=1), x)
        assert abs(T.mean(f64(x)).item() - x.mean()) < 1e-15

    def test_add_bias(self, rng):
        x, b = rng.normal(size=(2, 3, 4)), rng.normal(size=4)
        assert np.allclose(T.add_bias(f64(x), f64(b)).data, x + b)
        check_grad(T.add_bias, x, b)
        with pytest.raises(ShapeError):
            T.add_bias(f64(x), f64(np.ones(3)))

    def test_gather_rows(self, rng):
        table = rng.normal(size=(5, 3))
        ids = np.array([[1, 0, 4], [4, 4, 0]])
        out = T.gather_rows(f64(table), ids, skip=0).data
        assert np.array_equal(out[0, 0], table[1]) and not out[0, 1].any()
        t = f64(table, grad=True)
        T.backward(T.reduce_sum(T.gather_rows(t, ids, skip=0)))
        assert t.grad[4].tolist() == [3, 3, 3] and not t.grad[0].any()
        with pytest.raises(IndexError):
            T.gather_rows(f64(table), np.array([5]))

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2))
    def test_shape_algebra(self, dims, extra):
        x = f64(np.ones(dims))
        assert T.reduce_sum(x, axis=0).shape == tuple(dims[1:]) or len(dims) == 1
        assert T.concat([x, x], axis=0).shape == (2 * dims[0],) + tuple(dims[1:])
        assert T.stack([x] * (extra + 1), axis=0).shape == (extra + 1,) + tuple(dims)
        assert T.pad_zeros(x, 0, extra, 1).shape == (dims[0] + extra + 1,) + tuple(dims[1:])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        (g,) = grad_of(T.reduce_sum, rng.normal(size=(2, 3)))
        assert np.array_equal(g, np.ones((2, 3)))

    def test_square(self):
        (g,) = grad_of(lambda t: T.reduce_sum(T.mul(t, t)), [1.0, -2.0])
        assert g.tolist() == [2.0, -4.0]

    def test_reuse_accumulates(self):
        (g,) = grad_of(lambda t: T.reduce_sum(t + t), [3.0])
        assert g.tolist() == [2.0]

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            T.backward(f64([1.0, 2.0], grad=True) * 2)

    def test_tape_is_topological_and_replays(self, rng):
        a = f64(rng.normal(size=3), grad=True)
        with T.GradTape() as tape:
            b = T.tanh(a)
            loss = T.reduce_sum(T.mul(b, b))
        ids = {id(n) for n in tape.nodes}
        seen = set()
        for node in tape.nodes:
            assert all(id(p) in seen or id(p) not in ids for p in node._parents)
            seen.add(id(node))
        tape.backward(loss)
        g1 = a.grad.copy()
        a.grad = None
        T.backward(loss)
        np.testing.assert_array_equal(a.grad, g1)

    def test_no_grad_records_nothing(self):
        a = f64([1.0], grad=True)
        with T.no_grad():
            b = a * 2
        assert not b.requires_grad

    def test_threads_use_separate_tapes(self):
        tapes = {}

        def work(k):
            a = f64([float(k)], grad=True)
            with T.GradTape() as tape:
                T.reduce_sum(T.tanh(a) * 3)
            tapes[k] = len(tape.nodes)

        threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert set(tapes.values()) == {3}

    def test_deterministic(self, rng):
        x = rng.normal(size=(4, 4))
        a = T.softmax(T.matmul(f64(x), f64(x)), 1).data
        b = T.softmax(T.matmul(f64(x), f64(x)), 1).data
        assert a.tobytes() == b.tobytes()


class TestFiniteDiff:
    def test_square(self):
        th = f64([3.0])
        g = T.finite_diff_grad(lambda: T.reduce_sum(th * th).item(), th)
        assert abs(g[0] - 6.0) < 1e-6

    def test_sin(self):
        th = f64([0.0])
        g = T.finite_diff_grad(lambda: math.sin(th.data[0]), th)
        assert abs(g[0] - 1.0) < 1e-6

    def test_restores_and_errors(self):
        th = f64([1.0, 2.0])
        T.finite_diff_grad(lambda: float(th.data.sum()), th)
        assert th.data.tolist() == [1.0, 2.0]
        with pytest.raises(NumericError):
            T.finite_diff_grad(lambda: float("nan"), th)
        with pytest.raises(ContractError):
            T.finite_diff_grad(lambda: 0.0, th, h=0)

    def test_relative_error_definitions(self):
        a, b = np.array([1.0, 1e-6]), np.array([1.0, 2e-6])
        assert T.relative_error(a, b) == pytest.approx(1e-6)
        assert T.relative_error(a, b, elementwise=True) == pytest.approx(0.5)
