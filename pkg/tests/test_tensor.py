import math

import numpy as np
import pytest

from pifs import tensor as T
from pifs.tensor import DomainError, Graph, ShapeError, Tensor, grad_check


def central_difference(f, x, eps=1e-6):
    """Independent numerical gradient of a numpy -> float function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestElementwise:
    def test_relu_sign_cases(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_gradient_at_zero_is_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        T.backward(T.sum(T.relu(x)))
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_add(self):
        assert T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]

    def test_log_derivative(self):
        x = Tensor(2.0, requires_grad=True)
        T.backward(T.log(x))
        assert x.grad == pytest.approx(0.5, abs=0)

    def test_scalar_broadcast_gradient(self):
        a = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        T.backward(T.sum(a * s))
        assert a.grad.tolist() == [2.0, 2.0, 2.0]
        assert s.grad == 6.0

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_log_non_positive_names_index(self):
        with pytest.raises(DomainError, match=r"\(1,\)"):
            T.log(Tensor([1.0, -2.0]))

    @pytest.mark.parametrize("op", [T.exp, T.relu, lambda a: T.scale(a, -1.5)])
    def test_unary_matches_finite_differences(self, op):
        rng = np.random.default_rng(3)
        w = rng.normal(size=6)
        x = rng.normal(size=6)
        x[np.abs(x) < 1e-3] = 0.5
        res = grad_check(lambda t: T.sum(op(t) * Tensor(w)), x)
        assert res.max_rel_error < 1e-5
        assert res.skipped == ()

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
    def test_binary_matches_finite_differences(self, op):
        rng = np.random.default_rng(5)
        a, b, w = rng.normal(size=(3, 5))
        b = np.where(np.abs(b) < 0.3, 0.7, b)
        assert grad_check(lambda t: T.sum(op(t, Tensor(b)) * Tensor(w)), a).max_rel_error < 1e-5
        assert grad_check(lambda t: T.sum(op(Tensor(a), t) * Tensor(w)), b).max_rel_error < 1e-5


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert out.data.tolist() == [[5.0, 6.0], [7.0, 8.0]]

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        expected = central_difference(lambda x: float((x @ b).sum()), a)
        at = Tensor(a, requires_grad=True)
        T.backward(T.sum(T.matmul(at, Tensor(b))))
        assert rel_err(at.grad, expected) < 1e-5

    def test_columns_are_independent_bitwise(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(50, 16)), rng.normal(size=(16, 9))
        full = T.matmul(Tensor(a), Tensor(b)).data
        part = T.matmul(Tensor(a), Tensor(b[:, :6])).data
        assert np.array_equal(full[:, :6], part)


def naive_conv(x, k, b):
    c, h, w = x.shape
    out = np.zeros((k.shape[0], h, w))
    for o in range(k.shape[0]):
        for i in range(h):
            for j in range(w):
                acc = b[o]
                for ci in range(c):
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += k[o, ci, di, dj] * x[ci, ii, jj]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_zero_kernel_gives_bias(self):
        out = T.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.0, -2.0, 0.5]))
        assert np.array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 5, 5)))

    def test_identity_kernel(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        x = np.random.default_rng(0).normal(size=(1, 6, 7))
        assert np.array_equal(T.conv2d(Tensor(x), Tensor(k), Tensor([0.0])).data, x)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x, k, b = rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, naive_conv(x, k, b), atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(3)
        x, k, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
        batched = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        for n in range(2):
            np.testing.assert_allclose(batched[n], T.conv2d(Tensor(x[n]), Tensor(k), Tensor(b)).data, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x, k, b = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
        w = rng.normal(size=(2, 4, 4))

        def f(xv, kv, bv):
            return float((naive_conv(xv, kv, bv) * w).sum())

        xt, kt, bt = (Tensor(v, requires_grad=True) for v in (x, k, b))
        T.backward(T.sum(T.conv2d(xt, kt, bt) * Tensor(w)))
        assert rel_err(xt.grad, central_difference(lambda v: f(v, k, b), x)) < 1e-5
        assert rel_err(kt.grad, central_difference(lambda v: f(x, v, b), k)) < 1e-5
        assert rel_err(bt.grad, central_difference(lambda v: f(x, k, v), b)) < 1e-5


class TestReduce:
    def test_sum_all(self):
        assert T.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_axis0(self):
        assert T.mean(Tensor([[1.0, 3.0], [3.0, 5.0]]), axis=0).data.tolist() == [2.0, 4.0]

    def test_mean_gradient_is_uniform(self):
        x = Tensor(np.ones((2, 5)), requires_grad=True)
        T.backward(T.mean(x))
        assert np.array_equal(x.grad, np.full((2, 5), 0.1))

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError, match="axis"):
            T.sum(Tensor(np.ones((2, 2))), axis=2)


class TestL2Normalize:
    def test_three_four(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)

    def test_unit_vector_is_fixed_point(self):
        assert T.l2_normalize(Tensor([0.0, 1.0, 0.0])).data.tolist() == [0.0, 1.0, 0.0]

    def test_degenerate_slice_rejected(self):
        with pytest.raises(DomainError, match=r"\(1,\)"):
            T.l2_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]), axis=1)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        assert grad_check(lambda t: T.sum(T.l2_normalize(t, axis=1) * Tensor(w)), x).max_rel_error < 1e-5


class TestSoftmax:
    def test_symmetric(self):
        assert T.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_log_odds(self):
        np.testing.assert_allclose(T.softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    def test_sums_to_one_at_large_magnitude(self):
        x = np.random.default_rng(0).uniform(-1e4, 1e4, size=(50, 7))
        assert np.max(np.abs(T.softmax(Tensor(x), axis=1).data.sum(axis=1) - 1)) < 1e-9


class TestBackward:
    def test_identity(self):
        x = Tensor(1.5, requires_grad=True)
        T.backward(x * 1.0)
        assert x.grad == 1.0

    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(x * x)
        assert x.grad == 6.0

    def test_accumulates_until_zeroed(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(x * x)
        T.backward(x * x)
        assert x.grad == 12.0
        x.zero_grad()
        T.backward(x * x)
        assert x.grad == 6.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError, match="scalar"):
            T.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_tape_parents_precede_children(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.exp(x)
        loss = T.sum(y * y + y)
        graph = Graph.trace(loss)
        position = {n.id: i for i, n in enumerate(graph.nodes)}
        for node in graph.nodes:
            for p in node.parents:
                if p.requires_grad:
                    assert position[p.id] < position[node.id]

    def test_every_node_visited_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.exp(x)
        loss = T.sum(y * y + T.relu(y))
        graph = Graph.trace(loss)
        graph.backward(loss)
        assert len(graph.visits) == len(graph)
        assert set(graph.visits.values()) == {1}

    def test_no_grad_records_nothing(self):
        x = Tensor(2.0, requires_grad=True)
        with T.no_grad():
            y = x * x
        assert not y.requires_grad and y.parents == ()

    def test_forward_is_bit_deterministic(self):
        rng = np.random.default_rng(0)
        x, k, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        outs = [T.softmax(T.conv2d(Tensor(x), Tensor(k), Tensor(b)), axis=1).data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()


class TestGradCheck:
    def test_sum_of_squares(self):
        x = np.random.default_rng(0).normal(size=8)
        assert grad_check(lambda t: T.sum(t * t), x).max_rel_error < 1e-9

    def test_relu_away_from_kink(self):
        x = np.array([-1.0, 0.5, 2.0, -0.3])
        res = grad_check(lambda t: T.sum(T.relu(t) * T.relu(t)), x)
        assert res.max_rel_error < 1e-5 and res.skipped == ()

    def test_kink_is_skipped_not_failed(self):
        x = np.array([0.0, 1.0])
        res = grad_check(lambda t: T.sum(T.relu(t)), x)
        assert res.skipped == (0,)
        assert res.max_rel_error < 1e-5

    def test_detects_wrong_gradient(self):
        def bad_square(t):
            return T._record(t.data**2, "bad", (t,), lambda g: (g * t.data,))

        res = grad_check(lambda t: T.sum(bad_square(t)), np.array([1.0, 2.0]))
        assert res.max_rel_error > 0.4
