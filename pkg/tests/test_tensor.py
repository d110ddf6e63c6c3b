"""Tests for the autodiff engine: forward oracles and gradient checks."""

import math

import numpy as np
import pytest

import sannli.tensor as T
from sannli.rng import RngStream
from sannli.tensor import ShapeError, Tape, Tensor, backward, grad_check

SEEDS = [0, 1, 2, 3, 4]
TOL = 1e-5


def rand(rng, *shape):
    return Tensor(np.asarray(rng.uniform(-1.0, 1.0, size=shape)))


class TestForwardOracles:
    def test_matmul_small_case(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_matmul_against_triple_loop(self):
        rng = RngStream(100)
        a, b = rand(rng, 4, 6), rand(rng, 6, 3)
        want = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(6):
                    want[i, j] += a.data[i, k] * b.data[k, j]
        assert np.allclose(T.matmul(a, b).data, want, atol=1e-12)

    def test_softmax_two_entry_oracle(self):
        out = T.softmax(Tensor([math.log(2.0), 0.0]), axis=0)
        assert np.allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = RngStream(101)
        x = rand(rng, 5, 7)
        out = T.softmax(x, axis=1)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert (out.data > 0).all()

    def test_softmax_mask_zeroes_entries(self):
        x = Tensor([[1.0, 2.0, 3.0]])
        mask = np.array([[True, False, True]])
        out = T.softmax(x, axis=1, mask=mask)
        assert out.data[0, 1] == 0.0
        assert np.isclose(out.data.sum(), 1.0)

    def test_softmax_fully_masked_slice_rejected(self):
        with pytest.raises(ValueError):
            T.softmax(Tensor([[1.0, 2.0]]), axis=1, mask=np.array([[False, False]]))

    def test_softmax_shift_invariance(self):
        x = Tensor([1000.0, 1001.0])
        out = T.softmax(x, axis=0)
        assert np.isfinite(out.data).all()
        small = T.softmax(Tensor([0.0, 1.0]), axis=0)
        assert np.allclose(out.data, small.data, atol=1e-12)

    def test_relu_clamps_negatives(self):
        out = T.relu(Tensor([-2.0, 0.0, 3.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 3.0])

    def test_unfold_cols_layout(self):
        """Each output column is the row-major flattening of a window."""
        x = Tensor(np.arange(8.0).reshape(2, 4))
        out = T.unfold_cols(x, 3)
        assert out.shape == (6, 2)
        assert np.array_equal(out.data[:, 0], [0, 1, 2, 4, 5, 6])
        assert np.array_equal(out.data[:, 1], [1, 2, 3, 5, 6, 7])

    def test_rowgroup_max(self):
        x = Tensor([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0], [4.0, 9.0]])
        out = T.rowgroup_max(x, 2)
        assert np.array_equal(out.data, [[3.0, 5.0], [4.0, 9.0]])

    def test_max_cols_keeps_shape(self):
        out = T.max_cols(Tensor([[1.0, 7.0, 3.0], [9.0, 2.0, 4.0]]))
        assert out.shape == (2, 1)
        assert np.array_equal(out.data, [[7.0], [9.0]])

    def test_gather_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = T.gather_rows(table, [2, 0, 2])
        assert np.array_equal(out.data, table.data[[2, 0, 2]])

    def test_weight_norm_unit_scale(self):
        v = Tensor([[3.0, 4.0]])
        g = Tensor(np.asarray(10.0))
        out = T.weight_norm(v, g)
        assert np.allclose(out.data, [[6.0, 8.0]])

    def test_normalize_rows(self):
        out = T.normalize_rows(Tensor([[1.0, 3.0], [2.0, 2.0]]))
        assert np.allclose(out.data, [[0.25, 0.75], [0.5, 0.5]])

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(ShapeError):
            T.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
        with pytest.raises(ShapeError):
            T.rowgroup_max(Tensor(np.ones((5, 2))), 2)


class TestBackwardMechanics:
    def test_reuse_accumulates(self):
        """A tensor feeding the loss twice gets the sum of both use gradients."""
        x = Tensor([[2.0]], requires_grad=True)
        with Tape() as tape:
            y = T.add(T.mul(x, x), T.mul(x, x))  # 2 x^2
            backward(T.sum_all(y), tape)
        assert np.allclose(tape.grad(x), [[8.0]])

    def test_no_tape_records_nothing(self):
        x = Tensor([[1.0]], requires_grad=True)
        tape = Tape()
        with tape:
            pass
        T.mul(x, x)  # outside the tape: plain numpy
        assert tape.nodes == []

    def test_untracked_leaf_gets_no_gradient(self):
        x = Tensor([[1.0]], requires_grad=True)
        c = Tensor([[3.0]])
        with Tape() as tape:
            backward(T.sum_all(T.mul(x, c)), tape)
        assert tape.grad(c) is None
        assert np.allclose(tape.grad(x), [[3.0]])

    def test_nested_tape_rejected(self):
        with Tape():
            with pytest.raises(RuntimeError):
                with Tape():
                    pass

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(ShapeError):
                backward(y, tape)

    def test_repeat_backward_is_deterministic(self):
        rng = RngStream(200)
        x = rand(rng, 3, 3)
        x.requires_grad = True

        def run():
            with Tape() as tape:
                backward(T.sum_all(T.softmax(T.matmul(x, x), axis=1)), tape)
            return tape.grad(x).copy()

        assert np.array_equal(run(), run())


class TestGradCheck:
    """Central-difference checks for every differentiable primitive."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        rng = RngStream(seed)
        assert grad_check(T.matmul, [rand(rng, 3, 4), rand(rng, 4, 2)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_family(self, seed):
        rng = RngStream(seed)
        a, b = rand(rng, 3, 3), rand(rng, 3, 3)
        assert grad_check(T.add, [a, b], rng=rng) < TOL
        assert grad_check(T.sub, [a, b], rng=rng) < TOL
        assert grad_check(T.mul, [a, b], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_abs(self, seed):
        rng = RngStream(seed)
        x = rand(rng, 3, 3)
        x.data[np.abs(x.data) < 0.1] += 0.5  # keep clear of the kink
        assert grad_check(T.abs_, [x], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_bias(self, seed):
        rng = RngStream(seed)
        assert grad_check(T.add_bias, [rand(rng, 4, 3), rand(rng, 4, 1)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_scalar_unaries(self, seed):
        rng = RngStream(seed)
        assert grad_check(T.tanh_, [rand(rng, 4, 2)], rng=rng) < TOL
        assert grad_check(T.sigmoid, [rand(rng, 4, 2)], rng=rng) < TOL
        assert grad_check(lambda t: T.scale(t, -2.5), [rand(rng, 3, 3)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = RngStream(seed)
        x = rand(rng, 4, 4)
        x.data[np.abs(x.data) < 0.1] += 0.5  # keep clear of the kink
        assert grad_check(T.relu, [x], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log(self, seed):
        rng = RngStream(seed)
        x = Tensor(np.asarray(rng.uniform(0.5, 2.0, size=(3, 3))))
        assert grad_check(T.log, [x], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("axis", [0, 1])
    def test_softmax(self, seed, axis):
        rng = RngStream(seed)
        assert grad_check(lambda t: T.softmax(t, axis=axis), [rand(rng, 3, 5)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_masked(self, seed):
        rng = RngStream(seed)
        mask = np.ones((3, 5), dtype=bool)
        mask[:, 3:] = False
        assert grad_check(lambda t: T.softmax(t, axis=1, mask=mask),
                          [rand(rng, 3, 5)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat(self, seed):
        rng = RngStream(seed)
        parts = [rand(rng, 2, 3), rand(rng, 4, 3)]
        assert grad_check(lambda a, b: T.concat([a, b], axis=0), parts, rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_shape_movers(self, seed):
        rng = RngStream(seed)
        assert grad_check(T.transpose, [rand(rng, 3, 4)], rng=rng) < TOL
        assert grad_check(lambda t: T.reshape(t, (2, 6)), [rand(rng, 3, 4)], rng=rng) < TOL
        assert grad_check(lambda t: T.slice_cols(t, 1, 3), [rand(rng, 3, 4)], rng=rng) < TOL
        assert grad_check(lambda t: T.slice_rows(t, 0, 2), [rand(rng, 3, 4)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gather_rows(self, seed):
        rng = RngStream(seed)
        assert grad_check(lambda t: T.gather_rows(t, [0, 2, 2, 1]),
                          [rand(rng, 3, 4)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_max_family(self, seed):
        rng = RngStream(seed)
        # random continuous draws: ties have probability zero
        assert grad_check(lambda t: T.rowgroup_max(t, 2), [rand(rng, 6, 3)], rng=rng) < TOL
        assert grad_check(T.max_cols, [rand(rng, 4, 5)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_unfold_cols(self, seed):
        rng = RngStream(seed)
        assert grad_check(lambda t: T.unfold_cols(t, 3), [rand(rng, 2, 6)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reductions(self, seed):
        rng = RngStream(seed)
        assert grad_check(T.sum_all, [rand(rng, 3, 3)], rng=rng) < TOL
        assert grad_check(lambda t: T.pick(t, (1, 2)), [rand(rng, 3, 4)], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_normalize_rows(self, seed):
        rng = RngStream(seed)
        x = Tensor(np.asarray(rng.uniform(0.5, 2.0, size=(3, 4))))
        assert grad_check(T.normalize_rows, [x], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_weight_norm(self, seed):
        rng = RngStream(seed)
        v = rand(rng, 3, 4)
        g = Tensor(np.asarray(rng.uniform(0.5, 1.5)))
        assert grad_check(T.weight_norm, [v, g], rng=rng) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_composed_chain(self, seed):
        """A small multi-op graph with reuse still matches finite differences."""
        rng = RngStream(seed)

        def f(x, w):
            h = T.relu(T.matmul(w, x))
            return T.softmax(T.add(h, h), axis=0)

        assert grad_check(f, [rand(rng, 3, 2), rand(rng, 4, 3)], rng=rng) < TOL


class TestDropout:
    def test_mask_values_are_zero_or_one(self):
        m = T.dropout_mask((50, 50), 0.3, RngStream(7))
        assert set(np.unique(m.data)) <= {0.0, 1.0}

    def test_keep_fraction(self):
        m = T.dropout_mask((200, 200), 0.3, RngStream(8))
        assert abs(m.data.mean() - 0.7) < 0.02

    def test_inverted_scaling_preserves_expectation(self):
        rng = RngStream(9)
        x = Tensor(np.ones((100, 100)))
        m = T.dropout_mask(x.shape, 0.4, rng)
        out = T.apply_dropout(x, m, 0.4)
        kept = out.data[out.data > 0]
        assert np.allclose(kept, 1.0 / 0.6)
        assert abs(out.data.mean() - 1.0) < 0.05

    def test_rate_zero_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        m = T.dropout_mask(x.shape, 0.0, RngStream(10))
        assert np.array_equal(T.apply_dropout(x, m, 0.0).data, x.data)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            T.dropout_mask((2, 2), 1.0, RngStream(11))
