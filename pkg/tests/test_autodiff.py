"""Tests for the reverse-mode differentiation engine."""

import os
import tempfile
import unittest
from typing import Callable, List

import numpy as np

from stl_sdt import autodiff as ad
from stl_sdt.autodiff import Array, Tape
from stl_sdt.errors import CheckpointError, ShapeError


def max_relative_error(fn: Callable[..., Array], inputs: List[np.ndarray], h: float = 1e-5) -> float:
    """Compare taped gradients of ``fn`` with central finite differences."""
    params = [Array(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        loss = fn(*params)
    tape.backward(loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            shifted = [np.array(v, copy=True) for v in inputs]
            shifted[i][idx] = x[idx] + h
            up = fn(*[Array(v) for v in shifted]).item()
            shifted[i][idx] = x[idx] - h
            down = fn(*[Array(v) for v in shifted]).item()
            numeric[idx] = (up - down) / (2 * h)
        analytic = params[i].grad
        scale = max(1.0, float(np.max(np.abs(numeric))))
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    return worst


def weighted(out: Array, seed: int = 0) -> Array:
    """Reduce ``out`` to a scalar with fixed random weights."""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_(ad.mul(out, weights))


class TestForward(unittest.TestCase):
    """Forward values of primitives."""

    def test_softmax_symmetry(self) -> None:
        """Test softmax of equal logits is uniform."""
        np.testing.assert_array_equal(ad.softmax(Array([0.0, 0.0])).data, [0.5, 0.5])

    def test_tanh_slope_at_zero(self) -> None:
        """Test d/dx tanh(0) is one."""
        x = Array(0.0, requires_grad=True)
        with Tape() as tape:
            y = ad.tanh(x)
        tape.backward(y)
        self.assertEqual(float(x.grad), 1.0)

    def test_layer_norm_statistics(self) -> None:
        """Test normalized rows have zero mean and unit variance."""
        x = np.random.default_rng(0).normal(size=(3, 8)) * 4.0 + 2.0
        y = ad.layer_norm(Array(x)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)

    def test_no_tape_records_nothing(self) -> None:
        """Test operations outside a tape only compute values."""
        x = Array([1.0, 2.0], requires_grad=True)
        y = ad.mul(x, 3.0)
        np.testing.assert_array_equal(y.data, [3.0, 6.0])
        self.assertIsNone(ad.active_tape())


class TestGradients(unittest.TestCase):
    """Analytic gradients against central finite differences."""

    def setUp(self) -> None:
        """Set up a seeded generator."""
        self.rng = np.random.default_rng(1234)

    def assertGradientsMatch(self, fn: Callable[..., Array], *shapes, positive: bool = False) -> None:
        inputs = [self.rng.normal(size=shape) for shape in shapes]
        if positive:
            inputs = [np.abs(x) + 0.5 for x in inputs]
        self.assertLess(max_relative_error(fn, inputs), 1e-4)

    def test_elementwise(self) -> None:
        """Test add, sub, mul, square, tanh and exp."""
        self.assertGradientsMatch(lambda a, b: weighted(ad.add(a, b)), (3, 4), (4,))
        self.assertGradientsMatch(lambda a, b: weighted(ad.sub(a, b)), (3, 4), (3, 4))
        self.assertGradientsMatch(lambda a, b: weighted(ad.mul(a, b)), (2, 3, 4), (3, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.square(a)), (5,))
        self.assertGradientsMatch(lambda a: weighted(ad.tanh(a)), (2, 3))
        self.assertGradientsMatch(lambda a: weighted(ad.exp(a)), (2, 3))
        self.assertGradientsMatch(lambda a: weighted(ad.gelu(a)), (2, 3))

    def test_log(self) -> None:
        """Test log on positive inputs."""
        self.assertGradientsMatch(lambda a: weighted(ad.log(a)), (4,), positive=True)

    def test_shapes(self) -> None:
        """Test broadcast, reshape, transpose, slice and concat."""
        self.assertGradientsMatch(lambda a: weighted(ad.broadcast(a, (3, 2, 4))), (2, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.reshape(a, (4, 3))), (2, 6))
        self.assertGradientsMatch(lambda a: weighted(ad.transpose(a)), (2, 3, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.transpose(a, (1, 0, 2))), (2, 3, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.slice_(a, (slice(None), slice(1, 3)))), (3, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.slice_(a, np.array([0, 2, 0]))), (3, 2))
        self.assertGradientsMatch(lambda a, b: weighted(ad.concat([a, b], axis=-1)), (2, 3), (2, 1))

    def test_gather(self) -> None:
        """Test embedding lookups accumulate into repeated rows."""
        indices = np.array([[0, 2], [2, 1]])
        self.assertGradientsMatch(lambda t: weighted(ad.gather(t, indices)), (3, 4))

    def test_matmul(self) -> None:
        """Test plain and batched matrix products."""
        self.assertGradientsMatch(lambda a, b: weighted(ad.matmul(a, b)), (3, 4), (4, 2))
        self.assertGradientsMatch(lambda a, b: weighted(ad.matmul(a, b)), (2, 3, 4), (4, 2))
        self.assertGradientsMatch(lambda a, b: weighted(ad.matmul(a, b)), (2, 3, 4), (2, 4, 5))

    def test_reductions(self) -> None:
        """Test sum and mean over all or one axis."""
        self.assertGradientsMatch(lambda a: ad.sum_(ad.square(a)), (3, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.sum_(a, axis=1)), (3, 4))
        self.assertGradientsMatch(lambda a: weighted(ad.mean(a, axis=0, keepdims=True)), (3, 4))

    def test_softmax_and_layer_norm(self) -> None:
        """Test the normalizing primitives."""
        self.assertGradientsMatch(lambda a: weighted(ad.softmax(a)), (3, 5))
        self.assertGradientsMatch(lambda a: weighted(ad.layer_norm(a)), (3, 6))

    def test_masked_fill(self) -> None:
        """Test masked entries receive no gradient."""
        mask = np.array([[True, False, False], [False, True, False]])
        self.assertGradientsMatch(lambda a: weighted(ad.softmax(ad.masked_fill(a, mask, -1e9))), (2, 3))

    def test_composite_graph(self) -> None:
        """Test a small two-layer network with shared inputs."""

        def net(x, w1, w2):
            h = ad.gelu(ad.layer_norm(ad.matmul(x, w1)))
            return ad.mean(ad.square(ad.sub(ad.matmul(h, w2), ad.tanh(x))))

        self.assertGradientsMatch(net, (4, 3), (3, 5), (5, 3))

    def test_gradients_accumulate(self) -> None:
        """Test a second backward pass adds to existing gradients."""
        x = Array([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                y = ad.sum_(ad.mul(x, 3.0))
            tape.backward(y)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_gather_repeated_rows_accumulate(self) -> None:
        """Test a row looked up twice receives both gradients."""
        table = Array(np.zeros((3, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.gather(table, np.array([0, 0, 1])))
        tape.backward(y)
        np.testing.assert_array_equal(table.grad, [[2.0, 2.0], [1.0, 1.0], [0.0, 0.0]])

    def test_shared_weight_sums_batch_gradients(self) -> None:
        """Test a 2-D weight used by a batched matmul gets the batch sum."""
        x = np.ones((2, 3, 4))
        w = Array(np.zeros((4, 5)), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.matmul(Array(x), w))
        tape.backward(y)
        np.testing.assert_array_equal(w.grad, np.full((4, 5), 6.0))

    def test_bias_gradient_sums_leading_axes(self) -> None:
        """Test a broadcast bias collects the gradient over leading axes."""
        bias = Array(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.add(Array(np.ones((2, 4, 3))), bias))
        tape.backward(y)
        np.testing.assert_array_equal(bias.grad, [8.0, 8.0, 8.0])

    def test_causal_mask_blocks_future_gradient(self) -> None:
        """Test outputs at position i get no gradient from inputs after i."""
        rng = np.random.default_rng(0)
        T, d = 5, 4
        wq, wk, wv = (Array(rng.normal(size=(d, d))) for _ in range(3))
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        for i in range(T):
            x = Array(rng.normal(size=(T, d)), requires_grad=True)
            with Tape() as tape:
                q, k, v = ad.matmul(x, wq), ad.matmul(x, wk), ad.matmul(x, wv)
                scores = ad.masked_fill(ad.matmul(q, ad.transpose(k)), future, -1e9)
                out = ad.matmul(ad.softmax(scores), v)
                loss = ad.sum_(ad.slice_(out, i))
            tape.backward(loss)
            self.assertTrue(np.all(x.grad[i + 1 :] == 0.0))
            self.assertTrue(np.any(x.grad[: i + 1] != 0.0))


class TestErrors(unittest.TestCase):
    """Shape errors name the primitive and both shapes."""

    def test_add_mismatch(self) -> None:
        """Test incompatible elementwise operands."""
        with self.assertRaises(ShapeError) as ctx:
            ad.add(Array(np.zeros((2, 3))), Array(np.zeros((3, 2))))
        self.assertEqual(ctx.exception.primitive, "add")
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(3, 2)", str(ctx.exception))

    def test_matmul_mismatch(self) -> None:
        """Test inner dimensions must agree."""
        with self.assertRaises(ShapeError) as ctx:
            ad.matmul(Array(np.zeros((2, 3))), Array(np.zeros((2, 3))))
        self.assertIn("matmul", str(ctx.exception))

    def test_backward_needs_scalar(self) -> None:
        """Test backward rejects non-scalar losses."""
        x = Array([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, 2.0)
        with self.assertRaises(ShapeError):
            tape.backward(y)

    def test_gather_out_of_range(self) -> None:
        """Test indices beyond the table are rejected."""
        with self.assertRaises(ShapeError):
            ad.gather(Array(np.zeros((3, 2))), np.array([3]))


class TestParameterFiles(unittest.TestCase):
    """Parameter map persistence."""

    def test_round_trip_exact(self) -> None:
        """Test saved parameters load back bit for bit."""
        rng = np.random.default_rng(2)
        params = {"w": Array(rng.normal(size=(3, 4)) / 7.0), "b": Array(rng.normal(size=(4,)))}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "params.json")
            ad.save_parameters(params, path)
            loaded = ad.load_parameters(path)
        self.assertEqual(sorted(loaded), ["b", "w"])
        for name, p in params.items():
            np.testing.assert_array_equal(loaded[name], p.data)

    def test_malformed_file(self) -> None:
        """Test unreadable parameter files raise a checkpoint error."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "params.json")
            with open(path, "w", encoding="utf-8") as f:
                f.write('{"w": {"shape": [2, 2], "values": [1.0]}}')
            with self.assertRaises(CheckpointError):
                ad.load_parameters(path)


if __name__ == "__main__":
    unittest.main()
