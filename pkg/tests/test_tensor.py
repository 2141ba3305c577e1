"""Autodiff ops: forward values, gradients against central differences, graph rules."""

import threading

import numpy as np
import pytest

from rovis.errors import GraphError, ShapeError
from rovis.rng import Rng
from rovis.tensor import (
    Tensor,
    backward,
    bilinear_resize,
    broadcast_to,
    clip,
    concat,
    conv2d,
    exp,
    gather,
    gelu,
    graph_edge_count,
    interpolation_matrix,
    layernorm,
    log,
    masked_fill,
    matmul,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    transpose,
)

from conftest import check_gradients


@pytest.fixture
def rng():
    return Rng(0)


def weighted(t: Tensor, seed: int = 1) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output element matters."""
    w = Rng(seed).normal(size=t.shape)
    return reduce_sum(t * Tensor(w))


class TestForward:
    def test_matmul_matches_example(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_add_requires_identical_shapes(self):
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3,)))

    def test_softmax_shift_invariant_and_normalised(self):
        out = softmax(Tensor([1000.0, 1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3)
        rows = softmax(Tensor(Rng(4).normal(size=(5, 7))), axis=-1)
        np.testing.assert_allclose(rows.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_gives_zero_weight_to_masked_entries(self):
        scores = masked_fill(Tensor([1.0, 2.0, 3.0]), np.array([False, True, False]), -np.inf)
        out = softmax(scores)
        assert out.data[1] == 0.0
        assert out.data.sum() == pytest.approx(1.0)

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = sigmoid(Tensor([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out.data))

    def test_gelu_at_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_layernorm_normalises_last_axis(self):
        x = Tensor(Rng(2).normal(3.0, 2.0, (4, 6)))
        out = layernorm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-4)

    def test_conv2d_identity_kernel(self):
        x = Rng(1).normal(size=(1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), padding=1)
        np.testing.assert_allclose(out.data, x)

    def test_conv2d_stride_output_size(self):
        out = conv2d(Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 4, 4, 4)

    def test_bilinear_resize_same_size_is_identity(self):
        x = Rng(3).normal(size=(2, 6, 7))
        np.testing.assert_allclose(bilinear_resize(Tensor(x), (6, 7)).data, x)

    def test_bilinear_upsample_preserves_constants(self):
        out = bilinear_resize(Tensor(np.full((1, 4, 4), 2.5)), (16, 16))
        np.testing.assert_allclose(out.data, 2.5)

    def test_interpolation_rows_sum_to_one(self):
        for src, dst in [(4, 16), (16, 4), (5, 7)]:
            np.testing.assert_allclose(interpolation_matrix(src, dst).sum(axis=1), 1.0)

    def test_gather_and_concat(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        np.testing.assert_array_equal(gather(x, [2, 0], axis=0).data, [[8, 9, 10, 11], [0, 1, 2, 3]])
        assert concat([x, x], axis=1).shape == (3, 8)

    def test_broadcast_to_rejects_incompatible(self):
        with pytest.raises(ShapeError, match="broadcast_to"):
            broadcast_to(Tensor(np.zeros(3)), (2, 4))


class TestGradients:
    def test_elementwise(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, (3, 4))
        check_gradients(lambda x, y: weighted(x * y + x - y), a, b)
        check_gradients(lambda x, y: weighted(x / y), a, b)
        check_gradients(lambda x: weighted(exp(x) + (-x) * 3.0 + 2.0 - x), a)
        check_gradients(lambda y: weighted(log(y) + power(y, 1.5) + 1.0 / y), b)

    def test_clip_inside_range(self, rng):
        check_gradients(lambda x: weighted(clip(x, -10.0, 10.0)), rng.normal(size=(5,)))

    def test_matmul(self, rng):
        check_gradients(lambda x, y: weighted(matmul(x, y)), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))

    def test_batched_matmul(self, rng):
        check_gradients(lambda x, y: weighted(matmul(x, y)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))

    def test_softmax_sigmoid_gelu(self, rng):
        x = rng.normal(size=(3, 5))
        check_gradients(lambda t: weighted(softmax(t, axis=-1)), x)
        check_gradients(lambda t: weighted(softmax(t, axis=0)), x)
        check_gradients(lambda t: weighted(sigmoid(t)), x)
        check_gradients(lambda t: weighted(gelu(t)), x)

    def test_masked_softmax(self, rng):
        mask = np.array([[True, False, False], [False, False, True]])
        check_gradients(lambda t: weighted(softmax(masked_fill(t, mask, -np.inf))), rng.normal(size=(2, 3)))

    def test_layernorm(self, rng):
        check_gradients(
            lambda x, g, b: weighted(layernorm(x, g, b)),
            rng.normal(size=(4, 6)),
            rng.normal(size=(6,)),
            rng.normal(size=(6,)),
        )

    def test_conv2d(self, rng):
        check_gradients(
            lambda x, w, b: weighted(conv2d(x, w, b, stride=2, padding=1)),
            rng.normal(size=(1, 2, 6, 6)),
            rng.normal(size=(3, 2, 3, 3)),
            rng.normal(size=(3,)),
        )

    def test_bilinear_resize(self, rng):
        check_gradients(lambda x: weighted(bilinear_resize(x, (7, 5))), rng.normal(size=(2, 4, 3)))

    def test_layout_ops(self, rng):
        x = rng.normal(size=(2, 3, 4))
        check_gradients(lambda t: weighted(transpose(t, (2, 0, 1))), x)
        check_gradients(lambda t: weighted(reshape(t, (6, 4))), x)
        check_gradients(lambda t: weighted(gather(t, [1, 1, 0], axis=1)), x)
        check_gradients(lambda t: weighted(concat([t, t * 2.0], axis=2)), x)

    def test_reductions_and_broadcast(self, rng):
        x = rng.normal(size=(3, 4))
        check_gradients(lambda t: weighted(reduce_sum(t, axis=0)), x)
        check_gradients(lambda t: weighted(reduce_mean(t, axis=1, keepdims=True)), x)
        check_gradients(lambda t: reduce_mean(t), x)
        check_gradients(lambda t: weighted(broadcast_to(t, (2, 3, 4))), x)
        check_gradients(lambda t: weighted(broadcast_to(reshape(t, (3, 1, 4)), (3, 5, 4))), x)

    def test_reused_node_accumulates(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = x * x
        backward(reduce_sum(y + y))
        np.testing.assert_allclose(x.grad, 4 * x.data)


class TestGraph:
    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            backward(x * 2.0)

    def test_second_backward_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = reduce_sum(x * 2.0)
        backward(loss)
        with pytest.raises(GraphError, match="already consumed"):
            backward(loss)

    def test_grad_accumulates_across_graphs(self):
        x = Tensor(np.ones(2), requires_grad=True)
        backward(reduce_sum(x * 3.0))
        backward(reduce_sum(x * 3.0))
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_no_grad_records_no_edges(self):
        x = Tensor(np.ones(4), requires_grad=True)
        before = graph_edge_count()
        with no_grad():
            y = reduce_sum(exp(x) * 2.0)
        assert graph_edge_count() == before
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        x = Tensor(np.ones(2), requires_grad=True)
        seen = {}

        def worker():
            seen["requires_grad"] = (x * 2.0).requires_grad

        with no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen["requires_grad"] is True

    def test_debug_mode_reports_nan_inputs(self):
        set_debug(True)
        try:
            with pytest.raises(GraphError, match="NaN"):
                exp(Tensor([np.nan, 1.0]))
        finally:
            set_debug(False)

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        backward(reduce_sum(y))
        np.testing.assert_allclose(x.grad, [1.0])
