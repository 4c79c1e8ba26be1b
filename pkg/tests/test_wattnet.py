"""
Unit Tests for the WATTNet Tenor Model
"""
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from config.config import WattNetConfig, full_profile
from src.core.autodiff import DiffTensor, grad_check, softmax_cross_entropy
from src.core.errors import ShapeError
from src.core.wattnet import (assemble, describe, forward, init_params, latent, layer_dims, logits_with_input_grad,
                              loss_and_grads, param_count, param_shapes, predict_batch, predict_tenor)


def tiny_config(**overrides) -> WattNetConfig:
    values = dict(input_width=6, compressed_width=4, n_blocks=2, kernel_size=2, dilation_schedule=[1, 2],
                  d_k=3, head_hidden=8, n_classes=4, window_len=12)
    values.update(overrides)
    return WattNetConfig(**values)


class TestParameters(unittest.TestCase):
    """Test cases for parameter shapes, counts and initialization."""

    def test_tiny_count(self):
        """Test the closed-form count on a hand-checked config."""
        config = tiny_config()
        # 6*4+4 + 2*(2*4*2 + 2*3 + 2*9 + 3) + 6*4*8 + 8 + 8*4 + 4
        self.assertEqual(param_count(config), 350)
        self.assertEqual(init_params(config).count(), 350)

    def test_full_count(self):
        """Test the full-size parameter count."""
        self.assertEqual(param_count(full_profile()), 432195)
        shapes = param_shapes(full_profile())
        self.assertEqual(shapes["head.w1"], (6 * 90, 512))
        self.assertEqual(shapes["block7.w_v"], (16, 1))

    def test_full_layer_widths(self):
        """Test the full-size width chain 1123 -> 90 -> ... -> 90 -> 512 -> 91."""
        rows = layer_dims(full_profile())
        self.assertEqual(len(rows), 11)
        self.assertEqual(rows[0].m_in, 1123)
        self.assertEqual([r.m_out for r in rows], [90] * 9 + [512, 91])
        self.assertEqual([r.m_in for r in rows[1:9]], [90] * 8)
        self.assertEqual(rows[9].m_in, 6 * 90)
        self.assertEqual([r.t_out for r in rows[:9]], [30, 28, 24, 22, 18, 16, 12, 10, 6])

    def test_describe(self):
        """Test the manifest summary agrees with the audit."""
        summary = describe(tiny_config())
        self.assertEqual(summary["param_count"], 350)
        self.assertEqual(summary["t_progression"], [12, 10, 6])
        self.assertEqual(summary["input_width"], 6)
        self.assertEqual(summary["layers"][1], {"layer": "WATTBlock-1", "m_in": 4, "m_out": 4,
                                                "t_in": 12, "t_out": 10})

    def test_layer_dims(self):
        """Test the layer audit follows the T progression."""
        rows = layer_dims(tiny_config())
        self.assertEqual([r.layer for r in rows], ["FC-cmp", "WATTBlock-1", "WATTBlock-2", "FC-1", "FC-2"])
        self.assertEqual((rows[1].t_in, rows[1].t_out), (12, 10))
        self.assertEqual((rows[2].t_in, rows[2].t_out), (10, 6))
        self.assertEqual(rows[3].m_in, 24)

    def test_seeded_init(self):
        """Test identical seeds give identical parameters and bounds hold."""
        a, b, c = init_params(tiny_config(), 3), init_params(tiny_config(), 3), init_params(tiny_config(), 4)
        for name in a.names:
            assert_array_equal(a[name], b[name])
        self.assertFalse(np.array_equal(a["cmp.w"], c["cmp.w"]))
        self.assertLessEqual(np.abs(a["cmp.w"]).max(), 1 / np.sqrt(6))
        self.assertLessEqual(np.abs(a["head.w1"]).max(), 1 / np.sqrt(24))


class TestForward(unittest.TestCase):
    """Test cases for the forward pass."""

    def setUp(self):
        """Setup parameters and a batch."""
        self.config = tiny_config()
        self.params = init_params(self.config, 0)
        self.batch = np.random.default_rng(1).normal(size=(8, 12, 6))

    def test_shapes(self):
        """Test logits and latent shapes."""
        self.assertEqual(forward(self.params, self.batch).shape, (8, 4))
        self.assertEqual(latent(self.params, self.batch).shape, (8, 6, 4))

    def test_deterministic(self):
        """Test repeated calls give identical logits."""
        assert_array_equal(forward(self.params, self.batch), forward(self.params, self.batch))

    def test_batch_independence(self):
        """Test a single window matches its row in a larger batch."""
        full = forward(self.params, self.batch)
        for i in range(len(self.batch)):
            assert_allclose(forward(self.params, self.batch[i:i + 1])[0], full[i], rtol=0, atol=1e-12)

    def test_predictions(self):
        """Test argmax predictions and the single-window helper."""
        preds = predict_batch(self.params, self.batch)
        assert_array_equal(preds, np.argmax(forward(self.params, self.batch), axis=1))
        self.assertEqual(predict_tenor(self.params, self.batch[2]), preds[2])
        with self.assertRaises(ShapeError):
            predict_tenor(self.params, self.batch[:2])

    def test_shape_errors(self):
        """Test wrong window length or width."""
        with self.assertRaises(ShapeError):
            forward(self.params, self.batch[:, :10])
        with self.assertRaises(ShapeError):
            forward(self.params, self.batch[:, :, :5])

    def test_full_size_forward(self):
        """Test a (32, 30, 1123) batch gives (32, 91) logits under the full profile."""
        params = init_params(full_profile(), 0)
        batch = np.random.default_rng(3).normal(size=(32, 30, 1123))
        logits = forward(params, batch)
        self.assertEqual(logits.shape, (32, 91))
        self.assertTrue(np.isfinite(logits).all())

    def test_series_permutation(self):
        """Test relabeling series and their conv kernels relabels the final latent exactly."""
        config = tiny_config(input_width=5, compressed_width=5)
        params = init_params(config, 6)
        # identity compression so input series map one to one onto latent series
        params = params.replace({"cmp.w": np.eye(5), "cmp.b": np.zeros(5)})
        perm = np.array([2, 4, 0, 1, 3])
        swapped = {}
        for i in range(config.n_blocks):
            for name in (f"block{i}.conv_alpha", f"block{i}.conv_beta"):
                swapped[name] = params[name][perm]
        permuted = params.replace(swapped)
        batch = np.random.default_rng(8).normal(size=(4, 12, 5))
        assert_array_equal(latent(permuted, batch[:, :, perm]), latent(params, batch)[:, :, perm])

    def test_receptive_field(self):
        """Test latent position j depends only on input rows j..j+sum(k*d)-1."""
        span = sum(self.config.kernel_size * d for d in self.config.dilation_schedule)
        base = latent(self.params, self.batch[:1])[0]
        touched = 0
        for row in range(self.config.window_len):
            nudged = self.batch[:1].copy()
            nudged[0, row] += 1.0
            changed = np.any(latent(self.params, nudged)[0] != base, axis=1)
            for j in np.flatnonzero(changed):
                self.assertGreaterEqual(row, j)
                self.assertLess(row, j + span)
                touched += 1
        self.assertGreater(touched, 0)


class TestGradients(unittest.TestCase):
    """Test cases for model gradients."""

    def setUp(self):
        """Setup a tiny model and labeled batch."""
        self.config = tiny_config()
        self.params = init_params(self.config, 2)
        rng = np.random.default_rng(5)
        self.batch = rng.normal(size=(3, 12, 6))
        self.labels = np.array([0, 3, 1])

    def test_parameter_gradients_match_differences(self):
        """Test the full model loss on 200 sampled coordinates at M=6, T=12."""
        config = tiny_config(compressed_width=6)
        params = init_params(config, 2)
        names = params.names
        batch = DiffTensor.constant(self.batch)

        def loss(leaves):
            _, logits = assemble(config, dict(zip(names, leaves)), batch)
            return softmax_cross_entropy(logits, self.labels)

        self.assertGreater(params.count(), 200)
        err = grad_check(loss, [params[name] for name in names], n_coords=200, abs_floor=1e-5)
        self.assertLess(err, 1e-4)

    def test_loss_and_grads_match_assembled_graph(self):
        """Test the packaged gradients equal a hand-built backward pass."""
        _, grads = loss_and_grads(self.params, self.batch, self.labels)
        leaves = {name: DiffTensor.leaf(value) for name, value in self.params.items()}
        _, logits = assemble(self.config, leaves, DiffTensor.constant(self.batch))
        softmax_cross_entropy(logits, self.labels).backward()
        for name, leaf in leaves.items():
            assert_array_equal(grads[name], leaf.grad)

    def test_sum_reduction(self):
        """Test summed gradients are N times the mean gradients."""
        loss_mean, g_mean = loss_and_grads(self.params, self.batch, self.labels, "mean")
        loss_sum, g_sum = loss_and_grads(self.params, self.batch, self.labels, "sum")
        self.assertAlmostEqual(loss_sum, 3 * loss_mean, places=10)
        for name in g_mean:
            assert_allclose(g_sum[name], 3 * g_mean[name], rtol=1e-10, atol=1e-14)

    def test_input_gradient(self):
        """Test the input gradient against a central difference."""
        logits, grad = logits_with_input_grad(self.params, self.batch, self.labels)
        self.assertEqual(grad.shape, self.batch.shape)
        h = 1e-5
        for idx in ((0, 3, 2), (2, 0, 5), (1, 5, 0)):
            up, down = self.batch.copy(), self.batch.copy()
            up[idx] += h
            down[idx] -= h
            f_up = 3 * loss_and_grads(self.params, up, self.labels)[0]
            f_down = 3 * loss_and_grads(self.params, down, self.labels)[0]
            numeric = (f_up - f_down) / (2 * h)
            self.assertLess(abs(grad[idx] - numeric) / max(abs(numeric), 1e-2), 1e-4)


if __name__ == '__main__':
    unittest.main()
