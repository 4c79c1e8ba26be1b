"""
Unit Tests for Imitation Training
"""
import math
import os
import tempfile
import unittest
from collections import OrderedDict

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose, assert_array_equal

from config.config import TrainConfig, WattNetConfig, desk_profile, with_input_width
from src.core.backtest import momentum1, momentum90, policy_from_labels, run_backtest
from src.core.errors import ComputeError, ValidationError
from src.core.labels import TenorSet, WindowedDataset, oracle_labels, optimal_labels
from src.core.logging_utils import EpochLogger
from src.core.training import (STOP_EARLY, STOP_MAX_EPOCHS, AdamState, adam_step, cosine_lr,
                               evaluate_policy, train, train_accuracy)
from src.core.wattnet import describe, init_params, predict_batch
from src.data.ingest import SpotSeries


def tiny_config() -> WattNetConfig:
    return WattNetConfig(input_width=5, compressed_width=4, n_blocks=2, kernel_size=2, dilation_schedule=[1, 2],
                         d_k=3, head_hidden=8, n_classes=4, window_len=12)


def tiny_dataset(n: int = 16, seed: int = 0) -> WindowedDataset:
    rng = np.random.default_rng(seed)
    dates = np.arange(np.datetime64("2015-01-01"), np.datetime64("2015-01-01") + n)
    return WindowedDataset(rng.normal(size=(n, 12, 5)), rng.integers(0, 4, size=n), dates)


class TestCosineSchedule(unittest.TestCase):
    """Test cases for the learning-rate schedule."""

    def test_endpoints_and_midpoint(self):
        """Test lr_start at 0, lr_end at the last step and the mean halfway."""
        self.assertAlmostEqual(cosine_lr(0, 100, 6e-4, 3e-4), 6e-4, places=15)
        self.assertAlmostEqual(cosine_lr(100, 100, 6e-4, 3e-4), 3e-4, places=15)
        self.assertAlmostEqual(cosine_lr(50, 100, 6e-4, 3e-4), 4.5e-4, places=15)

    def test_monotone(self):
        """Test the schedule never increases."""
        lrs = [cosine_lr(s, 40) for s in range(41)]
        self.assertTrue(all(a >= b for a, b in zip(lrs, lrs[1:])))

    def test_invalid(self):
        """Test empty schedules and out-of-range steps."""
        with self.assertRaises(ValidationError):
            cosine_lr(0, 0)
        with self.assertRaises(ValidationError):
            cosine_lr(11, 10)


class TestAdam(unittest.TestCase):
    """Test cases for the Adam update."""

    def test_first_step_is_sign_sized(self):
        """Test bias correction makes the first step lr * g / (|g| + eps)."""
        params = OrderedDict(w=np.array([1.0, -2.0, 0.5]))
        grads = OrderedDict(w=np.array([0.3, -4.0, 1e-3]))
        new, state = adam_step(params, grads, AdamState.zeros_like(params), lr=0.1)
        expected = params["w"] - 0.1 * grads["w"] / (np.abs(grads["w"]) + 1e-8)
        assert_allclose(new["w"], expected, rtol=1e-10)
        self.assertEqual(state.step, 1)
        # inputs untouched
        assert_array_equal(params["w"], [1.0, -2.0, 0.5])

    def test_converges_on_quadratic(self):
        """Test (p - 3)^2 is minimized to within 1e-3 in 2000 steps at lr 0.05."""
        params = OrderedDict(p=np.array(0.0))
        state = AdamState.zeros_like(params)
        for _ in range(2000):
            grads = OrderedDict(p=2.0 * (params["p"] - 3.0))
            params, state = adam_step(params, grads, state, lr=0.05)
        self.assertLess(abs(float(params["p"]) - 3.0), 1e-3)

    def test_zero_gradient_is_fixed_point(self):
        """Test parameters do not move under zero gradients."""
        params = OrderedDict(w=np.array([1.5, -0.5]))
        state = AdamState.zeros_like(params)
        for _ in range(10):
            params, state = adam_step(params, OrderedDict(w=np.zeros(2)), state, lr=0.1)
        assert_array_equal(params["w"], [1.5, -0.5])

    def test_non_finite_gradient(self):
        """Test NaN gradients are rejected."""
        params = OrderedDict(w=np.zeros(2))
        with self.assertRaises(ComputeError):
            adam_step(params, OrderedDict(w=np.array([np.nan, 0.0])), AdamState.zeros_like(params), lr=0.1)

    def test_name_mismatch(self):
        """Test gradients for unknown parameters."""
        params = OrderedDict(w=np.zeros(2))
        with self.assertRaises(ValidationError):
            adam_step(params, OrderedDict(v=np.zeros(2)), AdamState.zeros_like(params), lr=0.1)


class TestTrain(unittest.TestCase):
    """Test cases for the training loop."""

    def setUp(self):
        """Setup a tiny model and dataset."""
        self.model = tiny_config()
        self.dataset = tiny_dataset()
        self.config = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=30,
                                  early_stop_patience=30, seed=3)

    def test_loss_decreases(self):
        """Test the model fits a small dataset."""
        params, report = train(self.model, self.dataset, self.config)
        self.assertLess(report.best_loss, report.epoch_losses[0])
        self.assertEqual(report.best_loss, min(report.epoch_losses))
        self.assertEqual(report.stop_reason, STOP_MAX_EPOCHS)
        self.assertEqual(report.steps, 30 * math.ceil(16 / 8))
        self.assertEqual(report.total_steps, report.steps)
        self.assertTrue(params.all_finite())
        self.assertAlmostEqual(report.train_accuracy, train_accuracy(params, self.dataset))
        self.assertEqual(report.model, describe(self.model))

    def test_deterministic(self):
        """Test identical seeds reproduce losses and parameters."""
        config = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=3, seed=3)
        p1, r1 = train(self.model, self.dataset, config)
        p2, r2 = train(self.model, self.dataset, config)
        self.assertEqual(r1.epoch_losses, r2.epoch_losses)
        for name in p1.names:
            assert_array_equal(p1[name], p2[name])
        self.assertEqual(r1.to_dict(include_timing=False), r2.to_dict(include_timing=False))
        self.assertNotIn("wall_clock_seconds", r1.to_dict(include_timing=False))

    def test_sharded_workers(self):
        """Test summed shard gradients track the single-worker run."""
        base = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=3, seed=3)
        sharded = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=3, seed=3, workers=2)
        _, r1 = train(self.model, self.dataset, base)
        _, r2 = train(self.model, self.dataset, sharded)
        assert_allclose(r2.epoch_losses, r1.epoch_losses, rtol=1e-6)

    def test_early_stop(self):
        """Test patience counts epochs without a min_delta improvement."""
        config = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=10, seed=3,
                             early_stop_patience=2, early_stop_min_delta=1e9)
        _, report = train(self.model, self.dataset, config)
        self.assertEqual(report.stop_reason, STOP_EARLY)
        self.assertEqual(report.stop_epoch, 2)
        self.assertEqual(len(report.epoch_losses), 3)

    def test_small_gains_still_checkpoint(self):
        """Test gains below min_delta count toward patience but still move the checkpoint."""
        config = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=10, seed=3,
                             early_stop_patience=4, early_stop_min_delta=1e9)
        _, report = train(self.model, self.dataset, config)
        self.assertEqual(report.stop_epoch, 4)
        self.assertEqual(report.best_epoch, int(np.argmin(report.epoch_losses)))
        self.assertEqual(report.best_loss, report.epoch_losses[report.best_epoch])
        # stopping only truncates the run
        longer = TrainConfig(lr_start=1e-2, lr_end=5e-3, batch_size=8, max_epochs=10, seed=3,
                             early_stop_patience=100)
        _, full_report = train(self.model, self.dataset, longer)
        self.assertEqual(full_report.epoch_losses[:5], report.epoch_losses)

    def test_divergence_before_first_epoch(self):
        """Test NaN losses with no completed epoch raise."""
        init = init_params(self.model, 0)
        bad = init.replace({"head.b2": np.full(4, np.nan)})
        with self.assertRaises(ComputeError):
            train(self.model, self.dataset, self.config, init=bad)

    def test_fence(self):
        """Test samples on or after the test start are refused."""
        with self.assertRaises(ValidationError):
            train(self.model, self.dataset, self.config, fence_date="2015-01-10")
        params, _ = train(self.model, self.dataset.fence_before("2015-01-10"),
                          TrainConfig(max_epochs=1, batch_size=8), fence_date="2015-01-10")
        self.assertTrue(params.all_finite())

    def test_empty_dataset(self):
        """Test training on nothing."""
        with self.assertRaises(ValidationError):
            train(self.model, self.dataset.subset(np.zeros(16, dtype=bool)), self.config)

    def test_epoch_log(self):
        """Test one JSONL record per completed epoch, replaced on rerun."""
        config = TrainConfig(batch_size=8, max_epochs=2, seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            log = EpochLogger(os.path.join(tmp, "epochs.jsonl"))
            _, report = train(self.model, self.dataset, config, epoch_log=log)
            _, report = train(self.model, self.dataset, config, epoch_log=log)
            events = log.read_events()
        self.assertEqual([e["epoch"] for e in events], [0, 1])
        self.assertEqual(events[-1]["loss"], report.epoch_losses[-1])

    def test_policy(self):
        """Test the backtest policy replays model predictions by date."""
        params = init_params(self.model, 0)
        policy = evaluate_policy(params, self.dataset)
        preds = predict_batch(params, self.dataset.windows)
        for day, pred in zip(self.dataset.dates, preds):
            self.assertEqual(policy(day), pred)
        with self.assertRaises(ValidationError):
            policy(np.datetime64("2020-01-01"))


def cycle_market(n_days: int = 420, up_days: int = 8, down_days: int = 12):
    """
    Spot path that rises 1% a day for ``up_days`` then falls 0.4% a day.

    Returns the spot series and a two-column feature panel (scaled daily
    log return, rising-leg flag) that repeats with the cycle.
    """
    phase = np.arange(n_days) % (up_days + down_days)
    rising = phase < up_days
    log_returns = np.where(rising, 0.01, -0.004)
    dates = pd.bdate_range("2015-01-01", periods=n_days).values.astype("datetime64[D]")
    spot = SpotSeries("USDCNY", dates, 100.0 * np.exp(np.cumsum(log_returns)))
    features = np.column_stack([log_returns / 0.01, rising.astype(float)])
    return spot, features


class TestLearningCapacity(unittest.TestCase):
    """Test cases for fitting a planted tenor rule with the desk-size model."""

    @classmethod
    def setUpClass(cls):
        """Setup the cycle market, its optimal labels and one training run shared by the tests."""
        cls.tenors = TenorSet(90)
        cls.spot, features = cycle_market()
        labels = optimal_labels(cls.spot, cls.tenors)
        t_len = 30
        ends = np.arange(t_len - 1, len(labels))
        windows = np.stack([features[t - t_len + 1:t + 1] for t in ends])
        cls.dataset = WindowedDataset(windows, labels.labels[ends], cls.spot.dates[ends])
        cls.split = str(cls.spot.dates[260])
        model = with_input_width(desk_profile(), 2)
        config = TrainConfig(lr_start=3e-3, lr_end=1e-3, batch_size=32, max_epochs=500,
                             early_stop_patience=50, early_stop_min_delta=0.0, seed=7)
        cls.params, cls.report = train(model, cls.dataset.fence_before(cls.split), config, fence_date=cls.split)

    def test_fits_training_labels(self):
        """Test the training loss falls below 0.05 with over 95% accuracy within 500 epochs."""
        self.assertLessEqual(len(self.report.epoch_losses), 500)
        self.assertLess(self.report.best_loss, 0.05)
        self.assertGreater(self.report.train_accuracy, 95.0)

    def test_beats_momentum_baselines(self):
        """Test the trained policy's test ROI exceeds Momentum-1 and Momentum-90 on the same days."""
        policy = evaluate_policy(self.params, self.dataset.after(self.split))
        model = run_backtest(policy, self.spot, self.split, self.tenors, name="wattnet")
        m1 = run_backtest(momentum1(oracle_labels(self.spot, self.tenors)), self.spot, self.split, self.tenors)
        m90 = run_backtest(momentum90(self.spot, self.tenors, 90), self.spot, self.split, self.tenors)
        optimal = run_backtest(policy_from_labels(optimal_labels(self.spot, self.tenors)), self.spot, self.split,
                               self.tenors)
        self.assertEqual(model.n_days, m1.n_days)
        self.assertEqual(model.n_days, m90.n_days)
        self.assertGreater(model.total_roi, m1.total_roi)
        self.assertGreater(model.total_roi, m90.total_roi)
        self.assertLessEqual(model.total_roi, optimal.total_roi + 1e-9)


if __name__ == '__main__':
    unittest.main()
