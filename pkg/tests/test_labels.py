"""
Unit Tests for Tenor Labels
"""
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from src.core.errors import ValidationError
from src.core.labels import (NO_TRADE, LabelKind, LabelSeries, TenorSet, expert_labels, label_distribution,
                             oracle_labels, optimal_labels, read_labels, window_dataset, write_labels)
from src.data.ingest import AlignedPanel, ColumnGroup, ColumnInfo, SpotSeries, VolumeCube


def _days(n: int, start: str = "2015-01-01") -> np.ndarray:
    return np.arange(np.datetime64(start), np.datetime64(start) + n)


class TestOptimalLabels(unittest.TestCase):
    """Test cases for the greedy optimal tenor."""

    def test_known_series(self):
        """Test hand-computed labels."""
        labels = optimal_labels(np.array([1.0, 3.0, 2.0, 2.0, 1.0]), TenorSet(2))
        assert_array_equal(labels.labels, [1, 0, 0])

    def test_ties_pick_smallest_tenor(self):
        """Test equal gains resolve to the shorter tenor."""
        labels = optimal_labels(np.array([1.0, 2.0, 2.0, 0.5]), TenorSet(2))
        self.assertEqual(labels.labels[0], 1)

    def test_brute_force(self):
        """Test against an explicit search on a random walk."""
        rng = np.random.default_rng(5)
        rates = 10.0 + np.cumsum(rng.normal(size=120))
        a_max = 9
        labels = optimal_labels(rates, TenorSet(a_max)).labels
        self.assertEqual(len(labels), len(rates) - a_max)
        for t, label in enumerate(labels):
            gains = [rates[t + a] - rates[t] for a in range(1, a_max + 1)]
            best = max(gains)
            expected = gains.index(best) + 1 if best > 0 else NO_TRADE
            self.assertEqual(label, expected)

    def test_dates_follow_spot(self):
        """Test labels carry the spot dates of their decision days."""
        spot = SpotSeries("USDCNY", _days(10), np.linspace(1.0, 2.0, 10))
        labels = optimal_labels(spot, TenorSet(3))
        assert_array_equal(labels.dates, spot.dates[:7])
        self.assertIs(labels.kind, LabelKind.OPTIMAL)
        # rising series: the longest tenor gains most
        assert_array_equal(labels.labels, 3)

    def test_too_short(self):
        """Test series no longer than a_max."""
        with self.assertRaises(ValidationError):
            optimal_labels(np.ones(3), TenorSet(3))


class TestOracleAndExpert(unittest.TestCase):
    """Test cases for the oracle and expert streams."""

    def test_oracle_shortest_positive(self):
        """Test the first strictly positive tenor wins."""
        labels = oracle_labels(np.array([1.0, 0.5, 2.0, 3.0, 0.1]), TenorSet(3))
        assert_array_equal(labels.labels, [2, 1])

    def test_oracle_no_positive(self):
        """Test falling series never trade."""
        labels = oracle_labels(np.array([5.0, 4.0, 3.0, 2.0]), TenorSet(2))
        assert_array_equal(labels.labels, [NO_TRADE, NO_TRADE])

    def test_expert_max_volume(self):
        """Test argmax volume and the empty-day fallback."""
        volumes = np.array([[0.0, 5.0, 1.0], [0.0, 0.0, 0.0], [3.0, 3.0, 1.0]])
        cube = VolumeCube("USDCNY", _days(3), volumes)
        labels = expert_labels(cube)
        assert_array_equal(labels.labels, [2, NO_TRADE, 1])
        self.assertIs(labels.kind, LabelKind.EXPERT)

    def test_distribution(self):
        """Test class counts cover 0..a_max."""
        labels = LabelSeries(_days(4), np.array([0, 2, 2, 3]), LabelKind.EXPERT)
        assert_array_equal(label_distribution(labels, TenorSet(3)), [1, 0, 2, 1])
        with self.assertRaises(ValidationError):
            label_distribution(labels, TenorSet(2))


class TestRandomizedLabelers(unittest.TestCase):
    """Test cases checking the three labelers against explicit searches on 1000 random instances."""

    def setUp(self):
        """Setup the instance count."""
        self.instances = 1000

    def test_optimal_and_oracle(self):
        """Test greedy and shortest-positive labels on tie-heavy integer series."""
        for seed in range(self.instances):
            rng = np.random.default_rng(seed)
            a_max = int(rng.integers(1, 9))
            rates = rng.integers(1, 6, size=a_max + int(rng.integers(1, 25))).astype(float)
            optimal = optimal_labels(rates, TenorSet(a_max)).labels
            oracle = oracle_labels(rates, TenorSet(a_max)).labels
            self.assertEqual(len(optimal), len(rates) - a_max)
            for t in range(len(rates) - a_max):
                gains = [rates[t + a] - rates[t] for a in range(1, a_max + 1)]
                best = max(gains)
                self.assertEqual(optimal[t], gains.index(best) + 1 if best > 0 else NO_TRADE, msg=f"seed {seed}")
                positive = [a for a in range(1, a_max + 1) if gains[a - 1] > 0]
                self.assertEqual(oracle[t], positive[0] if positive else NO_TRADE, msg=f"seed {seed}")

    def test_expert(self):
        """Test max-volume labels with ties and empty days."""
        for seed in range(self.instances):
            rng = np.random.default_rng(seed)
            n, a_max = int(rng.integers(1, 20)), int(rng.integers(1, 9))
            volumes = rng.integers(0, 3, size=(n, a_max)).astype(float)
            labels = expert_labels(VolumeCube("USDCNY", _days(n), volumes)).labels
            for t in range(n):
                row = volumes[t].tolist()
                expected = row.index(max(row)) + 1 if max(row) > 0 else NO_TRADE
                self.assertEqual(labels[t], expected, msg=f"seed {seed}")


class TestWindowing(unittest.TestCase):
    """Test cases for panel windows."""

    def setUp(self):
        """Setup a panel whose cell values encode (row, column)."""
        rows, cols = 20, 3
        values = np.arange(rows)[:, None] * 10.0 + np.arange(cols)[None, :]
        self.panel = AlignedPanel(_days(rows), [ColumnInfo(f"c{j}", ColumnGroup.SPOT) for j in range(cols)],
                                  values)

    def test_windows_end_on_label_day(self):
        """Test each window holds rows t-T+1..t and nothing later."""
        labels = LabelSeries(_days(25), np.arange(25) % 4, LabelKind.OPTIMAL)
        ds = window_dataset(self.panel, labels, t_len=5)
        self.assertEqual(ds.windows.shape, (16, 5, 3))
        assert_array_equal(ds.dates, _days(20)[4:])
        # last window ends on row 19
        assert_array_equal(ds.windows[-1][:, 0], [150.0, 160.0, 170.0, 180.0, 190.0])
        assert_array_equal(ds.labels, (np.arange(4, 20) % 4))

    def test_no_history(self):
        """Test a window longer than the panel."""
        labels = LabelSeries(_days(20), np.zeros(20, dtype=np.int64), LabelKind.OPTIMAL)
        with self.assertRaises(ValidationError):
            window_dataset(self.panel, labels, t_len=21)

    def test_fence(self):
        """Test the split day belongs to the test side."""
        labels = LabelSeries(_days(20), np.zeros(20, dtype=np.int64), LabelKind.OPTIMAL)
        ds = window_dataset(self.panel, labels, t_len=5)
        split = np.datetime64("2015-01-10")
        train, test = ds.fence_before(split), ds.after(split)
        self.assertEqual(len(train) + len(test), len(ds))
        self.assertTrue((train.dates < split).all())
        self.assertEqual(test.dates[0], split)


class TestLabelFiles(unittest.TestCase):
    """Test cases for label CSV files."""

    def test_write_read(self):
        """Test labels and kind survive the file."""
        labels = LabelSeries(_days(5), np.array([0, 1, 90, 4, 0]), LabelKind.ORACLE)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "labels_oracle.csv")
            write_labels(labels, path)
            back = read_labels(path, LabelKind.ORACLE)
            assert_array_equal(back.labels, labels.labels)
            assert_array_equal(back.dates, labels.dates)
            with self.assertRaises(ValidationError):
                read_labels(path, LabelKind.EXPERT)


if __name__ == '__main__':
    unittest.main()
