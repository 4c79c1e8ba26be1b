"""
Unit Tests for the Synthetic Market Generator
"""
import os
import tempfile
import unittest
from dataclasses import replace

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose, assert_array_equal

from config.config import SynthConfig
from src.core.errors import ConfigError
from src.data.ingest import parse_ndf_records, parse_spot_csv
from src.data.synth import MarketSimulator, generate_market, write_market


class TestMarketSimulator(unittest.TestCase):
    """Test cases for generated spot series and NDF records."""

    def setUp(self):
        """Setup a small market configuration."""
        self.config = SynthConfig(days=320, n_pairs=5, n_ndf_pairs=2, records_per_day=2.0)

    def test_deterministic(self):
        """Test the same seed reproduces every series and record."""
        a = generate_market(self.config, seed=11, a_max=20)
        b = generate_market(self.config, seed=11, a_max=20)
        for s, t in zip(a.spots, b.spots):
            assert_array_equal(s.rates, t.rates)
        self.assertEqual(a.records, b.records)
        c = generate_market(self.config, seed=12, a_max=20)
        self.assertFalse(np.array_equal(a.spots[0].rates, c.spots[0].rates))

    def test_pair_names(self):
        """Test NDF pairs come first and USDMYR follows."""
        ndf, names = MarketSimulator(self.config).pair_names()
        self.assertEqual(ndf, ["USDCNY", "USDIDR"])
        self.assertEqual(names[:3], ["USDCNY", "USDIDR", "USDMYR"])
        self.assertEqual(len(names), 5)
        _, many = MarketSimulator(replace(self.config, n_pairs=70)).pair_names()
        self.assertEqual(len(set(many)), 70)

    def test_calendar_and_rates(self):
        """Test business days and strictly positive rates."""
        market = generate_market(self.config, seed=0, a_max=20)
        weekdays = pd.DatetimeIndex(market.dates.astype("datetime64[ns]")).dayofweek
        self.assertTrue((weekdays < 5).all())
        self.assertEqual(len(market.dates), 320)
        for spot in market.spots:
            self.assertTrue((spot.rates > 0).all())
            self.assertTrue(np.isfinite(spot.rates).all())

    def test_planted_trends(self):
        """Test NDF pairs rise inside trends when every other drift is off."""
        quiet = replace(self.config, volatility=0.0, regime_drift=0.0, drift=0.0, n_trends=2, trend_length=40)
        market = generate_market(quiet, seed=5, a_max=20)
        self.assertEqual(len(market.trends), 2)
        usdcny = market.spot("USDCNY").rates
        steps = np.log(usdcny[1:] / usdcny[:-1])
        inside = np.zeros(len(usdcny), dtype=bool)
        for trend in market.trends:
            inside[trend.start:trend.end] = True
        inside[0] = False
        assert_allclose(steps[inside[1:]], quiet.trend_drift, rtol=1e-9)
        assert_allclose(steps[~inside[1:]], 0.0, atol=1e-12)
        context = market.spot("USDMYR").rates
        assert_allclose(context, context[0], rtol=1e-12)

    def test_short_tenors(self):
        """Test tenors stay within 1..a_max without long trades."""
        config = replace(self.config, long_tenor_prob=0.0)
        market = generate_market(config, seed=2, a_max=15)
        tenors = np.array([(r.fix_date - r.start_date).days for r in market.records])
        self.assertGreater(len(tenors), 0)
        self.assertTrue(((tenors >= 1) & (tenors <= 15)).all())
        self.assertEqual({r.pair_name for r in market.records}, {"USDCNY", "USDIDR"})

    def test_long_tenors(self):
        """Test long trades exceed a_max."""
        config = replace(self.config, long_tenor_prob=1.0)
        market = generate_market(config, seed=2, a_max=15)
        tenors = np.array([(r.fix_date - r.start_date).days for r in market.records])
        self.assertTrue((tenors > 15).all())

    def test_invalid_config(self):
        """Test too few days and too many NDF pairs."""
        with self.assertRaises(ConfigError):
            MarketSimulator(replace(self.config, days=299))
        with self.assertRaises(ConfigError):
            MarketSimulator(replace(self.config, n_ndf_pairs=7, n_pairs=10))

    def test_write_and_parse(self):
        """Test generated files parse back to the same data."""
        market = generate_market(self.config, seed=4, a_max=20)
        with tempfile.TemporaryDirectory() as tmp:
            spot_path, ndf_path = os.path.join(tmp, "spot.csv"), os.path.join(tmp, "ndf.csv")
            write_market(market, spot_path, ndf_path)
            spots = parse_spot_csv(spot_path)
            records = parse_ndf_records(ndf_path)
        self.assertEqual([s.pair_name for s in spots], [s.pair_name for s in market.spots])
        assert_array_equal(spots[0].rates, market.spots[0].rates)
        assert_array_equal(spots[0].dates, market.dates)
        self.assertEqual(records, market.records)


if __name__ == '__main__':
    unittest.main()
