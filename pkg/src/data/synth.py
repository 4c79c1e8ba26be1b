"""
Synthetic Market Generator
Seeded geometric random walks with drift regimes and planted trend
segments for the spot panel, plus NDF trade records whose tenors are
skewed short. Lets the full pipeline run without proprietary data.
"""
import logging
from dataclasses import dataclass, field
from datetime import timedelta
from typing import List, Tuple

import numpy as np
import pandas as pd

from config.config import A_MAX, NDF_PAIRS, SynthConfig
from src.data.ingest import NdfRecord, SpotSeries, write_ndf_records, write_spot_csv

logger = logging.getLogger(__name__)

CONTEXT_PAIRS = [
    "USDMYR", "EURUSD", "GBPUSD", "USDCAD", "USDCHF", "USDJPY", "EURGBP", "EURCHF",
    "AUDUSD", "AUDCAD", "EURJPY", "GBPJPY", "EURAUD", "EURCZK", "EURHUF", "EURNZD",
    "EURSEK", "EURSGD", "EURCAD", "EURDKK", "EURNOK", "EURPLN", "EURTRY", "EURZAR",
    "USDDKK", "USDHUF", "USDMXN", "USDPLN", "USDSEK", "USDTHB", "USDZAR", "USDCZK",
    "USDHKD", "USDNOK", "USDSAR", "USDSGD", "USDTRY", "GBPAUD", "GBPCHF", "GBPZAR",
    "GBPSGD", "AUDJPY", "AUDSGD", "CADJPY", "CHFJPY", "NZDCAD", "NZDUSD", "SGDJPY",
    "ZARJPY", "GBPCAD", "GBPNZD", "GBPPLN", "AUDNZD", "CADCHF", "CADSGD", "CHFZAR",
    "NZDJPY", "NZDSGD", "TRYJPY",
]

NOTIONAL_LOG_MEAN = np.log(5e6)
NOTIONAL_LOG_STD = 1.0


@dataclass(frozen=True)
class PlantedTrend:
    """Up-trend segment applied to every NDF pair."""
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(eq=False)
class SynthMarket:
    """Generated spot series, NDF records and the trend plan behind them."""
    spots: List[SpotSeries]
    records: List[NdfRecord]
    trends: List[PlantedTrend] = field(default_factory=list)
    ndf_pairs: List[str] = field(default_factory=list)

    @property
    def dates(self) -> np.ndarray:
        return self.spots[0].dates

    def spot(self, pair: str) -> SpotSeries:
        for s in self.spots:
            if s.pair_name == pair:
                return s
        raise KeyError(pair)


class MarketSimulator:
    """
    Deterministic synthetic FX market.

    Same config and seed always produce identical series and records.
    """

    def __init__(self, config: SynthConfig = SynthConfig(), seed: int = 0, a_max: int = A_MAX):
        config.validate()
        self.config = config
        self.seed = seed
        self.a_max = a_max

    def pair_names(self) -> Tuple[List[str], List[str]]:
        """(ndf pairs, all pairs); NDF pairs first, USDMYR next when room allows."""
        c = self.config
        ndf = list(NDF_PAIRS[:c.n_ndf_pairs])
        names = ndf + [p for p in CONTEXT_PAIRS if p not in ndf][: c.n_pairs - len(ndf)]
        if len(names) < c.n_pairs:
            names += [f"SYN{i:03d}" for i in range(c.n_pairs - len(names))]
        return ndf, names

    def calendar(self) -> np.ndarray:
        index = pd.bdate_range(self.config.start_date, periods=self.config.days)
        return index.values.astype("datetime64[D]")

    def plan_trends(self, rng: np.random.Generator) -> List[PlantedTrend]:
        """One trend per equal slice of the calendar, placed at a random offset inside it."""
        c = self.config
        if c.n_trends == 0:
            return []
        slice_len = c.days // c.n_trends
        if slice_len < c.trend_length:
            logger.warning(f"{c.n_trends} trends of {c.trend_length} days do not fit in {c.days} days; "
                           f"shortening to {slice_len}")
        length = min(c.trend_length, slice_len)
        trends = []
        for i in range(c.n_trends):
            slack = slice_len - length
            offset = int(rng.integers(0, slack + 1)) if slack > 0 else 0
            trends.append(PlantedTrend(i * slice_len + offset, length))
        return trends

    def spot_paths(self, rng: np.random.Generator, names: List[str], ndf: List[str],
                   trends: List[PlantedTrend]) -> np.ndarray:
        """days x pairs matrix of strictly positive rates."""
        c = self.config
        n_days, n_pairs = c.days, len(names)
        levels = rng.uniform(0.5, 150.0, size=n_pairs)

        n_regimes = -(-n_days // c.regime_length)
        regime_sign = rng.choice([-1.0, 0.0, 1.0], size=(n_regimes, n_pairs))
        regime = np.repeat(regime_sign, c.regime_length, axis=0)[:n_days]

        shocks = rng.standard_normal((n_days, n_pairs))
        log_returns = c.drift + c.regime_drift * regime + c.volatility * shocks

        ndf_cols = [names.index(p) for p in ndf]
        for trend in trends:
            log_returns[trend.start:trend.end, ndf_cols] += c.trend_drift
        # the first day carries the level only
        log_returns[0] = 0.0
        return levels * np.exp(np.cumsum(log_returns, axis=0))

    def sample_records(self, rng: np.random.Generator, dates: np.ndarray, ndf: List[str]) -> List[NdfRecord]:
        """Poisson trade counts per day with short-skewed tenors in calendar days."""
        c = self.config
        records: List[NdfRecord] = []
        for pair in ndf:
            counts = rng.poisson(c.records_per_day, size=len(dates))
            for day, count in zip(dates, counts):
                if count == 0:
                    continue
                start = day.astype(object)
                long_trade = rng.random(count) < c.long_tenor_prob
                short_tenors = 1 + np.floor(rng.exponential(c.tenor_scale, size=count)).astype(int)
                short_tenors = np.minimum(short_tenors, self.a_max)
                long_tenors = rng.integers(self.a_max + 1, 2 * self.a_max + 1, size=count)
                tenors = np.where(long_trade, long_tenors, short_tenors)
                notionals = np.round(np.exp(rng.normal(NOTIONAL_LOG_MEAN, NOTIONAL_LOG_STD, size=count)), 2)
                for tenor, notional in zip(tenors, notionals):
                    records.append(NdfRecord(pair, start, start + timedelta(days=int(tenor)), float(notional)))
        return records

    def generate(self) -> SynthMarket:
        rng = np.random.default_rng(self.seed)
        ndf, names = self.pair_names()
        dates = self.calendar()
        trends = self.plan_trends(rng)
        rates = self.spot_paths(rng, names, ndf, trends)
        spots = [SpotSeries(name, dates, rates[:, j].copy()) for j, name in enumerate(names)]
        records = self.sample_records(rng, dates, ndf)
        logger.info(
            f"Synthesized {len(spots)} spot series over {len(dates)} days, "
            f"{len(records)} NDF records, {len(trends)} planted trends"
        )
        return SynthMarket(spots, records, trends, ndf)


def generate_market(config: SynthConfig = SynthConfig(), seed: int = 0, a_max: int = A_MAX) -> SynthMarket:
    return MarketSimulator(config, seed, a_max).generate()


def write_market(market: SynthMarket, spot_path: str, ndf_path: str) -> None:
    write_spot_csv(market.spots, spot_path)
    write_ndf_records(market.records, ndf_path)
