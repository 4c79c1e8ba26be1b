"""
Technical Indicators
SMA, EMA, MACD, rolling std, Bollinger bands and AR(p) spot forecasts.

Every indicator is causal: the value at t uses x_0..x_t only. Positions
still warming up hold NaN and are dropped during panel alignment.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg, signal

from src.core.errors import ConfigError, ValidationError
from src.data.ingest import AlignedPanel, ColumnGroup, ColumnInfo, SpotSeries

logger = logging.getLogger(__name__)


class IndicatorKind(Enum):
    SMA = "SMA"
    EMA = "EMA"
    MACD = "MACD"
    RSD = "RSD"
    BB_UPPER = "BB_UPPER"
    BB_LOWER = "BB_LOWER"
    AR_FORECAST = "AR"


@dataclass(frozen=True)
class IndicatorSpec:
    """One indicator column recipe."""
    kind: IndicatorKind
    params: Tuple[int, ...]

    def __post_init__(self):
        if not self.params or any(p < 1 for p in self.params):
            raise ConfigError(f"{self.kind.value}: parameters must be >= 1, got {self.params}")

    def column_name(self, pair: str) -> str:
        return f"{pair}_{self.kind.value}_{'_'.join(str(p) for p in self.params)}"


@dataclass
class ArFit:
    """Frozen AR(p) coefficients on first differences."""
    order: int
    coefficients: np.ndarray
    train_end: int
    persistence_fallback: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)


def _as_series(x: Sequence[float]) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"expected a 1-D series, got shape {arr.shape}")
    return arr


def sma(x: Sequence[float], n: int) -> np.ndarray:
    """Simple moving average over the trailing ``n`` values."""
    x = _as_series(x)
    if n < 1:
        raise ValidationError(f"SMA window must be >= 1, got {n}")
    if len(x) < n:
        raise ValidationError(f"series of length {len(x)} is shorter than SMA window {n}")
    out = np.full(len(x), np.nan)
    out[n - 1:] = sliding_window_view(x, n).mean(axis=-1)
    return out


def ema(x: Sequence[float], n: int) -> np.ndarray:
    """
    Exponential moving average, mu_0 = x_0, mu_t = a*x_t + (1-a)*mu_{t-1}.

    a = 2/(n+1).
    """
    x = _as_series(x)
    if n < 1:
        raise ValidationError(f"EMA window must be >= 1, got {n}")
    if len(x) == 0:
        raise ValidationError("EMA of an empty series")
    alpha = 2.0 / (n + 1)
    # initial state chosen so the first output equals x_0
    zi = np.array([(1.0 - alpha) * x[0]])
    out, _ = signal.lfilter([alpha], [1.0, -(1.0 - alpha)], x, zi=zi)
    return out


def macd(x: Sequence[float], fast: int = 12, slow: int = 26) -> np.ndarray:
    """EMA_fast - EMA_slow."""
    return ema(x, fast) - ema(x, slow)


def rolling_std(x: Sequence[float], n: int = 20) -> np.ndarray:
    """Population standard deviation of the trailing ``n`` values."""
    x = _as_series(x)
    if n < 2:
        raise ValidationError(f"rolling std window must be >= 2, got {n}")
    if len(x) < n:
        raise ValidationError(f"series of length {len(x)} is shorter than window {n}")
    out = np.full(len(x), np.nan)
    out[n - 1:] = sliding_window_view(x, n).std(axis=-1)
    return out


def bollinger(x: Sequence[float], sma_window: int = 21, rsd_window: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Upper and lower bands SMA +/- RSD."""
    mid = sma(x, sma_window)
    width = rolling_std(x, rsd_window)
    return mid + width, mid - width


def fit_ar(x: Sequence[float], order: int, train_end: int) -> ArFit:
    """
    Least-squares AR(order) fit on first differences of x[0..train_end].

    No intercept. Singular designs fall back to a persistence forecast.
    """
    x = _as_series(x)
    if order < 1:
        raise ValidationError(f"AR order must be >= 1, got {order}")
    if train_end >= len(x) or train_end < 0:
        raise ValidationError(f"train_end {train_end} outside series of length {len(x)}")
    if train_end + 1 < 10 * order:
        raise ValidationError(
            f"AR({order}) fit needs >= {10 * order} observations before train_end, got {train_end + 1}"
        )

    diffs = np.diff(x[:train_end + 1])
    # row r predicts diffs[r + order] from diffs[r + order - 1], ..., diffs[r]
    lagged = sliding_window_view(diffs[:-1], order)[:, ::-1]
    target = diffs[order:]

    fallback = False
    coefficients = np.zeros(order)
    if np.linalg.matrix_rank(lagged) < order:
        fallback = True
    else:
        try:
            coefficients, *_ = linalg.lstsq(lagged, target)
        except linalg.LinAlgError:
            fallback = True
    if fallback:
        coefficients = np.zeros(order)
        logger.warning(f"AR({order}) normal equations are singular; using persistence forecast")
    return ArFit(order, np.asarray(coefficients, dtype=np.float64), train_end, fallback,
                 {"target": "raw_rate", "differenced": True, "persistence_fallback": fallback})


def ar_forecast(x: Sequence[float], order: int, train_end: int, fit: Optional[ArFit] = None) -> np.ndarray:
    """
    One-step forecasts x_hat_{t+1} stored at position t for t >= train_end.

    Coefficients are fit once on data up to ``train_end`` and frozen; a
    precomputed ``fit`` is used as is. Earlier positions are NaN.
    """
    x = _as_series(x)
    if fit is None:
        fit = fit_ar(x, order, train_end)
    elif (fit.order, fit.train_end) != (order, train_end):
        raise ValidationError(f"AR fit ({fit.order}, {fit.train_end}) does not match ({order}, {train_end})")
    out = np.full(len(x), np.nan)
    diffs = np.diff(x)
    for t in range(train_end, len(x)):
        # diffs[t-1] = x_t - x_{t-1}; latest p differences, newest first
        recent = diffs[t - order:t][::-1]
        out[t] = x[t] + float(recent @ fit.coefficients)
    return out


def pair_specs(sma_windows: Sequence[int] = (7, 21), ema_windows: Sequence[int] = (12, 26),
               rsd_window: int = 20, bollinger_sma_window: int = 21) -> List[IndicatorSpec]:
    """The eight per-pair indicator columns."""
    specs = [IndicatorSpec(IndicatorKind.SMA, (n,)) for n in sma_windows]
    specs += [IndicatorSpec(IndicatorKind.EMA, (n,)) for n in ema_windows]
    specs.append(IndicatorSpec(IndicatorKind.MACD, (min(ema_windows), max(ema_windows))))
    specs.append(IndicatorSpec(IndicatorKind.RSD, (rsd_window,)))
    specs.append(IndicatorSpec(IndicatorKind.BB_UPPER, (bollinger_sma_window, rsd_window)))
    specs.append(IndicatorSpec(IndicatorKind.BB_LOWER, (bollinger_sma_window, rsd_window)))
    return specs


def compute_indicator(spec: IndicatorSpec, x: np.ndarray, ar_train_end: Optional[int] = None) -> np.ndarray:
    """Evaluate one indicator spec over a rate series."""
    kind = spec.kind
    if kind is IndicatorKind.SMA:
        return sma(x, spec.params[0])
    if kind is IndicatorKind.EMA:
        return ema(x, spec.params[0])
    if kind is IndicatorKind.MACD:
        return macd(x, spec.params[0], spec.params[1])
    if kind is IndicatorKind.RSD:
        return rolling_std(x, spec.params[0])
    if kind is IndicatorKind.BB_UPPER:
        return bollinger(x, spec.params[0], spec.params[1])[0]
    if kind is IndicatorKind.BB_LOWER:
        return bollinger(x, spec.params[0], spec.params[1])[1]
    if kind is IndicatorKind.AR_FORECAST:
        if ar_train_end is None:
            raise ConfigError("AR forecast needs a fit end index")
        return ar_forecast(x, spec.params[0], ar_train_end)
    raise ConfigError(f"unknown indicator kind {kind}")


def build_indicator_panel(
    spots: Sequence[SpotSeries],
    ndf_pairs: Sequence[str],
    extra_ar_pairs: Sequence[str] = ("USDMYR",),
    ar_order: int = 5,
    ar_fit_days: int = 120,
    sma_windows: Sequence[int] = (7, 21),
    ema_windows: Sequence[int] = (12, 26),
    rsd_window: int = 20,
    bollinger_sma_window: int = 21,
    workers: int = 1
) -> AlignedPanel:
    """
    Eight indicators per pair plus AR forecasts for the NDF pairs and extras.

    Args:
        spots: aligned spot series (common calendar)
        ndf_pairs: NDF pairs receiving AR forecasts
        extra_ar_pairs: further AR targets (USDMYR in the full data set)
        ar_fit_days: leading observations used to fit the AR models
        workers: threads for column computation; assembly order is fixed

    Returns:
        Indicator panel with NaN warm-up positions
    """
    if not spots:
        raise ValidationError("no spot series for indicators")
    calendar = spots[0].dates
    for s in spots:
        if len(s.dates) != len(calendar) or np.any(s.dates != calendar):
            raise ValidationError("indicator input spot series are not aligned")

    by_name = {s.pair_name: s for s in spots}
    ar_targets = list(dict.fromkeys(list(ndf_pairs) + list(extra_ar_pairs)))
    missing = [p for p in ar_targets if p not in by_name]
    if missing:
        raise ConfigError(f"AR targets missing from spot data: {missing}")

    specs = pair_specs(sma_windows, ema_windows, rsd_window, bollinger_sma_window)
    jobs: List[Tuple[str, IndicatorSpec]] = [(p, s) for p in sorted(by_name) for s in specs]
    ar_spec = IndicatorSpec(IndicatorKind.AR_FORECAST, (ar_order,))
    jobs += [(p, ar_spec) for p in sorted(ar_targets)]
    ar_train_end = ar_fit_days - 1
    fits = {p: fit_ar(by_name[p].rates, ar_order, ar_train_end) for p in sorted(ar_targets)}

    def run(job: Tuple[str, IndicatorSpec]) -> np.ndarray:
        pair, spec = job
        if spec.kind is IndicatorKind.AR_FORECAST:
            return ar_forecast(by_name[pair].rates, ar_order, ar_train_end, fits[pair])
        return compute_indicator(spec, by_name[pair].rates, ar_train_end)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            columns = list(pool.map(run, jobs))
    else:
        columns = [run(job) for job in jobs]

    names = [spec.column_name(pair) for pair, spec in jobs]
    if len(set(names)) != len(names):
        raise ConfigError("indicator column names collide; check window settings")
    values = np.column_stack(columns) if columns else np.empty((len(calendar), 0))
    fallbacks = [p for p, fit in fits.items() if fit.persistence_fallback]
    panel = AlignedPanel(
        calendar,
        [ColumnInfo(n, ColumnGroup.INDICATOR) for n in names],
        values,
        metadata={
            "ar_order": ar_order,
            "ar_fit_days": ar_fit_days,
            "ar_targets": sorted(ar_targets),
            "ar_forecast_of": "raw_rate",
            "ar_persistence_fallback": fallbacks,
        },
    )
    logger.info(f"Built {panel.width} indicator columns for {len(by_name)} pairs")
    return panel
