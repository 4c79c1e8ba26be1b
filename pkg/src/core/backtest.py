"""
Tenor Policy Backtest
Scores any day -> class policy on the test period with total percent
ROI, optimal accuracy and non-negative return accuracy, and provides the
Momentum-1 / Momentum-90 baselines.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.core.errors import ComputeError, ConfigError, ValidationError
from src.core.labels import NO_TRADE, LabelSeries, TenorSet, optimal_labels
from src.data.ingest import FLOAT_FORMAT, AlignedPanel, SpotSeries

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["date", "class", "roi", "optimal_label", "nn_correct"]
MARKET_SCALE = 1e5


def roi(x_t: float, x_future: Optional[float], a: int) -> float:
    """Percent return 100*(x_{t+a} - x_t)/x_t of a tenor-a trade; class 0 earns 0."""
    if x_t is None or not np.isfinite(x_t) or x_t <= 0:
        raise ValidationError(f"spot rate must be positive, got {x_t}")
    if a < 0:
        raise ValidationError(f"tenor must be >= 0, got {a}")
    if a == 0:
        return 0.0
    if x_future is None or not np.isfinite(x_future):
        raise ComputeError(f"undefined trade: no spot rate {a} days ahead")
    return 100.0 * (x_future - x_t) / x_t


@dataclass(eq=False)
class PolicyTrace:
    """Per-day actions of one policy; ``rois`` is filled in once scored."""
    source: str
    dates: np.ndarray
    actions: np.ndarray
    rois: Optional[np.ndarray] = None
    flagged: np.ndarray = None

    def __post_init__(self):
        self.dates = np.asarray(self.dates)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if len(self.dates) != len(self.actions):
            raise ValidationError(f"{self.source}: {len(self.dates)} dates but {len(self.actions)} actions")
        if self.flagged is None:
            self.flagged = np.zeros(len(self.actions), dtype=bool)

    def __len__(self) -> int:
        return len(self.actions)

    def as_policy(self) -> Callable[[Any], int]:
        lookup = dict(zip(self.dates, self.actions.tolist()))

        def policy(day) -> int:
            key = np.datetime64(day, "D")
            if key not in lookup:
                raise ValidationError(f"{self.source} has no action for {key}")
            return lookup[key]

        return policy

    def flagged_dates(self) -> set:
        return set(self.dates[self.flagged])


@dataclass
class BacktestReport:
    """Metric triple plus the per-day table it was computed from."""
    policy: str
    total_roi: float
    optimal_accuracy: float
    nonneg_accuracy: float
    trades: int
    n_days: int
    excluded_days: int
    flagged_days: int = 0
    split_date: Optional[str] = None
    table: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=TABLE_COLUMNS))

    def audit(self, tol: float = 1e-9) -> None:
        """Recompute the totals from the table; raises on disagreement."""
        t = self.table
        checks = {
            "total_roi": (float(t["roi"].sum()), self.total_roi),
            "trades": (int((t["class"] > 0).sum()), self.trades),
            "n_days": (len(t), self.n_days),
        }
        if len(t):
            checks["optimal_accuracy"] = (100.0 * float((t["class"] == t["optimal_label"]).mean()),
                                          self.optimal_accuracy)
            checks["nonneg_accuracy"] = (100.0 * float(t["nn_correct"].mean()), self.nonneg_accuracy)
        for name, (recomputed, reported) in checks.items():
            if abs(recomputed - reported) > tol * max(1.0, abs(reported)):
                raise ComputeError(f"{self.policy}: {name} {reported} disagrees with table ({recomputed})")

    def summary(self) -> Dict[str, Any]:
        return {
            "policy": self.policy,
            "total_roi": self.total_roi,
            "optimal_accuracy": self.optimal_accuracy,
            "nonneg_accuracy": self.nonneg_accuracy,
            "trades": self.trades,
            "n_days": self.n_days,
            "excluded_days": self.excluded_days,
            "flagged_days": self.flagged_days,
            "split_date": self.split_date,
        }


def _rates(spot: Union[SpotSeries, Sequence[float]]) -> np.ndarray:
    return np.asarray(spot.rates if isinstance(spot, SpotSeries) else spot, dtype=np.float64)


def _labels_of(x) -> np.ndarray:
    if isinstance(x, (LabelSeries, PolicyTrace)):
        return x.labels if isinstance(x, LabelSeries) else x.actions
    return np.asarray(x, dtype=np.int64)


def _check_aligned(a, b) -> None:
    dates_a, dates_b = getattr(a, "dates", None), getattr(b, "dates", None)
    if dates_a is not None and dates_b is not None:
        if len(dates_a) != len(dates_b) or np.any(np.asarray(dates_a) != np.asarray(dates_b)):
            raise ValidationError("prediction and label dates are misaligned")


def optimal_accuracy(predictions, optimal) -> float:
    """100 * exact matches / days."""
    _check_aligned(predictions, optimal)
    pred, lab = _labels_of(predictions), _labels_of(optimal)
    if len(pred) != len(lab):
        raise ValidationError(f"{len(pred)} predictions for {len(lab)} labels")
    if len(pred) == 0:
        raise ValidationError("accuracy over zero days")
    return 100.0 * float(np.mean(pred == lab))


def nonneg_accuracy(
    predictions,
    spot: Union[SpotSeries, Sequence[float]],
    tenors: TenorSet = TenorSet(),
    indices: Optional[Sequence[int]] = None
) -> float:
    """
    Percent of predictions whose realized return is >= 0.

    Args:
        predictions: classes, one per decision day
        spot: rate series the trades settle against
        indices: spot index of each decision day (default 0, 1, ...)
    """
    pred = _labels_of(predictions)
    rates = _rates(spot)
    idx = np.arange(len(pred)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(idx) != len(pred):
        raise ValidationError(f"{len(pred)} predictions for {len(idx)} day indices")
    if len(pred) == 0:
        raise ValidationError("accuracy over zero days")
    if pred.min() < 0 or pred.max() > tenors.a_max:
        raise ValidationError("predictions fall outside the tenor set")
    future = idx + pred
    if future.max() >= len(rates):
        raise ComputeError("undefined trade: prediction settles after the last spot rate")
    gains = rates[future] - rates[idx]
    return 100.0 * float(np.mean((pred == NO_TRADE) | (gains >= 0)))


def momentum1(expert: LabelSeries) -> PolicyTrace:
    """Yesterday's expert tenor; the first day does not trade."""
    if len(expert) < 2:
        raise ValidationError("momentum-1 needs at least two expert days")
    actions = np.concatenate([[NO_TRADE], expert.labels[:-1]])
    return PolicyTrace("momentum1", np.asarray(expert.dates), actions)


def momentum90(spot: SpotSeries, tenors: TenorSet = TenorSet(), lag: int = 90) -> PolicyTrace:
    """
    Best realized tenor from ``lag`` days earlier, replayed today.

    Days without ``lag`` days of history take class 0 and are flagged.
    """
    if lag < tenors.a_max:
        raise ConfigError(f"momentum lag {lag} < a_max {tenors.a_max}: the lagged label is not yet observable")
    rates = _rates(spot)
    actions = np.full(len(rates), NO_TRADE, dtype=np.int64)
    flagged = np.ones(len(rates), dtype=bool)
    if len(rates) > lag:
        past = optimal_labels(rates, tenors).labels
        actions[lag:] = past[: len(rates) - lag]
        flagged[lag:] = False
    short = int(flagged.sum())
    if short:
        logger.info(f"momentum{lag}: {short} days without {lag} days of history set to no-trade")
    return PolicyTrace(f"momentum{lag}", spot.dates, actions, flagged=flagged)


def policy_from_labels(labels: LabelSeries, source: Optional[str] = None) -> PolicyTrace:
    """Replay a label stream (expert, oracle, optimal) as a policy."""
    return PolicyTrace(source or labels.kind.value, np.asarray(labels.dates), labels.labels.copy())


def evaluation_days(
    spot: SpotSeries,
    split_date: str,
    tenors: TenorSet = TenorSet(),
    panel: Optional[AlignedPanel] = None,
    t_len: int = 30
) -> Dict[str, Any]:
    """
    Test-period spot indices on which every tenor settles inside the data.

    With a panel, days must also have ``t_len`` rows of window history.
    """
    split = np.datetime64(split_date, "D")
    in_test = np.flatnonzero(spot.dates >= split)
    if panel is not None:
        rows = panel.date_index()
        in_test = np.asarray([i for i in in_test if rows.get(spot.dates[i], -1) >= t_len - 1], dtype=np.int64)
    settled = in_test[in_test + tenors.a_max < len(spot.rates)]
    return {"indices": settled, "excluded": int(len(in_test) - len(settled))}


def run_backtest(
    policy: Union[Callable[[Any], int], PolicyTrace],
    spot: SpotSeries,
    split_date: str,
    tenors: TenorSet = TenorSet(),
    panel: Optional[AlignedPanel] = None,
    t_len: int = 30,
    name: Optional[str] = None
) -> BacktestReport:
    """
    Score ``policy`` on every evaluable test day in date order.

    Args:
        policy: callable day -> class, or a PolicyTrace
        spot: target pair spot series (the aligned calendar)
        split_date: first test day
        panel: feature panel; restricts days to those with window history
        t_len: window length used with ``panel``

    Returns:
        BacktestReport with the per-day table
    """
    flagged_dates: set = set()
    if isinstance(policy, PolicyTrace):
        name = name or policy.source
        flagged_dates = policy.flagged_dates()
        decide = policy.as_policy()
    else:
        name = name or getattr(policy, "__name__", "policy")
        decide = policy

    days = evaluation_days(spot, split_date, tenors, panel, t_len)
    indices, excluded = days["indices"], days["excluded"]
    if len(indices) == 0:
        raise ValidationError(f"no test day after {split_date} has {tenors.a_max} days of future rates")
    if excluded:
        logger.info(f"{name}: {excluded} test days excluded (future rates unavailable)")

    rates = spot.rates
    optimal = optimal_labels(spot, tenors).labels
    rows: List[Dict[str, Any]] = []
    flagged = 0
    for t in indices:
        day = spot.dates[t]
        try:
            a = int(decide(day))
        except Exception as e:
            raise ComputeError(f"policy {name} failed: {e}", day=str(day)) from e
        if not 0 <= a <= tenors.a_max:
            raise ComputeError(f"policy {name} chose class {a} outside 0..{tenors.a_max}", day=str(day))
        r = roi(rates[t], rates[t + a], a)
        rows.append({
            "date": day,
            "class": a,
            "roi": r,
            "optimal_label": int(optimal[t]),
            "nn_correct": bool(a == NO_TRADE or rates[t + a] >= rates[t]),
        })
        flagged += day in flagged_dates

    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    report = BacktestReport(
        policy=name,
        total_roi=float(table["roi"].sum()),
        optimal_accuracy=optimal_accuracy(table["class"].to_numpy(), table["optimal_label"].to_numpy()),
        nonneg_accuracy=nonneg_accuracy(table["class"].to_numpy(), rates, tenors, indices),
        trades=int((table["class"] > 0).sum()),
        n_days=len(table),
        excluded_days=excluded,
        flagged_days=int(flagged),
        split_date=str(np.datetime64(split_date, "D")),
        table=table,
    )
    report.audit()
    logger.info(
        f"{name}: ROI {report.total_roi:.2f}% opt.acc {report.optimal_accuracy:.2f}% "
        f"nn.acc {report.nonneg_accuracy:.2f}% over {report.n_days} days ({report.trades} trades)"
    )
    return report


def score_trace(trace: PolicyTrace, spot: SpotSeries) -> PolicyTrace:
    """Copy of ``trace`` with realized ROI filled in (NaN where unsettled)."""
    rows = {d: i for i, d in enumerate(spot.dates)}
    rois = np.full(len(trace), np.nan)
    for j, (day, a) in enumerate(zip(trace.dates, trace.actions)):
        t = rows.get(day)
        if t is not None and t + a < len(spot.rates):
            rois[j] = roi(spot.rates[t], spot.rates[t + a], int(a))
    return PolicyTrace(trace.source, trace.dates, trace.actions, rois, trace.flagged)


def market_statistics(spot: SpotSeries, split_date: str) -> Dict[str, Dict[str, float]]:
    """Mean and std of 1-day percent returns before and after the split, scaled by 1e5."""
    rates = _rates(spot)
    returns = 100.0 * np.diff(rates) / rates[:-1]
    # return i is realized on day i+1
    days = spot.dates[1:]
    split = np.datetime64(split_date, "D")
    stats = {}
    for period, mask in (("train", days < split), ("test", days >= split)):
        chunk = returns[mask]
        stats[period] = {
            "mean": float(chunk.mean() * MARKET_SCALE) if len(chunk) else float("nan"),
            "std": float(chunk.std() * MARKET_SCALE) if len(chunk) else float("nan"),
            "days": int(len(chunk)),
        }
    return stats


def compare_policies(reports: Sequence[BacktestReport]) -> pd.DataFrame:
    """One row per policy; all reports must cover the same days."""
    if not reports:
        raise ValidationError("no backtest reports to compare")
    reference = reports[0].table["date"].tolist()
    for r in reports[1:]:
        if r.table["date"].tolist() != reference:
            raise ValidationError(f"{r.policy} was scored on different days than {reports[0].policy}")
    return pd.DataFrame(
        [(r.policy, r.total_roi, r.optimal_accuracy, r.nonneg_accuracy, r.trades) for r in reports],
        columns=["policy", "roi", "opt_acc", "nn_acc", "trades"],
    )


def write_report(report: BacktestReport, stem: str) -> List[Path]:
    """Write ``<stem>.json`` (summary) and ``<stem>.csv`` (per-day table)."""
    base = Path(stem)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    json_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = report.table.copy()
    table["date"] = pd.DatetimeIndex(np.asarray(table["date"], dtype="datetime64[ns]")).strftime("%Y-%m-%d")
    table["nn_correct"] = table["nn_correct"].astype(int)
    table.to_csv(csv_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return [json_path, csv_path]


def write_comparison(table: pd.DataFrame, path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return out
