"""
Tenor Labels
Optimal (greedy), expert (max-volume) and expert-oracle (shortest
positive) label streams, plus windowing of the feature panel into
supervised samples.

Class 0 means "no trade"; classes 1..a_max are tenors in trading days.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from src.core.errors import ArtifactError, ParseError, ValidationError
from src.data.ingest import AlignedPanel, SpotSeries, VolumeCube

logger = logging.getLogger(__name__)

NO_TRADE = 0


class LabelKind(Enum):
    OPTIMAL = "optimal"
    EXPERT = "expert"
    ORACLE = "oracle"


@dataclass(frozen=True)
class TenorSet:
    """Admissible tenors 1..a_max plus the no-trade class 0."""
    a_max: int = 90

    def __post_init__(self):
        if self.a_max < 1:
            raise ValidationError(f"a_max must be >= 1, got {self.a_max}")

    @property
    def n_classes(self) -> int:
        return self.a_max + 1

    @property
    def classes(self) -> np.ndarray:
        return np.arange(self.n_classes)


@dataclass(eq=False)
class LabelSeries:
    """One class per labeled trading day."""
    dates: np.ndarray
    labels: np.ndarray
    kind: LabelKind

    def __post_init__(self):
        if len(self.dates) != len(self.labels):
            raise ValidationError("label dates and values differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def as_dict(self) -> dict:
        return dict(zip(self.dates, self.labels.tolist()))


@dataclass(eq=False)
class WindowedDataset:
    """Trailing panel windows paired with the label of their last day."""
    windows: np.ndarray   # N x T x M
    labels: np.ndarray    # N
    dates: np.ndarray     # N label dates (window end)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(self.windows[mask], self.labels[mask], self.dates[mask])

    def fence_before(self, day) -> "WindowedDataset":
        """Samples whose label date is strictly before ``day``."""
        return self.subset(self.dates < np.datetime64(day, "D"))

    def after(self, day) -> "WindowedDataset":
        """Samples whose label date is on or after ``day``."""
        return self.subset(self.dates >= np.datetime64(day, "D"))


def _rates(y) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(y, SpotSeries):
        return y.dates, np.asarray(y.rates, dtype=np.float64)
    rates = np.asarray(y, dtype=np.float64)
    return np.arange(len(rates)), rates


def forward_gains(rates: np.ndarray, a_max: int) -> np.ndarray:
    """G[t, a-1] = y_{t+a} - y_t for every t with a full horizon."""
    if len(rates) <= a_max:
        raise ValidationError(f"series of length {len(rates)} needs more than a_max={a_max} points")
    future = sliding_window_view(rates[1:], a_max)
    return future - rates[: len(future), None]


def optimal_labels(y, tenors: TenorSet = TenorSet()) -> LabelSeries:
    """
    argmax_a (y_{t+a} - y_t), smallest tenor on ties, 0 when no gain is positive.

    The last a_max days stay unlabeled.
    """
    dates, rates = _rates(y)
    gains = forward_gains(rates, tenors.a_max)
    best = np.argmax(gains, axis=1) + 1
    labels = np.where(gains.max(axis=1) > 0, best, NO_TRADE)
    return LabelSeries(dates[: len(labels)], labels.astype(np.int64), LabelKind.OPTIMAL)


def oracle_labels(y, tenors: TenorSet = TenorSet()) -> LabelSeries:
    """Shortest tenor with strictly positive return; 0 when none exists."""
    dates, rates = _rates(y)
    positive = forward_gains(rates, tenors.a_max) > 0
    first = np.argmax(positive, axis=1) + 1
    labels = np.where(positive.any(axis=1), first, NO_TRADE)
    return LabelSeries(dates[: len(labels)], labels.astype(np.int64), LabelKind.ORACLE)


def expert_labels(cube: VolumeCube) -> LabelSeries:
    """Max-volume tenor per day; 0 on days without any volume."""
    volumes = np.asarray(cube.volumes, dtype=np.float64)
    best = np.argmax(volumes, axis=1) + 1
    traded = volumes.max(axis=1) > 0
    labels = np.where(traded, best, NO_TRADE)
    empty_days = int((~traded).sum())
    if empty_days:
        logger.info(f"{cube.pair_name}: {empty_days} days without NDF volume labeled as no-trade")
    return LabelSeries(np.asarray(cube.dates), labels.astype(np.int64), LabelKind.EXPERT)


def label_distribution(labels: LabelSeries, tenors: TenorSet = TenorSet()) -> np.ndarray:
    """Count of each class 0..a_max."""
    if len(labels) and (labels.labels.min() < 0 or labels.labels.max() > tenors.a_max):
        raise ValidationError("labels fall outside the tenor set")
    return np.bincount(labels.labels, minlength=tenors.n_classes)


def window_dataset(panel: AlignedPanel, labels: LabelSeries, t_len: int = 30) -> WindowedDataset:
    """
    One sample per labeled panel day with ``t_len`` days of history.

    The window for day t is rows t-t_len+1..t; nothing after t is read.
    """
    if t_len < 1:
        raise ValidationError(f"window length must be >= 1, got {t_len}")
    row_of = panel.date_index()
    ends, classes, days = [], [], []
    for day, label in zip(labels.dates, labels.labels):
        row = row_of.get(day)
        if row is None or row < t_len - 1:
            continue
        ends.append(row)
        classes.append(int(label))
        days.append(day)
    if not ends:
        raise ValidationError(
            f"no labeled day has {t_len} rows of panel history "
            f"(panel {len(panel.dates)} rows, {len(labels)} labels)"
        )
    ends_arr = np.asarray(ends)
    windows = sliding_window_view(panel.values, t_len, axis=0)  # (rows-t_len+1, M, t_len)
    batch = np.ascontiguousarray(windows[ends_arr - t_len + 1].transpose(0, 2, 1))
    return WindowedDataset(batch, np.asarray(classes, dtype=np.int64), np.asarray(days))


def write_labels(labels: LabelSeries, path: str) -> None:
    """CSV ``date,label,kind``."""
    frame = pd.DataFrame({
        "date": pd.DatetimeIndex(np.asarray(labels.dates, dtype="datetime64[ns]")).strftime("%Y-%m-%d"),
        "label": labels.labels,
        "kind": labels.kind.value,
    })
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def read_labels(path: str, kind: Optional[LabelKind] = None) -> LabelSeries:
    file_path = Path(path)
    if not file_path.exists():
        raise ArtifactError(f"label file missing: {file_path}", producer="label")
    frame = pd.read_csv(file_path, dtype={"date": str, "kind": str})
    if list(frame.columns) != ["date", "label", "kind"]:
        raise ParseError("label header must be date,label,kind", str(path), 1)
    kinds = frame["kind"].unique()
    if len(kinds) > 1:
        raise ParseError(f"mixed label kinds {sorted(kinds)}", str(path))
    found = LabelKind(kinds[0]) if len(kinds) else (kind or LabelKind.OPTIMAL)
    if kind is not None and found is not kind:
        raise ValidationError(f"{path} holds {found.value} labels, expected {kind.value}")
    dates = pd.DatetimeIndex(frame["date"]).values.astype("datetime64[D]")
    return LabelSeries(dates, frame["label"].to_numpy(dtype=np.int64), found)
