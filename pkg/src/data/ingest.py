"""
Market Data Ingestion
Spot-rate and NDF-record parsing, per-tenor volume aggregation,
calendar alignment, and trailing-window normalization.
"""
import json
import logging
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from src.core.errors import AlignmentError, ArtifactError, ParseError, ValidationError

logger = logging.getLogger(__name__)

SPOT_DATE_COLUMN = "date"
NDF_COLUMNS = ["pair", "start_date", "fix_date", "notional_usd"]
FLOAT_FORMAT = "%.17g"

# Columns whose rolling std is below this (relative to |mean|) are treated as constant
SIGMA_FLOOR = 1e-12


class ColumnGroup(Enum):
    """Feature family of a panel column."""
    SPOT = "spot"
    INDICATOR = "indicator"
    VOLUME = "volume"


@dataclass(frozen=True)
class ColumnInfo:
    """Name and group of one panel column."""
    name: str
    group: ColumnGroup


@dataclass(frozen=True, eq=False)
class SpotSeries:
    """Daily spot rates x_t of one currency pair."""
    pair_name: str
    dates: np.ndarray   # datetime64[D], strictly increasing
    rates: np.ndarray   # float64, strictly positive

    def __len__(self) -> int:
        return len(self.rates)

    def to_series(self) -> pd.Series:
        return pd.Series(self.rates, index=_index(self.dates), name=self.pair_name)


@dataclass(frozen=True)
class NdfRecord:
    """One NDF contract from the trade repository."""
    pair_name: str
    start_date: date
    fix_date: date
    notional: float

    @property
    def tenor(self) -> int:
        """Calendar days between start and fix."""
        return (self.fix_date - self.start_date).days


@dataclass(eq=False)
class VolumeCube:
    """Per-day, per-tenor notional volumes v_{t,a}."""
    pair_name: str
    dates: np.ndarray
    volumes: np.ndarray         # |dates| x a_max
    dropped_long: int = 0       # records with tenor > a_max
    dropped_off_calendar: int = 0

    @property
    def a_max(self) -> int:
        return self.volumes.shape[1]

    @property
    def tenors(self) -> np.ndarray:
        return np.arange(1, self.a_max + 1)

    def column_names(self) -> List[str]:
        width = max(3, len(str(self.a_max)))
        return [f"{self.pair_name}_VOL_{a:0{width}d}" for a in self.tenors]


@dataclass(eq=False)
class AlignedPanel:
    """T x M feature matrix with per-column metadata."""
    dates: np.ndarray
    columns: List[ColumnInfo]
    values: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValidationError(f"panel values must be 2-D, got shape {self.values.shape}")
        if self.values.shape != (len(self.dates), len(self.columns)):
            raise ValidationError(
                f"panel shape {self.values.shape} does not match "
                f"{len(self.dates)} dates x {len(self.columns)} columns"
            )

    @property
    def width(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise ValidationError(f"panel has no column {name!r}") from None

    def date_index(self) -> Dict[np.datetime64, int]:
        return {d: i for i, d in enumerate(self.dates)}

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=self.names)
        frame.insert(0, SPOT_DATE_COLUMN, _index(self.dates).strftime("%Y-%m-%d"))
        return frame


@dataclass(eq=False)
class RollingStats:
    """Trailing-window mean and population std per column."""
    window: int
    means: np.ndarray
    stds: np.ndarray


def _index(dates: Sequence[Any]) -> pd.DatetimeIndex:
    return pd.DatetimeIndex(np.asarray(dates, dtype="datetime64[ns]"))


def _to_day(values: Iterable[Any]) -> np.ndarray:
    return np.asarray(pd.DatetimeIndex(values).values.astype("datetime64[D]"))


def _parse_date(raw: str, path: str, line: int) -> np.datetime64:
    try:
        return np.datetime64(date.fromisoformat(raw.strip()), "D")
    except (ValueError, AttributeError):
        raise ParseError(f"invalid ISO date {raw!r}", path, line) from None


def _parse_float(raw: str, path: str, line: int, what: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ParseError(f"invalid {what} {raw!r}", path, line) from None


def _read_raw(path: str) -> pd.DataFrame:
    file_path = Path(path)
    if not file_path.exists():
        raise ArtifactError(f"input file not found: {file_path}")
    try:
        return pd.read_csv(file_path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise ParseError(str(e), str(path)) from e
    except pd.errors.EmptyDataError:
        raise ParseError("empty file", str(path)) from None


def parse_spot_csv(path: str) -> List[SpotSeries]:
    """
    Parse a wide spot file ``date,<PAIR1>,<PAIR2>,...``.

    Blank cells mean the pair did not fix that day; the date is simply
    absent from that pair's series.

    Returns:
        One SpotSeries per pair column, in header order
    """
    raw = _read_raw(path)
    columns = [c.strip() for c in raw.columns]
    if not columns or columns[0] != SPOT_DATE_COLUMN or len(columns) < 2:
        raise ParseError(f"header must be 'date,<PAIR>,...', got {','.join(columns)}", str(path), 1)
    if len(set(columns)) != len(columns):
        raise ParseError("duplicate pair columns in header", str(path), 1)

    dates = np.empty(len(raw), dtype="datetime64[D]")
    values = np.full((len(raw), len(columns) - 1), np.nan)
    for i, row in enumerate(raw.itertuples(index=False, name=None)):
        line = i + 2
        dates[i] = _parse_date(row[0], str(path), line)
        for j, cell in enumerate(row[1:]):
            if cell.strip() == "":
                continue
            rate = _parse_float(cell, str(path), line, "rate")
            if not np.isfinite(rate) or rate <= 0:
                raise ValidationError(f"{path}:{line}: non-positive rate {cell!r} for {columns[j + 1]}")
            values[i, j] = rate

    _, counts = np.unique(dates, return_counts=True)
    if np.any(counts > 1):
        dup = np.unique(dates)[counts > 1][0]
        raise ValidationError(f"{path}: duplicate date {dup}")

    order = np.argsort(dates, kind="stable")
    dates, values = dates[order], values[order]

    series = []
    for j, pair in enumerate(columns[1:]):
        present = ~np.isnan(values[:, j])
        series.append(SpotSeries(pair, dates[present], values[present, j]))
    logger.info(f"Parsed {len(series)} spot series over {len(dates)} dates from {path}")
    return series


def write_spot_csv(series: Sequence[SpotSeries], path: str) -> None:
    """Write spot series in the wide file layout (blank cell = no fixing)."""
    frame = pd.concat([s.to_series() for s in series], axis=1).sort_index()
    frame.index = frame.index.strftime("%Y-%m-%d")
    frame.index.name = SPOT_DATE_COLUMN
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")


def parse_ndf_records(path: str) -> List[NdfRecord]:
    """Parse ``pair,start_date,fix_date,notional_usd`` rows, preserving order."""
    raw = _read_raw(path)
    columns = [c.strip() for c in raw.columns]
    if columns != NDF_COLUMNS:
        raise ParseError(f"header must be {','.join(NDF_COLUMNS)}, got {','.join(columns)}", str(path), 1)

    records = []
    for i, (pair, start, fix, notional) in enumerate(raw.itertuples(index=False, name=None)):
        line = i + 2
        start_day = _parse_date(start, str(path), line).astype(object)
        fix_day = _parse_date(fix, str(path), line).astype(object)
        if not notional.strip():
            raise ParseError("missing notional", str(path), line)
        amount = _parse_float(notional, str(path), line, "notional")
        if not np.isfinite(amount):
            raise ParseError(f"missing notional {notional!r}", str(path), line)
        if fix_day <= start_day:
            raise ValidationError(f"{path}:{line}: fix_date {fix} is not after start_date {start}")
        if amount < 0:
            raise ValidationError(f"{path}:{line}: negative notional {notional!r}")
        records.append(NdfRecord(pair.strip(), start_day, fix_day, amount))
    logger.info(f"Parsed {len(records)} NDF records from {path}")
    return records


def write_ndf_records(records: Sequence[NdfRecord], path: str) -> None:
    frame = pd.DataFrame(
        [(r.pair_name, r.start_date.isoformat(), r.fix_date.isoformat(), r.notional) for r in records],
        columns=NDF_COLUMNS,
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def aggregate_volumes(
    records: Sequence[NdfRecord],
    calendar: Sequence[Any],
    a_max: int,
    pair_name: Optional[str] = None
) -> VolumeCube:
    """
    Sum notionals per (start day, tenor).

    Args:
        records: NDF records; filtered to ``pair_name`` when given, else
            they must all belong to one pair
        calendar: trading days forming the cube rows
        a_max: widest admissible tenor; longer records are dropped and counted
        pair_name: pair to aggregate

    Returns:
        VolumeCube with all-zero rows on days without records
    """
    if a_max < 1:
        raise ValidationError(f"a_max must be >= 1, got {a_max}")
    if pair_name is None:
        pairs = {r.pair_name for r in records}
        if len(pairs) > 1:
            raise ValidationError(f"records span several pairs {sorted(pairs)}; pass pair_name")
        pair_name = pairs.pop() if pairs else ""
    selected = [r for r in records if r.pair_name == pair_name]

    days = _to_day(calendar)
    row_of = {d: i for i, d in enumerate(days)}
    volumes = np.zeros((len(days), a_max))

    rows, cols, amounts = [], [], []
    dropped_long = dropped_off = 0
    for r in selected:
        tenor = r.tenor
        if tenor > a_max:
            dropped_long += 1
            continue
        row = row_of.get(np.datetime64(r.start_date, "D"))
        if row is None:
            dropped_off += 1
            continue
        rows.append(row)
        cols.append(tenor - 1)
        amounts.append(r.notional)
    if rows:
        np.add.at(volumes, (np.asarray(rows), np.asarray(cols)), np.asarray(amounts))

    if dropped_long or dropped_off:
        logger.info(
            f"{pair_name}: dropped {dropped_long} records with tenor > {a_max} "
            f"and {dropped_off} starting off-calendar"
        )
    return VolumeCube(pair_name, days, volumes, dropped_long, dropped_off)


def align_spots(
    spots: Sequence[SpotSeries],
    max_fill_days: int = 5
) -> Tuple[np.ndarray, List[SpotSeries]]:
    """
    Place all spot series on one trading calendar.

    The calendar is every observed date inside the span shared by all
    series. Gaps are forward-filled for at most ``max_fill_days`` rows of
    that calendar, i.e. trading days; calendar days in between do not count.
    """
    if not spots:
        raise AlignmentError("no spot series to align")
    ordered = sorted(spots, key=lambda s: s.pair_name)
    names = [s.pair_name for s in ordered]
    if len(set(names)) != len(names):
        raise AlignmentError(f"duplicate spot pairs: {names}")
    if any(len(s) == 0 for s in ordered):
        raise AlignmentError("empty spot series")

    first = max(s.dates[0] for s in ordered)
    last = min(s.dates[-1] for s in ordered)
    if first > last:
        raise AlignmentError(f"spot series share no common dates (span {first}..{last})")

    observed = np.unique(np.concatenate([s.dates for s in ordered]))
    calendar = observed[(observed >= first) & (observed <= last)]

    frame = pd.concat([s.to_series() for s in ordered], axis=1)
    frame = frame.reindex(_index(calendar))
    filled = frame.ffill(limit=max_fill_days)
    if filled.isna().any().any():
        bad = filled.columns[filled.isna().any()].tolist()
        raise AlignmentError(f"spot gaps longer than {max_fill_days} days in {bad}")
    fill_count = int(frame.isna().sum().sum())
    if fill_count:
        logger.info(f"Forward-filled {fill_count} missing spot observations")

    aligned = [SpotSeries(name, calendar, filled[name].to_numpy(dtype=np.float64)) for name in names]
    return calendar, aligned


def spots_to_panel(spots: Sequence[SpotSeries]) -> AlignedPanel:
    """Spot-only panel from already aligned series."""
    calendar = spots[0].dates
    for s in spots:
        if len(s.dates) != len(calendar) or np.any(s.dates != calendar):
            raise ValidationError("spot series are not aligned to a common calendar")
    ordered = sorted(spots, key=lambda s: s.pair_name)
    values = np.column_stack([s.rates for s in ordered]) if ordered else np.empty((len(calendar), 0))
    return AlignedPanel(calendar, [ColumnInfo(s.pair_name, ColumnGroup.SPOT) for s in ordered], values)


def panel_to_spots(panel: AlignedPanel) -> List[SpotSeries]:
    return [
        SpotSeries(c.name, panel.dates, panel.values[:, j].copy())
        for j, c in enumerate(panel.columns) if c.group is ColumnGroup.SPOT
    ]


def cubes_to_panel(cubes: Sequence[VolumeCube]) -> AlignedPanel:
    ordered = sorted(cubes, key=lambda c: c.pair_name)
    calendar = ordered[0].dates
    columns: List[ColumnInfo] = []
    blocks = []
    for cube in ordered:
        if len(cube.dates) != len(calendar) or np.any(cube.dates != calendar):
            raise ValidationError("volume cubes are not on a common calendar")
        columns.extend(ColumnInfo(n, ColumnGroup.VOLUME) for n in cube.column_names())
        blocks.append(cube.volumes)
    return AlignedPanel(calendar, columns, np.hstack(blocks))


def panel_to_cubes(panel: AlignedPanel) -> List[VolumeCube]:
    """Inverse of ``cubes_to_panel``."""
    by_pair: Dict[str, List[int]] = {}
    for j, c in enumerate(panel.columns):
        if c.group is ColumnGroup.VOLUME:
            by_pair.setdefault(c.name.split("_VOL_")[0], []).append(j)
    return [VolumeCube(pair, panel.dates, panel.values[:, idx].copy()) for pair, idx in sorted(by_pair.items())]


def align_panel(
    spots: Sequence[SpotSeries],
    indicators: Optional[AlignedPanel] = None,
    cubes: Optional[Sequence[VolumeCube]] = None,
    max_fill_days: int = 5
) -> AlignedPanel:
    """
    Assemble spots, indicators and volumes into one panel.

    Column order is spots, indicators, volumes, each alphabetical by
    name. Leading rows where any indicator is still warming up are
    dropped.
    """
    if not spots:
        raise AlignmentError("align_panel needs at least one spot series")
    calendar, aligned = align_spots(spots, max_fill_days)
    index = _index(calendar)

    blocks: List[pd.DataFrame] = [
        pd.DataFrame({s.pair_name: s.rates for s in aligned}, index=index)
    ]
    columns = [ColumnInfo(s.pair_name, ColumnGroup.SPOT) for s in aligned]

    if indicators is not None and indicators.width:
        ind = pd.DataFrame(indicators.values, index=_index(indicators.dates),
                           columns=indicators.names)
        ind = ind[sorted(ind.columns)].reindex(index)
        blocks.append(ind)
        columns.extend(ColumnInfo(n, ColumnGroup.INDICATOR) for n in ind.columns)

    for cube in sorted(cubes or [], key=lambda c: c.pair_name):
        vol = pd.DataFrame(cube.volumes, index=_index(cube.dates), columns=cube.column_names())
        blocks.append(vol.reindex(index, fill_value=0.0))
        columns.extend(ColumnInfo(n, ColumnGroup.VOLUME) for n in vol.columns)

    frame = pd.concat(blocks, axis=1)
    values = frame.to_numpy(dtype=np.float64)

    incomplete = np.isnan(values).any(axis=1)
    complete_rows = np.flatnonzero(~incomplete)
    if complete_rows.size == 0:
        raise AlignmentError("no calendar day has every feature available")
    start = int(complete_rows[0])
    if incomplete[start:].any():
        bad_day = calendar[start + int(np.flatnonzero(incomplete[start:])[0])]
        raise AlignmentError(f"feature values missing after warm-up on {bad_day}")

    panel = AlignedPanel(
        calendar[start:].copy(),
        columns,
        values[start:].copy(),
        metadata={
            "dropped_warmup_rows": start,
            "calendar_days": int(len(calendar)),
            "groups": {g.value: sum(c.group is g for c in columns) for g in ColumnGroup},
        },
    )
    logger.info(f"Aligned panel: {len(panel.dates)} days x {panel.width} columns (dropped {start} warm-up rows)")
    return panel


def rolling_normalize(panel: AlignedPanel, window: int = 60) -> Tuple[AlignedPanel, RollingStats]:
    """
    Trailing z-score (x_t - mu_t) / sigma_t with the window ending at t.

    Population std; rows without a full window are dropped; cells whose
    window is constant map to 0.
    """
    if window < 2:
        raise ValidationError(f"window must be >= 2, got {window}")
    n_rows, n_cols = panel.values.shape
    if n_rows <= window:
        raise ValidationError(f"panel has {n_rows} rows, needs more than window={window}")

    out_rows = n_rows - window + 1
    means = np.empty((out_rows, n_cols))
    stds = np.empty((out_rows, n_cols))
    chunk = 64
    for lo in range(0, n_cols, chunk):
        hi = min(lo + chunk, n_cols)
        # (out_rows, cols, window)
        windows = sliding_window_view(panel.values[:, lo:hi], window, axis=0)
        means[:, lo:hi] = windows.mean(axis=-1)
        stds[:, lo:hi] = windows.std(axis=-1)

    current = panel.values[window - 1:]
    constant = stds <= SIGMA_FLOOR * np.maximum(1.0, np.abs(means))
    safe = np.where(constant, 1.0, stds)
    normalized = np.where(constant, 0.0, (current - means) / safe)

    metadata = dict(panel.metadata)
    metadata.update({
        "window": window,
        "dropped_normalization_rows": window - 1,
        "normalized_groups": sorted({c.group.value for c in panel.columns}),
        "volumes_normalized": any(c.group is ColumnGroup.VOLUME for c in panel.columns),
        "constant_cells": int(constant.sum()),
    })
    result = AlignedPanel(panel.dates[window - 1:].copy(), list(panel.columns), normalized, metadata)
    return result, RollingStats(window, means, stds)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def write_panel(panel: AlignedPanel, path: str) -> Path:
    """Write the panel CSV and its JSON metadata sidecar; returns the sidecar path."""
    csv_path = Path(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    panel.to_frame().to_csv(csv_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    meta = {
        "columns": [{"name": c.name, "group": c.group.value} for c in panel.columns],
        "rows": int(len(panel.dates)),
        "metadata": panel.metadata,
    }
    sidecar = _sidecar(csv_path)
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def read_panel(path: str) -> AlignedPanel:
    """Read a panel written by ``write_panel``."""
    csv_path = Path(path)
    sidecar = _sidecar(csv_path)
    if not csv_path.exists() or not sidecar.exists():
        raise ArtifactError(f"panel artifact missing: {csv_path}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    frame = pd.read_csv(csv_path, dtype={SPOT_DATE_COLUMN: str}, float_precision="round_trip")
    columns = [ColumnInfo(c["name"], ColumnGroup(c["group"])) for c in meta["columns"]]
    if list(frame.columns[1:]) != [c.name for c in columns]:
        raise ParseError("panel header does not match its metadata sidecar", str(csv_path), 1)
    dates = _to_day(frame[SPOT_DATE_COLUMN])
    values = frame.iloc[:, 1:].to_numpy(dtype=np.float64)
    return AlignedPanel(dates, columns, values, meta.get("metadata", {}))
