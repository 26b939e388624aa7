"""Weather table ingestion, cleaning, daily aggregation, windowing and scaling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DataError, SchemaError

DATE_COLUMN = "Formatted Date"
NUMERIC_COLUMNS = (
    "Temperature (C)",
    "Apparent Temperature (C)",
    "Humidity",
    "Wind Speed (km/h)",
    "Wind Bearing (degrees)",
    "Visibility (km)",
    "Loud Cover",
    "Pressure (millibars)",
)
TEXT_COLUMNS = ("Summary", "Precip Type", "Daily Summary")
KAGGLE_HEADER = (DATE_COLUMN, "Summary", "Precip Type") + NUMERIC_COLUMNS + ("Daily Summary",)
TARGET_COLUMN = "Temperature (C)"
TABLE_TAG = "bttf-table-v1"
SECONDS_PER_DAY = 86400

_DATE_FORMATS = ("%Y-%m-%d %H:%M:%S.%f %z", "%Y-%m-%d %H:%M:%S %z", "%Y-%m-%dT%H:%M:%S%z")


def parse_timestamp(text):
    """Epoch seconds (UTC) for a Kaggle-style timestamp, NaN if unparseable."""
    s = text.strip()
    for fmt in _DATE_FORMATS:
        try:
            dt = datetime.strptime(s, fmt)
            return dt.timestamp()
        except ValueError:
            pass
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        return math.nan
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(epoch):
    dt = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    return dt.strftime("%Y-%m-%d %H:%M:%S.000 +0000")


@dataclass
class RawTable:
    """Parsed file contents; NaN marks cells that failed to parse."""

    timestamps: np.ndarray
    columns: tuple
    values: np.ndarray
    n_flagged: int = 0

    def __len__(self):
        return len(self.timestamps)


@dataclass
class TimeSeriesTable:
    timestamps: np.ndarray  # int64 epoch seconds, strictly increasing
    columns: tuple
    values: np.ndarray  # [T, d]

    def __len__(self):
        return len(self.timestamps)

    def column(self, name):
        return self.values[:, self.columns.index(name)]


def ingest_csv(path):
    """Read a Kaggle weather CSV, keeping the timestamp and the numeric variables."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (DATE_COLUMN,) + NUMERIC_COLUMNS:
            if col not in header:
                raise SchemaError(col)
        date_i = header.index(DATE_COLUMN)
        num_i = [header.index(c) for c in NUMERIC_COLUMNS]
        stamps, rows, flagged = [], [], 0
        for rec in reader:
            if not rec:
                continue
            ts = parse_timestamp(rec[date_i]) if date_i < len(rec) else math.nan
            row = []
            for i in num_i:
                try:
                    row.append(float(rec[i]))
                except (ValueError, IndexError):
                    row.append(math.nan)
            bad = math.isnan(ts) or any(not math.isfinite(v) for v in row)
            flagged += bad
            stamps.append(ts)
            rows.append(row)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(NUMERIC_COLUMNS))
    return RawTable(np.array(stamps, dtype=np.float64), NUMERIC_COLUMNS, values, flagged)


def clean(raw):
    """Drop incomplete rows, sort by time, keep the first of duplicate timestamps."""
    ts = np.asarray(raw.timestamps, dtype=np.float64)
    vals = np.asarray(raw.values, dtype=np.float64)
    ok = np.isfinite(ts) & np.all(np.isfinite(vals), axis=1)
    ts, vals = ts[ok], vals[ok]
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    if len(ts):
        keep = np.ones(len(ts), dtype=bool)
        keep[1:] = ts[1:] != ts[:-1]
        ts, vals = ts[keep], vals[keep]
    if len(ts) == 0:
        raise DataError("no rows left after cleaning")
    return TimeSeriesTable(ts.astype(np.int64), tuple(raw.columns), vals)


def aggregate_daily(table: TimeSeriesTable, min_rows=20):
    """Per-UTC-day means; days with fewer than ``min_rows`` observations are dropped."""
    day = np.floor_divide(table.timestamps, SECONDS_PER_DAY)
    days, start, counts = np.unique(day, return_index=True, return_counts=True)
    keep = counts >= min_rows
    if not np.any(keep):
        raise DataError("no day has enough observations for aggregation")
    sums = np.add.reduceat(table.values, start, axis=0)
    means = sums / counts[:, None]
    return TimeSeriesTable((days[keep] * SECONDS_PER_DAY).astype(np.int64), table.columns, means[keep])


def drop_constant_columns(table: TimeSeriesTable, keep=(TARGET_COLUMN,)):
    const = np.all(table.values == table.values[:1], axis=0)
    cols = [i for i, c in enumerate(table.columns) if not const[i] or c in keep]
    return TimeSeriesTable(table.timestamps, tuple(table.columns[i] for i in cols), table.values[:, cols])


# --------------------------------------------------------------------------
# windowing
# --------------------------------------------------------------------------


@dataclass
class WindowSample:
    window: np.ndarray  # [k, d]
    present: np.ndarray  # [d - 1]
    target: np.ndarray  # [h]
    t_index: int


@dataclass
class WindowSet:
    """Array-of-samples view: sample ``i`` is ``windows[i]``, ``present[i]``, ..."""

    windows: np.ndarray  # [N, k, d]
    present: np.ndarray  # [N, d - 1]
    targets: np.ndarray  # [N, h]
    t_index: np.ndarray  # [N]
    columns: tuple = ()
    target_index: int = 0

    def __len__(self):
        return len(self.t_index)

    def __getitem__(self, i):
        return WindowSample(self.windows[i], self.present[i], self.targets[i], int(self.t_index[i]))

    def subset(self, sel):
        return WindowSet(self.windows[sel], self.present[sel], self.targets[sel], self.t_index[sel],
                         self.columns, self.target_index)

    @property
    def present_columns(self):
        return tuple(c for i, c in enumerate(self.columns) if i != self.target_index)

    def concat(self, other):
        return WindowSet(
            np.concatenate([self.windows, other.windows]),
            np.concatenate([self.present, other.present]),
            np.concatenate([self.targets, other.targets]),
            np.concatenate([self.t_index, other.t_index]),
            self.columns,
            self.target_index,
        )


def present_indices(d, target_index):
    return [i for i in range(d) if i != target_index]


def make_windows(table, k, h=1, target=TARGET_COLUMN):
    """One sample per origin ``t``: rows ``t-k..t-1`` predict ``target`` at ``t..t+h-1``."""
    values = table.values if isinstance(table, TimeSeriesTable) else np.asarray(table, dtype=np.float64)
    columns = table.columns if isinstance(table, TimeSeriesTable) else tuple(f"x{i}" for i in range(values.shape[1]))
    if k < 1 or h < 1:
        raise ConfigError("k and h must be >= 1", [n for n, v in (("k", k), ("h", h)) if v < 1])
    T, d = values.shape
    n = T - k - h + 1
    if n < 1:
        raise DataError(f"table of {T} rows too short for k={k}, h={h}")
    ti = columns.index(target) if isinstance(target, str) else int(target)
    origins = np.arange(k, k + n)
    win = np.lib.stride_tricks.sliding_window_view(values, (k, d))[:, 0][:n]
    tgt = np.lib.stride_tricks.sliding_window_view(values[:, ti], h)[k:k + n]
    present = values[origins - 1][:, present_indices(d, ti)]
    return WindowSet(np.array(win), present, np.array(tgt), origins, tuple(columns), ti)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    target_index: int = 0
    constant: np.ndarray = field(default=None)
    ddof: int = 0

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def normalize_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean[self.target_index]) / self.std[self.target_index]

    def denormalize_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.std[self.target_index] + self.mean[self.target_index]

    def to_dict(self):
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "target_index": self.target_index,
            "constant": [bool(v) for v in self.constant],
            "ddof": self.ddof,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   int(d["target_index"]), np.array(d["constant"], dtype=bool), int(d.get("ddof", 0)))


def normalize_fit(train: WindowSet, target_index=None):
    """Per-feature population mean/std over every row of the training windows.

    Zero-variance features are flagged and passed through unchanged (mean 0, std 1).
    """
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty set")
    ti = train.target_index if target_index is None else target_index
    rows = train.windows.reshape(-1, train.windows.shape[-1])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    constant = std == 0
    if np.any(constant):
        names = [train.columns[i] if i < len(train.columns) else f"x{i}" for i in np.flatnonzero(constant)]
        warnings.warn(f"constant features passed through unscaled: {names}", RuntimeWarning, stacklevel=2)
        std = np.where(constant, 1.0, std)
        mean = np.where(constant, 0.0, mean)
    return NormStats(mean, std, ti, constant, 0)


def normalize_apply(stats: NormStats, samples: WindowSet):
    d = samples.windows.shape[-1]
    if d != len(stats.mean):
        raise ContractError(f"samples have {d} features, stats have {len(stats.mean)}")
    pidx = present_indices(d, stats.target_index)
    return WindowSet(
        stats.normalize(samples.windows),
        (samples.present - stats.mean[pidx]) / stats.std[pidx],
        stats.normalize_target(samples.targets),
        samples.t_index,
        samples.columns,
        samples.target_index,
    )


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15

    def validate(self):
        bad = [n for n in ("train", "val", "test") if not getattr(self, n) > 0]
        if not bad and abs(self.train + self.val + self.test - 1.0) > 1e-9:
            bad = ["train", "val", "test"]
        if bad:
            raise ConfigError(f"invalid split fractions: {', '.join(bad)}", bad)
        return self

    def boundaries(self, n):
        self.validate()
        n_train = int(math.floor(n * self.train + 1e-9))
        n_val = int(math.floor(n * self.val + 1e-9))
        return n_train, n_train + n_val


def chrono_split(samples: WindowSet, spec: SplitSpec = SplitSpec()):
    """Contiguous train/val/test segments in time order."""
    n = len(samples)
    a, b = spec.boundaries(n)
    if a == 0 or b == a or b == n:
        raise ConfigError(f"split of {n} samples leaves an empty segment", ["split"])
    return samples.subset(slice(0, a)), samples.subset(slice(a, b)), samples.subset(slice(b, n))


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def write_table_csv(table: TimeSeriesTable, path):
    """Write ``table`` in the Kaggle column layout (text columns left blank)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KAGGLE_HEADER)
        col_pos = {c: i for i, c in enumerate(table.columns)}
        for ts, row in zip(table.timestamps, table.values):
            cells = []
            for name in KAGGLE_HEADER:
                if name == DATE_COLUMN:
                    cells.append(format_timestamp(ts))
                elif name in col_pos:
                    cells.append(repr(float(row[col_pos[name]])))
                else:
                    cells.append("")
            w.writerow(cells)


def save_table(table: TimeSeriesTable, path):
    manifest = {"format": TABLE_TAG, "columns": list(table.columns), "n_rows": len(table)}
    nc.write_container(path, manifest, {"timestamps": table.timestamps.astype(np.float64),
                                        "values": table.values})


def load_table(path):
    manifest, tensors = nc.read_container(path)
    if manifest.get("format") != TABLE_TAG:
        raise DataError(f"{path}: not a {TABLE_TAG} file")
    values = tensors["values"].reshape(manifest["n_rows"], len(manifest["columns"]))
    return TimeSeriesTable(tensors["timestamps"].astype(np.int64), tuple(manifest["columns"]), values)
