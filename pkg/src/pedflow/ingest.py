"""Loading, cleaning and windowing of hourly sensor counts.

A panel is a T x N matrix of hourly counts (rows are hours, columns are
sensors) together with its hourly timestamps and sensor metadata. Missing
cells hold NaN and are flagged in ``missing_mask``.

On-disk panel layout (``save_panel`` / ``load_panel``):

* ``<name>.csv``: header ``timestamp,<sensor_id_1>,...,<sensor_id_N>``; one
  row per hour, timestamp as ``YYYY-MM-DDTHH:MM``; empty cell = missing.
* ``<name>.sensors.json``: ``{"format": "pedflow.panel/1", "sensors":
  [{"sensor_id", "latitude", "longitude", "name"}, ...]}`` in column order.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from datetime import datetime
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateRowError,
    ImputationError,
    IngestError,
    PedflowError,
    ZeroStdError,
)

PANEL_FORMAT = "pedflow.panel/1"
HOUR = np.timedelta64(1, "h")


@dataclass(frozen=True)
class SensorMeta:
    sensor_id: str
    latitude: float | None = None
    longitude: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.latitude is not None and not -90.0 <= self.latitude <= 90.0:
            raise PedflowError(f"sensor {self.sensor_id!r}: latitude {self.latitude} out of range")
        if self.longitude is not None and not -180.0 <= self.longitude <= 180.0:
            raise PedflowError(f"sensor {self.sensor_id!r}: longitude {self.longitude} out of range")

    @property
    def has_coordinates(self):
        return self.latitude is not None and self.longitude is not None


@dataclass(frozen=True)
class PanelSeries:
    """Hourly counts for N sensors over T hours.

    Hours are consecutive for ingested data; after anomalous weeks are cut
    out the timestamps keep their gaps (see ``is_contiguous``).
    """

    values: np.ndarray
    timestamps: np.ndarray
    sensors: tuple[SensorMeta, ...]
    missing_mask: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise PedflowError(f"values must be 2-D, got shape {values.shape}")
        timestamps = np.asarray(self.timestamps).astype("datetime64[h]")
        sensors = tuple(self.sensors)
        if self.missing_mask is None:
            mask = np.isnan(values)
        else:
            mask = np.array(self.missing_mask, dtype=bool)
        t, n = values.shape
        if timestamps.shape != (t,):
            raise PedflowError(f"expected {t} timestamps, got {timestamps.shape[0]}")
        if len(sensors) != n:
            raise PedflowError(f"expected {n} sensors, got {len(sensors)}")
        if mask.shape != values.shape:
            raise PedflowError("missing_mask shape differs from values")
        ids = [s.sensor_id for s in sensors]
        if len(set(ids)) != len(ids):
            raise PedflowError("sensor ids must be unique")
        if t > 1:
            steps = np.diff(timestamps)
            if np.any(steps < HOUR):
                raise PedflowError("timestamps must be strictly increasing whole hours")
        if not np.all(np.isfinite(values[~mask])):
            raise PedflowError("values must be finite where not missing")
        values[mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        timestamps.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "missing_mask", mask)

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_contiguous(self):
        """True when every consecutive pair of timestamps is one hour apart."""
        return len(self) < 2 or bool(np.all(np.diff(self.timestamps) == HOUR))

    @property
    def sensor_ids(self):
        return [s.sensor_id for s in self.sensors]

    def __len__(self):
        return self.values.shape[0]

    def column(self, sensor_id):
        return self.values[:, self.sensor_ids.index(sensor_id)]

    def slice_rows(self, start, stop):
        return PanelSeries(
            self.values[start:stop],
            self.timestamps[start:stop],
            self.sensors,
            self.missing_mask[start:stop],
        )

    def take_rows(self, rows):
        """Panel made of the given (increasing) row indices."""
        rows = np.asarray(rows, dtype=int)
        return PanelSeries(
            self.values[rows], self.timestamps[rows], self.sensors, self.missing_mask[rows]
        )

    def with_values(self, values, missing_mask=None):
        return replace(self, values=values, missing_mask=missing_mask)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for long-format count CSVs.

    ``timestamp_format`` is a ``strptime`` pattern; ``None`` means ISO-8601.
    """

    sensor_id: str = "sensor_id"
    timestamp: str = "timestamp"
    count: str = "count"
    timestamp_format: str | None = None

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"sensor_id", "timestamp", "count", "timestamp_format"}
        if unknown:
            raise PedflowError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**data)


def _parse_time(text, fmt):
    text = text.strip()
    dt = datetime.fromisoformat(text) if fmt is None else datetime.strptime(text, fmt)
    if dt.tzinfo is not None:
        dt = dt.replace(tzinfo=None)
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError(f"timestamp {text!r} is not on the hour")
    return np.datetime64(dt, "h")


def ingest_csv(path, schema: CsvSchema | None = None, sensors_meta=None) -> PanelSeries:
    """Read a long-format CSV (one row per sensor-hour) into a panel.

    Every hour between the earliest and latest timestamp gets a row; sensor
    hours absent from the file are marked missing. ``sensors_meta`` may map
    sensor ids to ``SensorMeta`` to attach coordinates.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    records = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.sensor_id, schema.timestamp, schema.count):
            if col not in header:
                raise IngestError(f"column {col!r} not in header {header}", line=1)
        for row in reader:
            line = reader.line_num
            try:
                sid = row[schema.sensor_id].strip()
                if not sid:
                    raise ValueError("empty sensor id")
                ts = _parse_time(row[schema.timestamp], schema.timestamp_format)
                count = float(row[schema.count])
            except (ValueError, TypeError, AttributeError) as exc:
                raise IngestError(f"unparseable row: {exc}", line=line) from None
            if not math.isfinite(count) or count < 0:
                raise IngestError(f"count must be a nonnegative number, got {count}", line=line)
            key = (sid, ts)
            if key in records:
                raise DuplicateRowError(sid, ts, (records[key][1], line))
            records[key] = (count, line)

    if not records:
        raise IngestError("no sensors found")
    ids = sorted({sid for sid, _ in records})
    stamps = [ts for _, ts in records]
    start, stop = min(stamps), max(stamps)
    timestamps = np.arange(start, stop + HOUR, HOUR)
    values = np.full((timestamps.size, len(ids)), np.nan)
    col = {sid: j for j, sid in enumerate(ids)}
    for (sid, ts), (count, _) in records.items():
        values[int((ts - start) / HOUR), col[sid]] = count
    meta = sensors_meta or {}
    sensors = tuple(meta.get(sid, SensorMeta(sid)) for sid in ids)
    return PanelSeries(values, timestamps, sensors)


def load_sensor_locations(path, id_col="sensor_id", lat_col="latitude", lon_col="longitude",
                          name_col="name"):
    """Read a sensor-location CSV into ``{sensor_id: SensorMeta}``."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                sid = row[id_col].strip()
                meta = SensorMeta(
                    sid, float(row[lat_col]), float(row[lon_col]), (row.get(name_col) or "").strip()
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise IngestError(f"bad location row: {exc}", line=reader.line_num) from None
            out[sid] = meta
    return out


def attach_locations(panel, locations):
    sensors = tuple(locations.get(s.sensor_id, s) for s in panel.sensors)
    return replace(panel, sensors=sensors)


def select_sensors(panel: PanelSeries, n: int) -> PanelSeries:
    """Keep the ``n`` sensors with the fewest missing cells.

    Ties go to the lexicographically smaller id; kept columns stay in their
    original order.
    """
    total = panel.shape[1]
    if not 1 <= n <= total:
        raise PedflowError(f"cannot select {n} of {total} sensors")
    missing = panel.missing_mask.sum(axis=0)
    ids = panel.sensor_ids
    ranked = sorted(range(total), key=lambda j: (missing[j], ids[j]))
    keep = sorted(ranked[:n])
    return PanelSeries(
        panel.values[:, keep],
        panel.timestamps,
        [panel.sensors[j] for j in keep],
        panel.missing_mask[:, keep],
    )


def hour_of_day(timestamps):
    return (np.asarray(timestamps).astype("datetime64[h]").astype(np.int64) % 24).astype(int)


def impute_missing(panel: PanelSeries) -> PanelSeries:
    """Fill each missing cell with that sensor's mean at the same hour of day."""
    if not panel.missing_mask.any():
        return panel
    values = panel.values.copy()
    mask = panel.missing_mask
    hours = hour_of_day(panel.timestamps)
    for j, sensor in enumerate(panel.sensors):
        col_mask = mask[:, j]
        if not col_mask.any():
            continue
        for h in np.unique(hours[col_mask]):
            pool = (hours == h) & ~col_mask
            if not pool.any():
                raise ImputationError(sensor.sensor_id, int(h))
            values[(hours == h) & col_mask, j] = values[pool, j].mean()
    return PanelSeries(values, panel.timestamps, panel.sensors, np.zeros_like(mask))


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray
    target: np.ndarray
    anchor: int


class WindowSet(Sequence):
    """Sliding windows over a panel, stored as stacked arrays.

    ``inputs`` has shape (S, l_in, N) and ``targets`` (S, l_out, N); indexing
    yields ``WindowSample`` objects.
    """

    def __init__(self, inputs, targets, anchors):
        self.inputs = inputs
        self.targets = targets
        self.anchors = anchors

    def __len__(self):
        return self.anchors.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return WindowSet(self.inputs[idx], self.targets[idx], self.anchors[idx])
        return WindowSample(self.inputs[idx], self.targets[idx], int(self.anchors[idx]))

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return WindowSet(self.inputs[indices], self.targets[indices], self.anchors[indices])

    @property
    def l_in(self):
        return self.inputs.shape[1]

    @property
    def l_out(self):
        return self.targets.shape[1]


def window_count(t, l_in, l_out, step=1):
    return (t - l_in - l_out) // step + 1


def make_windows(panel, l_in: int, l_out: int, step: int = 1, respect_gaps=False) -> WindowSet:
    """Anchor windows at t = l_in-1, l_in-1+step, ... while t + l_out < T.

    Accepts a panel or a bare (T, N) array. With ``respect_gaps`` windows
    whose rows are not hourly-contiguous (a panel with removed weeks) are
    dropped; by default rows are treated as consecutive.
    """
    values = panel.values if isinstance(panel, PanelSeries) else np.asarray(panel, dtype=float)
    if l_in < 1 or l_out < 1 or step < 1:
        raise PedflowError("l_in, l_out and step must be >= 1")
    t = values.shape[0]
    if t < l_in + l_out:
        raise PedflowError(f"series of length {t} too short for l_in={l_in}, l_out={l_out}")
    anchors = np.arange(l_in - 1, t - l_out, step)
    in_idx = anchors[:, None] + np.arange(-l_in + 1, 1)[None, :]
    out_idx = anchors[:, None] + np.arange(1, l_out + 1)[None, :]
    if respect_gaps and isinstance(panel, PanelSeries):
        span = panel.timestamps[out_idx[:, -1]] - panel.timestamps[in_idx[:, 0]]
        ok = span == (l_in + l_out - 1) * HOUR
        anchors, in_idx, out_idx = anchors[ok], in_idx[ok], out_idx[ok]
    return WindowSet(values[in_idx], values[out_idx], anchors)


def _as_fraction(x):
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise PedflowError(f"split fractions must be positive, got {fracs}")
        if abs(sum(_as_fraction(f) for f in fracs) - 1) > Fraction(1, 10**9):
            raise PedflowError(f"split fractions must sum to 1, got {sum(fracs)}")

    def boundaries(self, t):
        first = math.floor(_as_fraction(self.train_frac) * t)
        second = math.floor((_as_fraction(self.train_frac) + _as_fraction(self.val_frac)) * t)
        return first, second


def chronological_split(panel: PanelSeries, spec: SplitSpec | None = None, l_in=None, l_out=None):
    """Split a panel into contiguous train / validation / test segments."""
    spec = spec or SplitSpec()
    t = len(panel)
    a, b = spec.boundaries(t)
    parts = (panel.slice_rows(0, a), panel.slice_rows(a, b), panel.slice_rows(b, t))
    for label, part in zip(("train", "validation", "test"), parts):
        if len(part) == 0:
            raise PedflowError(f"{label} segment is empty for T={t}")
        if l_in is not None and l_out is not None and len(part) < l_in + l_out:
            raise PedflowError(
                f"{label} segment has {len(part)} rows, fewer than l_in + l_out = {l_in + l_out}"
            )
    return parts


@dataclass(frozen=True)
class NormStats:
    """Per-sensor z-score statistics taken from the training segment."""

    mean: np.ndarray
    std: np.ndarray
    sensor_ids: tuple[str, ...] = field(default=())

    @classmethod
    def fit(cls, panel: PanelSeries):
        values = panel.values
        mean = np.nanmean(values, axis=0)
        std = np.nanstd(values, axis=0)
        for j, s in enumerate(std):
            if not s > 0:
                raise ZeroStdError(panel.sensor_ids[j])
        return cls(mean, std, tuple(panel.sensor_ids))

    def to_dict(self):
        return {
            "sensor_ids": list(self.sensor_ids),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["mean"], float), np.array(data["std"], float),
                   tuple(data["sensor_ids"]))

    def transform(self, x):
        return (np.asarray(x, float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, float) * self.std + self.mean


def normalize(panel: PanelSeries, stats: NormStats) -> PanelSeries:
    for sid, s in zip(stats.sensor_ids or panel.sensor_ids, stats.std):
        if not s > 0:
            raise ZeroStdError(sid)
    return panel.with_values(stats.transform(panel.values), panel.missing_mask)


def denormalize(panel: PanelSeries, stats: NormStats) -> PanelSeries:
    return panel.with_values(stats.inverse(panel.values), panel.missing_mask)


def _fmt_float(v):
    return "" if math.isnan(v) else repr(float(v))


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".sensors.json")


def save_panel(panel: PanelSeries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *panel.sensor_ids])
        for ts, row in zip(panel.timestamps, panel.values):
            writer.writerow([str(ts.astype("datetime64[m]")), *(_fmt_float(v) for v in row)])
    meta = {
        "format": PANEL_FORMAT,
        "sensors": [
            {"sensor_id": s.sensor_id, "latitude": s.latitude, "longitude": s.longitude,
             "name": s.name}
            for s in panel.sensors
        ],
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def load_panel(path) -> PanelSeries:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "timestamp":
            raise IngestError("panel CSV must start with a 'timestamp' column", line=1)
        stamps, rows = [], []
        for row in reader:
            try:
                stamps.append(np.datetime64(row[0], "h"))
                rows.append([float(v) if v != "" else np.nan for v in row[1:]])
            except ValueError as exc:
                raise IngestError(str(exc), line=reader.line_num) from None
    ids = header[1:]
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        if meta.get("format") != PANEL_FORMAT:
            raise IngestError(f"unsupported panel sidecar format {meta.get('format')!r}")
        by_id = {m["sensor_id"]: SensorMeta(**m) for m in meta["sensors"]}
        sensors = [by_id.get(sid, SensorMeta(sid)) for sid in ids]
    else:
        sensors = [SensorMeta(sid) for sid in ids]
    values = np.array(rows, dtype=float).reshape(len(rows), len(ids))
    return PanelSeries(values, np.array(stamps, dtype="datetime64[h]"), sensors)
