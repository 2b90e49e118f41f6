"""Removal of abnormal weeks with k-medoids over DTW week distances.

Weeks are 168-hour blocks rescaled per sensor to [0, 1]. Two weeks are as
far apart as the sum over sensors of the DTW distance between their
columns. Weeks are clustered with k-medoids, k is chosen by silhouette, and
weeks lying unusually far from their medoid (Tukey's upper fence) are dropped.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dtw import columnwise_dtw
from .errors import PedflowError
from .ingest import HOUR, PanelSeries, hour_of_day

WEEK_HOURS = 168


@dataclass(frozen=True)
class WeekSlice:
    data: np.ndarray
    week_index: int
    start_row: int
    start: np.datetime64
    original_range: np.ndarray

    @property
    def n_sensors(self):
        return self.data.shape[1]


def rescale_columns(block):
    """Min-max rescale each column to [0, 1]; constant columns become zeros."""
    lo = block.min(axis=0)
    hi = block.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = (block - lo) / safe
    out[:, span == 0] = 0.0
    return out, np.stack([lo, hi], axis=1)


def week_start_row(panel: PanelSeries, weekday=None):
    """Row of the first midnight (optionally on ``weekday``, Monday=0) with a full week after it."""
    hours = hour_of_day(panel.timestamps)
    days = panel.timestamps.astype("datetime64[D]")
    # 1970-01-01 was a Thursday
    weekdays = (days.astype(np.int64) + 3) % 7
    ok = hours == 0
    if weekday is not None:
        ok &= weekdays == weekday
    rows = np.flatnonzero(ok)
    if rows.size == 0 or len(panel) - rows[0] < WEEK_HOURS:
        raise PedflowError("panel does not contain one full aligned week")
    return int(rows[0])


def slice_weeks(panel: PanelSeries, weekday=None, align=True) -> list[WeekSlice]:
    """Cut the panel into consecutive 168-hour weeks, each rescaled per sensor.

    With ``align`` weeks start at the first midnight (on ``weekday`` if given);
    otherwise at row 0. Partial leading and trailing weeks are dropped, as are
    blocks that straddle a gap in the timestamps.
    """
    if len(panel) < WEEK_HOURS:
        raise PedflowError(f"panel has {len(panel)} hours, fewer than one week")
    if panel.missing_mask.any():
        raise PedflowError("impute missing values before slicing weeks")
    start = week_start_row(panel, weekday) if align else 0
    out = []
    row = start
    while row + WEEK_HOURS <= len(panel):
        stamps = panel.timestamps[row:row + WEEK_HOURS]
        if stamps[-1] - stamps[0] == (WEEK_HOURS - 1) * HOUR:
            data, rng = rescale_columns(panel.values[row:row + WEEK_HOURS])
            out.append(WeekSlice(data, len(out), row, stamps[0], rng))
        row += WEEK_HOURS
    return out


def week_distance(a: WeekSlice, b: WeekSlice, cost="abs") -> float:
    """Sum over sensors of the DTW distance between matching columns."""
    da = a.data if isinstance(a, WeekSlice) else np.asarray(a, float)
    db = b.data if isinstance(b, WeekSlice) else np.asarray(b, float)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[1]:
        raise PedflowError(f"sensor count mismatch: {da.shape} vs {db.shape}")
    return float(columnwise_dtw(da, db, cost).sum())


def week_distance_matrix(weeks, cost="abs") -> np.ndarray:
    w = len(weeks)
    out = np.zeros((w, w))
    for i in range(w):
        for j in range(i + 1, w):
            out[i, j] = out[j, i] = week_distance(weeks[i], weeks[j], cost)
    return out


def check_distance_matrix(d):
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise PedflowError(f"distance matrix must be square, got {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise PedflowError("distance matrix must be finite and nonnegative")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(d).max()))):
        raise PedflowError("distance matrix must be symmetric")
    return d


@dataclass(frozen=True)
class Clustering:
    """Result of one k-medoids run.

    ``labels[j]`` indexes into ``medoids`` (sorted ascending); ``assignment[j]``
    is the medoid point itself.
    """

    medoids: tuple[int, ...]
    labels: np.ndarray
    total_cost: float
    n_iter: int = 0
    cost_history: tuple[float, ...] = field(default=())

    @property
    def k(self):
        return len(self.medoids)

    @property
    def assignment(self):
        return np.asarray(self.medoids)[self.labels]

    def members(self, label):
        return np.flatnonzero(self.labels == label)

    def partition_key(self):
        """Labels renumbered by first appearance; equal for equal partitions."""
        seen = {}
        return tuple(seen.setdefault(int(lab), len(seen)) for lab in self.labels)


def assign(d, medoids):
    """Nearest-medoid labels; ties go to the lowest medoid index, medoids keep themselves."""
    medoids = np.asarray(sorted(medoids))
    labels = np.argmin(d[:, medoids], axis=1)
    labels[medoids] = np.arange(medoids.size)
    cost = float(d[np.arange(d.shape[0]), medoids[labels]].sum())
    return labels, cost


def kmedoids(distances, k: int, max_iter: int = 100, seed=None, init=None) -> Clustering:
    """Alternate nearest-medoid assignment and exhaustive in-cluster medoid updates.

    Stops when the medoid set no longer changes or after ``max_iter`` updates.
    ``init`` overrides the random initial medoids.
    """
    d = check_distance_matrix(distances)
    w = d.shape[0]
    if not 1 <= k <= w:
        raise PedflowError(f"k={k} must lie in [1, {w}]")
    if max_iter < 1:
        raise PedflowError("max_iter must be >= 1")
    if init is None:
        rng = np.random.default_rng(seed)
        medoids = np.sort(rng.choice(w, size=k, replace=False))
    else:
        medoids = np.sort(np.asarray(init, dtype=int))
        if medoids.size != k or np.unique(medoids).size != k:
            raise PedflowError("init must hold k distinct indices")

    labels, cost = assign(d, medoids)
    history = [cost]
    it = 0
    while it < max_iter:
        it += 1
        new = medoids.copy()
        for lab in range(k):
            members = np.flatnonzero(labels == lab)
            within = d[np.ix_(members, members)].sum(axis=1)
            best = members[np.argmin(within)]
            # keep the current medoid on ties so the loop settles
            if within[members == medoids[lab]][0] <= within.min():
                best = medoids[lab]
            new[lab] = best
        new = np.sort(new)
        if np.array_equal(new, medoids):
            break
        medoids = new
        labels, cost = assign(d, medoids)
        history.append(cost)
    return Clustering(tuple(int(m) for m in medoids), labels, cost, it, tuple(history))


def silhouette_samples(distances, labels) -> np.ndarray:
    d = np.asarray(distances, dtype=float)
    _, labels = np.unique(np.asarray(labels), return_inverse=True)
    k = labels.max() + 1 if labels.size else 0
    w = labels.size
    if w > 1 and k < 2:
        raise PedflowError("silhouette needs at least two clusters")
    onehot = np.zeros((w, k))
    onehot[np.arange(w), labels] = 1.0
    sizes = onehot.sum(axis=0)
    sums = d @ onehot
    own_size = sizes[labels]
    a = sums[np.arange(w), labels] / np.maximum(own_size - 1, 1)
    mean_other = sums / sizes
    mean_other[np.arange(w), labels] = np.inf
    b = mean_other.min(axis=1)
    top = np.maximum(a, b)
    s = np.where(top > 0, (b - a) / np.where(top > 0, top, 1.0), 0.0)
    s[own_size == 1] = 0.0
    return s


def silhouette(distances, clustering) -> float:
    """Mean silhouette; singleton-cluster points score 0."""
    labels = clustering.labels if isinstance(clustering, Clustering) else clustering
    return float(silhouette_samples(distances, labels).mean())


@dataclass(frozen=True)
class KSelection:
    best_k: int
    clustering: Clustering
    best_scores: dict
    frequency: int
    runs: int


def select_k(distances, k_range, runs: int = 1000, seed: int = 0, max_iter: int = 100) -> KSelection:
    """Pick k by the best silhouette over seeded restarts; return the modal clustering.

    Equal silhouettes favour the smaller k. Restart ``r`` for ``k`` uses the
    seed ``(seed, k, r)``.
    """
    d = check_distance_matrix(distances)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise PedflowError("k_range is empty")
    if runs < 1:
        raise PedflowError("runs must be >= 1")
    w = d.shape[0]
    if ks[0] < 2 or ks[-1] > w:
        raise PedflowError(f"k_range must lie within [2, {w}]")
    best_scores = {}
    results = {}
    for k in ks:
        fits = [kmedoids(d, k, max_iter, seed=(seed, k, r)) for r in range(runs)]
        results[k] = fits
        best_scores[k] = max(silhouette(d, c) for c in fits)
    best_k = ks[0]
    for k in ks[1:]:
        if best_scores[k] > best_scores[best_k]:
            best_k = k
    fits = results[best_k]
    counts = Counter(c.partition_key() for c in fits)
    top = max(counts.values())
    modal = next(c for c in fits if counts[c.partition_key()] == top)
    return KSelection(best_k, modal, best_scores, top, runs)


@dataclass(frozen=True)
class TukeyConfig:
    q: float = 1.5
    quantile_convention: str = "linear"

    def __post_init__(self):
        if not self.q > 0:
            raise PedflowError("Tukey q must be positive")


def tukey_upper_fence(values, config: TukeyConfig | None = None) -> float:
    config = config or TukeyConfig()
    q1, q3 = np.percentile(np.asarray(values, float), [25, 75], method=config.quantile_convention)
    return float(q3 + config.q * (q3 - q1))


def tukey_filter(distances_to_center, config: TukeyConfig | None = None) -> set[int]:
    """Indices whose value exceeds Q3 + q * (Q3 - Q1). Only the upper tail is flagged."""
    values = np.asarray(distances_to_center, dtype=float)
    if values.size == 0:
        raise PedflowError("tukey_filter needs at least one value")
    fence = tukey_upper_fence(values, config)
    return {int(i) for i in np.flatnonzero(values > fence)}


@dataclass(frozen=True)
class AnomalyConfig:
    """Settings for ``remove_abnormal_weeks``.

    ``min_cluster_size``: clusters smaller than this do not count as centres;
    their weeks are measured against the nearest proper medoid instead (a
    lone outlier week is otherwise its own medoid at distance 0).
    ``per_cluster``: Tukey fences per cluster, or pooled over all weeks (default).
    """

    k_range: tuple[int, ...] = (2, 3, 4)
    runs: int = 1000
    seed: int = 0
    max_iter: int = 100
    tukey: TukeyConfig = field(default_factory=TukeyConfig)
    weekday: int | None = None
    cost: str = "abs"
    min_cluster_size: int = 2
    per_cluster: bool = False


@dataclass(frozen=True)
class RemovedWeek:
    week_index: int
    start: np.datetime64
    distance: float
    critical_value: float


@dataclass(frozen=True)
class AnomalyResult:
    panel: PanelSeries
    removed: list[RemovedWeek]
    medoids: list[WeekSlice]
    weeks: list[WeekSlice]
    selection: KSelection
    center_distance: np.ndarray
    center_label: np.ndarray

    @property
    def main_medoid(self) -> WeekSlice:
        """Medoid of the largest cluster, the typical week used for the DTW graph."""
        return self.medoids[0]


def distances_to_centres(d, clustering: Clustering, min_cluster_size=2):
    sizes = np.bincount(clustering.labels, minlength=clustering.k)
    proper = [lab for lab in range(clustering.k) if sizes[lab] >= min_cluster_size]
    if not proper:
        proper = list(range(clustering.k))
    medoids = np.asarray(clustering.medoids)
    label = clustering.labels.copy()
    for j in range(d.shape[0]):
        if label[j] not in proper:
            label[j] = min(proper, key=lambda lab: (d[j, medoids[lab]], lab))
    dist = d[np.arange(d.shape[0]), medoids[label]]
    return dist, label


def remove_abnormal_weeks(panel: PanelSeries, config: AnomalyConfig | None = None) -> AnomalyResult:
    config = config or AnomalyConfig()
    weeks = slice_weeks(panel, config.weekday)
    if len(weeks) < 3:
        raise PedflowError(f"need at least 3 full weeks for clustering, got {len(weeks)}")
    d = week_distance_matrix(weeks, config.cost)
    k_range = [k for k in config.k_range if k <= len(weeks)]
    selection = select_k(d, k_range, config.runs, config.seed, config.max_iter)
    clustering = selection.clustering
    dist, label = distances_to_centres(d, clustering, config.min_cluster_size)

    flagged = {}
    groups = [np.unique(label)] if not config.per_cluster else [[lab] for lab in np.unique(label)]
    for group in groups:
        idx = np.flatnonzero(np.isin(label, group))
        fence = tukey_upper_fence(dist[idx], config.tukey)
        for j in idx[dist[idx] > fence]:
            flagged[int(j)] = fence

    removed = [
        RemovedWeek(weeks[j].week_index, weeks[j].start, float(dist[j]), flagged[j])
        for j in sorted(flagged)
    ]
    drop = np.zeros(len(panel), dtype=bool)
    for j in flagged:
        drop[weeks[j].start_row:weeks[j].start_row + WEEK_HOURS] = True
    cleaned = panel if not drop.any() else panel.take_rows(np.flatnonzero(~drop))

    sizes = np.bincount(clustering.labels, minlength=clustering.k)
    order = sorted(range(clustering.k), key=lambda lab: (-sizes[lab], clustering.medoids[lab]))
    medoids = [weeks[clustering.medoids[lab]] for lab in order]
    return AnomalyResult(cleaned, removed, medoids, weeks, selection, dist, label)


def write_removal_report(result: AnomalyResult, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["week_index", "start", "distance_to_medoid", "critical_value"])
        for r in result.removed:
            writer.writerow([r.week_index, str(r.start.astype("datetime64[m]")),
                             repr(r.distance), repr(r.critical_value)])
    return path


def medoid_panel(panel: PanelSeries, week: WeekSlice) -> PanelSeries:
    """The medoid week as a panel of rescaled values with the source timestamps."""
    stamps = panel.timestamps[week.start_row:week.start_row + WEEK_HOURS]
    return PanelSeries(week.data, stamps, panel.sensors)
