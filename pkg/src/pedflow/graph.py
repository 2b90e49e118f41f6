"""Sensor graph: thresholded Gaussian kernel adjacencies and diffusion transitions.

Matrix CSV formats (``save_matrix`` / ``load_matrix``):

* dense: header ``node,<id_1>,...,<id_N>``, then one row per node
  ``<id_i>,w_i1,...,w_iN``;
* triplet: header ``i,j,weight`` with one line per nonzero entry, 0-based
  node positions.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dtw import pairwise_dtw
from .errors import ConfigError, PedflowError

EARTH_RADIUS_KM = 6371.0
BETA_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)


@dataclass(frozen=True)
class GraphConfig:
    kappa: float = 0.1
    beta: float = 1.0
    normalize_distances: bool = True
    cost: str = "abs"

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if not self.beta >= 0:
            raise ConfigError("beta must be nonnegative")


def geo_distances(sensors) -> np.ndarray:
    """Great-circle (haversine) distances in km between sensor coordinates."""
    lat, lon = [], []
    for s in sensors:
        if not s.has_coordinates:
            raise PedflowError(f"sensor {s.sensor_id!r} has no coordinates")
        if not (-90 <= s.latitude <= 90 and -180 <= s.longitude <= 180):
            raise PedflowError(f"sensor {s.sensor_id!r} has invalid coordinates")
        lat.append(s.latitude)
        lon.append(s.longitude)
    return haversine_matrix(np.array(lat), np.array(lon))


def haversine_matrix(lat_deg, lon_deg):
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


def _off_diagonal(d):
    n = d.shape[0]
    return d[np.triu_indices(n, k=1)]


def gaussian_kernel_adjacency(distances, kappa=0.1, normalize=True) -> np.ndarray:
    """exp(-d^2 / sigma^2) where d <= kappa, else 0.

    ``normalize`` first divides distances by their largest off-diagonal value.
    sigma is the sample standard deviation of the upper-triangle distances
    (after normalization).
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise PedflowError(f"distance matrix must be square, got {d.shape}")
    if np.any(d < 0) or not np.allclose(d, d.T):
        raise PedflowError("distances must be nonnegative and symmetric")
    n = d.shape[0]
    if n == 1:
        return np.ones((1, 1))
    off = _off_diagonal(d)
    if not np.any(off > 0):
        raise PedflowError("all distances are zero; kernel width is undefined")
    if normalize:
        d = d / off.max()
        off = _off_diagonal(d)
    sigma = off.std(ddof=1) if off.size > 1 else float(off[0])
    if not sigma > 0:
        raise PedflowError("distance standard deviation is zero; kernel width is undefined")
    return np.where(d <= kappa, np.exp(-(d ** 2) / sigma ** 2), 0.0)


def ts_adjacency(medoid, config: GraphConfig | None = None) -> np.ndarray:
    """Kernel adjacency from DTW distances between the sensor columns of a typical week.

    Identical columns everywhere (all distances zero) give a dense matrix of ones.
    """
    config = config or GraphConfig()
    data = getattr(medoid, "data", None)
    data = np.asarray(medoid.values if data is None else data, dtype=float)
    d = pairwise_dtw(data, config.cost)
    if not np.any(d > 0):
        return np.ones_like(d)
    return gaussian_kernel_adjacency(d, config.kappa, config.normalize_distances)


def _row_normalize(w):
    deg = w.sum(axis=1)
    safe = np.where(deg > 0, deg, 1.0)
    return np.where(deg[:, None] > 0, w / safe[:, None], 0.0)


@dataclass(frozen=True)
class SensorGraph:
    w: np.ndarray
    w_geo: np.ndarray
    w_ts: np.ndarray
    beta: float
    p_fwd: np.ndarray
    p_rev: np.ndarray
    node_ids: tuple[str, ...] = ()

    @property
    def n(self):
        return self.w.shape[0]

    def fingerprint(self) -> str:
        """SHA-256 of the combined adjacency (shape plus float64 bytes)."""
        h = hashlib.sha256()
        h.update(repr(self.w.shape).encode())
        h.update(np.ascontiguousarray(self.w, dtype="<f8").tobytes())
        return h.hexdigest()


def transition_matrices(w):
    w = np.asarray(w, dtype=float)
    return _row_normalize(w), _row_normalize(w.T)


def combine_adjacency(w_geo, w_ts=None, beta=0.0, node_ids=()) -> SensorGraph:
    """W = W_geo + beta * W_ts with forward D_O^-1 W and reverse D_I^-1 W^T transitions.

    Rows with zero degree stay all-zero.
    """
    w_geo = np.asarray(w_geo, dtype=float)
    w_ts = np.zeros_like(w_geo) if w_ts is None else np.asarray(w_ts, dtype=float)
    if w_geo.ndim != 2 or w_geo.shape[0] != w_geo.shape[1] or w_geo.shape != w_ts.shape:
        raise PedflowError(f"adjacency shapes differ or are not square: {w_geo.shape}, {w_ts.shape}")
    if not beta >= 0:
        raise ConfigError(f"beta must be nonnegative, got {beta}")
    if np.any(w_geo < 0) or np.any(w_ts < 0):
        raise PedflowError("adjacency weights must be nonnegative")
    w = w_geo + beta * w_ts
    p_fwd, p_rev = transition_matrices(w)
    return SensorGraph(w, w_geo, w_ts, float(beta), p_fwd, p_rev, tuple(node_ids))


def identity_graph(n, node_ids=()) -> SensorGraph:
    """Graph where each node only sees itself."""
    return combine_adjacency(np.eye(n), None, 0.0, node_ids)


def transition_powers(graph, k_max: int):
    """Powers 0..k_max-1 of the forward and reverse transition matrices."""
    if k_max < 1:
        raise PedflowError("k_max must be >= 1")
    p_fwd, p_rev = (graph.p_fwd, graph.p_rev) if isinstance(graph, SensorGraph) else graph
    out = []
    for p in (p_fwd, p_rev):
        powers = [np.eye(p.shape[0])]
        for _ in range(1, k_max):
            powers.append(powers[-1] @ p)
        out.append(powers)
    return out[0], out[1]


def supports(graph, k_max: int) -> np.ndarray:
    """Stack of diffusion operators ordered (k, direction): shape (2K, N, N)."""
    fwd, rev = transition_powers(graph, k_max)
    return np.stack([m for pair in zip(fwd, rev) for m in pair])


def build_graph(sensors, medoid=None, config: GraphConfig | None = None) -> SensorGraph:
    """Geographic kernel plus, when a medoid week is given, beta times the DTW kernel."""
    config = config or GraphConfig()
    w_geo = gaussian_kernel_adjacency(geo_distances(sensors), config.kappa,
                                      config.normalize_distances)
    ids = tuple(s.sensor_id for s in sensors)
    if medoid is None or config.beta == 0:
        return combine_adjacency(w_geo, None, 0.0, ids)
    return combine_adjacency(w_geo, ts_adjacency(medoid, config), config.beta, ids)


def save_matrix(matrix, path, node_ids=None, fmt="dense"):
    m = np.asarray(matrix, dtype=float)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = list(node_ids) if node_ids else [str(i) for i in range(m.shape[0])]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fmt == "dense":
            writer.writerow(["node", *ids])
            for nid, row in zip(ids, m):
                writer.writerow([nid, *(repr(float(v)) for v in row)])
        elif fmt == "triplet":
            writer.writerow(["i", "j", "weight"])
            for i, j in zip(*np.nonzero(m)):
                writer.writerow([int(i), int(j), repr(float(m[i, j]))])
        else:
            raise PedflowError(f"unknown matrix format {fmt!r}")
    return path


def load_matrix(path, n=None):
    """Read a dense or triplet matrix CSV; returns ``(matrix, node_ids)``."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[0] == "node":
        ids = header[1:]
        return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), ids
    if header == ["i", "j", "weight"]:
        entries = [(int(i), int(j), float(w)) for i, j, w in rows[1:]]
        size = n if n is not None else 1 + max((max(i, j) for i, j, _ in entries), default=-1)
        m = np.zeros((size, size))
        for i, j, w in entries:
            m[i, j] = w
        return m, [str(i) for i in range(size)]
    raise PedflowError(f"unrecognised matrix CSV header {header}")


def save_graph(graph: SensorGraph, directory):
    """Write w, w_geo, w_ts, p_fwd, p_rev as dense CSVs, w as triplets, plus graph.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("w", "w_geo", "w_ts", "p_fwd", "p_rev"):
        save_matrix(getattr(graph, name), directory / f"{name}.csv", graph.node_ids)
    save_matrix(graph.w, directory / "w_triplet.csv", graph.node_ids, fmt="triplet")
    meta = {"format": "pedflow.graph/1", "beta": graph.beta, "node_ids": list(graph.node_ids),
            "fingerprint": graph.fingerprint()}
    (directory / "graph.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return directory


def load_graph(directory) -> SensorGraph:
    directory = Path(directory)
    meta = json.loads((directory / "graph.json").read_text(encoding="utf-8"))
    w_geo, ids = load_matrix(directory / "w_geo.csv")
    w_ts, _ = load_matrix(directory / "w_ts.csv")
    graph = combine_adjacency(w_geo, w_ts, meta["beta"], ids)
    if graph.fingerprint() != meta["fingerprint"]:
        w, _ = load_matrix(directory / "w.csv")
        p_fwd, p_rev = transition_matrices(w)
        graph = SensorGraph(w, w_geo, w_ts, meta["beta"], p_fwd, p_rev, tuple(ids))
    return graph
