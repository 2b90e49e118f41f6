"""Synthetic panels with known structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .ingest import PanelSeries, SensorMeta

DEFAULT_START = np.datetime64("2019-04-01T00", "h")  # a Monday


def sensor_grid(n, seed=0, center=(-37.8136, 144.9631), spread_km=1.5):
    """``n`` sensors scattered around a city centre (coordinates in degrees)."""
    rng = np.random.default_rng(seed)
    dlat = rng.uniform(-1, 1, n) * spread_km / 111.2
    dlon = rng.uniform(-1, 1, n) * spread_km / (111.2 * np.cos(np.radians(center[0])))
    return [SensorMeta(f"s{i:02d}", float(center[0] + a), float(center[1] + b), f"sensor {i}")
            for i, (a, b) in enumerate(zip(dlat, dlon))]


def daily_profile(hours, phase=0.0):
    """Smooth day shape in roughly [0.2, 2]: quiet nights, busy daytime."""
    t = (np.asarray(hours) + phase) % 24
    return 0.2 + 1.8 * np.exp(-0.5 * ((t - 13.0) / 3.5) ** 2)


def diffusion_panel(adjacency, hours=2000, seed=0, base=200.0, shock=15.0, self_weight=0.2,
                    spread=0.7, start=DEFAULT_START, sensors=None):
    """Counts = daily pattern + a latent signal that diffuses along the graph.

    latent_{t+1} = self_weight * latent_t + spread * P latent_t + noise, where
    P is the row-normalised adjacency. The daily pattern lives in the counts;
    the latent part is only predictable from neighbouring sensors.
    """
    rng = np.random.default_rng(seed)
    w = np.asarray(adjacency, dtype=float)
    n = w.shape[0]
    deg = w.sum(axis=1, keepdims=True)
    p = np.where(deg > 0, w / np.where(deg > 0, deg, 1), 0)
    latent = np.zeros(n)
    levels = base * rng.uniform(0.5, 1.5, n)
    phases = rng.uniform(-1.5, 1.5, n)
    out = np.empty((hours, n))
    for t in range(hours):
        latent = self_weight * latent + spread * p @ latent + rng.normal(size=n)
        out[t] = levels * daily_profile(t, phases) + shock * latent
    out = np.maximum(out, 1.0)
    if sensors is None:
        sensors = [SensorMeta(f"s{i:02d}") for i in range(n)]
    stamps = start + np.arange(hours) * np.timedelta64(1, "h")
    return PanelSeries(out, stamps, sensors)


def periodic_weeks(n_weeks, n_sensors=3, seed=0, noise=0.05, start=DEFAULT_START):
    """Weeks sharing a daily/weekly pattern plus small noise."""
    rng = np.random.default_rng(seed)
    hours = np.arange(n_weeks * 168)
    weekend = ((hours // 24) % 7) >= 5
    phases = rng.uniform(-1, 1, n_sensors)
    levels = rng.uniform(50, 200, n_sensors)
    shape = np.stack([daily_profile(hours, ph) for ph in phases], axis=1)
    shape[weekend] *= 0.6
    values = levels * shape * (1 + noise * rng.normal(size=shape.shape))
    stamps = start + hours * np.timedelta64(1, "h")
    return PanelSeries(np.maximum(values, 0.0), stamps,
                       [SensorMeta(f"s{i:02d}") for i in range(n_sensors)])


def ring_adjacency(n, hops=1):
    w = np.zeros((n, n))
    for i in range(n):
        for h in range(1, hops + 1):
            w[i, (i + h) % n] = w[(i + h) % n, i] = 1.0
    return w


def var_process(coefs, hours, noise=0.1, seed=0, intercept=None, burn=200):
    """Simulate X_t = c + sum_l A_l X_{t-l} + noise."""
    coefs = np.asarray(coefs, dtype=float)
    p, n, _ = coefs.shape
    rng = np.random.default_rng(seed)
    c = np.zeros(n) if intercept is None else np.asarray(intercept, float)
    x = np.zeros((hours + burn + p, n))
    for t in range(p, x.shape[0]):
        x[t] = c + sum(coefs[l] @ x[t - 1 - l] for l in range(p)) + noise * rng.normal(size=n)
    return x[burn + p:]


def stable_var_coefs(n, order, seed=0, radius=0.8):
    """Random VAR coefficients whose companion matrix has spectral radius ``radius``."""
    rng = np.random.default_rng(seed)
    coefs = rng.normal(size=(order, n, n)) / np.sqrt(n * order)
    comp = np.zeros((n * order, n * order))
    comp[:n] = np.concatenate(list(coefs), axis=1)
    comp[n:, :-n] = np.eye(n * (order - 1))
    rho = np.abs(np.linalg.eigvals(comp)).max()
    scale = radius / rho
    # scaling lag l by scale**l scales every companion eigenvalue by ``scale``
    return np.stack([coefs[l] * scale ** (l + 1) for l in range(order)])
