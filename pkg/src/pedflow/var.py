"""Vector autoregression baseline fitted by per-equation least squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PedflowError


@dataclass(frozen=True)
class VarFit:
    """X_t = intercept + sum_l coefs[l-1] @ X_{t-l} + u_t."""

    coefs: np.ndarray
    intercept: np.ndarray
    sigma_u: np.ndarray
    stderr: np.ndarray
    nobs: int

    @property
    def order(self):
        return self.coefs.shape[0]

    @property
    def n_vars(self):
        return self.intercept.shape[0]

    def process_mean(self):
        n = self.n_vars
        a = np.eye(n) - self.coefs.sum(axis=0)
        return np.linalg.solve(a, self.intercept)


def _values(panel):
    return np.asarray(getattr(panel, "values", panel), dtype=float)


def lagged_design(x, order):
    """Rows [1, x_{t-1}, ..., x_{t-p}] for t = p..T-1 and the matching targets."""
    t, n = x.shape
    cols = [np.ones((t - order, 1))]
    for lag in range(1, order + 1):
        cols.append(x[order - lag:t - lag])
    return np.hstack(cols), x[order:]


def var_fit(panel, order: int) -> VarFit:
    x = _values(panel)
    if x.ndim != 2:
        raise PedflowError("VAR needs a (T, N) series")
    t, n = x.shape
    if order < 1:
        raise PedflowError("VAR order must be >= 1")
    if t <= n * order + 1:
        raise PedflowError(f"T={t} too short for VAR({order}) on {n} series")
    z, y = lagged_design(x, order)
    beta, _, rank, _ = np.linalg.lstsq(z, y, rcond=None)
    if rank < z.shape[1]:
        raise PedflowError(f"singular VAR({order}) design matrix (rank {rank} < {z.shape[1]})")
    resid = y - z @ beta
    dof = z.shape[0] - z.shape[1]
    sigma_u = resid.T @ resid / dof
    zz_inv = np.linalg.inv(z.T @ z)
    stderr_full = np.sqrt(np.outer(np.diag(zz_inv), np.diag(sigma_u)))
    coefs = beta[1:].reshape(order, n, n).transpose(0, 2, 1)
    stderr = stderr_full[1:].reshape(order, n, n).transpose(0, 2, 1)
    return VarFit(coefs, beta[0], sigma_u, stderr, z.shape[0])


def var_forecast(fit: VarFit, history, steps: int) -> np.ndarray:
    """Iterated forecasts for horizons 1..steps; history rows are oldest first."""
    hist = _values(history)
    if hist.ndim == 1:
        hist = hist[None]
    p = fit.order
    if hist.shape[0] < p:
        raise PedflowError(f"history has {hist.shape[0]} rows, VAR({p}) needs {p}")
    if hist.shape[1] != fit.n_vars:
        raise PedflowError(f"history has {hist.shape[1]} series, fit has {fit.n_vars}")
    window = list(hist[-p:])
    out = np.empty((steps, fit.n_vars))
    for h in range(steps):
        nxt = fit.intercept.copy()
        for lag in range(1, p + 1):
            nxt += fit.coefs[lag - 1] @ window[-lag]
        out[h] = nxt
        window.append(nxt)
    return out


def var_forecast_windows(fit: VarFit, inputs, steps: int) -> np.ndarray:
    """Vectorised forecasts for a batch of input windows (S, L_in, N) -> (S, steps, N)."""
    x = np.asarray(inputs, dtype=float)
    p = fit.order
    if x.shape[1] < p:
        raise PedflowError(f"windows of length {x.shape[1]} are shorter than VAR order {p}")
    hist = [x[:, -lag] for lag in range(p, 0, -1)]
    out = np.empty((x.shape[0], steps, x.shape[2]))
    for h in range(steps):
        nxt = np.broadcast_to(fit.intercept, out[:, h].shape).copy()
        for lag in range(1, p + 1):
            nxt += hist[-lag] @ fit.coefs[lag - 1].T
        out[:, h] = nxt
        hist.append(nxt)
    return out


def var_order_select(panel, candidates, folds: int = 5, min_train=None) -> int:
    """Rolling-origin cross-validation on one-step-ahead MAE; ties go to the smaller order.

    The series is cut into ``folds + 1`` blocks; fold f trains on blocks 0..f-1
    (or ``min_train`` rows at least) and validates on block f.
    """
    orders = sorted(set(int(c) for c in candidates))
    if not orders:
        raise PedflowError("no candidate orders")
    if len(orders) == 1:
        return orders[0]
    x = _values(panel)
    t = x.shape[0]
    edges = np.linspace(0, t, folds + 2).astype(int)
    scores = {}
    for p in orders:
        errs = []
        for f in range(1, folds + 1):
            start, stop = edges[f], edges[f + 1]
            if min_train is not None:
                start = max(start, min_train)
            if stop - start < 1:
                continue
            fit = var_fit(x[:start], p)
            z, y = lagged_design(x[start - p:stop], p)
            pred = z[:, 1:] @ np.concatenate(list(fit.coefs), axis=1).T + fit.intercept
            errs.append(np.abs(pred - y).mean())
        scores[p] = float(np.mean(errs))
    best = orders[0]
    for p in orders[1:]:
        if scores[p] < scores[best]:
            best = p
    return best
