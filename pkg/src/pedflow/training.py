"""Training loop, optimiser, scheduled sampling, metrics and grid search.

The training log is JSON lines, one record per mini-batch
(``{"kind": "batch", "epoch", "batch", "iteration", "loss", "eps"}``) and one
per epoch (``{"kind": "epoch", "epoch", "train_loss", "val_loss"}``). Wall-clock
times are only written when ``record_time`` is set, so reference runs give
byte-identical logs.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, PedflowError, ShapeError
from .graph import BETA_GRID
from .ingest import NormStats, WindowSet
from .model import ModelConfig, Seq2SeqModel
from .var import var_fit, var_forecast_windows, var_order_select

GRID = {
    "learning_rate": (0.001, 0.005, 0.01),
    "batch_size": (32, 64),
    "layers": (1, 2),
    "k_max": (1, 2, 3),
    "beta": BETA_GRID,
}
MODEL_KINDS = ("var", "gru", "dcgru", "dcgru-dtw")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "dcgru-dtw"
    learning_rate: float = 0.01
    batch_size: int = 64
    layers: int = 2
    k_max: int = 2
    beta: float = 1.0
    hidden: int = 64
    epochs: int = 50
    tau: float = 3000.0
    seed: int = 0
    l_in: int = 5
    l_out: int = 5
    var_orders: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.hidden < 1 or self.layers < 1 or self.k_max < 1:
            raise ConfigError("batch_size, hidden, layers and k_max must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.beta >= 0:
            raise ConfigError("beta must be nonnegative")

    def check_grid(self):
        """Raise if a grid-searched field lies outside its declared grid."""
        for name, allowed in GRID.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)} is outside the grid {allowed}")

    @property
    def effective_beta(self):
        return self.beta if self.model == "dcgru-dtw" else 0.0

    def model_config(self, n_nodes):
        kind = "gru" if self.model == "gru" else "dcgru"
        return ModelConfig(kind, n_nodes, self.hidden, self.layers, self.k_max, 1, self.seed)


# ----------------------------------------------------------------- loss & opt

def mae_loss(pred, target):
    """Mean absolute error and its (sub)gradient w.r.t. ``pred`` (0 at ties)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def sampling_probability(iteration, tau=3000.0):
    """Inverse-sigmoid decay tau / (tau + exp(i / tau))."""
    if not tau > 0:
        raise PedflowError("tau must be positive")
    expo = iteration / tau
    if expo > 700:
        return 0.0
    return tau / (tau + math.exp(expo))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names differ")
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {np.shape(p)}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


# -------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricsReport:
    """Per-horizon MAE, MAPE (percent) and RMSE plus the all-horizon aggregate."""

    mae: np.ndarray
    mape: np.ndarray
    rmse: np.ndarray
    counts: np.ndarray
    mape_excluded: np.ndarray
    overall: dict

    @property
    def horizons(self):
        return len(self.mae)

    def rows(self):
        for h in range(self.horizons):
            yield {"horizon": h + 1, "mae": float(self.mae[h]), "mape": float(self.mape[h]),
                   "rmse": float(self.rmse[h]), "count": int(self.counts[h]),
                   "mape_excluded": int(self.mape_excluded[h])}
        yield {"horizon": "all", **self.overall}

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, ["horizon", "mae", "mape", "rmse", "count",
                                         "mape_excluded"], lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
        return path

    def table(self):
        lines = [f"{'horizon':>8} {'MAE':>12} {'MAPE%':>10} {'RMSE':>12}"]
        for row in self.rows():
            lines.append(f"{str(row['horizon']):>8} {row['mae']:12.4f} {row['mape']:10.3f} "
                         f"{row['rmse']:12.4f}")
        return "\n".join(lines)


def _mape_parts(err, truth):
    nz = truth != 0
    return np.where(nz, np.abs(err) / np.where(nz, np.abs(truth), 1.0), 0.0).sum(), nz.sum()


def compute_metrics(pred, truth) -> MetricsReport:
    """Metrics over arrays shaped (samples, horizons, sensors) in count scale.

    Cells whose true value is zero are left out of MAPE and counted in
    ``mape_excluded``.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    err = pred - truth
    horizons = pred.shape[1]
    mae, mape, rmse, counts, excluded = (np.zeros(horizons) for _ in range(5))
    for h in range(horizons):
        e, tr = err[:, h], truth[:, h]
        mae[h] = np.abs(e).mean()
        rmse[h] = np.sqrt((e ** 2).mean())
        total, used = _mape_parts(e, tr)
        mape[h] = 100.0 * total / used if used else float("nan")
        counts[h] = e.size
        excluded[h] = e.size - used
    total, used = _mape_parts(err, truth)
    overall = {
        "mae": float(np.abs(err).mean()),
        "mape": float(100.0 * total / used) if used else float("nan"),
        "rmse": float(np.sqrt((err ** 2).mean())),
        "count": int(err.size),
        "mape_excluded": int(err.size - used),
    }
    return MetricsReport(mae, mape, rmse, counts.astype(int), excluded.astype(int), overall)


# -------------------------------------------------------------------- training

def predict_windows(model: Seq2SeqModel, inputs, steps, chunk=256):
    out = []
    for start in range(0, inputs.shape[0], chunk):
        out.append(model.predict(inputs[start:start + chunk], steps))
    return np.concatenate(out, axis=0) if out else np.empty((0, steps, inputs.shape[2]))


def validation_loss(model, windows: WindowSet):
    pred = predict_windows(model, windows.inputs, windows.l_out)
    return mae_loss(pred, windows.targets)[0]


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    best_val_loss: float
    val_losses: list
    train_losses: list
    log: list

    def log_lines(self):
        return [json.dumps(rec, sort_keys=True) for rec in self.log]

    def write_log(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in self.log_lines()), encoding="utf-8")
        return path


def train(model: Seq2SeqModel, train_windows: WindowSet, val_windows: WindowSet,
          config: TrainConfig, record_time=False, progress=None, sampling=None) -> TrainResult:
    """Mini-batch Adam with scheduled sampling; keeps the epoch with the lowest validation loss.

    Windows must already be normalised. ``model.params`` ends holding the best
    parameters. ``sampling(iteration)`` replaces the default teacher-forcing
    probability schedule.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise PedflowError("training and validation windows must be nonempty")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    log = []
    iteration = 0
    best = (math.inf, 0, dict(model.params))
    val_losses, train_losses = [], []
    n = len(train_windows)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = train_windows.inputs[idx], train_windows.targets[idx]
            eps = (sampling(iteration) if sampling is not None
                   else sampling_probability(iteration, config.tau))
            pred, tape = model.forward(x, y.shape[1], y, eps, rng)
            loss, dpred = mae_loss(pred, y)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            grads = model.backward(tape, dpred)
            model.params, state = adam_step(model.params, grads, state, config.learning_rate)
            log.append({"kind": "batch", "epoch": epoch, "batch": b, "iteration": iteration,
                        "loss": loss, "eps": eps})
            batch_losses.append(loss)
            iteration += 1
        val = validation_loss(model, val_windows)
        if not math.isfinite(val):
            raise DivergenceError(epoch, "validation", val)
        train_loss = float(np.mean(batch_losses))
        record = {"kind": "epoch", "epoch": epoch, "train_loss": train_loss, "val_loss": val}
        if record_time:
            record["wall_time"] = time.perf_counter() - t0
        log.append(record)
        val_losses.append(val)
        train_losses.append(train_loss)
        if val < best[0]:
            best = (val, epoch, dict(model.params))
        if progress is not None:
            progress(record)
    model.params = best[2]
    return TrainResult(best[2], best[1], best[0], val_losses, train_losses, log)


def evaluate(model: Seq2SeqModel, windows: WindowSet, norm: NormStats, graph=None) -> MetricsReport:
    """Autoregressive forecasts on raw-scale windows, scored in count scale."""
    if graph is not None and model.graph_fingerprint is not None:
        from .errors import FingerprintMismatch

        if graph.fingerprint() != model.graph_fingerprint:
            raise FingerprintMismatch("evaluation graph differs from the checkpoint graph")
    pred = predict_windows(model, norm.transform(windows.inputs), windows.l_out)
    return compute_metrics(norm.inverse(pred), windows.targets)


# ---------------------------------------------------------------- experiments

@dataclass
class Dataset:
    """Raw-scale windows for each split plus training-set normalisation."""

    train: WindowSet
    val: WindowSet
    test: WindowSet
    norm: NormStats
    train_values: np.ndarray

    def normalized(self, split):
        w = getattr(self, split)
        return WindowSet(self.norm.transform(w.inputs), self.norm.transform(w.targets), w.anchors)


def prepare_dataset(panel, split=None, l_in=5, l_out=5, respect_gaps=False) -> Dataset:
    from .ingest import SplitSpec, chronological_split, make_windows

    train_p, val_p, test_p = chronological_split(panel, split or SplitSpec(), l_in, l_out)
    norm = NormStats.fit(train_p)
    return Dataset(
        make_windows(train_p, l_in, l_out, respect_gaps=respect_gaps),
        make_windows(val_p, l_in, l_out, respect_gaps=respect_gaps),
        make_windows(test_p, l_in, l_out, respect_gaps=respect_gaps),
        norm,
        np.asarray(train_p.values),
    )


@dataclass
class RunOutcome:
    config: TrainConfig
    val_loss: float
    model: object
    result: object = None


def run_single(data: Dataset, config: TrainConfig, graph=None, record_time=False) -> RunOutcome:
    """Fit one configuration; VAR uses OLS on training counts, the rest ``train``."""
    if config.model == "var":
        orders = [p for p in config.var_orders if p <= config.l_in]
        order = var_order_select(data.train_values, orders)
        fit = var_fit(data.train_values, order)
        pred = var_forecast_windows(fit, data.val.inputs, data.val.l_out)
        val = mae_loss(data.norm.transform(pred), data.norm.transform(data.val.targets))[0]
        return RunOutcome(config, val, fit)
    n_nodes = data.train.inputs.shape[2]
    if config.model == "gru":
        graph = None
    model = Seq2SeqModel(config.model_config(n_nodes), graph)
    result = train(model, data.normalized("train"), data.normalized("val"), config, record_time)
    return RunOutcome(config, result.best_val_loss, model, result)


def evaluate_outcome(outcome: RunOutcome, data: Dataset) -> MetricsReport:
    if outcome.config.model == "var":
        pred = var_forecast_windows(outcome.model, data.test.inputs, data.test.l_out)
        return compute_metrics(pred, data.test.targets)
    return evaluate(outcome.model, data.test, data.norm)


def expand_grid(base: TrainConfig, grid: dict):
    """Every combination of the grid values applied on top of ``base``."""
    names = sorted(grid)
    for values in itertools.product(*(grid[k] for k in names)):
        yield replace(base, **dict(zip(names, values)))


@dataclass
class GridRow:
    index: int
    repeat: int
    config: TrainConfig
    val_loss: float
    status: str
    selected: bool = False
    test: MetricsReport | None = None


@dataclass
class GridResult:
    rows: list
    best_index: int | None
    events: list

    def best_row(self):
        return next((r for r in self.rows if r.selected and r.index == self.best_index), None)

    def to_csv(self, path, horizons=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fields = ["index", "repeat", "model", "learning_rate", "batch_size", "layers", "k_max",
                  "beta", "hidden", "epochs", "seed", "status", "val_loss", "selected",
                  "best_overall"]
        sample = next((r.test for r in self.rows if r.test is not None), None)
        n_h = horizons or (sample.horizons if sample else 0)
        for h in range(1, n_h + 1):
            fields += [f"mae_{h}", f"mape_{h}", f"rmse_{h}"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fields, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                c = asdict(r.config)
                row = {k: c[k] for k in fields if k in c}
                row.update(index=r.index, repeat=r.repeat, status=r.status,
                           val_loss=repr(r.val_loss), selected=int(r.selected),
                           best_overall=int(r.selected and r.index == self.best_index))
                if r.test is not None:
                    for h in range(r.test.horizons):
                        row[f"mae_{h + 1}"] = repr(float(r.test.mae[h]))
                        row[f"mape_{h + 1}"] = repr(float(r.test.mape[h]))
                        row[f"rmse_{h + 1}"] = repr(float(r.test.rmse[h]))
                writer.writerow(row)
        return path


def grid_search(data: Dataset, base: TrainConfig, grid: dict, repeats: int = 3,
                graph_for=None) -> GridResult:
    """Train every grid cell ``repeats`` times and test the best repeat of each cell.

    ``graph_for(config)`` supplies the sensor graph for a configuration (the
    graph depends on beta). Failing runs are marked and skipped. Test metrics
    are computed only after all validation-based selections are fixed.
    """
    configs = list(expand_grid(base, grid))
    if not configs:
        raise PedflowError("empty grid")
    rows, events, chosen = [], [], []
    for i, cfg in enumerate(configs):
        best = None
        for rep in range(repeats):
            run_cfg = replace(cfg, seed=cfg.seed + rep)
            try:
                graph = graph_for(run_cfg) if graph_for is not None else None
                outcome = run_single(data, run_cfg, graph)
            except PedflowError as exc:
                rows.append(GridRow(i, rep, run_cfg, float("nan"), f"failed: {exc}"))
                events.append(("failed", i, rep))
                continue
            row = GridRow(i, rep, run_cfg, outcome.val_loss, "ok")
            rows.append(row)
            events.append(("trained", i, rep))
            if best is None or outcome.val_loss < best[0].val_loss:
                best = (row, outcome)
        if best is not None:
            best[0].selected = True
            chosen.append(best)
            events.append(("selected", i, best[0].repeat))
    best_index = None
    if chosen:
        best_index = min(chosen, key=lambda rc: (rc[0].val_loss, rc[0].index))[0].index
    events.append(("selection_done", best_index, None))
    for row, outcome in chosen:
        row.test = evaluate_outcome(outcome, data)
        events.append(("tested", row.index, row.repeat))
    return GridResult(rows, best_index, events)
