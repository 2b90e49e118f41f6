import itertools

import numpy as np
import pytest

from pedflow.ingest import PanelSeries, SensorMeta

START = np.datetime64("2019-04-01T00", "h")  # Monday


def make_panel(values, start=START, ids=None, mask=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    ids = ids or [f"s{j}" for j in range(values.shape[1])]
    stamps = start + np.arange(values.shape[0]) * np.timedelta64(1, "h")
    return PanelSeries(values, stamps, [SensorMeta(i) for i in ids], mask)


def warping_paths(n, m):
    """Every warping path from (0, 0) to (n-1, m-1) with steps (1,0), (0,1), (1,1)."""
    out = []

    def walk(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            out.append(list(path))
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                path.append((i + di, j + dj))
                walk(path)
                path.pop()

    walk([(0, 0)])
    return out


def brute_dtw(x, y, cost=lambda a, b: abs(a - b)):
    return min(sum(cost(x[i], y[j]) for i, j in p) for p in warping_paths(len(x), len(y)))


def brute_kmedoids_cost(d, k):
    """Minimum total cost over every medoid subset of size k."""
    n = d.shape[0]
    return min(d[:, list(c)].min(axis=1).sum() for c in itertools.combinations(range(n), k))


def finite_difference(f, x, h=1e-5):
    """Central differences of scalar f with respect to every entry of array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def tensor_rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_graph(n, rng, density=0.6):
    """Directed nonnegative adjacency with a guaranteed self-loop per node."""
    from pedflow.graph import combine_adjacency

    w = rng.uniform(0.1, 1.0, (n, n)) * (rng.random((n, n)) < density)
    np.fill_diagonal(w, 1.0)
    return combine_adjacency(w)


def seq2seq_gradcheck(kind, rng, n=4, hidden=8, k_max=2, layers=2, l_in=3, l_out=2, batch=2,
                      eps=0.0, h=1e-5):
    """Largest per-tensor relative error between backprop and central differences."""
    from pedflow.model import ModelConfig, Seq2SeqModel

    graph = random_graph(n, rng) if kind == "dcgru" else None
    cfg = ModelConfig(kind, n, hidden, layers, k_max, seed=int(rng.integers(1 << 30)))
    model = Seq2SeqModel(cfg, graph)
    for name in model.params:
        model.params[name] = rng.normal(scale=0.5, size=model.params[name].shape)
    x = rng.normal(size=(batch, l_in, n))
    y = rng.normal(size=(batch, l_out, n))
    weight = rng.normal(size=(batch, l_out, n))
    seed = int(rng.integers(1 << 30))

    def loss():
        pred, _ = model.forward(x, l_out, y, eps, np.random.default_rng(seed))
        return float((weight * pred).sum() + 0.5 * (pred ** 2).sum())

    pred, tape = model.forward(x, l_out, y, eps, np.random.default_rng(seed))
    grads = model.backward(tape, weight + pred)
    worst = {}
    for name, value in model.params.items():
        fd = finite_difference(loss, value, h)
        worst[name] = tensor_rel_error(grads[name], fd)
    return worst


# ------------------------------------------------------ acceptance reporting

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        detail = getattr(item, "acceptance_detail", "")
        _ACCEPTANCE[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
