"""Recurrent forecasting networks with hand-derived reverse-mode gradients.

Signals are float64 arrays shaped (batch, nodes, features). A GRU cell mixes
features with a dense matrix and treats every node independently; a DCGRU
cell mixes them with a diffusion convolution over the sensor graph.

Both cells use the gate convention h_t = z * h_{t-1} + (1 - z) * c_t, so a
saturated update gate (z -> 1) keeps the previous state.

Checkpoints are JSON documents::

    {"format": "pedflow.checkpoint/1", "config": {...}, "graph_fingerprint": str|null,
     "norm": {...}|null, "params": {name: {"shape": [...], "data": [...]}}}

with floats written by ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import PedflowError, ShapeError, StaleTapeError
from .graph import SensorGraph, identity_graph, supports as graph_supports

CHECKPOINT_FORMAT = "pedflow.checkpoint/1"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_supports(powers):
    """Accept a (2K, N, N) stack or a ``(forward_powers, reverse_powers)`` pair."""
    if isinstance(powers, np.ndarray):
        return powers
    fwd, rev = powers
    if len(fwd) != len(rev):
        raise ShapeError("forward and reverse powers differ in length")
    return np.stack([m for pair in zip(fwd, rev) for m in pair])


def _theta_matrix(theta):
    """(Q, P, K, 2) -> (2K * P, Q) with rows ordered (support, feature)."""
    q, p, k, _ = theta.shape
    return theta.reshape(q, p, 2 * k).transpose(2, 1, 0).reshape(2 * k * p, q)


def _theta_from_matrix(mat, shape):
    q, p, k, _ = shape
    return mat.reshape(2 * k, p, q).transpose(2, 1, 0).reshape(shape)


def diffusion_features(x, sup):
    """Z[b, n, s, p] = sum_m sup[s, n, m] x[b, m, p], flattened to (B*N, S*P)."""
    b, n, p = x.shape
    s = sup.shape[0]
    xm = x.transpose(1, 0, 2).reshape(n, b * p)
    z = (sup.reshape(s * n, n) @ xm).reshape(s, n, b, p)
    return z.transpose(2, 1, 0, 3).reshape(b * n, s * p)


def diffusion_features_backward(dz, sup, shape):
    b, n, p = shape
    s = sup.shape[0]
    dzt = dz.reshape(b, n, s, p).transpose(2, 1, 0, 3).reshape(s * n, b * p)
    dxm = sup.reshape(s * n, n).T @ dzt
    return dxm.reshape(n, b, p).transpose(1, 0, 2)


@dataclass
class DiffusionFilter:
    theta: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.theta.ndim != 4 or self.theta.shape[3] != 2:
            raise ShapeError(f"theta must be (Q, P, K, 2), got {self.theta.shape}")
        if self.bias.shape != (self.theta.shape[0],):
            raise ShapeError(f"bias must have length {self.theta.shape[0]}")


def diffusion_convolution(x, filt: DiffusionFilter, powers) -> np.ndarray:
    """Apply a diffusion filter to an (N, P) or (B, N, P) signal; no activation.

    out[:, q] = sum_p sum_k (theta[q,p,k,0] Pf^k + theta[q,p,k,1] Pr^k) x[:, p] + bias[q]
    """
    sup = _as_supports(powers)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xb = x[None] if single else x
    q, p, k, _ = filt.theta.shape
    if xb.ndim != 3 or xb.shape[2] != p or xb.shape[1] != sup.shape[-1] or sup.shape[0] != 2 * k:
        raise ShapeError(
            f"signal {x.shape}, theta {filt.theta.shape} and supports {sup.shape} disagree"
        )
    b, n, _ = xb.shape
    out = (diffusion_features(xb, sup) @ _theta_matrix(filt.theta) + filt.bias).reshape(b, n, q)
    return out[0] if single else out


# --------------------------------------------------------------------- cells

class _GatedCell:
    """Shared gating algebra; subclasses supply the feature map and weights."""

    gate_weights = ("r", "z", "c")

    def __init__(self, input_dim, hidden):
        self.input_dim = input_dim
        self.hidden = hidden

    def features(self, inp):
        raise NotImplementedError

    def features_backward(self, dz, shape):
        raise NotImplementedError

    def apply(self, params, feats, gate):
        raise NotImplementedError

    def apply_backward(self, params, grads, feats, dout, gate):
        raise NotImplementedError

    def step(self, params, x, h):
        b, n, _ = h.shape
        xh = np.concatenate([x, h], axis=2)
        f_xh = self.features(xh)
        r = sigmoid(self.apply(params, f_xh, "r")).reshape(b, n, -1)
        z = sigmoid(self.apply(params, f_xh, "z")).reshape(b, n, -1)
        xrh = np.concatenate([x, r * h], axis=2)
        f_xrh = self.features(xrh)
        c = np.tanh(self.apply(params, f_xrh, "c")).reshape(b, n, -1)
        h_new = z * h + (1.0 - z) * c
        return h_new, (x.shape, h, r, z, c, f_xh, f_xrh)

    def step_backward(self, params, grads, cache, dh_new):
        x_shape, h, r, z, c, f_xh, f_xrh = cache
        b, n, hid = h.shape
        p = x_shape[2]
        dz = dh_new * (h - c)
        dc = dh_new * (1.0 - z)
        dh = dh_new * z
        dpre_c = (dc * (1.0 - c * c)).reshape(b * n, hid)
        dxrh = self.features_backward(
            self.apply_backward(params, grads, f_xrh, dpre_c, "c"), (b, n, p + hid))
        dx = dxrh[:, :, :p].copy()
        drh = dxrh[:, :, p:]
        dr = drh * h
        dh += drh * r
        dpre_r = (dr * r * (1.0 - r)).reshape(b * n, hid)
        dpre_z = (dz * z * (1.0 - z)).reshape(b * n, hid)
        dfeat = self.apply_backward(params, grads, f_xh, dpre_r, "r")
        dfeat += self.apply_backward(params, grads, f_xh, dpre_z, "z")
        dxh = self.features_backward(dfeat, (b, n, p + hid))
        dx += dxh[:, :, :p]
        dh += dxh[:, :, p:]
        return dx, dh


class GRUCell(_GatedCell):
    """Dense GRU applied to each node separately with shared weights.

    Parameters: ``w_r, w_z, w_c`` of shape (hidden, input + hidden) acting on
    the concatenation [x, h]; biases ``b_r, b_z, b_c``.
    """

    kind = "gru"
    bias_names = {"r": "b_r", "z": "b_z", "c": "b_c"}

    def param_shapes(self):
        f = self.input_dim + self.hidden
        shapes = {f"w_{g}": (self.hidden, f) for g in self.gate_weights}
        shapes.update({b: (self.hidden,) for b in self.bias_names.values()})
        return shapes

    def fan_in(self, name):
        return self.input_dim + self.hidden

    def features(self, inp):
        b, n, f = inp.shape
        return inp.reshape(b * n, f)

    def features_backward(self, dz, shape):
        return dz.reshape(shape)

    def apply(self, params, feats, gate):
        return feats @ params[f"w_{gate}"].T + params[self.bias_names[gate]]

    def apply_backward(self, params, grads, feats, dout, gate):
        grads[f"w_{gate}"] += dout.T @ feats
        grads[self.bias_names[gate]] += dout.sum(axis=0)
        return dout @ params[f"w_{gate}"]


class DCGRUCell(_GatedCell):
    """GRU whose linear maps are diffusion convolutions over [x, h].

    Parameters: ``theta_r, theta_z, theta_c`` of shape (hidden, input + hidden,
    K, 2); biases ``b_r, b_u, b_c`` (``b_u`` belongs to the update gate).
    """

    kind = "dcgru"
    bias_names = {"r": "b_r", "z": "b_u", "c": "b_c"}

    def __init__(self, input_dim, hidden, k_max, sup=None):
        super().__init__(input_dim, hidden)
        self.k_max = k_max
        self.sup = sup

    def param_shapes(self):
        f = self.input_dim + self.hidden
        shapes = {f"theta_{g}": (self.hidden, f, self.k_max, 2) for g in self.gate_weights}
        shapes.update({b: (self.hidden,) for b in self.bias_names.values()})
        return shapes

    def fan_in(self, name):
        return (self.input_dim + self.hidden) * self.k_max * 2

    def features(self, inp):
        return diffusion_features(inp, self.sup)

    def features_backward(self, dz, shape):
        return diffusion_features_backward(dz, self.sup, shape)

    def apply(self, params, feats, gate):
        return feats @ _theta_matrix(params[f"theta_{gate}"]) + params[self.bias_names[gate]]

    def apply_backward(self, params, grads, feats, dout, gate):
        theta = params[f"theta_{gate}"]
        grads[f"theta_{gate}"] += _theta_from_matrix(feats.T @ dout, theta.shape)
        grads[self.bias_names[gate]] += dout.sum(axis=0)
        return dout @ _theta_matrix(theta).T


@dataclass
class GruCellParams:
    w_r: np.ndarray
    w_z: np.ndarray
    w_c: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    b_c: np.ndarray

    def as_dict(self):
        return {k: np.asarray(v, dtype=float) for k, v in asdict(self).items()}


@dataclass
class DcgruCellParams:
    theta_r: DiffusionFilter
    theta_z: DiffusionFilter
    theta_c: DiffusionFilter

    @property
    def hidden_size(self):
        return self.theta_r.theta.shape[0]

    @property
    def b_r(self):
        return self.theta_r.bias

    @property
    def b_u(self):
        return self.theta_z.bias

    @property
    def b_c(self):
        return self.theta_c.bias

    def as_dict(self):
        return {
            "theta_r": self.theta_r.theta, "theta_z": self.theta_z.theta,
            "theta_c": self.theta_c.theta, "b_r": self.b_r, "b_u": self.b_u, "b_c": self.b_c,
        }


def _check_cell_shapes(cell, params, x, h):
    for name, shape in cell.param_shapes().items():
        if params[name].shape != shape:
            raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")
    if x.shape[:2] != h.shape[:2] or x.shape[2] != cell.input_dim or h.shape[2] != cell.hidden:
        raise ShapeError(f"input {x.shape} and hidden {h.shape} do not fit the cell")


def gru_cell_step(x_t, h_prev, params: GruCellParams):
    """One GRU step on vectors (P,) / (H,) or batches (B, P) / (B, H)."""
    x = np.asarray(x_t, dtype=float)
    h = np.asarray(h_prev, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)[:, None, :]
    hb = np.atleast_2d(h)[:, None, :]
    p = params.as_dict()
    hidden, width = p["w_r"].shape
    cell = GRUCell(width - hidden, hidden)
    _check_cell_shapes(cell, p, xb, hb)
    out, _ = cell.step(p, xb, hb)
    out = out[:, 0, :]
    return out[0] if single else out


def dcgru_cell_step(x_t, h_prev, params: DcgruCellParams, powers):
    """One DCGRU step on (N, P) / (N, H) signals or their batched versions."""
    sup = _as_supports(powers)
    x = np.asarray(x_t, dtype=float)
    h = np.asarray(h_prev, dtype=float)
    single = x.ndim == 2
    xb, hb = (x[None], h[None]) if single else (x, h)
    p = params.as_dict()
    hidden, width, k_max, _ = p["theta_r"].shape
    if sup.shape[0] != 2 * k_max or sup.shape[1] != xb.shape[1]:
        raise ShapeError(f"supports {sup.shape} do not match K={k_max} and N={xb.shape[1]}")
    cell = DCGRUCell(width - hidden, hidden, k_max, sup)
    _check_cell_shapes(cell, p, xb, hb)
    out, _ = cell.step(p, xb, hb)
    return out[0] if single else out


# ------------------------------------------------------------------- seq2seq

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "dcgru"
    n_nodes: int = 1
    hidden: int = 64
    layers: int = 2
    k_max: int = 2
    input_dim: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gru", "dcgru"):
            raise PedflowError(f"unknown cell kind {self.kind!r}")
        if self.layers < 1 or self.hidden < 1 or self.k_max < 1 or self.n_nodes < 1:
            raise PedflowError("layers, hidden, k_max and n_nodes must be >= 1")


class Tape:
    """Record of one forward pass, consumed by a single ``backward`` call."""

    def __init__(self, batch, steps_in, steps_out):
        self.batch = batch
        self.steps_in = steps_in
        self.steps_out = steps_out
        self.encoder = []
        self.decoder = []
        self.fed_back = []
        self.top_hidden = []
        self.used = False


class Seq2SeqModel:
    """Encoder-decoder of stacked GRU or DCGRU cells with a shared per-node readout.

    ``params`` maps names such as ``encoder.0.theta_r`` or ``proj.w`` to arrays.
    """

    def __init__(self, config: ModelConfig, graph: SensorGraph | None = None, params=None):
        self.config = config
        if config.kind == "dcgru":
            if graph is None:
                graph = identity_graph(config.n_nodes)
            if graph.n != config.n_nodes:
                raise ShapeError(f"graph has {graph.n} nodes, model expects {config.n_nodes}")
            self.sup = graph_supports(graph, config.k_max)
            self.graph_fingerprint = graph.fingerprint()
        else:
            self.sup = None
            self.graph_fingerprint = None
        self.encoder = [self._make_cell(layer) for layer in range(config.layers)]
        self.decoder = [self._make_cell(layer) for layer in range(config.layers)]
        self.params = self.init_params(config.seed) if params is None else dict(params)
        expected = self.param_shapes()
        if set(self.params) != set(expected):
            raise ShapeError("parameter names do not match the model layout")
        for name, shape in expected.items():
            self.params[name] = np.asarray(self.params[name], dtype=float)
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def _make_cell(self, layer):
        c = self.config
        width = c.input_dim if layer == 0 else c.hidden
        if c.kind == "gru":
            return GRUCell(width, c.hidden)
        return DCGRUCell(width, c.hidden, c.k_max, self.sup)

    def _cells(self):
        for prefix, stack in (("encoder", self.encoder), ("decoder", self.decoder)):
            for layer, cell in enumerate(stack):
                yield f"{prefix}.{layer}.", cell

    def param_shapes(self):
        shapes = {}
        for prefix, cell in self._cells():
            shapes.update({prefix + k: v for k, v in cell.param_shapes().items()})
        shapes["proj.w"] = (self.config.hidden,)
        shapes["proj.b"] = (1,)
        return shapes

    def init_params(self, seed):
        """Uniform in +-sqrt(1 / fan_in) for weights; zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for prefix, cell in self._cells():
            for name, shape in cell.param_shapes().items():
                if name.startswith("b_"):
                    params[prefix + name] = np.zeros(shape)
                else:
                    bound = np.sqrt(1.0 / cell.fan_in(name))
                    params[prefix + name] = rng.uniform(-bound, bound, size=shape)
        bound = np.sqrt(1.0 / self.config.hidden)
        params["proj.w"] = rng.uniform(-bound, bound, size=(self.config.hidden,))
        params["proj.b"] = np.zeros(1)
        return params

    def cell_params(self, prefix):
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _check_inputs(self, inputs):
        x = np.asarray(inputs, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[..., None]
        c = self.config
        if x.ndim != 4 or x.shape[2] != c.n_nodes or x.shape[3] != c.input_dim or x.shape[1] < 1:
            raise ShapeError(
                f"inputs must be (B, L, {c.n_nodes}[, {c.input_dim}]), got {np.shape(inputs)}"
            )
        return x

    def forward(self, inputs, steps_out, targets=None, eps=0.0, rng=None):
        """Encode ``inputs`` (B, L_in, N) then decode ``steps_out`` steps.

        Returns predictions (B, L_out, N) and the ``Tape``.
        """
        x = self._check_inputs(inputs)
        tape = Tape(x.shape[0], x.shape[1], steps_out)
        context = encode(self, x, tape)
        preds = decode(self, context, steps_out, targets, eps, rng, tape)
        return preds, tape

    def predict(self, inputs, steps_out):
        preds, _ = self.forward(inputs, steps_out)
        return preds

    def backward(self, tape, dpred):
        return backward(self, tape, dpred)

    # ---- persistence

    def to_dict(self, norm=None, extra=None):
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "graph_fingerprint": self.graph_fingerprint,
            "norm": norm,
            "params": {
                name: {"shape": list(arr.shape), "data": [repr(float(v)) for v in arr.ravel()]}
                for name, arr in sorted(self.params.items())
            },
        }
        if extra:
            doc["extra"] = extra
        return doc

    def save(self, path, norm=None, extra=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(norm, extra), indent=1) + "\n", encoding="utf-8")
        return path


def load_checkpoint(path, graph: SensorGraph | None = None):
    """Return ``(model, document)``; ``graph`` must match the stored fingerprint."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise PedflowError(f"unsupported checkpoint format {doc.get('format')!r}")
    config = ModelConfig(**doc["config"])
    params = {
        name: np.array([float(v) for v in entry["data"]], dtype=float).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    if config.kind == "dcgru":
        from .errors import FingerprintMismatch

        if graph is None:
            raise FingerprintMismatch("a DCGRU checkpoint needs its graph")
        if graph.fingerprint() != doc["graph_fingerprint"]:
            raise FingerprintMismatch(
                f"graph fingerprint {graph.fingerprint()[:12]} does not match checkpoint "
                f"{doc['graph_fingerprint'][:12]}"
            )
    return Seq2SeqModel(config, graph, params), doc


def encode(model: Seq2SeqModel, inputs, tape: Tape | None = None):
    """Run the encoder stack from zero state; returns the final hidden state per layer."""
    x = model._check_inputs(inputs)
    b, steps, n, _ = x.shape
    h = [np.zeros((b, n, model.config.hidden)) for _ in model.encoder]
    cell_params = [model.cell_params(f"encoder.{i}.") for i in range(len(model.encoder))]
    for t in range(steps):
        inp = x[:, t]
        caches = []
        for layer, cell in enumerate(model.encoder):
            h[layer], cache = cell.step(cell_params[layer], inp, h[layer])
            caches.append(cache)
            inp = h[layer]
        if tape is not None:
            tape.encoder.append(caches)
    return h


def decode(model: Seq2SeqModel, context, steps, teacher=None, eps=0.0, rng=None,
           tape: Tape | None = None):
    """Roll the decoder ``steps`` times from ``context``.

    The first input is a zero start token. Each later input is the true value
    ``teacher[:, t-1]`` with probability ``eps`` and the model's own previous
    output otherwise; one draw from ``rng`` per step decides for the whole batch.
    """
    if not 0.0 <= eps <= 1.0:
        raise PedflowError(f"eps must lie in [0, 1], got {eps}")
    if eps > 0 and teacher is None:
        raise PedflowError("eps > 0 requires teacher targets")
    h = [np.array(c, dtype=float) for c in context]
    b, n, _ = h[0].shape
    if teacher is not None:
        teacher = np.asarray(teacher, dtype=float)
        if teacher.ndim == 2:
            teacher = teacher[None]
        if teacher.shape != (b, steps, n):
            raise ShapeError(f"teacher must be ({b}, {steps}, {n}), got {teacher.shape}")
    if eps > 0 and rng is None:
        rng = np.random.default_rng()
    cell_params = [model.cell_params(f"decoder.{i}.") for i in range(len(model.decoder))]
    w, bias = model.params["proj.w"], model.params["proj.b"]
    preds = np.empty((b, steps, n))
    inp = np.zeros((b, n, model.config.input_dim))
    for t in range(steps):
        caches = []
        layer_in = inp
        for layer, cell in enumerate(model.decoder):
            h[layer], cache = cell.step(cell_params[layer], layer_in, h[layer])
            caches.append(cache)
            layer_in = h[layer]
        y = h[-1] @ w + bias[0]
        preds[:, t] = y
        fed_back = True
        if t + 1 < steps:
            if eps >= 1.0 or (eps > 0 and rng.random() < eps):
                fed_back = False
                inp = teacher[:, t, :, None]
            else:
                inp = y[:, :, None]
        if tape is not None:
            tape.decoder.append(caches)
            tape.top_hidden.append(h[-1])
            tape.fed_back.append(fed_back)
    return preds


def backward(model: Seq2SeqModel, tape: Tape, dpred):
    """Gradients of a scalar loss w.r.t. every parameter, given dloss/dpredictions."""
    if tape.used:
        raise StaleTapeError("tape already consumed by a backward pass")
    if not tape.decoder:
        raise StaleTapeError("tape holds no forward pass")
    tape.used = True
    dpred = np.asarray(dpred, dtype=float)
    b = tape.batch
    n = model.config.n_nodes
    if dpred.ndim == 2:
        dpred = dpred[None]
    if dpred.shape != (b, tape.steps_out, n):
        raise ShapeError(f"dpred must be ({b}, {tape.steps_out}, {n}), got {dpred.shape}")

    grads = model.zero_grads()
    w = model.params["proj.w"]
    hidden = model.config.hidden
    layers = model.config.layers
    dh = [np.zeros((b, n, hidden)) for _ in range(layers)]
    dec_params = [model.cell_params(f"decoder.{i}.") for i in range(layers)]
    dec_grads = [{k[len(f"decoder.{i}."):]: v for k, v in grads.items()
                  if k.startswith(f"decoder.{i}.")} for i in range(layers)]
    carry = np.zeros((b, n))
    for t in range(tape.steps_out - 1, -1, -1):
        dy = dpred[:, t] + carry
        h_top = tape.top_hidden[t]
        grads["proj.w"] += np.einsum("bnh,bn->h", h_top, dy)
        grads["proj.b"] += dy.sum()
        dh[-1] = dh[-1] + dy[:, :, None] * w
        caches = tape.decoder[t]
        for layer in range(layers - 1, -1, -1):
            dinp, dh[layer] = model.decoder[layer].step_backward(
                dec_params[layer], dec_grads[layer], caches[layer], dh[layer])
            if layer > 0:
                dh[layer - 1] = dh[layer - 1] + dinp
        carry = dinp[:, :, 0] if t > 0 and tape.fed_back[t - 1] else np.zeros((b, n))

    enc_params = [model.cell_params(f"encoder.{i}.") for i in range(layers)]
    enc_grads = [{k[len(f"encoder.{i}."):]: v for k, v in grads.items()
                  if k.startswith(f"encoder.{i}.")} for i in range(layers)]
    for t in range(tape.steps_in - 1, -1, -1):
        caches = tape.encoder[t]
        for layer in range(layers - 1, -1, -1):
            dinp, dh[layer] = model.encoder[layer].step_backward(
                enc_params[layer], enc_grads[layer], caches[layer], dh[layer])
            if layer > 0:
                dh[layer - 1] = dh[layer - 1] + dinp
    tape.encoder.clear()
    tape.decoder.clear()
    tape.top_hidden.clear()
    return grads
