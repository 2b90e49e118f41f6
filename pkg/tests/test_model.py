import numpy as np
import pytest

from pedflow import graph as gr
from pedflow import model as md
from pedflow.errors import FingerprintMismatch, PedflowError, ShapeError, StaleTapeError
from pedflow.model import (
    DCGRUCell,
    DcgruCellParams,
    DiffusionFilter,
    GRUCell,
    GruCellParams,
    ModelConfig,
    Seq2SeqModel,
)

from conftest import finite_difference, random_graph, seq2seq_gradcheck, tensor_rel_error


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def dense_diffusion(x, theta, bias, p_fwd, p_rev):
    """Loop oracle: out[:, q] = sum_p sum_k (t[q,p,k,0] Pf^k + t[q,p,k,1] Pr^k) x[:, p] + b[q]."""
    q_dim, p_dim, k_dim, _ = theta.shape
    out = np.zeros((x.shape[0], q_dim))
    for q in range(q_dim):
        for p in range(p_dim):
            for k in range(k_dim):
                fk = np.linalg.matrix_power(p_fwd, k)
                rk = np.linalg.matrix_power(p_rev, k)
                out[:, q] += (theta[q, p, k, 0] * fk + theta[q, p, k, 1] * rk) @ x[:, p]
        out[:, q] += bias[q]
    return out


def dense_gru(x, h, w_r, w_z, w_c, b_r, b_z, b_c):
    xh = np.concatenate([x, h])
    r = sig(w_r @ xh + b_r)
    z = sig(w_z @ xh + b_z)
    c = np.tanh(w_c @ np.concatenate([x, r * h]) + b_c)
    return z * h + (1 - z) * c


def dense_dcgru(x, h, thetas, biases, p_fwd, p_rev):
    xh = np.concatenate([x, h], axis=1)
    r = sig(dense_diffusion(xh, thetas[0], biases[0], p_fwd, p_rev))
    z = sig(dense_diffusion(xh, thetas[1], biases[1], p_fwd, p_rev))
    c = np.tanh(dense_diffusion(np.concatenate([x, r * h], axis=1), thetas[2], biases[2],
                                p_fwd, p_rev))
    return z * h + (1 - z) * c


def random_dcgru_params(rng, p, hid, k):
    return DcgruCellParams(*(DiffusionFilter(rng.normal(size=(hid, p + hid, k, 2)),
                                             rng.normal(size=hid)) for _ in range(3)))


# ---------------------------------------------------------- diffusion conv

def test_diffusion_identity_powers():
    g = gr.combine_adjacency(np.ones((3, 3)))
    x = np.array([[1.0], [2.0], [-3.0]])
    filt = DiffusionFilter(np.array([[[[0.3, 0.5]]]]), np.zeros(1))
    np.testing.assert_allclose(md.diffusion_convolution(x, filt, gr.transition_powers(g, 1)),
                               0.8 * x, rtol=0, atol=1e-15)
    zero = DiffusionFilter(np.zeros((2, 1, 2, 2)), np.zeros(2))
    assert not md.diffusion_convolution(x, zero, gr.transition_powers(g, 2)).any()


def test_diffusion_path_graph_oracle(rng):
    g = gr.combine_adjacency(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float))
    x = rng.normal(size=(3, 1))
    filt = DiffusionFilter(rng.normal(size=(2, 1, 2, 2)), rng.normal(size=2))
    got = md.diffusion_convolution(x, filt, gr.transition_powers(g, 2))
    want = dense_diffusion(x, filt.theta, filt.bias, g.p_fwd, g.p_rev)
    assert np.abs(got - want).max() <= 1e-12


def test_diffusion_batched_and_shape_errors(rng):
    g = random_graph(4, rng)
    filt = DiffusionFilter(rng.normal(size=(3, 2, 2, 2)), rng.normal(size=3))
    xb = rng.normal(size=(5, 4, 2))
    sup = gr.supports(g, 2)
    out = md.diffusion_convolution(xb, filt, sup)
    for b in range(5):
        np.testing.assert_allclose(out[b], md.diffusion_convolution(xb[b], filt, sup),
                                   rtol=0, atol=1e-14)
    with pytest.raises(ShapeError):
        md.diffusion_convolution(rng.normal(size=(4, 3)), filt, sup)
    with pytest.raises(ShapeError):
        md.diffusion_convolution(xb[0], filt, gr.supports(g, 3))


# ------------------------------------------------------------------- cells

def test_gru_zero_params():
    p = GruCellParams(*(np.zeros((3, 5)),) * 3, *(np.zeros(3),) * 3)
    h = np.array([1.0, -2.0, 4.0])
    np.testing.assert_array_equal(md.gru_cell_step(np.ones(2), h, p), 0.5 * h)


def test_gru_saturated_update_gate(rng):
    w = [rng.normal(size=(3, 5)) for _ in range(3)]
    h = rng.normal(size=3)
    p = GruCellParams(*w, np.zeros(3), np.full(3, 60.0), np.zeros(3))
    np.testing.assert_allclose(md.gru_cell_step(rng.normal(size=2), h, p), h, atol=1e-12)


def test_gru_dense_oracle(rng):
    for _ in range(5):
        w = [rng.normal(size=(4, 7)) for _ in range(3)]
        b = [rng.normal(size=4) for _ in range(3)]
        x, h = rng.normal(size=3), rng.normal(size=4)
        got = md.gru_cell_step(x, h, GruCellParams(*w, *b))
        np.testing.assert_allclose(got, dense_gru(x, h, *w, *b), rtol=0, atol=1e-12)


def test_dcgru_zero_params(rng):
    g = random_graph(4, rng)
    p = DcgruCellParams(*(DiffusionFilter(np.zeros((3, 4, 2, 2)), np.zeros(3)),) * 3)
    h = rng.normal(size=(4, 3))
    out = md.dcgru_cell_step(rng.normal(size=(4, 1)), h, p, gr.transition_powers(g, 2))
    np.testing.assert_array_equal(out, 0.5 * h)
    assert np.linalg.norm(out) == 0.5 * np.linalg.norm(h)


def test_dcgru_dense_oracle(rng):
    for _ in range(5):
        g = random_graph(4, rng)
        p = random_dcgru_params(rng, 2, 3, 2)
        x, h = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
        got = md.dcgru_cell_step(x, h, p, gr.transition_powers(g, 2))
        want = dense_dcgru(x, h, [p.theta_r.theta, p.theta_z.theta, p.theta_c.theta],
                           [p.b_r, p.b_u, p.b_c], g.p_fwd, g.p_rev)
        assert np.abs(got - want).max() <= 1e-12


@pytest.mark.parametrize("k", [1, 2, 3])
def test_dcgru_reduces_to_gru_on_one_node(rng, k):
    g = gr.combine_adjacency(np.ones((1, 1)))
    p = random_dcgru_params(rng, 2, 3, k)
    agg = [f.theta.sum(axis=(2, 3)) for f in (p.theta_r, p.theta_z, p.theta_c)]
    gp = GruCellParams(*agg, p.b_r, p.b_u, p.b_c)
    x, h = rng.normal(size=2), rng.normal(size=3)
    got = md.dcgru_cell_step(x[None], h[None], p, gr.transition_powers(g, k))[0]
    np.testing.assert_allclose(got, md.gru_cell_step(x, h, gp), rtol=0, atol=1e-12)


def test_gate_ranges(rng):
    g = random_graph(5, rng)
    cell = DCGRUCell(1, 4, 2, gr.supports(g, 2))
    params = {k: rng.normal(scale=0.5, size=s) for k, s in cell.param_shapes().items()}
    _, cache = cell.step(params, rng.normal(size=(2, 5, 1)), rng.normal(size=(2, 5, 4)))
    _, _, r, z, c, _, _ = cache
    assert np.all((r > 0) & (r < 1)) and np.all((z > 0) & (z < 1))
    assert np.all((c > -1) & (c < 1))


@pytest.mark.parametrize("kind", ["gru", "dcgru"])
def test_cell_gradients(rng, kind):
    for _ in range(3):
        n, p_dim, hid = 4, 2, 5
        if kind == "gru":
            cell = GRUCell(p_dim, hid)
        else:
            cell = DCGRUCell(p_dim, hid, 3, gr.supports(random_graph(n, rng), 3))
        params = {k: rng.normal(size=s) for k, s in cell.param_shapes().items()}
        x = rng.normal(size=(2, n, p_dim))
        h = rng.normal(size=(2, n, hid))
        g_out = rng.normal(size=(2, n, hid))

        def loss():
            return float((cell.step(params, x, h)[0] * g_out).sum())

        grads = {k: np.zeros_like(v) for k, v in params.items()}
        _, cache = cell.step(params, x, h)
        dx, dh = cell.step_backward(params, grads, cache, g_out)
        for name, value in params.items():
            assert tensor_rel_error(grads[name], finite_difference(loss, value)) <= 1e-6, name
        assert tensor_rel_error(dx, finite_difference(loss, x)) <= 1e-6
        assert tensor_rel_error(dh, finite_difference(loss, h)) <= 1e-6


# ----------------------------------------------------------------- seq2seq

@pytest.mark.parametrize("kind,eps", [("gru", 0.0), ("dcgru", 0.0), ("dcgru", 0.5), ("gru", 1.0)])
def test_seq2seq_gradients(rng, kind, eps):
    errs = seq2seq_gradcheck(kind, rng, n=3, hidden=4, l_in=3, l_out=3, eps=eps)
    assert max(errs.values()) <= 1e-6, errs


def test_zero_params_predict_zero(rng):
    m = Seq2SeqModel(ModelConfig("dcgru", 3, 4, 2, 2), random_graph(3, rng))
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    pred = m.predict(rng.normal(size=(2, 5, 3)), 4)
    assert pred.shape == (2, 4, 3) and not pred.any()
    ctx = md.encode(m, np.zeros((1, 3, 3)))
    assert all(not c.any() for c in ctx)


def test_encode_manual_unroll(rng):
    m = Seq2SeqModel(ModelConfig("gru", 3, 4, 2, seed=3))
    x = rng.normal(size=(2, 4, 3))
    ctx = md.encode(m, x)

    def params(prefix):
        q = m.cell_params(prefix)
        return GruCellParams(q["w_r"], q["w_z"], q["w_c"], q["b_r"], q["b_z"], q["b_c"])

    p0, p1 = params("encoder.0."), params("encoder.1.")
    for b in range(2):
        for node in range(3):
            h0, h1 = np.zeros(4), np.zeros(4)
            for t in range(4):
                h0 = md.gru_cell_step(x[b, t, node:node + 1], h0, p0)
                h1 = md.gru_cell_step(h0, h1, p1)
            np.testing.assert_allclose(ctx[0][b, node], h0, rtol=0, atol=1e-13)
            np.testing.assert_allclose(ctx[1][b, node], h1, rtol=0, atol=1e-13)


def test_encode_single_step_layer_count(rng):
    m = Seq2SeqModel(ModelConfig("dcgru", 3, 4, 1, 2, seed=1), random_graph(3, rng))
    x = rng.normal(size=(1, 1, 3))
    q = m.cell_params("encoder.0.")
    p = DcgruCellParams(DiffusionFilter(q["theta_r"], q["b_r"]),
                        DiffusionFilter(q["theta_z"], q["b_u"]),
                        DiffusionFilter(q["theta_c"], q["b_c"]))
    want = md.dcgru_cell_step(x[0, 0][:, None], np.zeros((3, 4)), p, m.sup)
    np.testing.assert_allclose(md.encode(m, x)[0][0], want, rtol=0, atol=1e-14)


def test_decode_teacher_forcing_and_inference(rng):
    m = Seq2SeqModel(ModelConfig("gru", 2, 4, 1, seed=2))
    ctx = md.encode(m, rng.normal(size=(1, 3, 2)))
    y = rng.normal(size=(1, 3, 2))
    auto = md.decode(m, ctx, 3)
    assert np.array_equal(auto, md.decode(m, ctx, 3, teacher=y + 100.0, eps=0.0))
    forced = md.decode(m, ctx, 3, teacher=y, eps=1.0)
    # with teacher forcing, step t sees y[t-1]; replay by hand
    p = m.cell_params("decoder.0.")
    gp = GruCellParams(p["w_r"], p["w_z"], p["w_c"], p["b_r"], p["b_z"], p["b_c"])
    h = ctx[0][0].copy()
    inp = np.zeros(2)
    for t in range(3):
        h = np.stack([md.gru_cell_step(inp[j:j + 1], h[j], gp) for j in range(2)])
        np.testing.assert_allclose(forced[0, t], h @ m.params["proj.w"] + m.params["proj.b"][0],
                                   rtol=0, atol=1e-13)
        inp = y[0, t]
    with pytest.raises(PedflowError):
        md.decode(m, ctx, 3, eps=0.5)


def test_decode_seeded_sampling_reproducible(rng):
    m = Seq2SeqModel(ModelConfig("gru", 2, 4, 1, seed=2))
    ctx = md.encode(m, rng.normal(size=(4, 3, 2)))
    y = rng.normal(size=(4, 5, 2))
    a = md.decode(m, ctx, 5, y, 0.5, np.random.default_rng(9))
    b = md.decode(m, ctx, 5, y, 0.5, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_backward_zero_gradient_and_stale_tape(rng):
    m = Seq2SeqModel(ModelConfig("dcgru", 3, 4, 2, 2), random_graph(3, rng))
    pred, tape = m.forward(rng.normal(size=(2, 3, 3)), 2)
    grads = m.backward(tape, np.zeros_like(pred))
    assert all(not g.any() for g in grads.values())
    with pytest.raises(StaleTapeError):
        m.backward(tape, np.zeros_like(pred))


def test_forward_backward_bitwise_deterministic(rng):
    x = rng.normal(size=(3, 4, 3))
    y = rng.normal(size=(3, 2, 3))
    g = random_graph(3, rng)
    outs = []
    for _ in range(2):
        m = Seq2SeqModel(ModelConfig("dcgru", 3, 4, 2, 2, seed=7), g)
        pred, tape = m.forward(x, 2, y, 0.5, np.random.default_rng(1))
        grads = m.backward(tape, pred - y)
        outs.append(pred.tobytes() + b"".join(grads[k].tobytes() for k in sorted(grads)))
    assert outs[0] == outs[1]


def test_shape_errors(rng):
    m = Seq2SeqModel(ModelConfig("gru", 3, 4, 1))
    with pytest.raises(ShapeError):
        m.predict(rng.normal(size=(2, 3, 4)), 2)
    with pytest.raises(ShapeError):
        Seq2SeqModel(ModelConfig("dcgru", 3, 4, 1), random_graph(4, rng))


def test_checkpoint_round_trip(tmp_path, rng):
    g = random_graph(3, rng)
    m = Seq2SeqModel(ModelConfig("dcgru", 3, 4, 2, 2, seed=5), g)
    m.save(tmp_path / "c.json", norm={"mean": [1.0]})
    back, doc = md.load_checkpoint(tmp_path / "c.json", g)
    for k, v in m.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    assert doc["format"] == md.CHECKPOINT_FORMAT and doc["norm"] == {"mean": [1.0]}
    with pytest.raises(FingerprintMismatch):
        md.load_checkpoint(tmp_path / "c.json", random_graph(3, rng))
    with pytest.raises(FingerprintMismatch):
        md.load_checkpoint(tmp_path / "c.json", None)
    m.save(tmp_path / "d.json", norm={"mean": [1.0]})
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()
