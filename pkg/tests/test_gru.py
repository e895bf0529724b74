import numpy as np
import pytest

from mogernn.autodiff import ShapeError, Tensor, backward
from mogernn.gru import decode, encode, gru_cell_step, init_gru_params
from oracles import random_graph


def cell_params(seed=0, d=1, hidden=3, **kw):
    return init_gru_params(np.random.default_rng(seed), "enc", d, hidden, **kw)


def dec_params(seed=0, hidden=3, **kw):
    return init_gru_params(np.random.default_rng(seed), "dec", 1, hidden, output_layer=True, **kw)


def test_saturated_update_gate_keeps_state(rng):
    p = cell_params()
    adj = random_graph(rng, 4, 0.6)
    h = rng.uniform(-1, 1, size=(4, 3))
    x = rng.normal(size=(4, 1))
    p["enc.u.b"] = Tensor(np.full(3, 60.0))
    np.testing.assert_allclose(gru_cell_step(Tensor(x), Tensor(h), adj, p, "enc").data, h, atol=1e-12)


def test_closed_update_gate_takes_candidate(rng):
    p = cell_params()
    adj = random_graph(rng, 4, 0.6)
    h = rng.uniform(-1, 1, size=(4, 3))
    x = rng.normal(size=(4, 1))
    p["enc.u.b"] = Tensor(np.full(3, -60.0))
    out = gru_cell_step(Tensor(x), Tensor(h), adj, p, "enc").data
    r = _sigmoid(_gate(np.concatenate([x, h], axis=1), adj, p, "enc.r"))
    c = np.tanh(_gate(np.concatenate([x, r * h], axis=1), adj, p, "enc.c"))
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_zero_parameters_halve_the_state(rng):
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in cell_params().items()}
    h = rng.normal(size=(5, 3))
    out = gru_cell_step(Tensor(rng.normal(size=(5, 1))), Tensor(h), random_graph(rng, 5, 0.5), p, "enc").data
    np.testing.assert_allclose(out, 0.5 * h, atol=1e-15)


def _sigmoid(z):
    return 1 / (1 + np.exp(-z))


def _diffuse(z, adj, ws_out, ws_in):
    a = np.asarray(adj)
    dout, din = a.sum(1), a.sum(0)
    pf = np.divide(a, dout[:, None], out=np.zeros_like(a), where=dout[:, None] > 0)
    pb = np.divide(a.T, din[:, None], out=np.zeros_like(a), where=din[:, None] > 0)
    out = 0
    for k, (wo, wi) in enumerate(zip(ws_out, ws_in)):
        out = out + np.linalg.matrix_power(pf, k) @ z @ wo + np.linalg.matrix_power(pb, k) @ z @ wi
    return out


def _gate(z, adj, p, name):
    K = sum(1 for k in p if k.startswith(f"{name}.w_out."))
    return _diffuse(z, adj, [p[f"{name}.w_out.{k}"].data for k in range(K)],
                    [p[f"{name}.w_in.{k}"].data for k in range(K)]) + p[f"{name}.b"].data


def _cell_oracle(x, h, adj, p, pre):
    z = np.concatenate([x, h], axis=-1)
    r, u = _sigmoid(_gate(z, adj, p, f"{pre}.r")), _sigmoid(_gate(z, adj, p, f"{pre}.u"))
    c = np.tanh(_gate(np.concatenate([x, r * h], axis=-1), adj, p, f"{pre}.c"))
    return u * h + (1 - u) * c


def test_cell_matches_straight_line_oracle(rng):
    p = cell_params(d=2, hidden=4, diffusion_steps=3)
    adj = random_graph(rng, 5, 0.6)
    x, h = rng.normal(size=(5, 2)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(gru_cell_step(Tensor(x), Tensor(h), adj, p, "enc").data,
                               _cell_oracle(x, h, adj, p, "enc"), atol=1e-12)


def test_encode_single_step_and_fold(rng):
    p = cell_params()
    adj = random_graph(rng, 4, 0.5)
    hist = rng.normal(size=(4, 3, 1))
    h = np.zeros((4, 3))
    for t in range(3):
        h = _cell_oracle(hist[:, t], h, adj, p, "enc")
    np.testing.assert_allclose(encode(hist, adj, p).data, h, atol=1e-12)
    one = encode(hist[:, :1], adj, p).data
    np.testing.assert_allclose(one, _cell_oracle(hist[:, 0], np.zeros((4, 3)), adj, p, "enc"), atol=1e-12)
    assert encode(hist, adj, p).data.tobytes() == encode(hist, adj, p).data.tobytes()
    with pytest.raises(ValueError):
        encode(np.zeros((4, 0, 1)), adj, p)


def test_state_stays_bounded(rng):
    p = cell_params(hidden=4)
    adj = random_graph(rng, 5, 0.6)
    h = rng.uniform(-3, 3, size=(5, 4))
    for _ in range(5):
        new = gru_cell_step(Tensor(rng.normal(scale=5, size=(5, 1))), Tensor(h), adj, p, "enc").data
        assert np.all(np.abs(new) <= np.maximum(np.abs(h), 1.0) + 1e-12)
        h = new


def test_decode_shapes_and_autoregression(rng):
    p = dec_params()
    adj = random_graph(rng, 6, 0.5)
    h = Tensor(rng.normal(size=(2, 6, 3)))
    out = decode(h, adj, 5, p)
    assert out.shape == (2, 6, 5, 1)
    teacher = rng.normal(size=(2, 6, 5, 1))
    np.testing.assert_array_equal(decode(h, adj, 5, p, teacher=teacher, tf_rate=0.0).data, out.data)


def test_full_teacher_forcing_feeds_targets(rng):
    p = dec_params()
    adj = random_graph(rng, 4, 0.5)
    h = Tensor(rng.normal(size=(4, 3)))
    teacher = rng.normal(size=(4, 3, 1))
    out = decode(h, adj, 3, p, teacher=teacher, tf_rate=1.0, rng=np.random.default_rng(0)).data
    # manual roll: zero token first, then the teacher values
    state, xs, ys = h.data, [np.zeros((4, 1)), teacher[:, 0], teacher[:, 1]], []
    for x in xs:
        state = _cell_oracle(x, state, adj, p, "dec")
        ys.append(state @ p["dec.out_w"].data + p["dec.out_b"].data)
    np.testing.assert_allclose(out[..., 0], np.concatenate(ys, axis=1), atol=1e-12)


def test_teacher_forcing_is_reproducible(rng):
    p = dec_params()
    adj = random_graph(rng, 4, 0.5)
    h = Tensor(rng.normal(size=(4, 3)))
    teacher = rng.normal(size=(4, 12, 1))
    runs = [decode(h, adj, 12, p, teacher=teacher, tf_rate=0.5, rng=np.random.default_rng(42)).data
            for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


def test_teacher_node_mask_limits_forcing(rng):
    p = dec_params()
    adj = np.zeros((3, 3))
    h = Tensor(rng.normal(size=(3, 3)))
    teacher = rng.normal(size=(3, 4, 1))
    free = decode(h, adj, 4, p).data
    forced = decode(h, adj, 4, p, teacher=teacher, tf_rate=1.0, rng=np.random.default_rng(0),
                    teacher_node_mask=np.array([True, False, True])).data
    # without edges nodes evolve independently, so node 1 must match the free run
    np.testing.assert_array_equal(forced[1], free[1])
    assert not np.allclose(forced[0], free[0])


def test_decode_errors(rng):
    p = dec_params()
    h = Tensor(rng.normal(size=(4, 3)))
    adj = np.zeros((4, 4))
    with pytest.raises(ShapeError):
        decode(h, adj, 3, p, teacher=np.zeros((4, 2, 1)), tf_rate=0.5, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        decode(h, adj, 3, p, tf_rate=0.5, rng=np.random.default_rng(0))


def test_every_gate_receives_gradient(rng):
    p = cell_params(hidden=3)
    for t in p.values():
        t.requires_grad = True
    adj = random_graph(rng, 4, 0.7)
    h = encode(rng.normal(size=(2, 4, 3, 1)), adj, p)
    backward(h.square().sum())
    for gate in ("r", "u", "c"):
        norm = sum(np.linalg.norm(t.grad) for k, t in p.items() if k.startswith(f"enc.{gate}."))
        assert norm > 0, gate


@pytest.mark.parametrize("kind", ["weighted_mean", "mean", "max_pool", "min_pool"])
def test_non_diffusion_gru_aggregators(kind, rng):
    p = cell_params(kind=kind)
    assert "enc.r.w" in p
    adj = random_graph(rng, 4, 0.6)
    out = encode(rng.normal(size=(4, 3, 1)), adj, p, kind=kind)
    assert out.shape == (4, 3) and np.all(np.isfinite(out.data))


def test_output_shape_for_any_node_count(rng):
    p = {**cell_params(), **dec_params(seed=1)}
    for n in (1, 7, 30):
        adj = random_graph(rng, n, 0.3)
        h = encode(rng.normal(size=(n, 4, 1)), adj, p)
        assert decode(h, adj, 6, p).shape == (n, 6, 1)
