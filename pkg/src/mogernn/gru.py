"""Graph-GRU cell with encoder and decoder loops.

The dense input transforms of a GRU are replaced by graph aggregations over
``x_t || h_{t-1}``. With the default diffusion aggregator the aggregation
carries its own weights; the other aggregator kinds are followed by a dense
map to the hidden width.
"""

import numpy as np

from .aggregators import GraphOperators, aggregate
from .autodiff import Tensor, ShapeError, apply_activation, concat_lastdim, matmul
from .moge import diffusion_weights, glorot

__all__ = ["init_gru_params", "gru_cell_step", "encode", "decode"]

GATES = ("r", "u", "c")


def init_gru_params(rng, prefix, input_dim, hidden, kind="diffusion", diffusion_steps=2,
                    output_layer=False):
    width = input_dim + hidden
    params = {}
    for gate in GATES:
        p = f"{prefix}.{gate}"
        if kind == "diffusion":
            for k in range(diffusion_steps):
                params[f"{p}.w_out.{k}"] = glorot(rng, width, hidden)
                params[f"{p}.w_in.{k}"] = glorot(rng, width, hidden)
        else:
            params[f"{p}.w"] = glorot(rng, width, hidden)
        # reset/update gates start open so early steps keep their state
        params[f"{p}.b"] = Tensor(np.full(hidden, 0.0 if gate == "c" else 1.0), requires_grad=True)
    if output_layer:
        params[f"{prefix}.out_w"] = glorot(rng, hidden, 1)
        params[f"{prefix}.out_b"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def _gate_transform(z, ops, params, prefix, kind):
    if kind == "diffusion":
        w_out, w_in = diffusion_weights(params, prefix)
        return aggregate("diffusion", z, ops, w_out, w_in)
    return matmul(aggregate(kind, z, ops), params[f"{prefix}.w"])


def _joint_reset_update(z, ops, params, prefix, kind):
    # r and u read the same input, so the diffusion powers are shared
    if kind != "diffusion":
        r = _gate_transform(z, ops, params, f"{prefix}.r", kind)
        return r, _gate_transform(z, ops, params, f"{prefix}.u", kind)
    r_out, r_in = diffusion_weights(params, f"{prefix}.r")
    u_out, u_in = diffusion_weights(params, f"{prefix}.u")
    w_out = [concat_lastdim(a, b) for a, b in zip(r_out, u_out)]
    w_in = [concat_lastdim(a, b) for a, b in zip(r_in, u_in)]
    ru = aggregate("diffusion", z, ops, w_out, w_in)
    hidden = r_out[0].shape[-1]
    return ru[..., :hidden], ru[..., hidden:]


def gru_cell_step(x_t, h_prev, adj, params, prefix, kind="diffusion"):
    """One recurrent step; returns the new hidden state ``(..., N, H)``."""
    ops = adj if isinstance(adj, GraphOperators) else GraphOperators(adj)
    z = concat_lastdim(x_t, h_prev)
    r_pre, u_pre = _joint_reset_update(z, ops, params, prefix, kind)
    r = apply_activation(r_pre + params[f"{prefix}.r.b"], "sigmoid")
    u = apply_activation(u_pre + params[f"{prefix}.u.b"], "sigmoid")
    zc = concat_lastdim(x_t, r * h_prev)
    c = apply_activation(_gate_transform(zc, ops, params, f"{prefix}.c", kind) + params[f"{prefix}.c.b"], "tanh")
    return u * h_prev + (1.0 - u) * c


def _hidden_width(params, prefix):
    return params[f"{prefix}.r.b"].shape[0]


def encode(history, adj, params, prefix="enc", kind="diffusion"):
    """Fold the cell over the time axis of ``history`` ``(..., N, P, 1)`` from a zero state."""
    history = history if isinstance(history, Tensor) else Tensor(history)
    steps = history.shape[-2]
    if steps == 0:
        raise ValueError("history must contain at least one step")
    ops = adj if isinstance(adj, GraphOperators) else GraphOperators(adj)
    h = Tensor(np.zeros(history.shape[:-2] + (_hidden_width(params, prefix),)))
    for t in range(steps):
        h = gru_cell_step(history[..., t, :], h, ops, params, prefix, kind)
    return h


def decode(h, adj, horizon, params, prefix="dec", kind="diffusion", teacher=None,
           tf_rate=0.0, rng=None, teacher_node_mask=None):
    """Roll the decoder for ``horizon`` steps; returns ``(..., N, horizon, 1)``.

    The first input is zero. Afterwards, one Bernoulli draw per step decides
    whether every node is fed the teacher value or its own last prediction.
    ``teacher_node_mask`` (length ``N``) restricts teacher values to flagged
    nodes; the others always receive their own prediction.
    """
    ops = adj if isinstance(adj, GraphOperators) else GraphOperators(adj)
    lead = h.shape[:-1]
    if teacher is not None:
        teacher = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=float)
        if teacher.shape != lead + (horizon, 1):
            raise ShapeError(f"teacher shape {teacher.shape} != expected {lead + (horizon, 1)}")
    elif tf_rate > 0:
        raise ValueError("tf_rate > 0 requires a teacher sequence")
    if tf_rate > 0 and rng is None:
        raise ValueError("tf_rate > 0 requires an rng")
    x = Tensor(np.zeros(lead + (1,)))
    outputs = []
    for t in range(horizon):
        h = gru_cell_step(x, h, ops, params, prefix, kind)
        y = matmul(h, params[f"{prefix}.out_w"]) + params[f"{prefix}.out_b"]
        outputs.append(y)
        if t + 1 == horizon:
            break
        if teacher is not None and tf_rate > 0 and rng.random() < tf_rate:
            target = Tensor(teacher[..., t, :])
            if teacher_node_mask is None:
                x = target
            else:
                m = np.asarray(teacher_node_mask, dtype=float)[:, None]
                x = target * m + y * (1.0 - m)
        else:
            x = y
    return concat_lastdim(*outputs).reshape(*lead, horizon, 1)
