"""Mixture of graph experts.

Each expert embeds the node histories, mixes them with one aggregator over the
masked adjacency and projects back to history length. A node-local gating
network keeps the top-k experts per node. The mixture only fills the slots of
unobserved nodes; observed entries pass through untouched.
"""

import numpy as np

from .aggregators import KINDS, GraphOperators, aggregate
from .autodiff import Tensor, apply_activation, keep_top_k, matmul, softmax_rows
from .graph import mask_adjacency

__all__ = [
    "init_moge_params",
    "expert_forward",
    "gate_scores",
    "gate_weights",
    "moge_forward",
]


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_moge_params(rng, history, hidden, experts=KINDS, diffusion_steps=2,
                     gate_hidden=None, gating="sparse"):
    """Parameters for the expert roster and gate; none depend on node count."""
    gate_hidden = gate_hidden or hidden
    params = {}
    for kind in experts:
        p = f"moge.{kind}"
        params[f"{p}.embed"] = glorot(rng, history, hidden)
        if kind == "diffusion":
            for k in range(diffusion_steps):
                params[f"{p}.w_out.{k}"] = glorot(rng, hidden, hidden)
                params[f"{p}.w_in.{k}"] = glorot(rng, hidden, hidden)
        params[f"{p}.out_w"] = glorot(rng, hidden, history)
        params[f"{p}.out_b"] = zeros(history)
    if gating == "sparse":
        params["moge.gate.w1"] = glorot(rng, history, gate_hidden)
        params["moge.gate.b1"] = zeros(gate_hidden)
        params["moge.gate.w2"] = glorot(rng, gate_hidden, len(experts))
        params["moge.gate.b2"] = zeros(len(experts))
    elif gating != "average":
        raise ValueError(f"gating must be 'sparse' or 'average', got {gating!r}")
    return params


def diffusion_weights(params, prefix):
    k = 0
    w_out, w_in = [], []
    while f"{prefix}.w_out.{k}" in params:
        w_out.append(params[f"{prefix}.w_out.{k}"])
        w_in.append(params[f"{prefix}.w_in.{k}"])
        k += 1
    return w_out, w_in


def expert_forward(X, adj_masked, kind, params, activation="relu"):
    """``Act(Linear(Agg(X W1, A')))`` for one expert."""
    p = f"moge.{kind}"
    z = matmul(X, params[f"{p}.embed"])
    w_out, w_in = diffusion_weights(params, p) if kind == "diffusion" else (None, None)
    z = aggregate(kind, z, adj_masked, w_out, w_in)
    return apply_activation(matmul(z, params[f"{p}.out_w"]) + params[f"{p}.out_b"], activation)


def gate_scores(X, params, activation="relu"):
    h = apply_activation(matmul(X, params["moge.gate.w1"]) + params["moge.gate.b1"], activation)
    return matmul(h, params["moge.gate.w2"]) + params["moge.gate.b2"]


def gate_weights(X, top_k, params, activation="relu"):
    """Per-node expert weights: exactly ``top_k`` nonzeros per row, summing to one."""
    scores = gate_scores(X, params, activation)
    return softmax_rows(keep_top_k(scores, top_k))


def moge_forward(X, observed, adjacency, params, experts=KINDS, top_k=2,
                 activation="relu", gating="sparse", transpose_diffusion=False,
                 return_details=False):
    """Fill unobserved node histories with the gated expert mixture.

    ``X`` has shape ``(..., N, P)``; ``observed`` is a length-``N`` flag vector.
    Unobserved rows are zeroed before anything reads them.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    observed = np.asarray(observed, dtype=bool)
    M = np.broadcast_to(observed[:, None], X.shape[-2:]).astype(float)
    X = X * M
    ops = GraphOperators(mask_adjacency(adjacency, observed), transpose_diffusion)
    outputs = [expert_forward(X, ops, kind, params, activation) for kind in experts]
    if gating == "sparse":
        weights = gate_weights(X, min(top_k, len(experts)), params, activation)
    else:
        weights = Tensor(np.full(X.shape[:-1] + (len(experts),), 1.0 / len(experts)))
    mix = None
    for e, xe in enumerate(outputs):
        term = weights[..., e:e + 1] * xe
        mix = term if mix is None else mix + term
    out = X * M + mix * (1.0 - M)
    if return_details:
        return out, {"experts": outputs, "weights": weights, "mixture": mix, "mask": M}
    return out
