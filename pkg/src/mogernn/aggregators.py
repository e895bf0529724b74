"""Neighbour-message aggregators over a weighted adjacency.

Every aggregator maps node features ``X`` of shape ``(..., N, H)`` to new
features of the same leading shape. ``adj[i, j] > 0`` means node ``i`` sends
to node ``j``. Nodes without a positive in-weight aggregate to zero.
"""

import numpy as np

from .autodiff import Tensor, ShapeError, custom_op, matmul
from .graph import transition_matrices

__all__ = [
    "KINDS",
    "GraphOperators",
    "aggregate",
    "aggregate_weighted_mean",
    "aggregate_mean",
    "aggregate_max",
    "aggregate_min",
    "aggregate_diffusion",
]

KINDS = ("weighted_mean", "mean", "max_pool", "min_pool", "diffusion")


class GraphOperators:
    """Dense operators derived once from an adjacency and reused per step.

    ``transpose_diffusion`` switches the diffusion powers from ``P^k X`` to
    ``(P^k)^T X``.
    """

    def __init__(self, adjacency, transpose_diffusion=False):
        a = np.asarray(adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"adjacency must be square, got {a.shape}")
        self.adjacency = a
        self.n_nodes = a.shape[0]
        self.support = a > 0
        w = np.where(self.support, a, 0.0)
        col = w.sum(axis=0)
        # row j of these operators holds the in-neighbour weights of node j
        self.weighted_mean = np.divide(w, col, out=np.zeros_like(w), where=col > 0).T
        s = self.support.astype(float)
        cnt = s.sum(axis=0)
        self.mean = np.divide(s, cnt, out=np.zeros_like(s), where=cnt > 0).T
        self.has_in = cnt > 0
        fwd, bwd = transition_matrices(a)
        if transpose_diffusion:
            fwd, bwd = fwd.T.copy(), bwd.T.copy()
        self.forward = fwd
        self.backward = bwd
        self.transpose_diffusion = transpose_diffusion


def _ops(adj):
    return adj if isinstance(adj, GraphOperators) else GraphOperators(adj)


def _check_nodes(X, ops):
    if X.shape[-2] != ops.n_nodes:
        raise ShapeError(f"features have {X.shape[-2]} nodes, adjacency has {ops.n_nodes}")


def aggregate_weighted_mean(X, adj):
    ops = _ops(adj)
    _check_nodes(X, ops)
    return matmul(ops.weighted_mean, X)


def aggregate_mean(X, adj):
    ops = _ops(adj)
    _check_nodes(X, ops)
    return matmul(ops.mean, X)


def _neighbour_extreme(X, ops, pick_max):
    data = X.data
    n = ops.n_nodes
    fill = -np.inf if pick_max else np.inf
    # cand[..., i, j, h] = X[..., i, h] where i -> j is an edge
    cand = np.where(ops.support[:, :, None], data[..., :, None, :], fill)
    pick = np.argmax(cand, axis=-3) if pick_max else np.argmin(cand, axis=-3)
    out = np.take_along_axis(cand, pick[..., None, :, :], axis=-3)[..., 0, :, :]
    empty = ~ops.has_in
    out[..., empty, :] = 0.0

    def grad_fn(g):
        g = np.where(empty[:, None], 0.0, g)
        one_hot = pick[..., None, :, :] == np.arange(n)[:, None, None]
        # one_hot[..., i, j, h]: source i won for target j, feature h
        return ((one_hot * g[..., None, :, :]).sum(axis=-2),)

    return custom_op(out, (X,), grad_fn, "neighbour_max" if pick_max else "neighbour_min")


def aggregate_max(X, adj):
    """Componentwise max over in-neighbours; ties credit the lowest index."""
    ops = _ops(adj)
    _check_nodes(X, ops)
    return _neighbour_extreme(X, ops, True)


def aggregate_min(X, adj):
    ops = _ops(adj)
    _check_nodes(X, ops)
    return _neighbour_extreme(X, ops, False)


def aggregate_diffusion(X, adj, weights_out, weights_in):
    """Bidirectional diffusion convolution with ``K = len(weights_out)`` steps.

    Sums ``P_f^k X W_out[k] + P_b^k X W_in[k]`` for ``k = 0..K-1``. Powers are
    applied iteratively, never materialised.
    """
    ops = _ops(adj)
    _check_nodes(X, ops)
    if len(weights_out) != len(weights_in) or not weights_out:
        raise ShapeError("diffusion needs the same positive number of out/in weights")
    for w in list(weights_out) + list(weights_in):
        if w.shape[0] != X.shape[-1]:
            raise ShapeError(f"diffusion weight {w.shape} does not accept width {X.shape[-1]}")
    out = matmul(X, weights_out[0] + weights_in[0])
    xf = xb = X
    for w_o, w_i in zip(weights_out[1:], weights_in[1:]):
        xf = matmul(ops.forward, xf)
        xb = matmul(ops.backward, xb)
        out = out + matmul(xf, w_o) + matmul(xb, w_i)
    return out


def aggregate(kind, X, adj, weights_out=None, weights_in=None):
    X = X if isinstance(X, Tensor) else Tensor(X)
    if kind == "weighted_mean":
        return aggregate_weighted_mean(X, adj)
    if kind == "mean":
        return aggregate_mean(X, adj)
    if kind == "max_pool":
        return aggregate_max(X, adj)
    if kind == "min_pool":
        return aggregate_min(X, adj)
    if kind == "diffusion":
        return aggregate_diffusion(X, adj, weights_out, weights_in)
    raise ValueError(f"unknown aggregator {kind!r}; expected one of {KINDS}")
