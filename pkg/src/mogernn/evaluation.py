"""Metrics, sensor roles, dynamic-sensing scenarios and reference baselines."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .training import make_windows

__all__ = [
    "ROLES",
    "MAPE_EPS",
    "RoleAssignment",
    "MetricsReport",
    "compute_metrics",
    "metrics_report",
    "assign_roles",
    "evaluate_model",
    "run_dynamic_scenario",
    "vs_to_aas_distance",
    "knn_fill",
    "baseline_knn_ed",
    "baseline_persistence",
]

# order matches the (AAS, VS, NAS, FS) count tuples used on the command line
ROLES = ("AAS", "VS", "NAS", "FS")
MAPE_EPS = 1e-3


def compute_metrics(pred, target, valid=None, eps=MAPE_EPS):
    """MAPE (%), MAE and RMSE over valid entries.

    MAPE also skips targets with ``|t| <= eps``.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid entries to score")
    err = pred[valid] - target[valid]
    t = target[valid]
    pct = np.abs(t) > eps
    mape = float(np.mean(np.abs(err[pct]) / np.abs(t[pct])) * 100.0) if pct.any() else float("nan")
    return {"mape": mape, "mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err * err)))}


class MetricsReport:
    """Flat table of ``(role, horizon, mape, mae, rmse)`` rows."""

    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def get(self, role, horizon="all"):
        for row in self.rows:
            if row["role"] == role and row["horizon"] == horizon:
                return row
        raise KeyError((role, horizon))

    def roles(self):
        return sorted({r["role"] for r in self.rows}, key=lambda r: (r not in ROLES, ROLES.index(r) if r in ROLES else r))

    def to_dict(self):
        return {"rows": self.rows}

    def write_json(self, path, **extra):
        payload = dict(extra, rows=self.rows)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["role", "horizon", "mape", "mae", "rmse"])
            for r in self.rows:
                writer.writerow([r["role"], r["horizon"], repr(r["mape"]), repr(r["mae"]), repr(r["rmse"])])


def _horizon_buckets(horizon, frequency):
    buckets = []
    for minutes in (15, 30, 60):
        step = int(round(minutes / frequency))
        if step * frequency == minutes and 1 <= step <= horizon:
            buckets.append((f"{minutes}min", [step - 1]))
    buckets.extend((f"step{t + 1}", [t]) for t in range(horizon))
    buckets.append(("all", list(range(horizon))))
    return buckets


def metrics_report(pred, target, valid, groups, frequency=5.0):
    """Score ``(W, N, F)`` forecasts per node group and horizon bucket.

    Groups without nodes are left out of the report.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    rows = []
    for name, nodes in groups.items():
        nodes = np.asarray(nodes, dtype=int)
        if nodes.size == 0:
            continue
        for label, steps in _horizon_buckets(pred.shape[-1], frequency):
            sel = (slice(None), nodes[:, None], steps)
            m = compute_metrics(pred[sel], target[sel], valid[sel])
            rows.append({"role": name, "horizon": label, **m})
    return MetricsReport(rows)


@dataclass
class RoleAssignment:
    """Partition of the nodes into AAS / VS / NAS / FS.

    Training sees AAS and FS. At test time AAS and NAS report, VS and FS are
    evaluated without input.
    """

    roles: np.ndarray
    seed: int = None

    def __post_init__(self):
        self.roles = np.asarray(self.roles, dtype="<U3")
        bad = set(self.roles.tolist()) - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")

    @property
    def n_nodes(self):
        return len(self.roles)

    def nodes(self, *roles):
        return np.flatnonzero(np.isin(self.roles, roles))

    def counts(self):
        return tuple(int((self.roles == r).sum()) for r in ROLES)

    @property
    def train_nodes(self):
        return self.nodes("AAS", "FS")

    @property
    def test_observed(self):
        return np.isin(self.roles, ("AAS", "NAS"))

    def groups(self):
        return {r: self.nodes(r) for r in ROLES}

    def to_dict(self):
        return {"roles": self.roles.tolist(), "seed": self.seed, "counts": list(self.counts())}

    @classmethod
    def from_dict(cls, d):
        return cls(d["roles"], d.get("seed"))


def assign_roles(n_nodes, counts, seed=0):
    """Uniform random partition with ``counts = (AAS, VS, NAS, FS)``."""
    if isinstance(counts, dict):
        counts = tuple(counts.get(r, 0) for r in ROLES)
    counts = tuple(int(c) for c in counts)
    if len(counts) != len(ROLES) or any(c < 0 for c in counts):
        raise ValueError(f"counts must be four nonnegative integers (AAS, VS, NAS, FS), got {counts}")
    if sum(counts) != n_nodes:
        raise ValueError(f"role counts {counts} sum to {sum(counts)}, not {n_nodes}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_nodes)
    roles = np.empty(n_nodes, dtype="<U3")
    lo = 0
    for role, c in zip(ROLES, counts):
        roles[perm[lo:lo + c]] = role
        lo += c
    return RoleAssignment(roles, seed)


def _test_windows(series, valid, history, horizon, stride):
    series = np.asarray(series, dtype=float)
    valid = np.isfinite(series) if valid is None else np.asarray(valid, dtype=bool)
    inputs, targets, tvalid, starts = make_windows(series, history, horizon, stride, valid)
    ivalid = np.stack([valid[:, i:i + history] for i in starts])
    return inputs, ivalid, targets, tvalid


def evaluate_model(model, series, valid, adjacency, observed, groups, stride=None, frequency=5.0):
    """Window the series, forecast every node and score each group.

    Returns ``(report, predictions, targets, target_valid)``.
    """
    stride = stride or model.stride
    inputs, ivalid, targets, tvalid = _test_windows(series, valid, model.history, model.horizon, stride)
    pred = model.predict(inputs, adjacency, observed=observed, valid=ivalid)
    return metrics_report(pred, targets, tvalid, groups, frequency), pred, targets, tvalid


def run_dynamic_scenario(model, series, valid, adjacency, roles, stride=None, frequency=5.0):
    """Apply a trained model, unchanged, to the sensor layout ``roles``.

    Every node is in the graph; AAS and NAS feed observations, VS and FS are
    zero-filled even where their data exist.
    """
    report, pred, targets, tvalid = evaluate_model(
        model, series, valid, adjacency, roles.test_observed, roles.groups(), stride, frequency)
    return report, {"pred": pred, "target": targets, "valid": tvalid}


def vs_to_aas_distance(roles, distances):
    """Mean over VS nodes of the distance to the nearest other AAS node."""
    d = np.asarray(distances, dtype=float)
    vs, aas = roles.nodes("VS"), roles.nodes("AAS")
    if vs.size == 0:
        raise ValueError("no VS nodes")
    if aas.size == 0:
        raise ValueError("no AAS nodes")
    mins = []
    for i in vs:
        cand = [d[i, j] for j in aas if j != i]
        mins.append(min(cand) if cand else np.inf)
    return float(np.mean(mins))


def _neighbour_table(distances, observed, k):
    d = np.asarray(distances, dtype=float)
    obs = np.flatnonzero(observed)
    if obs.size < k:
        raise ValueError(f"need at least k={k} observed nodes, have {obs.size}")
    sym = np.minimum(d, d.T)
    table = {}
    for u in np.flatnonzero(~np.asarray(observed, dtype=bool)):
        order = np.argsort(sym[u, obs], kind="stable")
        table[int(u)] = obs[order[:k]]
    return table


def knn_fill(history, observed, distances, k, valid=None):
    """Replace unobserved node histories with the mean of the ``k`` nearest
    observed nodes (travel distance, either direction).

    ``history`` is ``(..., N, P)``. Returns ``(filled, filled_valid)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    X = np.array(history, dtype=float)
    ok = np.isfinite(X) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(X)
    ok = ok.copy()
    observed = np.asarray(observed, dtype=bool)
    for u, nbrs in _neighbour_table(distances, observed, k).items():
        vals = np.where(ok[..., nbrs, :], X[..., nbrs, :], 0.0)
        cnt = ok[..., nbrs, :].sum(axis=-2)
        X[..., u, :] = np.divide(vals.sum(axis=-2), cnt, out=np.zeros_like(vals[..., 0, :]), where=cnt > 0)
        ok[..., u, :] = cnt > 0
    return X, ok


def baseline_knn_ed(model, series, valid, distances, adjacency, observed, groups, k=2,
                    stride=None, frequency=5.0):
    """KNN interpolation of unobserved histories, forecast by the trained
    encoder-decoder with every node treated as observed."""
    stride = stride or model.stride
    inputs, ivalid, targets, tvalid = _test_windows(series, valid, model.history, model.horizon, stride)
    filled, fvalid = knn_fill(inputs, observed, distances, k, ivalid)
    n = inputs.shape[1]
    pred = model.predict(filled, adjacency, observed=np.ones(n, dtype=bool), valid=fvalid)
    return metrics_report(pred, targets, tvalid, groups, frequency), pred


def baseline_persistence(series, valid, distances, observed, groups, history=12, horizon=12,
                         stride=12, k=2, frequency=5.0):
    """Repeat the last (KNN-interpolated) observed value over the horizon."""
    inputs, ivalid, targets, tvalid = _test_windows(series, valid, history, horizon, stride)
    filled, fvalid = knn_fill(inputs, observed, distances, k, ivalid)
    last = np.zeros(filled.shape[:-1])
    for t in range(history):
        # carry forward the latest valid value
        last = np.where(fvalid[..., t], filled[..., t], last)
    pred = np.repeat(last[..., None], horizon, axis=-1)
    return metrics_report(pred, targets, tvalid, groups, frequency), pred
