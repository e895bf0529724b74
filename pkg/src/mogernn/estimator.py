"""scikit-learn style front end for the MoGERNN forecaster."""

import json

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .aggregators import KINDS
from .autodiff import Tensor
from .model import ModelConfig, param_bytes, param_count
from .training import TrainConfig, predict as _predict, train as _train

__all__ = ["MoGERNN", "CHECKPOINT_FORMAT"]

CHECKPOINT_FORMAT = "mogernn-checkpoint/1"

_MODEL_FIELDS = ("history", "horizon", "hidden", "gate_hidden", "top_k", "diffusion_steps",
                 "experts", "gating", "activation", "gru_aggregator", "transpose_diffusion",
                 "gru_masked_adjacency", "use_moge")
_TRAIN_FIELDS = ("history", "horizon", "stride", "batch_size", "max_epochs", "learning_rate",
                 "mask_rate", "tf_end_epoch", "patience", "clip_norm", "teacher_masked_nodes")


def _check_adjacency(adjacency, n_nodes):
    adj = check_array(adjacency, dtype=np.float64)
    if adj.shape != (n_nodes, n_nodes):
        raise ValueError(f"adjacency shape {adj.shape} does not match {n_nodes} nodes")
    if np.any(adj < 0):
        raise ValueError("adjacency weights must be nonnegative")
    return adj


class MoGERNN(BaseEstimator):
    """Inductive spatio-temporal forecaster for observed and unobserved nodes.

    ``fit`` takes a speed series of shape ``(n_nodes, n_steps)`` and the
    weighted adjacency among those nodes. ``predict`` takes history windows
    ``(n_nodes, history)`` or ``(n_windows, n_nodes, history)`` over any graph
    and returns forecasts with ``horizon`` in place of ``history``. Learned
    parameters never depend on the node count, so a fitted model applies to
    graphs with added, removed or virtual sensors.

    Values are scaled with statistics of the valid training entries, either
    z-scored (``scaling="zscore"``) or mapped to ``[0, 1]`` by min and max
    (``scaling="minmax"``). Unobserved and missing inputs are set to zero
    after scaling.
    """

    def __init__(self, history=12, horizon=12, hidden=64, gate_hidden=None, top_k=2,
                 diffusion_steps=2, experts=KINDS, gating="sparse", activation="relu",
                 gru_aggregator="diffusion", transpose_diffusion=False,
                 gru_masked_adjacency=False, use_moge=True, stride=12, batch_size=32,
                 max_epochs=200, learning_rate=1e-3, mask_rate=0.25, tf_end_epoch=30,
                 patience=10, clip_norm=None, teacher_masked_nodes=True, scaling="zscore",
                 random_state=0):
        self.history = history
        self.horizon = horizon
        self.hidden = hidden
        self.gate_hidden = gate_hidden
        self.top_k = top_k
        self.diffusion_steps = diffusion_steps
        self.experts = experts
        self.gating = gating
        self.activation = activation
        self.gru_aggregator = gru_aggregator
        self.transpose_diffusion = transpose_diffusion
        self.gru_masked_adjacency = gru_masked_adjacency
        self.use_moge = use_moge
        self.stride = stride
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.mask_rate = mask_rate
        self.tf_end_epoch = tf_end_epoch
        self.patience = patience
        self.clip_norm = clip_norm
        self.teacher_masked_nodes = teacher_masked_nodes
        self.scaling = scaling
        self.random_state = random_state

    def model_config(self):
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_FIELDS})

    def train_config(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(seed=seed, **{k: getattr(self, k) for k in _TRAIN_FIELDS})

    def _scale(self, X, valid):
        X = np.asarray(X, dtype=float)
        ok = np.isfinite(X) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(X)
        return np.where(ok, (np.where(ok, X, 0.0) - self.offset_) / self.scale_, 0.0), ok

    def fit(self, X, adjacency, valid=None, X_val=None, valid_val=None, callback=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        adj = _check_adjacency(adjacency, X.shape[0])
        ok = np.isfinite(X) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(X)
        if not ok.any():
            raise ValueError("no valid training entries")
        vals = X[ok]
        if self.scaling == "zscore":
            self.offset_, self.scale_ = float(vals.mean()), float(vals.std())
        elif self.scaling == "minmax":
            self.offset_, self.scale_ = float(vals.min()), float(vals.max() - vals.min())
        else:
            raise ValueError(f"scaling must be 'zscore' or 'minmax', got {self.scaling!r}")
        self.scale_ = self.scale_ or 1.0
        Z, ok = self._scale(X, ok)
        Zv = okv = None
        if X_val is not None:
            X_val = check_array(X_val, dtype=np.float64, ensure_all_finite="allow-nan")
            Zv, okv = self._scale(X_val, valid_val)
        self.params_, self.training_log_ = _train(
            Z, adj, self.model_config(), self.train_config(), ok, Zv, okv, callback=callback)
        self.n_params_ = param_count(self.params_)
        return self

    def predict(self, X, adjacency, observed=None, valid=None):
        """Forecast in original units; rows of unobserved nodes are ignored."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan", allow_nd=True)
        if X.ndim not in (2, 3) or X.shape[-1] != self.history:
            raise ValueError(f"expected (..., n_nodes, {self.history}) histories, got {X.shape}")
        n = X.shape[-2]
        adj = _check_adjacency(adjacency, n)
        observed = np.ones(n, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
        if observed.shape != (n,):
            raise ValueError(f"observed flags must have shape ({n},)")
        Z, _ = self._scale(X, valid)
        Z = Z * observed[:, None]
        out = _predict(self.params_, Z, adj, observed, self.model_config())
        return out * self.scale_ + self.offset_

    def param_bytes(self):
        check_is_fitted(self, "params_")
        return param_bytes(self.params_)

    # -- checkpoints ----------------------------------------------------------

    def to_checkpoint(self, extra=None):
        check_is_fitted(self, "params_")
        est = self.get_params()
        est["experts"] = list(est["experts"])
        return {
            "format": CHECKPOINT_FORMAT,
            "estimator": est,
            "seed": self.random_state,
            "normalization": {"offset": self.offset_, "scale": self.scale_},
            "params": {k: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
                       for k, p in sorted(self.params_.items())},
            "training_log": getattr(self, "training_log_", []),
            "extra": extra or {},
        }

    def save(self, path, extra=None):
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(extra), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_checkpoint(cls, ckpt):
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {ckpt.get('format')!r}")
        est = dict(ckpt["estimator"])
        est["experts"] = tuple(est["experts"])
        model = cls(**est)
        model.offset_ = float(ckpt["normalization"]["offset"])
        model.scale_ = float(ckpt["normalization"]["scale"])
        model.params_ = {k: Tensor(np.asarray(v["data"], dtype=float).reshape(v["shape"]))
                         for k, v in ckpt["params"].items()}
        model.training_log_ = ckpt.get("training_log", [])
        model.n_params_ = param_count(model.params_)
        return model

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            ckpt = json.load(fh)
        model = cls.from_checkpoint(ckpt)
        model.checkpoint_extra_ = ckpt.get("extra", {})
        return model
