"""Inductive training loop with per-batch random node masking."""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import Tensor, backward
from .model import ModelConfig, forward, init_params

__all__ = [
    "TrainConfig",
    "WindowBatch",
    "TrainingDiverged",
    "EmptyDatasetError",
    "make_windows",
    "apply_random_mask",
    "teacher_forcing_rate",
    "masked_mse_loss",
    "Adam",
    "train",
    "predict",
    "detach_params",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


class EmptyDatasetError(ValueError):
    """Series too short for a single window."""


@dataclass
class TrainConfig:
    history: int = 12
    horizon: int = 12
    stride: int = 12
    batch_size: int = 32
    max_epochs: int = 200
    learning_rate: float = 1e-3
    mask_rate: float = 0.25
    tf_end_epoch: int = 30
    patience: int = 10
    seed: int = 0
    clip_norm: float = None
    teacher_masked_nodes: bool = True

    def __post_init__(self):
        for name in ("history", "horizon", "stride", "batch_size", "max_epochs", "tf_end_epoch", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.mask_rate < 1:
            raise ValueError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")

    def to_dict(self):
        return asdict(self)


@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    valid: np.ndarray
    masked_nodes: list = None


def make_windows(series, history, horizon, stride, valid=None):
    """Cut ``(inputs, targets, target_valid, starts)`` from a ``(N, L)`` series.

    ``starts`` are 0-based: ``0, s, 2s, ...`` up to ``L - P - F``.
    """
    series = np.asarray(series, dtype=float)
    n, length = series.shape
    if length < history + horizon:
        raise EmptyDatasetError(f"series length {length} < history + horizon = {history + horizon}")
    valid = np.ones_like(series, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    starts = np.arange(0, length - history - horizon + 1, stride)
    inputs = np.stack([series[:, i:i + history] for i in starts])
    targets = np.stack([series[:, i + history:i + history + horizon] for i in starts])
    tvalid = np.stack([valid[:, i + history:i + history + horizon] for i in starts])
    return inputs, targets, tvalid, starts


def apply_random_mask(batch, mask_rate, rng):
    """Zero the input rows of ``floor(mask_rate * N)`` uniformly chosen nodes.

    One subset is drawn per batch and shared by its samples.
    """
    if not 0 < mask_rate < 1:
        raise ValueError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    n = batch.inputs.shape[-2]
    count = int(math.floor(mask_rate * n))
    if count == 0:
        warnings.warn(f"mask rate {mask_rate} selects no node out of {n}; batch left unmasked")
        return replace(batch, masked_nodes=[np.array([], dtype=int)] * batch.inputs.shape[0])
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    inputs = batch.inputs.copy()
    inputs[..., chosen, :] = 0.0
    return replace(batch, inputs=inputs, masked_nodes=[chosen] * batch.inputs.shape[0])


def teacher_forcing_rate(epoch, tf_end_epoch):
    return max(1.0 - epoch / tf_end_epoch, 0.0)


def masked_mse_loss(pred, target, valid):
    """Mean squared error over the entries flagged valid."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("no valid entries to compute the loss over")
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    diff = (pred - np.asarray(target, dtype=float)) * valid.astype(float)
    return (diff * diff).sum() * (1.0 / count)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def detach_params(params):
    return {k: Tensor(p.data.copy()) for k, p in params.items()}


def _copy_params(params, requires_grad=True):
    return {k: Tensor(p.data.copy(), requires_grad=requires_grad) for k, p in params.items()}


def _evaluate_loss(params, windows, adjacency, model_cfg, train_cfg, seed):
    inputs, targets, tvalid = windows
    rng = np.random.default_rng(seed)
    frozen = detach_params(params)
    n = inputs.shape[1]
    total, count = 0.0, 0
    for lo in range(0, len(inputs), train_cfg.batch_size):
        sl = slice(lo, lo + train_cfg.batch_size)
        batch = apply_random_mask(WindowBatch(inputs[sl], targets[sl], tvalid[sl]), train_cfg.mask_rate, rng)
        observed = np.ones(n, dtype=bool)
        observed[batch.masked_nodes[0]] = False
        pred = forward(frozen, batch.inputs, observed, adjacency, model_cfg).data
        v = batch.valid
        total += float((((pred - batch.targets) * v) ** 2).sum())
        count += int(v.sum())
    return total / max(count, 1)


def train(series, adjacency, model_cfg=None, train_cfg=None, valid=None, val_series=None,
          val_valid=None, params=None, callback=None):
    """Fit the forecaster on a normalised ``(N, L)`` series over one graph.

    Invalid entries are zero-filled on input and excluded from the loss. The
    validation set defaults to the training windows. Returns the parameters
    with the best validation loss and the per-epoch log.
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig(history=model_cfg.history, horizon=model_cfg.horizon)
    if (train_cfg.history, train_cfg.horizon) != (model_cfg.history, model_cfg.horizon):
        raise ValueError("model and training configs disagree on history/horizon")
    series = np.asarray(series, dtype=float)
    valid = np.isfinite(series) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(series)
    series = np.where(valid, series, 0.0)
    P, F, s = train_cfg.history, train_cfg.horizon, train_cfg.stride
    inputs, targets, tvalid, _ = make_windows(series, P, F, s, valid)
    if val_series is None:
        val_windows = (inputs, targets, tvalid)
    else:
        vv = np.isfinite(val_series) if val_valid is None else np.asarray(val_valid, dtype=bool)
        vs = np.where(vv, val_series, 0.0)
        vi, vt, vtv, _ = make_windows(vs, P, F, s, vv)
        val_windows = (vi, vt, vtv)

    rng = np.random.default_rng(train_cfg.seed)
    params = _copy_params(params) if params is not None else init_params(model_cfg, train_cfg.seed)
    opt = Adam(params, lr=train_cfg.learning_rate, clip_norm=train_cfg.clip_norm)
    n = series.shape[0]
    best_loss, best_params, wait = math.inf, detach_params(params), 0
    history = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(inputs))
        tf = teacher_forcing_rate(epoch, train_cfg.tf_end_epoch)
        total, count, updates = 0.0, 0, 0
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            batch = apply_random_mask(WindowBatch(inputs[idx], targets[idx], tvalid[idx]),
                                      train_cfg.mask_rate, rng)
            observed = np.ones(n, dtype=bool)
            observed[batch.masked_nodes[0]] = False
            teacher_nodes = None if train_cfg.teacher_masked_nodes else observed
            pred = forward(params, batch.inputs, observed, adjacency, model_cfg,
                           teacher=batch.targets, tf_rate=tf, rng=rng, teacher_node_mask=teacher_nodes)
            loss = masked_mse_loss(pred, batch.targets, batch.valid)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, update {opt.t + 1}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            updates += 1
            k = int(batch.valid.sum())
            total += float(loss.data) * k
            count += k
        val_loss = _evaluate_loss(params, val_windows, adjacency, model_cfg, train_cfg, train_cfg.seed + 1)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        entry = {"epoch": epoch, "tf_rate": tf, "train_loss": total / count,
                 "val_loss": val_loss, "updates": updates}
        history.append(entry)
        log.debug("epoch %d tf=%.3f train=%.5f val=%.5f", epoch, tf, entry["train_loss"], val_loss)
        if callback is not None:
            callback(entry)
        if val_loss < best_loss:
            best_loss, best_params, wait = val_loss, detach_params(params), 0
        else:
            wait += 1
            if wait >= train_cfg.patience:
                break
    return best_params, history


def predict(params, inputs, adjacency, observed, model_cfg):
    """Forecast ``(..., N, F)`` from normalised, zero-filled ``inputs`` ``(..., N, P)``."""
    return forward(detach_params(params), np.asarray(inputs, dtype=float), observed, adjacency, model_cfg).data
