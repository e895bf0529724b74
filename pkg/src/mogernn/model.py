"""Full forecaster: MoGE imputation followed by the graph-GRU encoder-decoder."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregators import KINDS, GraphOperators
from .autodiff import Tensor
from .graph import mask_adjacency
from .gru import decode, encode, init_gru_params
from .moge import init_moge_params, moge_forward

__all__ = ["ModelConfig", "init_params", "forward", "param_count", "param_bytes"]


@dataclass
class ModelConfig:
    history: int = 12
    horizon: int = 12
    hidden: int = 64
    gate_hidden: int = None
    top_k: int = 2
    diffusion_steps: int = 2
    experts: tuple = field(default=KINDS)
    gating: str = "sparse"
    activation: str = "relu"
    gru_aggregator: str = "diffusion"
    transpose_diffusion: bool = False
    gru_masked_adjacency: bool = False
    use_moge: bool = True

    def __post_init__(self):
        self.experts = tuple(self.experts)
        unknown = set(self.experts) - set(KINDS)
        if unknown or not self.experts:
            raise ValueError(f"unknown or empty expert roster: {sorted(unknown)}")
        if self.gru_aggregator not in KINDS:
            raise ValueError(f"unknown GRU aggregator {self.gru_aggregator!r}")
        if not 1 <= self.top_k:
            raise ValueError("top_k must be >= 1")
        for name in ("history", "horizon", "hidden", "diffusion_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        d = asdict(self)
        d["experts"] = list(self.experts)
        return d


def init_params(config, seed):
    """All learnable tensors, keyed by role. Sizes never depend on node count."""
    rng = np.random.default_rng(seed)
    params = {}
    if config.use_moge:
        params.update(init_moge_params(rng, config.history, config.hidden, config.experts,
                                       config.diffusion_steps, config.gate_hidden, config.gating))
    params.update(init_gru_params(rng, "enc", 1, config.hidden, config.gru_aggregator,
                                  config.diffusion_steps))
    params.update(init_gru_params(rng, "dec", 1, config.hidden, config.gru_aggregator,
                                  config.diffusion_steps, output_layer=True))
    return params


def param_count(params):
    return int(sum(p.data.size for p in params.values()))


def param_bytes(params):
    """Canonical byte serialisation (sorted keys, float64 little-endian)."""
    return b"".join(params[k].data.astype("<f8").tobytes() for k in sorted(params))


def forward(params, X, observed, adjacency, config, teacher=None, tf_rate=0.0, rng=None,
            teacher_node_mask=None):
    """Predict ``(..., N, F)`` from normalised histories ``X`` ``(..., N, P)``.

    ``observed`` flags which nodes carry data; the others are zero-filled and
    imputed by the expert mixture before encoding.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    observed = np.asarray(observed, dtype=bool)
    if config.use_moge:
        filled = moge_forward(X, observed, adjacency, params, config.experts, config.top_k,
                              config.activation, config.gating, config.transpose_diffusion)
    else:
        filled = X * observed[:, None].astype(float)
    gru_adj = mask_adjacency(adjacency, observed) if config.gru_masked_adjacency else adjacency
    ops = GraphOperators(gru_adj, config.transpose_diffusion)
    seq = filled.reshape(*filled.shape, 1)
    h = encode(seq, ops, params, "enc", config.gru_aggregator)
    if teacher is not None:
        teacher = np.asarray(teacher, dtype=float)[..., None]
    out = decode(h, ops, config.horizon, params, "dec", config.gru_aggregator,
                 teacher, tf_rate, rng, teacher_node_mask)
    return out.reshape(*out.shape[:-1])
