"""Sensor graph construction: Gaussian-kernel adjacency, observation masking,
and degree-normalised transition matrices."""

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SensorGraph",
    "build_adjacency",
    "default_sigma",
    "mask_adjacency",
    "transition_matrices",
    "load_distances",
    "save_distances",
]


def default_sigma(distances):
    """Population standard deviation of the finite, positive distance entries."""
    d = np.asarray(distances, dtype=float)
    samples = d[np.isfinite(d) & (d > 0)]
    if samples.size == 0:
        raise ValueError("no finite positive distances to estimate sigma from")
    return float(samples.std())


def build_adjacency(distances, sigma=None, kappa=None):
    """Weights ``exp(-dist / sigma)`` for ``dist <= kappa``, zero elsewhere.

    ``sigma`` defaults to :func:`default_sigma`. ``kappa`` is required.
    Unconnected pairs carry ``inf`` distance and get weight 0.
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distances must be square, got shape {d.shape}")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    if kappa is None:
        raise ValueError("kappa (distance threshold) is required")
    if sigma is None:
        sigma = default_sigma(d)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    within = np.isfinite(d) & (d <= kappa)
    with np.errstate(invalid="ignore"):
        return np.where(within, np.exp(-np.where(within, d, 0.0) / sigma), 0.0)


def mask_adjacency(adjacency, observed):
    """Zero the diagonal and every row whose source node is unobserved."""
    a = np.array(adjacency, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if observed.shape != (a.shape[0],):
        raise ValueError(f"observed flags {observed.shape} do not match adjacency {a.shape}")
    a[~observed, :] = 0.0
    np.fill_diagonal(a, 0.0)
    return a


def _row_normalise(m):
    deg = m.sum(axis=1, keepdims=True)
    return np.divide(m, deg, out=np.zeros_like(m), where=deg > 0)


def transition_matrices(adjacency):
    """Return ``(D_O^-1 A, D_I^-1 A^T)``; zero-degree rows stay zero."""
    a = np.asarray(adjacency, dtype=float)
    return _row_normalise(a), _row_normalise(a.T)


@dataclass
class SensorGraph:
    """Sensor nodes with travel distances, kernel weights and observation flags."""

    distances: np.ndarray
    adjacency: np.ndarray
    observed: np.ndarray = None
    sensor_ids: list = field(default=None)
    sigma: float = None
    kappa: float = None

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float)
        self.adjacency = np.asarray(self.adjacency, dtype=float)
        n = self.adjacency.shape[0]
        if self.observed is None:
            self.observed = np.ones(n, dtype=bool)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.sensor_ids is None:
            self.sensor_ids = [str(i) for i in range(n)]
        if self.distances.shape != (n, n) or self.observed.shape != (n,) or len(self.sensor_ids) != n:
            raise ValueError("graph components disagree on node count")

    @classmethod
    def from_distances(cls, distances, kappa, sigma=None, observed=None, sensor_ids=None):
        if sigma is None:
            sigma = default_sigma(distances)
        adjacency = build_adjacency(distances, sigma, kappa)
        return cls(distances, adjacency, observed, sensor_ids, float(sigma), float(kappa))

    @property
    def n_nodes(self):
        return self.adjacency.shape[0]

    def subgraph(self, nodes):
        """Induced subgraph over ``nodes`` (indices), keeping kernel parameters."""
        idx = np.asarray(nodes, dtype=int)
        return SensorGraph(
            self.distances[np.ix_(idx, idx)],
            self.adjacency[np.ix_(idx, idx)],
            self.observed[idx],
            [self.sensor_ids[i] for i in idx],
            self.sigma,
            self.kappa,
        )

    def masked_adjacency(self):
        return mask_adjacency(self.adjacency, self.observed)


def load_distances(path, sensor_ids):
    """Read a ``from_id,to_id,distance_meters`` CSV into a dense matrix.

    Missing pairs are unconnected (``inf``); the diagonal is zero.
    Pairs naming unknown ids are skipped.
    """
    index = {str(s): i for i, s in enumerate(sensor_ids)}
    n = len(index)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"from_id", "to_id", "distance_meters"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: distance file lacks columns {sorted(missing)}")
        for row in reader:
            i, j = index.get(row["from_id"]), index.get(row["to_id"])
            if i is None or j is None:
                continue
            d[i, j] = float(row["distance_meters"])
    return d


def save_distances(path, distances, sensor_ids):
    d = np.asarray(distances, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["from_id", "to_id", "distance_meters"])
        for i, a in enumerate(sensor_ids):
            for j, b in enumerate(sensor_ids):
                if i != j and np.isfinite(d[i, j]):
                    writer.writerow([a, b, repr(float(d[i, j]))])
