"""Speed datasets: CSV/JSON interchange, chronological splits and a synthetic
congestion-wave generator for desk-scale experiments."""

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .graph import SensorGraph

__all__ = [
    "DataError",
    "SpeedDataset",
    "SyntheticSpec",
    "load_speed_matrix",
    "save_speed_matrix",
    "load_metadata",
    "save_metadata",
    "split_train_test",
    "generate_synthetic",
    "draw_episodes",
    "topology_distances",
]

START_TIME = datetime(2012, 3, 1)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class SpeedDataset:
    series: np.ndarray
    valid: np.ndarray
    sensor_ids: list
    frequency: float = 5.0
    units: str = "mph"
    start: datetime = START_TIME

    @property
    def n_nodes(self):
        return self.series.shape[0]

    @property
    def length(self):
        return self.series.shape[1]

    def select(self, nodes):
        idx = np.asarray(nodes, dtype=int)
        return SpeedDataset(self.series[idx], self.valid[idx], [self.sensor_ids[i] for i in idx],
                            self.frequency, self.units, self.start)


def load_metadata(path):
    with open(path) as fh:
        meta = json.load(fh)
    missing = {"frequency_min", "units", "zero_is_missing"} - set(meta)
    if missing:
        raise DataError(f"{path}: metadata lacks keys {sorted(missing)}")
    return meta


def save_metadata(path, frequency_min, units, zero_is_missing, **extra):
    meta = {"frequency_min": frequency_min, "units": units, "zero_is_missing": zero_is_missing}
    meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_speed_matrix(path, zero_is_missing=False, units="mph"):
    """Parse ``timestamp,<id1>,<id2>,...`` rows into an ``(N, L)`` dataset.

    Empty cells and NaN are invalid; zeros are invalid too when
    ``zero_is_missing`` is set. Timestamps must advance at a constant step.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{path}: expected a header 'timestamp,<sensor ids>'")
    sensor_ids = rows[0][1:]
    times, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(rows[0]):
            raise DataError(f"{path}:{lineno}: expected {len(rows[0])} fields, got {len(row)}")
        try:
            times.append(datetime.fromisoformat(row[0]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from exc
        values.append([float(v) if v.strip() else np.nan for v in row[1:]])
    if not times:
        raise DataError(f"{path}: no data rows")
    series = np.array(values, dtype=float).T
    valid = np.isfinite(series)
    if zero_is_missing:
        valid &= series != 0.0
    frequency = 0.0
    if len(times) > 1:
        steps = {b - a for a, b in zip(times, times[1:])}
        if any(s <= timedelta(0) for s in steps):
            raise DataError(f"{path}: timestamps are not strictly increasing")
        if len(steps) != 1:
            raise DataError(f"{path}: sampling interval drifts ({len(steps)} distinct steps)")
        frequency = steps.pop().total_seconds() / 60.0
    return SpeedDataset(series, valid, sensor_ids, frequency, units, times[0])


def save_speed_matrix(path, dataset, missing_as_zero=True):
    """Write the dataset as CSV. Invalid entries become ``0`` (or empty cells)."""
    step = timedelta(minutes=dataset.frequency)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp"] + list(dataset.sensor_ids))
        for t in range(dataset.length):
            cells = []
            for i in range(dataset.n_nodes):
                if dataset.valid[i, t]:
                    cells.append(repr(float(dataset.series[i, t])))
                else:
                    cells.append("0.0" if missing_as_zero else "")
            writer.writerow([(dataset.start + t * step).isoformat()] + cells)


def split_train_test(dataset, ratio=0.7):
    """Chronological split at ``floor(ratio * L)``."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    cut = int(np.floor(ratio * dataset.length))
    step = timedelta(minutes=dataset.frequency)

    def part(lo, hi):
        return SpeedDataset(dataset.series[:, lo:hi].copy(), dataset.valid[:, lo:hi].copy(),
                            list(dataset.sensor_ids), dataset.frequency, dataset.units,
                            dataset.start + lo * step)

    return part(0, cut), part(cut, dataset.length)


# -- synthetic data ------------------------------------------------------------

TOPOLOGIES = ("ring", "line", "grid")


@dataclass
class SyntheticSpec:
    """Desk-scale road network with congestion episodes spreading to neighbours."""

    topology: str = "ring"
    n_nodes: int = 20
    days: float = 7.0
    frequency_min: float = 5.0
    free_speed: float = 65.0
    spacing_m: float = 800.0
    episodes_per_day: float = 8.0
    depth_range: tuple = (0.3, 0.6)
    duration_range: tuple = (12, 36)
    decay: float = 0.8
    lag: int = 1
    noise_std: float = 1.0
    seed: int = 0
    kappa_m: float = None
    two_way: bool = True
    episodes: list = field(default=None)

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; expected one of {TOPOLOGIES}")
        if self.free_speed <= 0:
            raise ValueError("free_speed must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.n_nodes < 1 or self.days <= 0:
            raise ValueError("n_nodes and days must be positive")
        self.depth_range = tuple(self.depth_range)
        self.duration_range = tuple(self.duration_range)

    @property
    def steps(self):
        return int(round(self.days * 24 * 60 / self.frequency_min))

    def to_dict(self):
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        d["duration_range"] = list(self.duration_range)
        return d


def _edges(topology, n):
    if topology == "ring":
        return [(i, (i + 1) % n) for i in range(n)] if n > 1 else []
    if topology == "line":
        return [(i, i + 1) for i in range(n - 1)]
    cols = int(np.ceil(np.sqrt(n)))
    edges = []
    for i in range(n):
        if (i + 1) % cols and i + 1 < n:
            edges.append((i, i + 1))
        if i + cols < n:
            edges.append((i, i + cols))
    return edges


def _hops(n, edges, two_way=True):
    nbrs = [[] for _ in range(n)]
    for a, b in edges:
        if a != b:
            nbrs[a].append(b)
            if two_way:
                nbrs[b].append(a)
    hops = np.full((n, n), -1, dtype=int)
    for s in range(n):
        hops[s, s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            for w in nbrs[v]:
                if hops[s, w] < 0:
                    hops[s, w] = hops[s, v] + 1
                    queue.append(w)
    return hops


def topology_distances(topology, n, spacing_m=800.0, two_way=True):
    """Shortest travel distances over links of uniform length.

    One-way links run from lower to higher index (ring: ``i -> i+1 mod n``);
    unreachable pairs get ``inf``.
    """
    hops = _hops(n, _edges(topology, n), two_way)
    return np.where(hops >= 0, hops * float(spacing_m), np.inf), hops


def _dip_profile(duration):
    tau = np.arange(duration + 1)
    return np.sin(np.pi * tau / duration) ** 2


def draw_episodes(spec, rng):
    """Random ``(node, start, depth, duration)`` episodes, Poisson in count."""
    count = rng.poisson(spec.episodes_per_day * spec.days)
    lo, hi = spec.duration_range
    return [
        (int(rng.integers(spec.n_nodes)), int(rng.integers(spec.steps)),
         float(rng.uniform(*spec.depth_range)), int(rng.integers(lo, hi + 1)))
        for _ in range(count)
    ]


def generate_synthetic(spec):
    """Simulate speeds and the matching sensor graph.

    Each episode dips the source node by ``depth * free_speed`` along a
    smooth bump; a node ``h`` hops downstream (either way on two-way roads) sees the same bump scaled by
    ``decay**h`` and delayed by ``h * lag`` steps. Gaussian noise is added and
    speeds are clipped to ``[0, free_speed + 4 * noise_std]``.

    ``spec.episodes`` may list explicit ``(node, start, depth, duration)``
    tuples; otherwise episodes are drawn from ``spec.seed``. The graph uses
    ``spec.kappa_m`` as threshold, defaulting to 1.5 link lengths.
    """
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n_nodes, spec.steps
    distances, hops = topology_distances(spec.topology, n, spec.spacing_m, spec.two_way)
    if spec.episodes is None:
        episodes = draw_episodes(spec, rng)
    else:
        episodes = [tuple(e) for e in spec.episodes]
    dip = np.zeros((n, T))
    for node, start, depth, duration in episodes:
        bump = depth * spec.free_speed * _dip_profile(duration)
        for v in range(n):
            h = hops[node, v]
            if h < 0:
                continue
            t0 = start + h * spec.lag
            if t0 >= T:
                continue
            seg = bump[: T - t0]
            dip[v, t0:t0 + len(seg)] += spec.decay ** h * seg
    noise = rng.normal(0.0, spec.noise_std, size=(n, T)) if spec.noise_std > 0 else 0.0
    speed = np.clip(spec.free_speed - dip + noise, 0.0, spec.free_speed + 4 * spec.noise_std)
    ids = [f"s{i:03d}" for i in range(n)]
    dataset = SpeedDataset(speed, np.ones((n, T), dtype=bool), ids, spec.frequency_min, "mph")
    kappa = spec.kappa_m if spec.kappa_m is not None else 1.5 * spec.spacing_m
    if n > 1:
        graph = SensorGraph.from_distances(distances, kappa, sensor_ids=ids)
    else:
        graph = SensorGraph(distances, np.ones((1, 1)), sensor_ids=ids, kappa=kappa)
    return dataset, graph
