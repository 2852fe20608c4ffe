"""Point clouds, exact k-nearest-neighbour graphs and per-sample batching."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autograd import scatter_matrix

__all__ = [
    "DataError",
    "PointSample",
    "NeighborGraph",
    "knn_graph",
    "relative_offsets",
    "ChannelStats",
    "NormStats",
    "PositionFrame",
    "normalize_sample",
    "denormalize_sample",
    "Batch",
    "batch_pack",
]


class DataError(ValueError):
    """Malformed or inconsistent point data."""


@dataclass
class PointSample:
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, F), F may be 0
    targets: np.ndarray  # (N, O)
    name: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        n = self.positions.shape[0] if self.positions.ndim == 2 else -1
        self.features = np.asarray(self.features)
        if n > 0 and self.features.ndim != 2 and self.features.size % n == 0:
            self.features = self.features.reshape(n, -1)
        self.targets = np.asarray(self.targets)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DataError(f"positions must be (N, 3), got {self.positions.shape}")
        if n < 1:
            raise DataError("a sample needs at least one point")
        if self.features.ndim != 2 or self.features.shape[0] != n or self.targets.shape[0] != n:
            raise DataError(
                f"{self.name or 'sample'}: leading dims differ "
                f"({n}, {self.features.shape[0]}, {self.targets.shape[0]})"
            )
        if self.targets.shape[1] < 1:
            raise DataError("targets need at least one channel")
        if not np.isfinite(self.positions).all():
            raise DataError(f"{self.name or 'sample'}: non-finite positions")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.targets.shape[1]

    def permuted(self, perm: np.ndarray) -> "PointSample":
        return PointSample(self.positions[perm], self.features[perm], self.targets[perm], self.name)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """k-NN table: ``indices[i, 0] == i`` and the rest sorted by distance."""

    indices: np.ndarray  # (N, k) int64
    offsets: np.ndarray  # (N, k, 3)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_points(self) -> int:
        return self.indices.shape[0]

    @cached_property
    def _scatter_cache(self) -> dict:
        return {}

    def scatter(self, dtype, start: int = 0, stop: int | None = None) -> sp.csr_matrix:
        """Sparse transpose of the neighbour gather for rows ``start:stop``, cached."""
        stop = self.n_points if stop is None else stop
        key = (np.dtype(dtype).str, start, stop)
        if key not in self._scatter_cache:
            self._scatter_cache[key] = scatter_matrix(self.indices[start:stop], self.n_points,
                                                      dtype=dtype)
        return self._scatter_cache[key]

    def shifted(self, start: int) -> "NeighborGraph":
        return NeighborGraph(self.indices + start, self.offsets)


def _squared_distances(block: np.ndarray, pts: np.ndarray) -> np.ndarray:
    diff = block[:, None, :] - pts[None, :, :]
    return (diff * diff).sum(axis=-1)


def knn_graph(positions: np.ndarray, k: int, chunk: int = 512) -> NeighborGraph:
    """Exact k-NN by brute force.

    Row ``i`` holds ``i`` itself followed by the ``k - 1`` nearest other
    points; equal distances are ordered by point index.
    """
    pos = np.asarray(positions)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {pos.shape}")
    n = pos.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, N={n}]")
    if not np.isfinite(pos).all():
        raise ValueError("positions contain non-finite values")
    pts = pos.astype(np.float64)
    indices = np.empty((n, k), dtype=np.int64)
    all_ids = np.arange(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d2 = _squared_distances(pts[lo:hi], pts)
        rows = np.arange(hi - lo)
        d2[rows, all_ids[lo:hi]] = -1.0  # self first, even among duplicates
        if k < n:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = d2[rows[:, None], part].max(axis=1)
            for r in range(hi - lo):
                cand = np.flatnonzero(d2[r] <= kth[r])
                order = np.lexsort((cand, d2[r, cand]))
                indices[lo + r] = cand[order[:k]]
        else:
            indices[lo:hi] = np.lexsort((np.broadcast_to(all_ids, d2.shape), d2), axis=1)
    return NeighborGraph(indices, relative_offsets(pos, indices))


def relative_offsets(positions: np.ndarray, graph) -> np.ndarray:
    """``positions[neighbour] - positions[centre]`` for every graph slot.

    Computed in float64, where differences of float32 coordinates are exact.
    """
    idx = graph.indices if isinstance(graph, NeighborGraph) else np.asarray(graph)
    pos = np.asarray(positions, dtype=np.float64)
    if idx.size and (idx.min() < 0 or idx.max() >= pos.shape[0]):
        raise ValueError("graph indices out of range for these positions")
    return pos[idx] - pos[:, None, :]


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DataError("mean/std length mismatch")
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise DataError("non-finite normalization statistics")
        if (std < 0).any():
            raise DataError("negative standard deviation")
        std = np.where(std > 0, std, 1.0)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, width: int) -> "ChannelStats":
        return cls(np.zeros(width), np.ones(width))

    @classmethod
    def of(cls, arrays: Sequence[np.ndarray]) -> "ChannelStats":
        stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass(frozen=True)
class NormStats:
    features: ChannelStats
    targets: ChannelStats

    @classmethod
    def from_samples(cls, samples: Sequence[PointSample]) -> "NormStats":
        return cls(
            ChannelStats.of([s.features for s in samples]),
            ChannelStats.of([s.targets for s in samples]),
        )

    @classmethod
    def identity(cls, n_features: int, n_outputs: int) -> "NormStats":
        return cls(ChannelStats.identity(n_features), ChannelStats.identity(n_outputs))


@dataclass(frozen=True)
class PositionFrame:
    """Per-sample bounding-box centre and largest half-extent."""

    center: np.ndarray
    scale: float

    @classmethod
    def of(cls, positions: np.ndarray) -> "PositionFrame":
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        half = float(np.max(hi - lo)) / 2.0
        return cls((lo + hi) / 2.0, half if half > 0 else 1.0)


def normalize_sample(sample: PointSample, stats: NormStats,
                     dtype=None) -> tuple[PointSample, PositionFrame]:
    """Z-score features/targets with ``stats``; map positions into the unit box.

    Returns the normalized sample and the position frame needed to undo it.
    """
    if stats.features.mean.size != sample.n_features or stats.targets.mean.size != sample.n_outputs:
        raise DataError("normalization statistics do not match the sample's channels")
    dtype = dtype or sample.targets.dtype
    pos = sample.positions.astype(np.float64)
    frame = PositionFrame.of(pos)
    out = PointSample(
        ((pos - frame.center) / frame.scale).astype(dtype),
        stats.features.apply(sample.features).astype(dtype),
        stats.targets.apply(sample.targets).astype(dtype),
        sample.name,
    )
    return out, frame


def denormalize_sample(sample: PointSample, stats: NormStats, frame: PositionFrame) -> PointSample:
    return PointSample(
        sample.positions.astype(np.float64) * frame.scale + frame.center,
        stats.features.invert(sample.features),
        stats.targets.invert(sample.targets),
        sample.name,
    )


@dataclass
class Batch:
    """Samples concatenated along the point axis, with one k-NN graph each."""

    samples: list[PointSample]
    starts: list[int]
    positions: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    graph: NeighborGraph
    graphs: list[NeighborGraph] = field(default_factory=list)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        ends = self.starts[1:] + [self.positions.shape[0]]
        return list(zip(self.starts, ends))

    def split(self, rows: np.ndarray) -> list[np.ndarray]:
        return [rows[a:b] for a, b in self.bounds]


def merge_graphs(graphs: Sequence[NeighborGraph], starts: Sequence[int]) -> NeighborGraph:
    if len(graphs) == 1:
        return graphs[0]
    return NeighborGraph(
        np.concatenate([g.indices + s for g, s in zip(graphs, starts)]),
        np.concatenate([g.offsets for g in graphs]),
    )


def batch_pack(samples: Sequence[PointSample], k: int,
               graphs: Sequence[NeighborGraph] | None = None) -> Batch:
    """Concatenate samples; each keeps its own k-NN graph (indices shifted)."""
    samples = list(samples)
    if not samples:
        raise DataError("cannot pack an empty batch")
    f, o = samples[0].n_features, samples[0].n_outputs
    for s in samples[1:]:
        if s.n_features != f or s.n_outputs != o:
            raise DataError(
                f"{s.name or 'sample'}: channels ({s.n_features}, {s.n_outputs}) != ({f}, {o})"
            )
    if graphs is None:
        graphs = [knn_graph(s.positions, k) for s in samples]
    else:
        graphs = list(graphs)
        for s, g in zip(samples, graphs):
            if g.n_points != s.n_points or g.k != k:
                raise DataError(f"{s.name or 'sample'}: graph does not match sample")
    starts = [0]
    for s in samples[:-1]:
        starts.append(starts[-1] + s.n_points)
    return Batch(
        samples=samples,
        starts=starts,
        positions=np.concatenate([s.positions for s in samples]),
        features=np.concatenate([s.features for s in samples]),
        targets=np.concatenate([s.targets for s in samples]),
        graph=merge_graphs(graphs, starts),
        graphs=graphs,
    )
