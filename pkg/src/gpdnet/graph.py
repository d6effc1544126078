"""Neighbourhood graphs for graph convolution.

A batch of point clouds is handled as one concatenated array split into
``segments``; every graph is built per segment and never links points from
different segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .geometry import SpatialIndex


@dataclass(frozen=True, eq=False)
class SearchArea:
    """Per-point candidate lists, sorted by 3-D distance, self excluded (global indices)."""
    candidates: np.ndarray

    @property
    def size(self) -> int:
        return self.candidates.shape[1]


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Fixed-degree neighbour lists; ``neighbors[i]`` are the sources of edges into ``i``."""
    neighbors: np.ndarray

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.int64)
        if nb.ndim != 2:
            raise ContractError(f"neighbour lists must form an N x k array, got {nb.shape}")
        object.__setattr__(self, "neighbors", nb)

    @property
    def n_points(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def sources(self) -> np.ndarray:
        return self.neighbors.reshape(-1)

    @property
    def targets(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_points), self.k)

    @classmethod
    def from_edges(cls, sources: np.ndarray, targets: np.ndarray, n_points: int) -> "NeighborGraph":
        """Inverse of the (sources, targets) flattening for target-major edge arrays."""
        sources = np.asarray(sources)
        targets = np.asarray(targets)
        k = sources.size // n_points if n_points else 0
        if k * n_points != sources.size or not np.array_equal(
                targets, np.repeat(np.arange(n_points), k)):
            raise ContractError("edge arrays are not a target-major fixed-degree flattening")
        return cls(sources.reshape(n_points, k))

    def format_lines(self) -> str:
        return "".join(f"{i}: {' '.join(map(str, row))}\n" for i, row in enumerate(self.neighbors))


def _offsets(n_total: int, segments: Sequence[int] | None) -> list[tuple[int, int]]:
    if segments is None:
        segments = [n_total]
    if int(np.sum(segments)) != n_total:
        raise ContractError(f"segment sizes {list(segments)} do not add up to {n_total} points")
    bounds = np.concatenate([[0], np.cumsum(segments)]).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _self_knn(points: np.ndarray, k: int, segments) -> np.ndarray:
    parts = []
    for start, stop in _offsets(points.shape[0], segments):
        idx = SpatialIndex(points[start:stop]).query(points[start:stop], k, exclude_self=True)
        parts.append(idx + start)
    return np.concatenate(parts, axis=0)


def build_search_areas(noisy_points: np.ndarray, size: int, k: int | None = None,
                       segments: Sequence[int] | None = None) -> SearchArea:
    """The ``size`` nearest other points of every point in noisy 3-D space.

    Segments smaller than ``size + 1`` get lists of length ``n - 1``; the
    shortest list length sets the width for the whole batch.
    """
    noisy_points = np.asarray(noisy_points, dtype=np.float64)
    if k is not None and size < k:
        raise ConfigError(f"search-area size M={size} must be at least k={k}")
    bounds = _offsets(noisy_points.shape[0], segments)
    smallest = min(stop - start for start, stop in bounds)
    if smallest < 2:
        raise ContractError("search areas need at least two points per cloud")
    width = min(size, smallest - 1)
    if k is not None and width < k:
        raise ContractError(f"a cloud of {smallest} points cannot provide {k} neighbours")
    return SearchArea(_self_knn(noisy_points, width, segments))


def build_feature_graph(features, areas: SearchArea, k: int) -> NeighborGraph:
    """k nearest candidates of each point in feature space, within its search area.

    Distances are evaluated in float32 and ties go to the lower candidate
    index.  The selection is a plain index array, so no gradient flows through it.
    """
    feats = np.asarray(getattr(features, "data", features)).astype(np.float32, copy=False)
    cand = areas.candidates
    if k > cand.shape[1]:
        raise ConfigError(f"k={k} exceeds the search-area size {cand.shape[1]}")
    if feats.shape[0] != cand.shape[0]:
        raise ContractError(
            f"{feats.shape[0]} feature rows but search areas for {cand.shape[0]} points")
    if not np.all(np.isfinite(feats)):
        raise NumericError("non-finite feature values during graph construction")
    d2 = np.zeros(cand.shape, dtype=np.float32)
    for c in range(feats.shape[1]):
        col = feats[:, c]
        diff = col[cand] - col[:, None]
        d2 += diff * diff
    by_index = np.argsort(cand, axis=1, kind="stable")
    cand_sorted = np.take_along_axis(cand, by_index, axis=1)
    d2_sorted = np.take_along_axis(d2, by_index, axis=1)
    pick = np.argsort(d2_sorted, axis=1, kind="stable")[:, :k]
    return NeighborGraph(np.take_along_axis(cand_sorted, pick, axis=1))


def build_fixed_graph(noisy_points: np.ndarray, k: int,
                      segments: Sequence[int] | None = None) -> NeighborGraph:
    """k nearest neighbours in noisy 3-D space, self excluded."""
    noisy_points = np.asarray(noisy_points, dtype=np.float64)
    for start, stop in _offsets(noisy_points.shape[0], segments):
        if k >= stop - start:
            raise ContractError(f"k={k} needs more than {stop - start} points")
    return NeighborGraph(_self_knn(noisy_points, k, segments))
