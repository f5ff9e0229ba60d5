"""Road-graph container."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass
class TrafficGraph:
    """Weighted adjacency (0 = no edge) with one external id per node."""

    adjacency: np.ndarray
    node_ids: list[str]

    def __post_init__(self) -> None:
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.node_ids = [str(i) for i in self.node_ids]
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"adjacency must be square, got {a.shape}")
        if len(self.node_ids) != a.shape[0]:
            raise DataError(f"{len(self.node_ids)} node ids for a {a.shape[0]}-node adjacency")
        if len(set(self.node_ids)) != len(self.node_ids):
            raise DataError("duplicate node ids in adjacency")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise DataError("adjacency weights must be finite and non-negative")
        if np.any(np.diag(a) != 0):
            self.adjacency = a.copy()
            np.fill_diagonal(self.adjacency, 0.0)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def symmetric(self) -> bool:
        return bool(np.array_equal(self.adjacency, self.adjacency.T))

    def subgraph(self, index: Sequence[int]) -> "TrafficGraph":
        index = list(index)
        return TrafficGraph(
            self.adjacency[np.ix_(index, index)], [self.node_ids[i] for i in index]
        )

    def symmetrized(self) -> "TrafficGraph":
        return TrafficGraph(np.maximum(self.adjacency, self.adjacency.T), self.node_ids)
