"""Entropy/correlation edge scoring and outer-layer peeling.

Edges are scored by how aligned their endpoints' series are, weighted by
the endpoints' histogram entropy.  Thresholding the scores leaves weakly
supported nodes with few edges; those are peeled off layer by layer.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, PruneDegenerateError, ShapeError
from .graph import TrafficGraph

log = logging.getLogger(__name__)

THRESHOLD_MODES = ("absolute", "quantile", "top_k")


@dataclass
class PruneConfig:
    bins: int = 16
    epsilon: float = 1e-8
    threshold_mode: str = "quantile"
    tau: float = 0.0
    quantile: float = 0.5
    top_k: int = 2
    d_min: int = 1
    peel_layers: int = 1

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if self.threshold_mode == "quantile" and not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")
        if self.threshold_mode == "top_k" and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.d_min < 0 or self.peel_layers < 0:
            raise ValueError("d_min and peel_layers must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EdgeScoreMatrix:
    scores: np.ndarray
    bins_used: int
    epsilon: float
    entropies: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class PrunedContext:
    """Result of :func:`peel`; ``kept_nodes`` index the original graph."""

    kept_nodes: list[int]
    pruned_adjacency: np.ndarray
    peel_history: list[list[int]]
    score_matrix: Optional[EdgeScoreMatrix]
    thresholds: list[Optional[float]] = field(default_factory=list)
    stop_reason: str = "completed"

    def report(self, graph: TrafficGraph, cfg: PruneConfig) -> dict:
        return {
            "layers": [
                {"removed": [graph.node_ids[i] for i in removed], "threshold_used": tau}
                for removed, tau in zip(self.peel_history, self.thresholds)
            ],
            "kept": [graph.node_ids[i] for i in self.kept_nodes],
            "stop_reason": self.stop_reason,
            "config": cfg.to_json(),
        }


def bin_distribution(series: np.ndarray, bins: int) -> np.ndarray:
    """Occupancy of ``bins`` equal-width bins spanning the series' range.

    The maximum falls in the last bin; a constant series puts all its mass in
    bin 0.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        raise DataError("cannot bin an empty series")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo, hi = x.min(), x.max()
    p = np.zeros(bins)
    if hi == lo:
        p[0] = 1.0
        return p
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    return np.bincount(idx, minlength=bins) / x.size


def node_entropy(p: np.ndarray, epsilon: float = 1e-8) -> float:
    """Shannon entropy in nats, ``-sum p log(p + epsilon)``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DataError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise DataError(f"probabilities sum to {p.sum()}, not 1")
    return float(-np.sum(p * np.log(p + epsilon)))


def abs_pearson(x: np.ndarray, y: np.ndarray, epsilon: float = 1e-8) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ShapeError("abs_pearson needs two equal-length series of length >= 2")
    xc = _centered(x)
    yc = _centered(y)
    num = np.dot(xc, yc)
    if num == 0.0:
        return 0.0
    den = np.sqrt(np.dot(xc, xc)) * np.sqrt(np.dot(yc, yc)) + epsilon
    return float(abs(num / den))


def _centered(values: np.ndarray) -> np.ndarray:
    # exact zeros for constant series; the mean of a constant is not always exact
    xc = values - values.mean(axis=-1, keepdims=True)
    constant = values.max(axis=-1) == values.min(axis=-1)
    return np.where(np.expand_dims(constant, -1), 0.0, xc)


def _abs_pearson_matrix(values: np.ndarray, epsilon: float) -> np.ndarray:
    xc = _centered(values)
    num = xc @ xc.T
    norms = np.sqrt(np.einsum("it,it->i", xc, xc))
    return np.abs(num / (np.outer(norms, norms) + epsilon))


def edge_scores(graph: TrafficGraph, values: np.ndarray, cfg: PruneConfig) -> EdgeScoreMatrix:
    """``s_ij = 1[A_ij > 0] * |r_ij| * (H_i + H_j) / 2`` for an N x T signal block."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != graph.n:
        raise ShapeError(f"signals shape {values.shape} does not match {graph.n} nodes")
    if values.shape[1] < 2:
        raise DataError("edge scoring needs at least 2 time steps")
    entropies = np.array(
        [node_entropy(bin_distribution(row, cfg.bins), cfg.epsilon) for row in values]
    )
    mask = graph.adjacency > 0
    r = _abs_pearson_matrix(values, cfg.epsilon)
    scores = np.where(mask, r * (entropies[:, None] + entropies[None, :]) / 2.0, 0.0)
    return EdgeScoreMatrix(scores, cfg.bins, cfg.epsilon, entropies)


def resolve_threshold(s: EdgeScoreMatrix, graph: TrafficGraph, cfg: PruneConfig) -> Optional[float]:
    """The score cut-off for absolute/quantile modes (``None`` for top-k)."""
    if cfg.threshold_mode == "absolute":
        return float(cfg.tau)
    if cfg.threshold_mode == "quantile":
        positive = s.scores[(graph.adjacency > 0) & (s.scores > 0)]
        if positive.size == 0:
            raise PruneDegenerateError("no positive edge scores to take a quantile of")
        return float(np.quantile(positive, cfg.quantile))
    return None


def threshold_adjacency(s: EdgeScoreMatrix, graph: TrafficGraph, cfg: PruneConfig) -> np.ndarray:
    """Binary kept-edge matrix; never contains an edge absent from the graph."""
    edges = graph.adjacency > 0
    if cfg.threshold_mode == "top_k":
        kept = np.zeros_like(edges)
        for i in range(graph.n):
            candidates = np.flatnonzero(edges[i])
            if candidates.size == 0:
                continue
            order = np.argsort(-s.scores[i, candidates], kind="stable")
            kept[i, candidates[order[: cfg.top_k]]] = True
        if graph.symmetric:
            kept |= kept.T
        return kept.astype(np.float64)
    tau = resolve_threshold(s, graph, cfg)
    return (edges & (s.scores >= tau)).astype(np.float64)


def outer_layer_nodes(a_tilde: np.ndarray, d_min: int) -> list[int]:
    """Nodes whose kept-edge degree is at most ``d_min``."""
    a_tilde = np.asarray(a_tilde)
    if a_tilde.ndim != 2 or a_tilde.shape[0] != a_tilde.shape[1]:
        raise ShapeError("expected a square matrix")
    degree = (a_tilde != 0).sum(axis=1)
    return [int(i) for i in np.flatnonzero(degree <= d_min)]


def peel(graph: TrafficGraph, values: np.ndarray, cfg: PruneConfig) -> PrunedContext:
    """Strip up to ``cfg.peel_layers`` outer rings from the graph.

    Each layer rescoring uses only the surviving nodes.  Peeling stops early
    when a layer finds no outer node, or at layer 2+ when removal would empty
    the graph (or no positive scores remain); at layer 1 those degenerate
    cases raise :class:`PruneDegenerateError`.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != graph.n:
        raise ShapeError(f"signals shape {values.shape} does not match {graph.n} nodes")
    current = list(range(graph.n))
    history: list[list[int]] = []
    thresholds: list[Optional[float]] = []
    kept_mask: Optional[np.ndarray] = None  # binary matrix over `current`
    scores: Optional[EdgeScoreMatrix] = None
    reason = "completed"
    for layer in range(1, cfg.peel_layers + 1):
        sub = graph.subgraph(current)
        s = edge_scores(sub, values[current], cfg)
        try:
            tau = resolve_threshold(s, sub, cfg)
            a_tilde = threshold_adjacency(s, sub, cfg)
        except PruneDegenerateError as exc:
            if layer == 1:
                raise PruneDegenerateError(f"layer {layer}: {exc}") from None
            reason = f"no positive scores at layer {layer}"
            break
        removed = outer_layer_nodes(a_tilde, cfg.d_min)
        if len(removed) == len(current):
            if layer == 1:
                raise PruneDegenerateError(f"layer {layer}: pruning would remove all nodes")
            log.warning("layer %d would remove every remaining node; stopping", layer)
            reason = f"removal would empty graph at layer {layer}"
            break
        scores = s
        if not removed:
            kept_mask = a_tilde
            reason = f"no outer-layer nodes at layer {layer}"
            break
        drop = set(removed)
        survivors = [j for j in range(len(current)) if j not in drop]
        kept_mask = a_tilde[np.ix_(survivors, survivors)]
        history.append([current[j] for j in removed])
        thresholds.append(tau)
        current = [current[j] for j in survivors]
    base = graph.adjacency[np.ix_(current, current)]
    pruned = base if kept_mask is None else base * kept_mask
    return PrunedContext(current, pruned, history, scores, thresholds, reason)


def normalize_adjacency(pruned: np.ndarray) -> np.ndarray:
    """Symmetric propagation operator ``D^-1/2 (A + I) D^-1/2`` with self-loops."""
    a = np.asarray(pruned, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("adjacency must be square")
    if np.any(a < 0):
        raise DataError("adjacency must be non-negative")
    a = a + np.eye(a.shape[0])
    d = a.sum(axis=1) ** -0.5
    return d[:, None] * a * d[None, :]
