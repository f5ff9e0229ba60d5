"""CSV ingestion, chronological splits, z-scoring, and windowing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError, SplitError
from .graph import TrafficGraph

SPLIT_RATIOS = (0.7, 0.15, 0.15)
STD_FLOOR = 1e-8


@dataclass
class SignalMatrix:
    """N x T node series plus sampling metadata."""

    values: np.ndarray
    node_ids: list[str]
    sampling_interval_minutes: float = 5.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.node_ids = [str(i) for i in self.node_ids]
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DataError(f"signal matrix must be N x T with N, T >= 1, got {self.values.shape}")
        if len(self.node_ids) != self.values.shape[0]:
            raise DataError(
                f"{len(self.node_ids)} node ids for {self.values.shape[0]} signal rows"
            )
        if len(set(self.node_ids)) != len(self.node_ids):
            raise DataError("duplicate node ids in signal matrix")
        if not np.all(np.isfinite(self.values)):
            raise DataError("signal matrix contains non-finite values")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def select(self, ids: Sequence[str]) -> "SignalMatrix":
        """Rows for ``ids`` in the given order."""
        index = {nid: i for i, nid in enumerate(self.node_ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise DataError(f"unknown node id {missing[0]!r} (not in signals header)")
        rows = [index[i] for i in ids]
        return SignalMatrix(self.values[rows], list(ids), self.sampling_interval_minutes)

    def columns(self, start: int, stop: int) -> "SignalMatrix":
        return SignalMatrix(
            self.values[:, start:stop], self.node_ids, self.sampling_interval_minutes
        )


def _parse_float(cell: str, path: Path, line: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}:{line}: non-numeric cell {cell!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite cell {cell!r}")
    return value


def _read_rows(path: Path) -> list[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        return [
            (line, [c.strip() for c in row])
            for line, row in enumerate(csv.reader(fh), start=1)
            if row and any(c.strip() for c in row)
        ]


def load_signals(path, sampling_interval_minutes: float = 5.0) -> SignalMatrix:
    """Read a signals CSV: a header of node ids, then one row per time step."""
    path = Path(path)
    rows = _read_rows(path)
    if len(rows) < 2:
        raise DataError(f"{path}: need a header row and at least one time step")
    _, header = rows[0]
    values = []
    for line, row in rows[1:]:
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: ragged row ({len(row)} cells, header has {len(header)})")
        values.append([_parse_float(c, path, line) for c in row])
    return SignalMatrix(np.array(values).T, header, sampling_interval_minutes)


def save_signals(signals: SignalMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(signals.node_ids)
        for row in signals.values.T:
            writer.writerow([repr(float(v)) for v in row])


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_adjacency(path, node_ids: Sequence[str] | None = None) -> TrafficGraph:
    """Read an adjacency CSV.

    Three layouts are accepted:

    * an edge list whose first row is ``src,dst,weight``; ``node_ids`` (usually
      the signals header) fixes the node order and is required;
    * an N x N numeric grid preceded by a header row of node ids;
    * a bare N x N numeric grid, taken in ``node_ids`` order.

    When both a header and ``node_ids`` are given, the graph is reordered to
    ``node_ids`` order restricted to the header's ids; header ids absent from
    ``node_ids`` are an error.
    """
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise DataError(f"{path}: empty adjacency file")
    first_line, first = rows[0]
    if [c.lower() for c in first] == ["src", "dst", "weight"]:
        if node_ids is None:
            raise DataError(f"{path}: edge-list adjacency needs node ids from the signals header")
        ids = [str(i) for i in node_ids]
        index = {nid: i for i, nid in enumerate(ids)}
        adj = np.zeros((len(ids), len(ids)))
        for line, row in rows[1:]:
            if len(row) != 3:
                raise DataError(f"{path}:{line}: edge rows need 3 cells, got {len(row)}")
            src, dst = row[0], row[1]
            for nid in (src, dst):
                if nid not in index:
                    raise DataError(f"{path}:{line}: unknown node id {nid!r}")
            adj[index[src], index[dst]] = _parse_float(row[2], path, line)
        np.fill_diagonal(adj, 0.0)
        return TrafficGraph(adj, ids)

    if all(_is_number(c) for c in first):
        header = None
        body = rows
    else:
        header = first
        body = rows[1:]
    n = len(body)
    grid = np.zeros((n, n))
    for r, (line, row) in enumerate(body):
        if len(row) != n:
            raise DataError(f"{path}:{line}: ragged row ({len(row)} cells, expected {n})")
        grid[r] = [_parse_float(c, path, line) for c in row]
    if header is None:
        if node_ids is None:
            ids = [str(i) for i in range(n)]
        else:
            ids = [str(i) for i in node_ids]
            if len(ids) != n:
                raise DataError(f"{path}: {n}x{n} grid but {len(ids)} node ids")
        return TrafficGraph(grid, ids)
    if len(header) != n:
        raise DataError(f"{path}:{first_line}: header has {len(header)} ids for a {n}x{n} grid")
    graph = TrafficGraph(grid, header)
    if node_ids is None:
        return graph
    known = set(str(i) for i in node_ids)
    for nid in header:
        if nid not in known:
            raise DataError(f"{path}: unknown node id {nid!r} (not in signals header)")
    order = [str(i) for i in node_ids if str(i) in set(header)]
    return graph.subgraph([header.index(i) for i in order])


def save_adjacency(graph: TrafficGraph, path) -> None:
    """Write the headered-grid layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(graph.node_ids)
        for row in graph.adjacency:
            writer.writerow([repr(float(v)) for v in row])


def chronological_split(n_steps: int, min_length: int = 0) -> tuple[range, range, range]:
    """Contiguous 70/15/15 train/val/test index ranges.

    Train and val lengths are ``floor(ratio * T + 0.5)``; test takes the rest.
    """
    if n_steps < 10:
        raise SplitError(f"need at least 10 time steps to split, got {n_steps}")
    n_train = math.floor(SPLIT_RATIOS[0] * n_steps + 0.5)
    n_val = math.floor(SPLIT_RATIOS[1] * n_steps + 0.5)
    n_test = n_steps - n_train - n_val
    splits = (
        range(0, n_train),
        range(n_train, n_train + n_val),
        range(n_train + n_val, n_steps),
    )
    for name, r in zip(("train", "val", "test"), splits):
        if len(r) < min_length:
            raise SplitError(
                f"{name} split has {len(r)} steps, fewer than history + horizon = {min_length}"
            )
    return splits


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("mean and std must be vectors of equal length")
        if np.any(self.std < 0):
            raise DataError("standard deviations must be non-negative")

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64))


def fit_zscore(train_values: np.ndarray) -> NormStats:
    """Per-node mean and population std of an N x T training block."""
    train_values = np.asarray(train_values, dtype=np.float64)
    return NormStats(train_values.mean(axis=1), train_values.std(axis=1))


def _check_stats(x: np.ndarray, stats: NormStats) -> None:
    if x.shape[0] != stats.mean.shape[0]:
        raise ShapeError(f"{x.shape[0]} nodes but statistics for {stats.mean.shape[0]}")


def _scale(stats: NormStats) -> np.ndarray:
    return np.maximum(stats.std, STD_FLOOR)


def apply_zscore(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalise an array whose first axis is the node axis."""
    x = np.asarray(x, dtype=np.float64)
    _check_stats(x, stats)
    shape = (-1,) + (1,) * (x.ndim - 1)
    return (x - stats.mean.reshape(shape)) / _scale(stats).reshape(shape)


def reduct(y_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`apply_zscore` (the first axis is the node axis)."""
    y_norm = np.asarray(y_norm, dtype=np.float64)
    _check_stats(y_norm, stats)
    shape = (-1,) + (1,) * (y_norm.ndim - 1)
    return y_norm * _scale(stats).reshape(shape) + stats.mean.reshape(shape)


def horizon_steps(horizon_minutes: float, sampling_interval_minutes: float) -> int:
    steps = horizon_minutes / sampling_interval_minutes
    if steps < 1 or abs(steps - round(steps)) > 1e-9:
        raise DataError(
            f"horizon of {horizon_minutes} min is not a positive multiple of "
            f"the {sampling_interval_minutes} min sampling interval"
        )
    return int(round(steps))


@dataclass
class WindowedDataset:
    """Input/target window pairs cut from one split.

    ``inputs`` is (W, N, H), ``targets`` is (W, N, T_out) and ``starts`` holds
    each window's first time index in the full series.
    """

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    split: str
    history: int = field(default=0)
    horizon: int = field(default=0)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, count: int) -> "WindowedDataset":
        return WindowedDataset(
            self.inputs[:count], self.targets[:count], self.starts[:count],
            self.split, self.history, self.horizon,
        )


def window_count(split_length: int, history: int, horizon: int) -> int:
    return split_length - history - horizon + 1


def windows_from_range(
    values: np.ndarray, r: range, history: int, horizon: int, split: str
) -> WindowedDataset:
    count = window_count(len(r), history, horizon)
    if count < 1:
        raise SplitError(
            f"{split} split of {len(r)} steps cannot hold history {history} + horizon {horizon}"
        )
    block = values[:, r.start : r.stop]
    span = sliding_windows(block, history + horizon)  # (W, N, H + T_out)
    return WindowedDataset(
        np.ascontiguousarray(span[:, :, :history]),
        np.ascontiguousarray(span[:, :, history:]),
        np.arange(r.start, r.start + count),
        split,
        history,
        horizon,
    )


def sliding_windows(block: np.ndarray, width: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(block, width, axis=1)
    return np.moveaxis(view, 1, 0)


def make_windows(
    signals: SignalMatrix, history: int, horizon_minutes: float
) -> dict[str, WindowedDataset]:
    """Train/val/test windows of an already-normalised signal matrix.

    Windows never straddle a split boundary.
    """
    horizon = horizon_steps(horizon_minutes, signals.sampling_interval_minutes)
    splits = chronological_split(signals.n_steps, history + horizon)
    return {
        name: windows_from_range(signals.values, r, history, horizon, name)
        for name, r in zip(("train", "val", "test"), splits)
    }
