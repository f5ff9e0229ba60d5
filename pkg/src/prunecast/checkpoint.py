"""Checkpoint file: one JSON header line, then little-endian float64 parameters.

The header's ``manifest`` lists every parameter's name, shape and offset (in
float64 elements) into the binary section, in storage order.  Headers are
written with sorted keys and no timestamps so identical runs produce
identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import NormStats
from .errors import DataError
from .graph import TrafficGraph
from .model import STGCN, ModelConfig, TrainConfig, parameter_shapes
from .pruning import PruneConfig

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: STGCN
    norm_stats: NormStats
    graph: TrafficGraph  # the (pruned) graph the model was fitted on
    sampling_interval_minutes: float
    horizon_minutes: float
    train_config: Optional[TrainConfig] = None
    prune_config: Optional[PruneConfig] = None
    extra: dict = field(default_factory=dict)

    @property
    def kept_nodes(self) -> list[str]:
        return self.graph.node_ids


def _edges(adjacency: np.ndarray) -> list[list]:
    rows, cols = np.nonzero(adjacency)
    return [[int(i), int(j), float(adjacency[i, j])] for i, j in zip(rows, cols)]


def encode(ckpt: Checkpoint) -> bytes:
    manifest = []
    offset = 0
    for name, p in ckpt.model.params.items():
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model.config.to_json(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_json(),
        "prune_config": None if ckpt.prune_config is None else ckpt.prune_config.to_json(),
        "normalization": {"node_ids": ckpt.graph.node_ids, **ckpt.norm_stats.to_json()},
        "kept_nodes": ckpt.graph.node_ids,
        "graph": {"n": ckpt.graph.n, "edges": _edges(ckpt.graph.adjacency)},
        "sampling_interval_minutes": ckpt.sampling_interval_minutes,
        "horizon_minutes": ckpt.horizon_minutes,
        "model_seed": ckpt.model.seed,
        "extra": ckpt.extra,
        "manifest": manifest,
        "param_count": offset,
        "byte_order": "little",
        "dtype": "float64",
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    flat = np.concatenate([p.ravel() for p in ckpt.model.params.values()]).astype("<f8")
    return line.encode("utf-8") + b"\n" + flat.tobytes()


def decode(blob: bytes) -> Checkpoint:
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise DataError("checkpoint has no header terminator")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if flat.size != header["param_count"]:
        raise DataError(f"checkpoint holds {flat.size} floats, header declares {header['param_count']}")
    config = ModelConfig.from_json(header["model_config"])
    expected = parameter_shapes(config)
    params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        if expected.get(entry["name"]) != shape:
            raise DataError(f"manifest entry {entry['name']} {shape} does not match the model config")
        size = int(np.prod(shape))
        params[entry["name"]] = flat[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
    missing = [name for name in expected if name not in params]
    if missing:
        raise DataError(f"checkpoint manifest lacks parameter {missing[0]}")
    params = {name: params[name] for name in expected}
    ids = header["kept_nodes"]
    adjacency = np.zeros((header["graph"]["n"],) * 2)
    for i, j, w in header["graph"]["edges"]:
        adjacency[i, j] = w
    norm = header["normalization"]
    return Checkpoint(
        model=STGCN(config, params, header.get("model_seed", 42)),
        norm_stats=NormStats.from_json(norm),
        graph=TrafficGraph(adjacency, ids),
        sampling_interval_minutes=header["sampling_interval_minutes"],
        horizon_minutes=header["horizon_minutes"],
        train_config=None if header["train_config"] is None else TrainConfig(**header["train_config"]),
        prune_config=None if header["prune_config"] is None else PruneConfig(**header["prune_config"]),
        extra=header.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return decode(blob)
