"""Synthetic road networks with a known core/boundary split.

Core nodes relax towards a shared daily drive plus slowly varying local
congestion; boundary nodes relax towards independent white noise standing
in for traffic from unmodelled regions.  Both diffuse over the graph:

    x(t+1) = (1 - alpha) * u(t) + alpha * RowNorm(A) x(t)

and observations are ``level + scale * x``.
"""
from __future__ import annotations

import csv
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .data import SignalMatrix
from .errors import DataError
from .graph import TrafficGraph
from .model import ModelConfig, TrainConfig
from .pruning import PruneConfig
from .transfer import TransferConfig, finetune, pretrain

log = logging.getLogger(__name__)

CORE, BOUNDARY = "core", "boundary"


@dataclass
class SynthConfig:
    n_core: int = 30
    n_boundary: int = 10
    p_core: float = 0.4
    attach_degree: int = 2
    alpha: float = 0.3
    period: int = 288
    drive_amplitude: float = 1.0
    phase: float = 0.0
    boundary_amplitude: float = 3.0
    core_noise: float = 0.2
    core_noise_ar: float = 0.95
    level: float = 50.0
    scale: float = 10.0
    steps: int = 2000
    burn_in: int = 100
    sampling_interval_minutes: float = 5.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_core < 1 or self.n_boundary < 0 or self.steps < 1:
            raise ValueError("need n_core >= 1, n_boundary >= 0, steps >= 1")
        if not 0 < self.p_core <= 1:
            raise ValueError("p_core must lie in (0, 1]")
        if self.n_boundary and self.attach_degree < 1:
            raise ValueError("attach_degree must be >= 1")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")


def gen_network(cfg: SynthConfig, max_attempts: int = 100) -> tuple[TrafficGraph, list[str]]:
    """Random connected core plus boundary nodes hanging off it."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_core + cfg.n_boundary
    for _ in range(max_attempts):
        upper = np.triu(rng.random((cfg.n_core, cfg.n_core)) < cfg.p_core, k=1)
        core = (upper | upper.T).astype(np.float64)
        if cfg.n_core == 1 or connected_components(core, directed=False)[0] == 1:
            break
    else:
        raise DataError(f"no connected core graph within {max_attempts} attempts")
    adj = np.zeros((n, n))
    adj[: cfg.n_core, : cfg.n_core] = core
    degree = min(cfg.attach_degree, cfg.n_core)
    for b in range(cfg.n_core, n):
        anchors = rng.choice(cfg.n_core, size=degree, replace=False)
        adj[b, anchors] = adj[anchors, b] = 1.0
    ids = [f"s{i:03d}" for i in range(n)]
    labels = [CORE] * cfg.n_core + [BOUNDARY] * cfg.n_boundary
    return TrafficGraph(adj, ids), labels


def gen_signals(graph: TrafficGraph, labels: Sequence[str], cfg: SynthConfig) -> SignalMatrix:
    rng = np.random.default_rng([cfg.seed, 1])
    a = graph.adjacency
    rows = a.sum(axis=1, keepdims=True)
    p = np.divide(a, rows, out=np.zeros_like(a), where=rows > 0)
    core = np.array([lab == CORE for lab in labels])
    n, total = graph.n, cfg.steps + cfg.burn_in
    x = np.zeros(n)
    local = np.zeros(n)
    out = np.empty((n, cfg.steps))
    for step in range(total):
        t = step - cfg.burn_in
        drive = cfg.drive_amplitude * np.sin(2 * np.pi * t / cfg.period + cfg.phase)
        local = cfg.core_noise_ar * local + cfg.core_noise * rng.standard_normal(n)
        external = cfg.boundary_amplitude * rng.standard_normal(n)
        u = np.where(core, drive + local, external)
        x = (1 - cfg.alpha) * u + cfg.alpha * (p @ x)
        if t >= 0:
            out[:, t] = x
    return SignalMatrix(cfg.level + cfg.scale * out, graph.node_ids, cfg.sampling_interval_minutes)


def generate(cfg: SynthConfig) -> tuple[TrafficGraph, SignalMatrix, list[str]]:
    graph, labels = gen_network(cfg)
    return graph, gen_signals(graph, labels, cfg), labels


def write_labels(graph: TrafficGraph, labels: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "label"])
        writer.writerows(zip(graph.node_ids, labels))


def recovery_counts(all_ids: Sequence[str], labels: Sequence[str], kept: Sequence[str]) -> dict:
    """Fractions of boundary and core nodes removed by pruning."""
    kept_set = set(kept)
    removed = {lab: 0 for lab in (CORE, BOUNDARY)}
    total = {lab: 0 for lab in (CORE, BOUNDARY)}
    for nid, lab in zip(all_ids, labels):
        total[lab] += 1
        removed[lab] += nid not in kept_set
    return {
        "boundary_removed": removed[BOUNDARY] / total[BOUNDARY] if total[BOUNDARY] else 0.0,
        "core_removed": removed[CORE] / total[CORE] if total[CORE] else 0.0,
    }


def default_target_config() -> SynthConfig:
    """A smaller network with its own topology and a shifted daily profile."""
    return SynthConfig(n_core=24, n_boundary=8, drive_amplitude=1.3, phase=0.6, seed=500)


@dataclass
class BenchConfig:
    source: SynthConfig = field(default_factory=SynthConfig)
    target: SynthConfig = field(default_factory=default_target_config)
    ratios: tuple[float, ...] = (0.05, 0.10, 0.15, 0.25)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=30, patience=5))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=40, patience=5))
    prune: PruneConfig = field(default_factory=PruneConfig)
    horizon_minutes: float = 15.0


def _run_cell(bench: BenchConfig, seed: int, pruned: bool) -> list[dict]:
    src_cfg = replace(bench.source, seed=bench.source.seed + seed)
    tgt_cfg = replace(bench.target, seed=bench.target.seed + seed)
    src_graph, src_signals, src_labels = generate(src_cfg)
    tgt_graph, tgt_signals, tgt_labels = generate(tgt_cfg)
    prune_cfg = bench.prune if pruned else None
    source = pretrain(
        src_graph, src_signals, bench.model, replace(bench.pretrain, seed=seed),
        prune_cfg, bench.horizon_minutes,
    )
    variant = "pruned" if pruned else "unpruned"
    rows = []
    for ratio in bench.ratios:
        cfg = TransferConfig(ts_ratio=ratio, train=replace(bench.finetune, seed=seed), prune=pruned)
        run, report = finetune(source.checkpoint, tgt_graph, tgt_signals, cfg)
        label_of = dict(zip(tgt_graph.node_ids, tgt_labels))
        core_mae = [
            node["mae"]
            for nid, node in zip(run.domain.kept_ids, run.evaluation.per_node)
            if label_of[nid] == CORE
        ]
        rows.append({
            "ratio": ratio,
            "seed": seed,
            "variant": variant,
            "mae": report["mae"],
            "mape": report["mape"],
            "rmse": report["rmse"],
            "mae_core": float(np.mean(core_mae)) if core_mae else float("nan"),
            "ha_mae": report["ha_mae"],
            "kept_nodes": report["kept_nodes"],
            "source_test_mae": source.evaluation.metrics["mae"],
            **recovery_counts(tgt_graph.node_ids, tgt_labels, run.domain.kept_ids),
        })
    log.info("bench cell seed=%d %s done", seed, variant)
    return rows


def transfer_benchmark(bench: BenchConfig, n_jobs: int = 1) -> list[dict]:
    """Run every (seed, variant) cell; rows sorted by (ratio, seed, variant)."""
    cells = [(seed, pruned) for seed in bench.seeds for pruned in (True, False)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_cell, [bench] * len(cells), *zip(*cells)))
    else:
        results = [_run_cell(bench, seed, pruned) for seed, pruned in cells]
    rows = [row for cell in results for row in cell]
    return sorted(rows, key=lambda r: (r["ratio"], r["seed"], r["variant"]))


SUMMARY_FIELDS = ("mae", "mape", "rmse", "mae_core", "ha_mae", "boundary_removed", "core_removed")


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean and sample std per (ratio, variant)."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["ratio"], row["variant"]), []).append(row)
    out = []
    for (ratio, variant), members in sorted(groups.items()):
        entry: dict = {"ratio": ratio, "variant": variant, "n_seeds": len(members)}
        for key in SUMMARY_FIELDS:
            values = [m[key] for m in members]
            entry[f"{key}_mean"] = statistics.fmean(values)
            entry[f"{key}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
        out.append(entry)
    return out


def write_table(rows: Sequence[dict], path) -> None:
    if not rows:
        raise DataError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def bench_config_json(bench: BenchConfig) -> dict:
    return asdict(bench)
