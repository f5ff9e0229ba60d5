"""Source pretraining, target budgets, fine-tuning and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import metrics
from .checkpoint import Checkpoint
from .data import (
    NormStats,
    SignalMatrix,
    WindowedDataset,
    apply_zscore,
    chronological_split,
    fit_zscore,
    horizon_steps,
    reduct,
    window_count,
    windows_from_range,
)
from .errors import TransferError
from .graph import TrafficGraph
from .model import STGCN, EpochRecord, ModelConfig, TrainConfig, train
from .pruning import PruneConfig, PrunedContext, normalize_adjacency, peel

log = logging.getLogger(__name__)

BUDGET_RATIOS = (0.05, 0.10, 0.15, 0.20, 0.25)


@dataclass
class Domain:
    """One network after pruning, normalisation and windowing."""

    graph: TrafficGraph
    signals: SignalMatrix  # kept nodes, original units
    stats: NormStats
    a_hat: np.ndarray
    windows: dict[str, WindowedDataset]
    fit_rows: range  # rows read for pruning and normalisation
    pruning: Optional[PrunedContext] = None
    original_graph: Optional[TrafficGraph] = None

    @property
    def kept_ids(self) -> list[str]:
        return self.graph.node_ids


def prepare_domain(
    graph: TrafficGraph,
    signals: SignalMatrix,
    history: int,
    horizon_minutes: float,
    prune_cfg: Optional[PruneConfig],
    ts_ratio: float = 1.0,
) -> Domain:
    """Prune on training rows, z-score, and cut train/val/test windows.

    With ``ts_ratio < 1`` only the chronologically first ``ceil(ratio * W)``
    training windows are kept, and pruning and normalisation read only the
    rows those windows cover.  Validation and test windows are untouched.
    """
    if list(graph.node_ids) != list(signals.node_ids):
        signals = signals.select(graph.node_ids)
    horizon = horizon_steps(horizon_minutes, signals.sampling_interval_minutes)
    train_r, val_r, test_r = chronological_split(signals.n_steps, history + horizon)
    n_windows = window_count(len(train_r), history, horizon)
    budget = subset_count(n_windows, ts_ratio)
    fit_rows = range(train_r.start, train_r.start + budget - 1 + history + horizon)

    ctx = None
    if prune_cfg is not None:
        ctx = peel(graph, signals.values[:, fit_rows.start : fit_rows.stop], prune_cfg)
        kept_ids = [graph.node_ids[i] for i in ctx.kept_nodes]
        kept_graph = TrafficGraph(ctx.pruned_adjacency, kept_ids)
    else:
        kept_graph = graph
    kept = signals.select(kept_graph.node_ids)
    stats = fit_zscore(kept.values[:, fit_rows.start : fit_rows.stop])
    norm = apply_zscore(kept.values, stats)
    windows = {
        "train": windows_from_range(norm, train_r, history, horizon, "train").take(budget),
        "val": windows_from_range(norm, val_r, history, horizon, "val"),
        "test": windows_from_range(norm, test_r, history, horizon, "test"),
    }
    return Domain(
        kept_graph, kept, stats, normalize_adjacency(kept_graph.adjacency),
        windows, fit_rows, ctx, graph,
    )


def subset_count(n_windows: int, ratio: float) -> int:
    check_ratio(ratio)
    count = min(n_windows, math.ceil(ratio * n_windows - 1e-9))
    if count < 1:
        raise TransferError(f"T/S ratio {ratio} leaves no training windows out of {n_windows}")
    return count


def check_ratio(ratio: float) -> None:
    if not 0 < ratio <= 1:
        raise ValueError(f"T/S ratio must lie in (0, 1], got {ratio}")


def subset_target(train_windows: WindowedDataset, ts_ratio: float) -> WindowedDataset:
    """The chronologically first ``ceil(ratio * count)`` training windows."""
    return train_windows.take(subset_count(len(train_windows), ts_ratio))


@dataclass
class Evaluation:
    metrics: dict[str, float]
    baseline: dict[str, float]
    per_node: list[dict[str, float]]
    predictions: np.ndarray  # (W, N, T_out), original units
    truth: np.ndarray

    def report(self) -> dict:
        return {
            **self.metrics,
            "ha_mae": self.baseline["mae"],
            "ha_mape": self.baseline["mape"],
            "ha_rmse": self.baseline["rmse"],
        }


def _to_original(pred_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.moveaxis(reduct(np.moveaxis(pred_norm, 1, 0), stats), 0, 1)


def evaluate(model: STGCN, domain: Domain, split: str = "test") -> Evaluation:
    """Score ``model`` on a split in original units, alongside the HA baseline."""
    data = domain.windows[split]
    pred = _to_original(model.predict(data.inputs, domain.a_hat), domain.stats)
    h, t_out = data.history, data.horizon
    idx = data.starts[:, None] + h + np.arange(t_out)[None, :]
    truth = np.moveaxis(domain.signals.values[:, idx], 0, 1)
    fit = domain.fit_rows
    ha = metrics.historical_average_baseline(
        domain.signals.values[:, fit.start : fit.stop], fit.start, data.starts + h, t_out,
        domain.signals.sampling_interval_minutes,
    )
    return Evaluation(
        metrics.all_metrics(pred, truth),
        metrics.all_metrics(ha, truth),
        metrics.per_node_metrics(pred, truth),
        pred,
        truth,
    )


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    domain: Domain
    evaluation: Evaluation


def fit_domain(
    model: STGCN, domain: Domain, train_cfg: TrainConfig, horizon_minutes: float,
    prune_cfg: Optional[PruneConfig], extra: Optional[dict] = None,
) -> RunResult:
    best, history = train(model, domain.windows["train"], domain.windows["val"], domain.a_hat, train_cfg)
    ckpt = Checkpoint(
        model=best,
        norm_stats=domain.stats,
        graph=domain.graph,
        sampling_interval_minutes=domain.signals.sampling_interval_minutes,
        horizon_minutes=horizon_minutes,
        train_config=train_cfg,
        prune_config=prune_cfg,
        extra=extra or {},
    )
    return RunResult(ckpt, history, domain, evaluate(best, domain))


def pretrain(
    graph: TrafficGraph,
    signals: SignalMatrix,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    prune_cfg: Optional[PruneConfig],
    horizon_minutes: float,
) -> RunResult:
    """Prune (unless ``prune_cfg`` is None), window, and train from scratch."""
    domain = prepare_domain(graph, signals, model_cfg.history, horizon_minutes, prune_cfg)
    model = STGCN(replace(model_cfg, n_nodes=domain.graph.n), seed=train_cfg.seed)
    return fit_domain(model, domain, train_cfg, horizon_minutes, prune_cfg, {"stage": "pretrain"})


@dataclass
class TransferConfig:
    ts_ratio: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: bool = True
    prune_config: Optional[PruneConfig] = None  # defaults to the source checkpoint's

    def __post_init__(self) -> None:
        check_ratio(self.ts_ratio)


def finetune(
    source: Checkpoint, graph: TrafficGraph, signals: SignalMatrix, cfg: TransferConfig
) -> tuple[RunResult, dict]:
    """Adapt a pretrained checkpoint to a target network.

    The target is pruned with the same configuration as the source (unless
    disabled), normalised on its budget rows, and every parameter is
    fine-tuned.  Returns the run and a JSON-ready report.
    """
    model_cfg = source.model.config
    try:
        target_horizon = horizon_steps(source.horizon_minutes, signals.sampling_interval_minutes)
    except Exception as exc:
        raise TransferError(str(exc)) from None
    if target_horizon != model_cfg.horizon:
        raise TransferError(
            f"target horizon is {target_horizon} steps at {signals.sampling_interval_minutes} min "
            f"sampling; checkpoint head outputs {model_cfg.horizon}"
        )
    prune_cfg = None
    if cfg.prune:
        prune_cfg = cfg.prune_config or source.prune_config or PruneConfig()
    domain = prepare_domain(
        graph, signals, model_cfg.history, source.horizon_minutes, prune_cfg, cfg.ts_ratio
    )
    model = STGCN(replace(model_cfg, n_nodes=domain.graph.n), source.model.params, source.model.seed)
    run = fit_domain(
        model, domain, cfg.train, source.horizon_minutes, prune_cfg,
        {"stage": "finetune", "ts_ratio": cfg.ts_ratio},
    )
    report = {
        "ratio": cfg.ts_ratio,
        **run.evaluation.metrics,
        "horizon_minutes": source.horizon_minutes,
        "pruned": prune_cfg is not None,
        "kept_nodes": domain.graph.n,
        "train_windows": len(domain.windows["train"]),
        "ha_mae": run.evaluation.baseline["mae"],
    }
    return run, report
