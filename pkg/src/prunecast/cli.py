"""Command-line entry point: ``prunecast <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Logs go to stderr; results go only to the files named by flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import audit as audit_mod
from . import synth
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    SignalMatrix,
    apply_zscore,
    chronological_split,
    horizon_steps,
    load_adjacency,
    load_signals,
    save_adjacency,
    save_signals,
    windows_from_range,
)
from .errors import DataError, NumericalError, PrunecastError, ShapeError, TransferError
from .graph import TrafficGraph
from .model import ModelConfig, TrainConfig, write_loss_history
from .pruning import THRESHOLD_MODES, PruneConfig, peel
from .transfer import Domain, TransferConfig, evaluate, finetune, pretrain

log = logging.getLogger("prunecast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FORMATS = """\
file formats:
  signals CSV     header row of node ids, then one row of readings per time step
  adjacency CSV   N x N numeric grid (optionally preceded by a header row of node
                  ids), or an edge list with header `src,dst,weight`
  checkpoint      one JSON header line, then little-endian float64 parameters
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _prune_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pruning")
    g.add_argument("--bins", type=int, default=16)
    g.add_argument("--epsilon", type=float, default=1e-8)
    g.add_argument("--threshold-mode", choices=THRESHOLD_MODES, default="quantile")
    g.add_argument("--tau", type=float, default=0.0, help="absolute score threshold")
    g.add_argument("--quantile", type=float, default=0.5)
    g.add_argument("--top-k", type=int, default=2)
    g.add_argument("--d-min", type=int, default=1)
    g.add_argument("--layers", type=int, default=1, help="outer rings to peel")


def _prune_config(args) -> PruneConfig:
    return PruneConfig(
        bins=args.bins, epsilon=args.epsilon, threshold_mode=args.threshold_mode, tau=args.tau,
        quantile=args.quantile, top_k=args.top_k, d_min=args.d_min, peel_layers=args.layers,
    )


def _data_flags(p: argparse.ArgumentParser, adj_required: bool = True) -> None:
    p.add_argument("--signals", required=True, help="signals CSV")
    p.add_argument("--adj", required=adj_required, help="adjacency CSV")
    p.add_argument("--interval", type=float, default=5.0, help="sampling interval in minutes")


def _train_flags(p: argparse.ArgumentParser, epochs: int = 200) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--weight-decay", type=float, default=5e-4)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--loss-csv", help="write epoch,train_loss,val_loss here")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
        max_epochs=args.epochs, patience=args.patience, seed=args.seed,
    )


def _load_pair(args) -> tuple[TrafficGraph, SignalMatrix]:
    signals = load_signals(args.signals, args.interval)
    graph = load_adjacency(args.adj, signals.node_ids)
    return graph, signals.select(graph.node_ids)


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        n_core=args.n_core, n_boundary=args.n_boundary, steps=args.steps,
        boundary_amplitude=args.boundary_amplitude, alpha=args.alpha, period=args.period,
        sampling_interval_minutes=args.interval, seed=args.seed,
    )
    graph, signals, labels = synth.generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_adjacency(graph, out / "adjacency.csv")
    save_signals(signals, out / "signals.csv")
    synth.write_labels(graph, labels, out / "labels.csv")
    log.info("wrote %d-node synthetic network to %s", graph.n, out)
    return EXIT_OK


def cmd_prune(args) -> int:
    graph, signals = _load_pair(args)
    train_r, _, _ = chronological_split(signals.n_steps)
    cfg = _prune_config(args)
    ctx = peel(graph, signals.values[:, train_r.start : train_r.stop], cfg)
    kept = graph.subgraph(ctx.kept_nodes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_adjacency(TrafficGraph(ctx.pruned_adjacency, kept.node_ids), out / "pruned_adjacency.csv")
    (out / "kept_nodes.txt").write_text("".join(f"{i}\n" for i in kept.node_ids))
    _write_json(ctx.report(graph, cfg), out / "prune_report.json")
    log.info("kept %d of %d nodes", kept.n, graph.n)
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    horizon = horizon_steps(args.horizon_minutes, args.interval)
    c = args.channels
    blocks = [(1, c, c)] + [(c, c, c)] * (args.blocks - 1)
    return ModelConfig(
        blocks=blocks, kernel_time=args.kernel_time, history=args.history,
        horizon=horizon, head_channels=c,
    )


def cmd_train(args) -> int:
    graph, signals = _load_pair(args)
    prune_cfg = _prune_config(args) if args.prune else None
    run = pretrain(graph, signals, _model_config(args), _train_config(args), prune_cfg, args.horizon_minutes)
    save_checkpoint(run.checkpoint, args.out)
    if args.loss_csv:
        write_loss_history(run.history, args.loss_csv)
    if args.report:
        _write_json({**run.evaluation.report(), "horizon_minutes": args.horizon_minutes,
                     "kept_nodes": run.domain.graph.n, "epochs": len(run.history)}, args.report)
    log.info("test MAE %.4f (HA %.4f)", run.evaluation.metrics["mae"], run.evaluation.baseline["mae"])
    return EXIT_OK


def cmd_finetune(args) -> int:
    if not 0 < args.ts_ratio <= 1:
        raise UsageError(f"--ts-ratio must lie in (0, 1], got {args.ts_ratio}")
    source = load_checkpoint(args.source_ckpt)
    graph, signals = _load_pair(args)
    cfg = TransferConfig(ts_ratio=args.ts_ratio, train=_train_config(args), prune=not args.no_prune)
    run, report = finetune(source, graph, signals, cfg)
    save_checkpoint(run.checkpoint, args.out)
    if args.loss_csv:
        write_loss_history(run.history, args.loss_csv)
    _write_json(report, args.report)
    log.info("target test MAE %.4f at T/S %.2f", report["mae"], args.ts_ratio)
    return EXIT_OK


def _domain_from_checkpoint(ckpt, signals: SignalMatrix, graph: Optional[TrafficGraph]) -> Domain:
    from .pruning import normalize_adjacency

    graph = graph or ckpt.graph
    if graph.node_ids != ckpt.kept_nodes:
        raise DataError("adjacency nodes differ from the checkpoint's kept nodes")
    kept = signals.select(graph.node_ids)
    cfg = ckpt.model.config
    horizon = horizon_steps(ckpt.horizon_minutes, kept.sampling_interval_minutes)
    if horizon != cfg.horizon:
        raise DataError(f"sampling interval gives a {horizon}-step horizon; model predicts {cfg.horizon}")
    splits = chronological_split(kept.n_steps, cfg.history + horizon)
    norm = apply_zscore(kept.values, ckpt.norm_stats)
    windows = {
        name: windows_from_range(norm, r, cfg.history, horizon, name)
        for name, r in zip(("train", "val", "test"), splits)
    }
    return Domain(graph, kept, ckpt.norm_stats, normalize_adjacency(graph.adjacency), windows, splits[0])


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    signals = load_signals(args.signals, args.interval)
    graph = load_adjacency(args.adj, signals.node_ids) if args.adj else None
    domain = _domain_from_checkpoint(ckpt, signals, graph)
    ev = evaluate(ckpt.model, domain)
    _write_json({**ev.report(), "horizon_minutes": ckpt.horizon_minutes,
                 "n_nodes": domain.graph.n, "n_windows": len(domain.windows["test"])}, args.out)
    if args.per_node_csv:
        with open(args.per_node_csv, "w") as fh:
            fh.write("node_id,mae,mape,rmse\n")
            for nid, row in zip(domain.kept_ids, ev.per_node):
                fh.write(f"{nid},{row['mae']!r},{row['mape']!r},{row['rmse']!r}\n")
    log.info("test MAE %.4f (HA %.4f)", ev.metrics["mae"], ev.baseline["mae"])
    return EXIT_OK


def cmd_audit(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    signals = load_signals(args.data, args.interval)
    domain = _domain_from_checkpoint(ckpt, signals, None)
    inputs = domain.windows["train"].inputs
    if args.m is not None:
        if args.m < 1:
            raise UsageError("--m must be >= 1")
        inputs = inputs[: args.m]
    report = audit_mod.audit(ckpt.model, domain.a_hat, inputs, args.delta)
    _write_json(report.to_json(), args.out)
    if args.csv:
        audit_mod.write_layer_csv(report, args.csv)
    log.info("gap bound %.4g at m=%d", report.gap_bound, report.m)
    return EXIT_OK


def cmd_bench(args) -> int:
    bench = synth.BenchConfig(
        ratios=tuple(args.ratios),
        seeds=tuple(range(args.seeds)),
        pretrain=TrainConfig(max_epochs=args.pretrain_epochs, patience=5),
        finetune=TrainConfig(max_epochs=args.finetune_epochs, patience=5),
    )
    for r in bench.ratios:
        if not 0 < r <= 1:
            raise UsageError(f"ratios must lie in (0, 1], got {r}")
    rows = synth.transfer_benchmark(bench, n_jobs=args.jobs)
    synth.write_table(synth.summarize(rows), args.out)
    if args.raw_out:
        synth.write_table(rows, args.raw_out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--config", help="key = value file; explicit flags win")
    common.add_argument("--log-level", default="INFO")

    parser = _Parser(prog="prunecast", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=FORMATS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=FORMATS,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("synth", "write a synthetic core/boundary network")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-core", type=int, default=30)
    p.add_argument("--n-boundary", type=int, default=10)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--boundary-amplitude", type=float, default=3.0)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--period", type=int, default=288)
    p.add_argument("--interval", type=float, default=5.0)
    p.set_defaults(func=cmd_synth)

    p = add("prune", "score edges and peel outer-layer nodes")
    _data_flags(p)
    _prune_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_prune)

    def model_flags(p):
        g = p.add_argument_group("model")
        g.add_argument("--history", type=int, default=12)
        g.add_argument("--horizon-minutes", type=float, default=15.0)
        g.add_argument("--blocks", type=int, default=2)
        g.add_argument("--channels", type=int, default=8)
        g.add_argument("--kernel-time", type=int, default=3)

    p = add("train", "train a forecaster (optionally pruning first)")
    _data_flags(p)
    model_flags(p)
    _train_flags(p)
    _prune_flags(p)
    p.add_argument("--prune", action="store_true", help="apply graph pruning before training")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="write test-split metrics JSON here")
    p.set_defaults(func=cmd_train)

    p = add("finetune", "adapt a pretrained checkpoint to a target network")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--ts-ratio", type=float, required=True,
                   help="fraction of target training windows used, in (0, 1]")
    p.add_argument("--no-prune", action="store_true", help="skip target pruning (ablation)")
    p.add_argument("--out", required=True, help="fine-tuned checkpoint path")
    p.add_argument("--report", required=True, help="JSON report path")
    p.set_defaults(func=cmd_finetune)

    p = add("eval", "score a checkpoint on the test split")
    _data_flags(p, adj_required=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--per-node-csv")
    p.set_defaults(func=cmd_eval)

    p = add("audit", "capacity audit of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="signals CSV providing the sample")
    p.add_argument("--interval", type=float, default=5.0)
    p.add_argument("--m", type=int, help="sample size (default: all training windows)")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="per-layer lambda,B,bound CSV")
    p.set_defaults(func=cmd_audit)

    p = add("bench", "synthetic source->target transfer benchmark")
    p.add_argument("--out", required=True, help="summary CSV path")
    p.add_argument("--raw-out", help="per-run CSV path")
    p.add_argument("--ratios", type=float, nargs="+", default=[0.05, 0.10, 0.15, 0.25])
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (0..n-1)")
    p.add_argument("--pretrain-epochs", type=int, default=30)
    p.add_argument("--finetune-epochs", type=int, default=40)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[sections]`` are ignored."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip().strip('"').strip("'")
    return values


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in read_config_file(args.config).items():
            action = actions.get(key)
            if action is None or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if action.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("+", "*"):
                defaults[key] = [action.type(v) if action.type else v for v in raw.replace(",", " ").split()]
            else:
                defaults[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except ValueError as exc:
        print(f"prunecast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prunecast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ShapeError, TransferError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (PrunecastError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
