"""STGCN forecaster in plain numpy with exact gradients.

The network is a stack of ST-Conv blocks (TCL -> GCL -> TCL) followed by a
head that collapses the remaining time steps and maps channels to the
forecast horizon.  A TCL is ``relu(align(x) + causal_conv(x))`` where the
1x1 align path is cropped to the causal output length.  No weight has a
node-indexed axis, so the same parameters run on graphs of any size.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import WindowedDataset
from .errors import ShapeError, TrainingError
from .kernels import (
    AdamState,
    ConvFilter,
    adam_step,
    causal_conv1d,
    causal_conv1d_backward,
    graph_conv,
    graph_conv_backward,
)

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    blocks: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(1, 8, 8), (8, 8, 8)]
    )
    kernel_time: int = 3
    history: int = 12
    horizon: int = 3
    head_channels: int = 8
    n_nodes: int = 0  # informational only

    def __post_init__(self) -> None:
        self.blocks = [tuple(int(c) for c in b) for b in self.blocks]
        if not self.blocks:
            raise ShapeError("need at least one ST-Conv block")
        if any(len(b) != 3 or min(b) < 1 for b in self.blocks):
            raise ShapeError(f"blocks must be positive (c_in, c_hidden, c_out) triples: {self.blocks}")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev[2] != nxt[0]:
                raise ShapeError(f"block output {prev[2]} channels feed a block expecting {nxt[0]}")
        if self.kernel_time < 1 or self.horizon < 1 or self.head_channels < 1:
            raise ShapeError("kernel_time, horizon and head_channels must be >= 1")
        if self.remaining_time < 1:
            raise ShapeError(
                f"history {self.history} is exhausted by {len(self.blocks)} blocks "
                f"with kernel {self.kernel_time}"
            )

    @property
    def in_channels(self) -> int:
        return self.blocks[0][0]

    @property
    def remaining_time(self) -> int:
        """Time steps left after every block, consumed by the head."""
        return self.history - 2 * len(self.blocks) * (self.kernel_time - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**{**obj, "blocks": [tuple(b) for b in obj["blocks"]]})


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 200
    patience: int = 10
    seed: int = 42

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape manifest; also fixes the checkpoint layout."""
    k = cfg.kernel_time
    shapes: dict[str, tuple[int, ...]] = {}
    for b, (ci, ch, co) in enumerate(cfg.blocks):
        p = f"block{b}"
        shapes[f"{p}.tcl1.causal.weight"] = (ch, ci, k)
        shapes[f"{p}.tcl1.causal.bias"] = (ch,)
        shapes[f"{p}.tcl1.align.weight"] = (ch, ci, 1)
        shapes[f"{p}.tcl1.align.bias"] = (ch,)
        shapes[f"{p}.gcl.weight"] = (ch, ch)
        shapes[f"{p}.tcl2.causal.weight"] = (co, ch, k)
        shapes[f"{p}.tcl2.causal.bias"] = (co,)
        shapes[f"{p}.tcl2.align.weight"] = (co, ch, 1)
        shapes[f"{p}.tcl2.align.bias"] = (co,)
    shapes["head.conv.weight"] = (cfg.head_channels, cfg.blocks[-1][2], cfg.remaining_time)
    shapes["head.conv.bias"] = (cfg.head_channels,)
    shapes["head.out.weight"] = (cfg.head_channels, cfg.horizon)
    shapes["head.out.bias"] = (cfg.horizon,)
    return shapes


def _xavier_bounds(shape: tuple[int, ...]) -> float:
    if len(shape) == 3:
        fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape[0], shape[1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: ModelConfig, seed: int = 42) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = _xavier_bounds(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _filter(params: dict[str, np.ndarray], prefix: str) -> ConvFilter:
    return ConvFilter(params[prefix + ".weight"], params[prefix + ".bias"])


def tcl_forward(x: np.ndarray, causal: ConvFilter, align: ConvFilter) -> np.ndarray:
    return np.maximum(_tcl_pre(x, causal, align), 0.0)


def _tcl_pre(x: np.ndarray, causal: ConvFilter, align: ConvFilter) -> np.ndarray:
    if align.kernel_time != 1:
        raise ShapeError("align filter must have kernel_time 1")
    if align.c_out != causal.c_out or align.c_in != causal.c_in:
        raise ShapeError("align and causal filters must map the same channels")
    crop = causal.kernel_time - 1
    return causal_conv1d(x[..., crop:], align) + causal_conv1d(x, causal)


def _tcl_backward(x, causal, align, pre, grad_out):
    crop = causal.kernel_time - 1
    g = grad_out * (pre > 0)
    grad_x, g_causal = causal_conv1d_backward(x, causal, g)
    grad_xa, g_align = causal_conv1d_backward(x[..., crop:], align, g)
    grad_x[..., crop:] += grad_xa
    return grad_x, g_causal, g_align


def st_conv_block(
    x: np.ndarray, params: dict[str, np.ndarray], a_hat: np.ndarray, block: int = 0
) -> np.ndarray:
    """TCL -> ReLU(GCL) -> TCL for block number ``block``."""
    p = f"block{block}"
    k = params[f"{p}.tcl1.causal.weight"].shape[2]
    if x.shape[-1] - 2 * (k - 1) < 1:
        raise ShapeError(f"block {block}: time dimension {x.shape[-1]} exhausted by kernel {k}")
    h = tcl_forward(x, _filter(params, f"{p}.tcl1.causal"), _filter(params, f"{p}.tcl1.align"))
    h = np.maximum(graph_conv(h, a_hat, params[f"{p}.gcl.weight"]), 0.0)
    return tcl_forward(h, _filter(params, f"{p}.tcl2.causal"), _filter(params, f"{p}.tcl2.align"))


class STGCN:
    """Parameters plus forward/backward passes over batches ``(B, C, N, H)``."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 42):
        self.config = config
        self.seed = seed
        self.params = init_params(config, seed) if params is None else dict(params)
        shapes = parameter_shapes(config)
        if list(self.params) != list(shapes):
            missing = set(shapes) ^ set(self.params)
            raise ShapeError(f"parameter names do not match the configuration: {sorted(missing)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "STGCN":
        return STGCN(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def _as_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:  # (W, N, H) single-feature windows
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[-1] != self.config.history:
            raise ShapeError(
                f"expected windows (B, {self.config.in_channels}, N, {self.config.history}), got {x.shape}"
            )
        return x

    def forward(self, x: np.ndarray, a_hat: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Predictions ``(B, N, horizon)``; fills ``cache`` for :meth:`backward`."""
        x = self._as_batch(x)
        p = self.params
        for b in range(len(self.config.blocks)):
            pre = f"block{b}"
            c1, a1 = _filter(p, f"{pre}.tcl1.causal"), _filter(p, f"{pre}.tcl1.align")
            z1 = _tcl_pre(x, c1, a1)
            h1 = np.maximum(z1, 0.0)
            zg = graph_conv(h1, a_hat, p[f"{pre}.gcl.weight"])
            hg = np.maximum(zg, 0.0)
            c2, a2 = _filter(p, f"{pre}.tcl2.causal"), _filter(p, f"{pre}.tcl2.align")
            z2 = _tcl_pre(hg, c2, a2)
            if cache is not None:
                cache.append(("block", b, x, z1, h1, zg, hg, z2))
            x = np.maximum(z2, 0.0)
        hc = _filter(p, "head.conv")
        zh = causal_conv1d(x, hc)  # (B, Ch, N, 1)
        feat = np.maximum(zh[..., 0], 0.0)  # (B, Ch, N)
        pred = np.einsum("bcn,cj->bnj", feat, p["head.out.weight"]) + p["head.out.bias"]
        if cache is not None:
            cache.append(("head", x, zh, feat))
        return pred

    def backward(self, cache: list, a_hat: np.ndarray, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads: dict[str, np.ndarray] = {}
        _, x, zh, feat = cache[-1]
        grads["head.out.weight"] = np.einsum("bcn,bnj->cj", feat, grad_pred)
        grads["head.out.bias"] = grad_pred.sum(axis=(0, 1))
        g_feat = np.einsum("bnj,cj->bcn", grad_pred, p["head.out.weight"])
        g_zh = (g_feat * (zh[..., 0] > 0))[..., None]
        g, gf = causal_conv1d_backward(x, _filter(p, "head.conv"), g_zh)
        grads["head.conv.weight"], grads["head.conv.bias"] = gf.weight, gf.bias
        for _, b, xb, z1, h1, zg, hg, z2 in reversed(cache[:-1]):
            pre = f"block{b}"
            g, gc, ga = _tcl_backward(
                hg, _filter(p, f"{pre}.tcl2.causal"), _filter(p, f"{pre}.tcl2.align"), z2, g
            )
            grads[f"{pre}.tcl2.causal.weight"], grads[f"{pre}.tcl2.causal.bias"] = gc
            grads[f"{pre}.tcl2.align.weight"], grads[f"{pre}.tcl2.align.bias"] = ga
            g, grads[f"{pre}.gcl.weight"] = graph_conv_backward(
                h1, a_hat, p[f"{pre}.gcl.weight"], g * (zg > 0)
            )
            g, gc, ga = _tcl_backward(
                xb, _filter(p, f"{pre}.tcl1.causal"), _filter(p, f"{pre}.tcl1.align"), z1, g
            )
            grads[f"{pre}.tcl1.causal.weight"], grads[f"{pre}.tcl1.causal.bias"] = gc
            grads[f"{pre}.tcl1.align.weight"], grads[f"{pre}.tcl1.align.bias"] = ga
        return {name: grads[name] for name in p}

    def loss_and_grad(
        self, x: np.ndarray, y: np.ndarray, a_hat: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error over every node, step and window, with its gradient."""
        cache: list = []
        pred = self.forward(x, a_hat, cache)
        diff = pred - y
        loss = float(np.mean(diff * diff))
        return loss, self.backward(cache, a_hat, 2.0 * diff / diff.size)

    def predict(self, inputs: np.ndarray, a_hat: np.ndarray, batch_size: int = 256) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        out = [
            self.forward(inputs[i : i + batch_size], a_hat)
            for i in range(0, inputs.shape[0], batch_size)
        ]
        return np.concatenate(out, axis=0)

    def mse(self, data: WindowedDataset, a_hat: np.ndarray, batch_size: int = 256) -> float:
        diff = self.predict(data.inputs, a_hat, batch_size) - data.targets
        return float(np.mean(diff * diff))


def model_forward(window: np.ndarray, params: dict[str, np.ndarray], a_hat: np.ndarray,
                  config: ModelConfig) -> np.ndarray:
    """Forecast for a single ``(C, N, H)`` window, returned as ``(N, horizon)``."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3:
        raise ShapeError(f"expected a (C, N, H) window, got {window.shape}")
    return STGCN(config, params).forward(window[None], a_hat)[0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(
    model: STGCN,
    train_data: WindowedDataset,
    val_data: WindowedDataset,
    a_hat: np.ndarray,
    cfg: TrainConfig,
) -> tuple[STGCN, list[EpochRecord]]:
    """Adam on batch MSE with seeded shuffling and early stopping.

    Returns a copy of the model holding the best validation-loss parameters,
    and the per-epoch loss history.  ``model`` itself is not modified.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    work = model.copy()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = work.copy()
    best_val = np.inf
    since_best = 0
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for bi, idx in enumerate(_batches(len(train_data), cfg.batch_size, rng)):
            loss, grads = work.loss_and_grad(train_data.inputs[idx], train_data.targets[idx], a_hat)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {bi}")
            try:
                work.params, state = adam_step(work.params, grads, state)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {bi}: {exc}") from None
            total += loss * len(idx)
        train_loss = total / len(train_data)
        val_loss = work.mse(val_data, a_hat)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochRecord(epoch, train_loss, val_loss))
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best = work.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best val %.6f)", epoch, best_val)
                break
    return best, history


def write_loss_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r}\n")
