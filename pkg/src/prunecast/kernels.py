"""Dense float64 primitives with hand-written gradients.

Every tensor is laid out as ``(..., channels, nodes, time)``; the leading
axes are an optional batch.  All functions are pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TrainingError


class ConvFilter(NamedTuple):
    """Temporal filter: ``weight`` is (c_out, c_in, kernel_time), ``bias`` is (c_out,)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_time(self) -> int:
        return self.weight.shape[2]


def _check_filter(x: np.ndarray, f: ConvFilter) -> None:
    if f.weight.ndim != 3 or f.bias.shape != (f.weight.shape[0],):
        raise ShapeError(f"bad filter shapes {f.weight.shape} / {f.bias.shape}")
    if f.kernel_time < 1:
        raise ShapeError("kernel_time must be >= 1")
    if x.ndim < 3:
        raise ShapeError(f"expected (..., channels, nodes, time), got {x.shape}")
    if x.shape[-3] != f.c_in:
        raise ShapeError(f"input has {x.shape[-3]} channels, filter expects {f.c_in}")
    if x.shape[-1] < f.kernel_time:
        raise ShapeError(
            f"series of length {x.shape[-1]} shorter than kernel {f.kernel_time}"
        )


def causal_conv1d(x: np.ndarray, f: ConvFilter) -> np.ndarray:
    """Valid temporal convolution applied independently at every node.

    ``out[o, n, t] = bias[o] + sum_{i,k} weight[o, i, k] * x[i, n, t + k]``;
    the time axis shrinks by ``kernel_time - 1``.
    """
    _check_filter(x, f)
    patches = sliding_window_view(x, f.kernel_time, axis=-1)  # (..., C, N, T', K)
    out = np.einsum("...intk,oik->...ont", patches, f.weight, optimize=True)
    return out + f.bias[:, None, None]


def causal_conv1d_backward(
    x: np.ndarray, f: ConvFilter, grad_out: np.ndarray
) -> tuple[np.ndarray, ConvFilter]:
    """Gradients of ``sum(grad_out * causal_conv1d(x, f))`` w.r.t. ``x`` and ``f``."""
    _check_filter(x, f)
    k = f.kernel_time
    t_out = x.shape[-1] - k + 1
    expected = x.shape[:-3] + (f.c_out, x.shape[-2], t_out)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    patches = sliding_window_view(x, k, axis=-1)
    grad_w = np.einsum("...ont,...intk->oik", grad_out, patches, optimize=True)
    grad_b = grad_out.sum(axis=tuple(range(grad_out.ndim - 3)) + (-2, -1))
    grad_x = np.zeros_like(x)
    for j in range(k):
        grad_x[..., j : j + t_out] += np.einsum(
            "...ont,oi->...int", grad_out, f.weight[:, :, j], optimize=True
        )
    return grad_x, ConvFilter(grad_w, grad_b)


def _check_graph(x: np.ndarray, a_hat: np.ndarray, w: np.ndarray) -> None:
    if x.ndim < 3:
        raise ShapeError(f"expected (..., channels, nodes, time), got {x.shape}")
    n = x.shape[-2]
    if a_hat.shape != (n, n):
        raise ShapeError(f"a_hat shape {a_hat.shape} does not match {n} nodes")
    if w.ndim != 2 or w.shape[0] != x.shape[-3]:
        raise ShapeError(f"channel map {w.shape} does not match {x.shape[-3]} channels")


def graph_conv(x: np.ndarray, a_hat: np.ndarray, w: np.ndarray) -> np.ndarray:
    """First-order graph convolution.

    ``out[o, n, t] = sum_{i, m} w[i, o] * a_hat[n, m] * x[i, m, t]``; ``w`` is
    (c_in, c_out) and the time axis is untouched.
    """
    _check_graph(x, a_hat, w)
    return np.einsum("io,nm,...imt->...ont", w, a_hat, x, optimize=True)


def graph_conv_backward(
    x: np.ndarray, a_hat: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``x`` and ``w``; ``a_hat`` is a constant."""
    _check_graph(x, a_hat, w)
    expected = x.shape[:-3] + (w.shape[1],) + x.shape[-2:]
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    grad_x = np.einsum("io,nm,...ont->...imt", w, a_hat, grad_out, optimize=True)
    grad_w = np.einsum("nm,...imt,...ont->io", a_hat, x, grad_out, optimize=True)
    return grad_x, grad_w


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with L2 folded into the gradient (``g += wd * p``).

    Returns new parameter and state objects; the inputs are left untouched.
    Moments for parameters seen for the first time start at zero.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    step = state.step_count + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_params: dict[str, np.ndarray] = {}
    m_new: dict[str, np.ndarray] = {}
    v_new: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = np.zeros_like(p) if m is None else m
        v = np.zeros_like(p) if v is None else v
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_new[name], v_new[name] = m, v
        new_params[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_opt)
    new_state = AdamState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps_opt=state.eps_opt,
        weight_decay=state.weight_decay,
        step_count=step,
        first_moment=m_new,
        second_moment=v_new,
    )
    return new_params, new_state
