"""Norm-based capacity audit of a trained forecaster.

Each linear stage is treated as ``<W, Phi(x)>`` with ``Phi`` the stacked
patch collection it reads.  The Rademacher bound of a stage is
``||W||_F * max_i ||Phi(x_i)||_F / sqrt(m)``; stages compose through the
product of their operator (spectral) norms.  All feature norms are
Frobenius norms.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .kernels import ConvFilter, causal_conv1d, causal_conv1d_backward, graph_conv, graph_conv_backward
from .model import STGCN

log = logging.getLogger(__name__)


def linear_rad_bound(weight_norm: float, feature_bound: float, m: int) -> float:
    """Rademacher bound ``Lambda * B / sqrt(m)`` of a norm-bounded linear class."""
    if m < 1:
        raise ValueError("sample size m must be >= 1")
    if weight_norm < 0 or feature_bound < 0:
        raise ValueError("norms must be non-negative")
    return weight_norm * feature_bound / math.sqrt(m)


def tcl_rad_bound(align_term: float, causal_term: float, m: int) -> float:
    """Bound for ``relu(align + causal)`` from the two ``Lambda * B`` products."""
    if m < 1:
        raise ValueError("sample size m must be >= 1")
    return (align_term + causal_term) / math.sqrt(m)


def lipschitz_network_bound(lipschitz: list[float], base_complexity: float) -> float:
    return float(np.prod(lipschitz)) * base_complexity if lipschitz else base_complexity


def generalization_gap_bound(rad: float, m: int, delta: float = 0.05) -> float:
    """``2 * rad + 3 * sqrt(log(2 / delta) / (2 m))``, holding w.p. ``1 - delta``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if m < 1:
        raise ValueError("sample size m must be >= 1")
    return 2.0 * rad + 3.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * m))


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    rmatvec: Callable[[np.ndarray], np.ndarray],
    shape: tuple[int, ...],
    iterations: int = 100,
    tol: float = 1e-8,
    seed: int = 0,
) -> tuple[float, bool]:
    """Largest singular value of a linear operator given it and its adjoint.

    Returns ``(sigma, converged)``; on non-convergence the last iterate is
    used and a warning is logged.
    """
    v = np.random.default_rng(seed).standard_normal(shape)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iterations):
        av = matvec(v)
        new_sigma = float(np.linalg.norm(av))
        if new_sigma == 0.0:
            return 0.0, True
        w = rmatvec(av)
        v = w / np.linalg.norm(w)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return float(np.linalg.norm(matvec(v))), True
        sigma = new_sigma
    log.warning("power iteration did not converge in %d iterations", iterations)
    return float(np.linalg.norm(matvec(v))), False


def _conv_operator(weight: np.ndarray, t_in: int):
    f = ConvFilter(weight, np.zeros(weight.shape[0]))
    shape = (weight.shape[1], 1, t_in)
    t_out = t_in - weight.shape[2] + 1

    def matvec(x):
        return causal_conv1d(x, f)

    def rmatvec(y):
        return causal_conv1d_backward(np.zeros(shape), f, y)[0]

    return matvec, rmatvec, shape, math.sqrt(t_out) * float(np.linalg.norm(weight))


def _graph_operator(weight: np.ndarray, a_hat: np.ndarray):
    shape = (weight.shape[0], a_hat.shape[0], 1)

    def matvec(x):
        return graph_conv(x, a_hat, weight)

    def rmatvec(y):
        return graph_conv_backward(np.zeros(shape), a_hat, weight, y)[0]

    return matvec, rmatvec, shape, float(np.linalg.norm(weight) * np.linalg.norm(a_hat))


def _dense_operator(weight: np.ndarray):
    # features (c,) -> outputs (j,)
    return (lambda x: x @ weight), (lambda y: weight @ y), (weight.shape[0],), float(np.linalg.norm(weight))


@dataclass
class LayerAudit:
    name: str
    weight_norm: float  # Lambda: Frobenius norm of the weight tensor
    feature_bound: float  # B: max_i ||Phi(x_i)||_F
    bound: float  # Lambda * B / sqrt(m)


@dataclass
class StageLipschitz:
    name: str
    lipschitz: float
    spectral_norms: dict[str, float]
    operator_frobenius: dict[str, float]
    converged: bool


@dataclass
class CapacityReport:
    m: int
    delta: float
    layers: list[LayerAudit]
    tcl_bounds: dict[str, float]
    stages: list[StageLipschitz]
    input_bound: float
    base_complexity: float
    network_bound: float
    layer_sum_bound: float
    gap_bound: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _patch_norms(h: np.ndarray, kernel: int) -> np.ndarray:
    """Per-sample Frobenius norm of all length-``kernel`` temporal patches of (B, C, N, T)."""
    t_out = h.shape[-1] - kernel + 1
    sq = h * h
    # each time index t appears in every patch that covers it
    cover = np.array([min(t, kernel - 1, t_out - 1, h.shape[-1] - 1 - t) + 1 for t in range(h.shape[-1])])
    return np.sqrt(np.einsum("bcnt,t->b", sq, cover.astype(np.float64)))


def _frob(h: np.ndarray) -> np.ndarray:
    flat = h.reshape(h.shape[0], -1)
    return np.sqrt(np.einsum("bi,bi->b", flat, flat))


def conv_rad_bound(model: STGCN, a_hat: np.ndarray, inputs: np.ndarray) -> list[LayerAudit]:
    """Per-layer ``Lambda * B / sqrt(m)`` over a sample of input windows."""
    inputs = np.asarray(inputs, dtype=np.float64)
    m = inputs.shape[0]
    if m < 1:
        raise ValueError("need at least one sample window")
    cache: list = []
    model.forward(inputs, a_hat, cache)
    p = model.params
    k = model.config.kernel_time
    features: list[tuple[str, np.ndarray]] = []
    for _, b, x, z1, h1, zg, hg, z2 in cache[:-1]:
        pre = f"block{b}"
        features += [
            (f"{pre}.tcl1.align", _frob(x[..., k - 1 :])),
            (f"{pre}.tcl1.causal", _patch_norms(x, k)),
            (f"{pre}.gcl", _frob(np.einsum("nm,bcmt->bcnt", a_hat, h1))),
            (f"{pre}.tcl2.align", _frob(hg[..., k - 1 :])),
            (f"{pre}.tcl2.causal", _patch_norms(hg, k)),
        ]
    _, xh, _, feat = cache[-1]
    features += [("head.conv", _frob(xh)), ("head.out", _frob(feat))]
    audits = []
    for name, norms in features:
        lam = float(np.linalg.norm(p[name + ".weight"]))
        b_phi = float(norms.max())
        audits.append(LayerAudit(name, lam, b_phi, linear_rad_bound(lam, b_phi, m)))
    return audits


def stage_lipschitz(model: STGCN, a_hat: np.ndarray, iterations: int = 100, tol: float = 1e-8) -> list[StageLipschitz]:
    """Operator-norm Lipschitz constants of every stage (TCLs, GCLs, head)."""
    p = model.params
    cfg = model.config
    k = cfg.kernel_time
    t = cfg.history
    stages = []

    def spectral(op):
        matvec, rmatvec, shape, frob = op
        sigma, ok = power_iteration(matvec, rmatvec, shape, iterations, tol)
        return sigma, frob, ok

    for b in range(len(cfg.blocks)):
        pre = f"block{b}"
        for tcl in ("tcl1", "tcl2"):
            if tcl == "tcl2":
                sg, fg, okg = spectral(_graph_operator(p[f"{pre}.gcl.weight"], a_hat))
                stages.append(StageLipschitz(f"{pre}.gcl", sg, {"gcl": sg}, {"gcl": fg}, okg))
            sa, fa, oka = spectral(_conv_operator(p[f"{pre}.{tcl}.align.weight"], t - k + 1))
            sc, fc, okc = spectral(_conv_operator(p[f"{pre}.{tcl}.causal.weight"], t))
            stages.append(StageLipschitz(
                f"{pre}.{tcl}", sa + sc, {"align": sa, "causal": sc},
                {"align": fa, "causal": fc}, oka and okc,
            ))
            t -= k - 1
    sh, fh, okh = spectral(_conv_operator(p["head.conv.weight"], t))
    stages.append(StageLipschitz("head.conv", sh, {"conv": sh}, {"conv": fh}, okh))
    so, fo, oko = spectral(_dense_operator(p["head.out.weight"]))
    stages.append(StageLipschitz("head.out", so, {"linear": so}, {"linear": fo}, oko))
    return stages


def audit(model: STGCN, a_hat: np.ndarray, inputs: np.ndarray, delta: float = 0.05) -> CapacityReport:
    inputs = np.asarray(inputs, dtype=np.float64)
    m = inputs.shape[0]
    layers = conv_rad_bound(model, a_hat, inputs)
    by_name = {la.name: la for la in layers}
    tcl_bounds = {}
    for b in range(len(model.config.blocks)):
        for tcl in ("tcl1", "tcl2"):
            a = by_name[f"block{b}.{tcl}.align"]
            c = by_name[f"block{b}.{tcl}.causal"]
            tcl_bounds[f"block{b}.{tcl}"] = tcl_rad_bound(
                a.weight_norm * a.feature_bound, c.weight_norm * c.feature_bound, m
            )
    stages = stage_lipschitz(model, a_hat)
    x = inputs if inputs.ndim == 4 else inputs[:, None]
    input_bound = float(_frob(x).max())
    base = linear_rad_bound(1.0, input_bound, m)
    network = lipschitz_network_bound([s.lipschitz for s in stages], base)
    return CapacityReport(
        m=m,
        delta=delta,
        layers=layers,
        tcl_bounds=tcl_bounds,
        stages=stages,
        input_bound=input_bound,
        base_complexity=base,
        network_bound=network,
        layer_sum_bound=sum(la.bound for la in layers),
        gap_bound=generalization_gap_bound(network, m, delta),
        metadata={
            "weight_norm": "frobenius",
            "feature_norm": "frobenius",
            "bias_terms": "excluded",
            "gcl_patch_operator": "a_hat folded into features",
        },
    )


def total_weight_norm(model: STGCN) -> float:
    """Frobenius norm over every weight tensor (biases excluded)."""
    return float(math.sqrt(sum(
        float(np.sum(v * v)) for k, v in model.params.items() if k.endswith(".weight")
    )))


def write_layer_csv(report: CapacityReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("layer,lambda,feature_bound,bound\n")
        for la in report.layers:
            fh.write(f"{la.name},{la.weight_norm!r},{la.feature_bound!r},{la.bound!r}\n")
