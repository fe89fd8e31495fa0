"""Numerical checks of the synaptic-saliency conservation laws.

Identity skip connections are treated as fixed unit-weight edges.  Their
saliency ``<dR/du, s>`` (``u`` the sum, ``s`` the skipped activation) is
counted on both sides of a neuron and in every layer cut they cross.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ForwardTrace, GradientSet, backward, forward, loss_and_grad
from .netgraph import Mask, ParamSet, StructureError, ones_mask
from .scoring import ScoreMap, absolute, param_saliency, sum_objective

TOLERANCE = 1e-8


class UnsupportedConfiguration(StructureError):
    """The network contains a layer the conservation laws do not cover."""


def relative_residual(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


@dataclass
class ConservationReport:
    units: list[tuple[int, int, float, float, float]] = field(default_factory=list)  # layer, unit, S_in, S_out, rel
    cuts: list[tuple[int, float, float, float]] = field(default_factory=list)  # layer, total, <dR/dy,y>, input side
    tolerance: float = TOLERANCE

    @property
    def max_residual(self) -> float:
        rel = [u[4] for u in self.units]
        for _, total, out_side, in_side in self.cuts:
            rel += [relative_residual(total, out_side), relative_residual(total, in_side)]
        return max(rel, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tolerance

    UNIT_COLUMNS = ("layer", "unit", "s_in", "s_out", "relative_residual")
    CUT_COLUMNS = ("layer", "cut_total", "output_side", "input_side")

    def unit_rows(self) -> list[tuple]:
        return list(self.units)

    def cut_rows(self) -> list[tuple]:
        return list(self.cuts)


def _evaluate(params: ParamSet, mask: Mask | None, objective, x: np.ndarray | None, mode: str):
    """Run the objective and return the parameters actually differentiated, the trace and the gradients."""
    if mode == "train" and any(l.kind == "batchnorm" for l in params.spec.layers):
        raise UnsupportedConfiguration("train-mode batch-norm is not homogeneous; use bn_saliency_zero")
    mask = mask if mask is not None else ones_mask(params)
    if objective == "synflow":
        params = absolute(params)
        x = np.ones((1, *params.spec.input_shape))
        objective = sum_objective
    elif objective in (None, "sum"):
        objective = sum_objective
    if x is None:
        raise ValueError("an input batch is required for this objective")
    # saliency is taken on the masked parameters
    eff = params.copy()
    for i, m in mask.items():
        eff.tensors[i]["weight"] = eff.tensors[i]["weight"] * m
    trace = forward(eff, mask, x, mode)
    grads = backward(trace, eff, objective(trace.output))
    return eff, trace, grads


def _skip_saliency(trace: ForwardTrace, grads: GradientSet, add_layer: int, per_channel: bool = True):
    src = trace.params.spec.layers[add_layer].skip_from
    prod = grads.act_grads[add_layer + 1] * trace.acts[src]
    return _channel_sums(prod) if per_channel else float(prod.sum())


def _channel_sums(t: np.ndarray) -> np.ndarray:
    return t.sum(axis=tuple(a for a in range(t.ndim) if a != 1))


def _incoming(sal: dict, layer, i: int) -> np.ndarray:
    """Per output unit: saliency of the parameters that produce it."""
    s = sal[i]
    if layer.kind == "batchnorm":
        return s["gamma"] + s["beta"]
    w = s["weight"].reshape(s["weight"].shape[0], -1).sum(axis=1)
    return w + s["bias"] if "bias" in s else w


def check_neuron_conservation(params: ParamSet, mask: Mask | None = None, objective="sum",
                              x: np.ndarray | None = None, mode: str = "eval") -> ConservationReport:
    """Compare incoming and outgoing saliency of every hidden unit.

    A unit is one output feature of a dense layer or one output channel of
    a conv / batch-norm layer (summed over positions).  ``objective`` is
    ``"sum"`` (R = <1, y>), ``"synflow"`` (R_SF on the absolute network with
    an all-ones input) or a callable mapping the output to dR/dy.
    """
    spec = params.spec
    eff, trace, grads = _evaluate(params, mask, objective, x, mode)
    sal = param_saliency(eff, grads)
    layers = spec.layers
    report = ConservationReport()
    for i, layer in enumerate(layers):
        if not layer.parametric:
            continue
        s_in = _incoming(sal, layer, i)
        point = i + 1
        if point < len(layers) and layers[point].kind == "add":
            s_in = s_in + _skip_saliency(trace, grads, point)
            point += 1
        s_out = _outgoing(spec, trace, grads, sal, point, s_in.size)
        if s_out is None:
            continue  # output units
        for c in range(s_in.size):
            report.units.append((i, c, float(s_in[c]), float(s_out[c]), relative_residual(s_in[c], s_out[c])))
    return report


def _outgoing(spec, trace, grads, sal, point: int, units: int):
    """Saliency leaving each unit that lives at activation ``point``; ``None`` if nothing consumes it."""
    layers = spec.layers
    out = np.zeros(units)
    flat_from = None  # (C, H, W) when a flatten separates the unit from its consumer
    j = point
    skip_sources = {}
    for a, layer in enumerate(layers):
        if layer.kind == "add":
            skip_sources.setdefault(layer.skip_from, []).append(a)
    while True:
        for a in skip_sources.get(j, []):
            prod = grads.act_grads[a + 1] * trace.acts[j]
            out += _unit_sums(prod, flat_from, units)
        if j == len(layers):
            return None
        layer = layers[j]
        if layer.kind in ("relu", "maxpool"):
            j += 1
            continue
        if layer.kind == "flatten":
            flat_from = layer.in_shape
            j += 1
            continue
        if layer.kind == "add":
            raise UnsupportedConfiguration(f"layer {j}: residual add must directly follow a parametric layer")
        s = sal[j]
        if layer.kind == "batchnorm":
            if flat_from is not None:
                raise UnsupportedConfiguration(f"layer {j}: batch-norm after flatten")
            return out + s["gamma"]
        w = s["weight"]
        if layer.kind == "conv2d":
            return out + w.sum(axis=(0, 2, 3))
        cols = w.sum(axis=0)  # dense: one column per input feature
        if flat_from is not None:
            cols = cols.reshape(flat_from).sum(axis=(1, 2)) if len(flat_from) == 3 else cols
        return out + cols


def _unit_sums(prod: np.ndarray, flat_from, units: int) -> np.ndarray:
    if prod.ndim == 2 and flat_from is not None and len(flat_from) == 3:
        prod = prod.reshape(prod.shape[0], *flat_from)
    return _channel_sums(prod)[:units]


def check_network_conservation(params: ParamSet, mask: Mask | None = None, objective="sum",
                               x: np.ndarray | None = None, mode: str = "eval") -> ConservationReport:
    """Total saliency of every layer-aligned cut against <dR/dy, y> and the input side.

    A cut at parametric layer ``l`` holds that layer's weights (gamma for
    batch-norm), every bias of layers ``>= l`` and the skip edges jumping
    over ``l``.  The input side is ``<dR/dx, x>`` plus the saliency of all
    biases, which are edges from constant units on the input side.
    """
    spec = params.spec
    eff, trace, grads = _evaluate(params, mask, objective, x, mode)
    sal = param_saliency(eff, grads)
    layers = spec.layers
    bias_terms = {}
    for i, layer in enumerate(layers):
        if layer.kind == "batchnorm":
            bias_terms[i] = float(sal[i]["beta"].sum())
        elif layer.parametric and "bias" in sal[i]:
            bias_terms[i] = float(sal[i]["bias"].sum())
    skips = {a: _skip_saliency(trace, grads, a, per_channel=False) for a, l in enumerate(layers) if l.kind == "add"}
    output_side = float(np.sum(grads.output_grad * trace.output))
    input_side = float(np.sum(grads.input_grad * trace.input)) + sum(bias_terms.values())
    report = ConservationReport()
    for l, layer in enumerate(layers):
        if not layer.parametric:
            continue
        total = float(sal[l]["gamma"].sum() if layer.kind == "batchnorm" else sal[l]["weight"].sum())
        total += sum(v for i, v in bias_terms.items() if i >= l)
        total += sum(v for a, v in skips.items() if layers[a].skip_from <= l < a)
        report.cuts.append((l, total, output_side, input_side))
    return report


# ---------------------------------------------------------------------------


@dataclass
class LayerLawRow:
    method: str
    layer: int
    size: int
    total: float
    average: float

    @property
    def inverse_size(self) -> float:
        return 1.0 / self.size

    @property
    def average_times_size(self) -> float:
        return self.average * self.size


LAW_COLUMNS = ("method", "layer", "size", "average_score", "inverse_size", "average_times_size")


def layer_score_size_law(scores_by_method: dict[str, ScoreMap]) -> list[LayerLawRow]:
    """Per method and layer: average score over surviving weights against the layer size."""
    rows = []
    for method, scores in scores_by_method.items():
        for i in scores.layers:
            present = scores.present(i)
            avg = float(present.mean()) if present.size else 0.0
            rows.append(LayerLawRow(method, i, int(present.size), float(present.sum()), avg))
    return rows


def inverse_law_spread(rows: list[LayerLawRow]) -> float:
    """Largest relative deviation of ``average * size`` from its first-layer value."""
    if not rows:
        return 0.0
    ref = rows[0].average_times_size
    return max(relative_residual(r.average_times_size, ref) for r in rows)


# ---------------------------------------------------------------------------


class DivergenceError(FloatingPointError):
    """Training loss became non-finite."""


@dataclass
class FlowConservationTrace:
    lr: float
    record_every: int
    steps: list[int]
    sq_norms: dict[int, list[float]]  # layer -> ||W||_F^2 over recorded steps
    losses: list[float]

    def differences(self, reference: int | None = None) -> dict[int, np.ndarray]:
        """``||W_l||^2 - ||W_ref||^2`` over time for every other layer."""
        layers = sorted(self.sq_norms)
        ref = layers[0] if reference is None else reference
        base = np.asarray(self.sq_norms[ref])
        return {l: np.asarray(self.sq_norms[l]) - base for l in layers if l != ref}

    def drift(self) -> float:
        """Largest change of any pairwise difference from its initial value."""
        return max((float(np.max(np.abs(d - d[0]))) for d in self.differences().values()), default=0.0)

    COLUMNS = ("step", "layer", "squared_norm")

    def rows(self) -> list[tuple]:
        return [(s, l, v) for l in sorted(self.sq_norms) for s, v in zip(self.steps, self.sq_norms[l])]


def gradient_flow_conservation(params: ParamSet, dataset, steps: int, lr: float, loss: str = "mse",
                               record_every: int = 1) -> FlowConservationTrace:
    """Full-batch plain gradient descent, recording each layer's squared Frobenius norm."""
    for i, layer in enumerate(params.spec.layers):
        if layer.kind not in ("dense", "relu") or (layer.kind == "dense" and layer.bias):
            raise UnsupportedConfiguration(f"layer {i}: needs a bias-free fully-connected homogeneous network")
    p = params.copy()
    layers = params.spec.prunable_layers
    norms = {l: [] for l in layers}
    recorded, losses = [], []
    for step in range(steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            value, grads = loss_and_grad(p, None, dataset, loss, "eval")
        if not np.isfinite(value):
            raise DivergenceError(f"loss diverged at step {step}")
        if step % record_every == 0 or step == steps:
            recorded.append(step)
            losses.append(value)
            for l in layers:
                norms[l].append(float(np.sum(p.tensors[l]["weight"] ** 2)))
        if step == steps:
            break
        for l in layers:
            p.tensors[l]["weight"] = p.tensors[l]["weight"] - lr * grads.grads[l]["weight"]
    return FlowConservationTrace(lr, record_every, recorded, norms, losses)


def drift_scaling(params: ParamSet, dataset, lr: float, steps: int, loss: str = "mse") -> tuple[float, float]:
    """Drift at ``lr`` over ``steps`` and at ``lr/2`` over ``2*steps`` (same integration time)."""
    coarse = gradient_flow_conservation(params, dataset, steps, lr, loss).drift()
    fine = gradient_flow_conservation(params, dataset, 2 * steps, lr / 2, loss).drift()
    return coarse, fine


# ---------------------------------------------------------------------------


@dataclass
class BatchNormResidual:
    layer: int  # batch-norm layer
    unit: int
    total: float
    scale: float
    eps_term: float = 0.0

    @property
    def relative(self) -> float:
        return abs(self.total) / max(self.scale, 1e-300)


def bn_saliency_zero(params: ParamSet, batch: np.ndarray, objective: Callable = sum_objective,
                     mode: str = "train", mask: Mask | None = None) -> list[BatchNormResidual]:
    """Saliency summed over the incoming parameters of every batch-norm unit.

    ``scale`` is the sum of the absolute values of the individual terms.
    In train mode the sum is exactly zero only for ``eps = 0``; otherwise it
    equals ``eps_term = sum(dR/dxhat * xhat) * eps / (var + eps)``, the part
    of the normalization that does not cancel under rescaling.
    """
    spec = params.spec
    mask = mask if mask is not None else ones_mask(params)
    trace = forward(params, mask, batch, mode)
    grads = backward(trace, params, objective(trace.output))
    sal = param_saliency(params, grads)
    out = []
    for j, layer in enumerate(spec.layers):
        if layer.kind != "batchnorm":
            continue
        i = j - 1
        if i < 0 or spec.layers[i].kind not in ("dense", "conv2d"):
            raise UnsupportedConfiguration(f"layer {j}: batch-norm must directly follow a dense or conv layer")
        w = sal[i]["weight"].reshape(sal[i]["weight"].shape[0], -1)
        total = w.sum(axis=1)
        scale = np.abs(w).sum(axis=1)
        if "bias" in sal[i]:
            total = total + sal[i]["bias"]
            scale = scale + np.abs(sal[i]["bias"])
        eps_term = np.zeros(total.size)
        if mode == "train":
            xhat, _, _, var = trace.caches[j]
            g = grads.act_grads[j + 1]
            axes = (0,) if g.ndim == 2 else (0, 2, 3)
            gamma = params.tensors[j]["gamma"]
            eps_term = (g * xhat).sum(axis=axes) * gamma * layer.eps / (var + layer.eps)
        out += [BatchNormResidual(j, c, float(total[c]), float(scale[c]), float(eps_term[c]))
                for c in range(total.size)]
    return out


__all__ = [
    "TOLERANCE", "ConservationReport", "UnsupportedConfiguration", "relative_residual",
    "check_neuron_conservation", "check_network_conservation", "layer_score_size_law", "inverse_law_spread",
    "LayerLawRow", "LAW_COLUMNS", "FlowConservationTrace", "gradient_flow_conservation", "drift_scaling",
    "DivergenceError", "BatchNormResidual", "bn_saliency_zero",
]
