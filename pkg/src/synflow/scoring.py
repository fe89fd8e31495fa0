"""Pruning scores: random, magnitude, SNIP, GraSP, SynFlow and generic synaptic saliency."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff
from .autodiff import GradientSet, NumericError, backward, forward, hvp, loss_and_grad
from .netgraph import Mask, ParamSet, StructureError, check_mask, ones_mask


@dataclass
class ScoreMap:
    """Scores for the prunable weights; positions where ``mask == 0`` are absent."""

    scores: dict[int, np.ndarray]
    mask: Mask

    def __post_init__(self):
        for i, s in self.scores.items():
            if not np.all(np.isfinite(s)):
                raise NumericError(f"layer {i}: non-finite scores")
            self.scores[i] = np.where(self.mask[i] != 0, s, 0.0)

    @property
    def layers(self) -> list[int]:
        return sorted(self.scores)

    def present(self, layer: int) -> np.ndarray:
        """Scores of the unmasked entries of one layer, in flat index order."""
        return self.scores[layer].ravel()[self.mask[layer].ravel() != 0]

    def count(self) -> int:
        return int(sum(np.count_nonzero(self.mask[i]) for i in self.layers))

    def layer_totals(self) -> dict[int, float]:
        return {i: float(self.present(i).sum()) for i in self.layers}

    def layer_means(self) -> dict[int, float]:
        return {i: float(self.present(i).mean()) if self.present(i).size else 0.0 for i in self.layers}


# ---------------------------------------------------------------------------
# objectives for synaptic saliency


def sum_objective(y: np.ndarray) -> np.ndarray:
    """Gradient of R = <1, y>."""
    return np.ones_like(y)


def param_saliency(params: ParamSet, grads: GradientSet) -> dict[int, dict[str, np.ndarray]]:
    """``dR/dtheta * theta`` for every parameter that has a gradient."""
    return {i: {name: g * params.tensors[i][name] for name, g in t.items()} for i, t in grads.grads.items()}


def saliency_gradients(params: ParamSet, mask: Mask | None, objective: Callable = sum_objective,
                       x: np.ndarray | None = None, mode: str = "eval") -> tuple[autodiff.ForwardTrace, GradientSet]:
    if x is None:
        x = np.ones((1, *params.spec.input_shape))
    trace = forward(params, mask, x, mode)
    return trace, backward(trace, params, objective(trace.output))


def masked(params: ParamSet, mask: Mask | None) -> ParamSet:
    out = params.copy()
    if mask is not None:
        for i, m in mask.items():
            out.tensors[i]["weight"] = out.tensors[i]["weight"] * m
    return out


def saliency(params: ParamSet, mask: Mask | None, objective: Callable = sum_objective,
             x: np.ndarray | None = None, mode: str = "eval") -> ScoreMap:
    """S = dR/dtheta * theta on the masked weights for ``R`` with output gradient ``objective(y)``."""
    mask = mask if mask is not None else ones_mask(params)
    _, grads = saliency_gradients(params, mask, objective, x, mode)
    theta = masked(params, mask)
    return ScoreMap({i: grads.grads[i]["weight"] * theta.tensors[i]["weight"] for i in mask}, mask)


# ---------------------------------------------------------------------------
# data-free scores


def score_random(params: ParamSet, mask: Mask | None, seed: int) -> ScoreMap:
    mask = mask if mask is not None else ones_mask(params)
    rng = np.random.default_rng(seed)
    return ScoreMap({i: rng.standard_normal(w.shape) for i, w in params.weights().items()}, mask)


def score_magnitude(params: ParamSet, mask: Mask | None) -> ScoreMap:
    mask = mask if mask is not None else ones_mask(params)
    return ScoreMap({i: np.abs(w) for i, w in params.weights().items()}, mask)


def absolute(params: ParamSet) -> ParamSet:
    """Copy with every stored tensor replaced by its element-wise absolute value."""
    out = params.copy()
    for i, name, arr in out.items():
        out.tensors[i][name] = np.abs(arr)
    return out


def rescale_layers(params: ParamSet) -> ParamSet:
    """Divide each prunable layer by its largest weight, carrying the factor into downstream biases.

    For homogeneous networks the output, and so every synaptic-saliency
    score, is multiplied by one common positive constant: the ranking is
    unchanged.
    """
    out = params.copy()
    cumulative = 1.0
    for i, layer in enumerate(params.spec.layers):
        t = out.tensors.get(i)
        if t is None:
            continue
        if layer.prunable:
            top = float(np.max(np.abs(t["weight"]))) if t["weight"].size else 0.0
            c = 1.0 / top if top > 0 and np.isfinite(top) else 1.0
            cumulative *= c
            t["weight"] = t["weight"] * c
            if "bias" in t:
                t["bias"] = t["bias"] * cumulative
        elif layer.kind == "batchnorm":
            t["beta"] = t["beta"] * cumulative
            t["running_mean"] = t["running_mean"] * cumulative
            top = float(np.max(t["gamma"])) if t["gamma"].size else 1.0
            c = 1.0 / top if top > 0 else 1.0
            t["gamma"] = t["gamma"] * c
            t["beta"] = t["beta"] * c
            cumulative *= c
    return out


def _synflow_objective(abs_params: ParamSet, mask: Mask, mode: str):
    x = np.ones((1, *abs_params.spec.input_shape))
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        trace = forward(abs_params, mask, x, mode)
        r = float(np.sum(trace.output))
        grads = backward(trace, abs_params, np.ones_like(trace.output))
    return r, grads


def synflow_flow(params: ParamSet, mask: Mask | None, mode: str = "eval") -> tuple[float, ParamSet, GradientSet]:
    """Evaluate R_SF on the absolute-valued network; returns ``(R, |theta|, gradients)``.

    If R over- or underflows the layers are rescaled once (see
    :func:`rescale_layers`); a second failure raises :class:`NumericError`.
    """
    mask = mask if mask is not None else ones_mask(params)
    abs_params = absolute(params)
    r, grads = _synflow_objective(abs_params, mask, mode)
    if not np.isfinite(r) or 0 < r < 1e-280 or not _finite(grads):
        abs_params = rescale_layers(abs_params)
        r, grads = _synflow_objective(abs_params, mask, mode)
        if not np.isfinite(r) or not _finite(grads):
            raise NumericError("SynFlow objective is not finite even after per-layer rescaling; "
                               "rescale the network parameters layer by layer before scoring")
    return r, abs_params, grads


def _finite(grads: GradientSet) -> bool:
    return all(np.all(np.isfinite(g)) for _, _, g in grads.items())


def score_synflow(params: ParamSet, mask: Mask | None, mode: str = "eval") -> ScoreMap:
    """Synaptic-flow scores: saliency of R_SF = 1^T (prod_l |theta_l|) 1 on the masked network."""
    mask = mask if mask is not None else ones_mask(params)
    _, abs_params, grads = synflow_flow(params, mask, mode)
    return ScoreMap({i: grads.grads[i]["weight"] * abs_params.tensors[i]["weight"] * mask[i] for i in mask}, mask)


def synflow_closed_form(params: ParamSet, mask: Mask | None) -> ScoreMap:
    """Path-product form of the SynFlow score for dense bias-free networks.

    ``S[l]_ij = [1^T prod_{k>l} |W_k|]_i |w_ij| [prod_{k<l} |W_k| 1]_j``
    """
    spec = params.spec
    for i, layer in enumerate(spec.layers):
        if layer.kind not in ("dense", "relu", "flatten") or (layer.kind == "dense" and layer.bias):
            raise StructureError(f"layer {i}: closed form needs a dense bias-free network, found {layer.kind}"
                                 + (" with bias" if layer.kind == "dense" else ""))
    mask = mask if mask is not None else ones_mask(params)
    check_mask(params, mask)
    order = spec.prunable_layers
    mats = [np.abs(params.tensors[i]["weight"] * mask[i]) for i in order]
    incoming = [np.ones(mats[0].shape[1])]
    for m in mats[:-1]:
        incoming.append(m @ incoming[-1])
    outgoing = [np.ones(mats[-1].shape[0])]
    for m in reversed(mats[1:]):
        outgoing.append(outgoing[-1] @ m)
    outgoing.reverse()
    return ScoreMap({i: outgoing[k][:, None] * mats[k] * incoming[k][None, :] for k, i in enumerate(order)}, mask)


# ---------------------------------------------------------------------------
# data-dependent scores


def sub_batches(batch, batch_size: int | None):
    x, y = batch
    if len(x) == 0:
        raise ValueError("scoring batch is empty")
    step = len(x) if not batch_size else batch_size
    for start in range(0, len(x), step):
        yield x[start:start + step], y[start:start + step]


def accumulated_gradient(params: ParamSet, mask: Mask, batch, loss: str, batch_size: int | None,
                         mode: str) -> GradientSet:
    """Sum of sub-batch gradients, each weighted by its share of the examples.

    Without batch-norm this equals the full-batch gradient for any ``batch_size``.
    """
    total = None
    n = len(batch[0])
    for sub in sub_batches(batch, batch_size):
        _, g = loss_and_grad(params, mask, sub, loss, mode)
        g = autodiff.weights_only(g, params).scale(len(sub[0]) / n)
        total = g if total is None else total + g
    return total


def score_snip(params: ParamSet, mask: Mask | None, batch, loss: str = "cross-entropy",
               batch_size: int | None = None, mode: str = "train") -> ScoreMap:
    """|g * theta| with ``g`` the loss gradient accumulated over sub-batches."""
    mask = mask if mask is not None else ones_mask(params)
    g = accumulated_gradient(params, mask, batch, loss, batch_size, mode)
    theta = masked(params, mask)
    return ScoreMap({i: np.abs(g.grads[i]["weight"] * theta.tensors[i]["weight"]) for i in mask}, mask)


def score_grasp(params: ParamSet, mask: Mask | None, batch, loss: str = "cross-entropy",
                batch_size: int | None = None, mode: str = "train") -> ScoreMap:
    """-(H g) * theta, with ``g`` and ``H g`` both accumulated over the same sub-batches."""
    mask = mask if mask is not None else ones_mask(params)
    g = accumulated_gradient(params, mask, batch, loss, batch_size, mode)

    def fn(p, m, b):
        lval, grads = loss_and_grad(p, m, b, loss, mode)
        return lval, autodiff.weights_only(grads, p)

    hg = None
    n = len(batch[0])
    for sub in sub_batches(batch, batch_size):
        h = hvp(params, mask, fn, sub, g).scale(len(sub[0]) / n)
        hg = h if hg is None else hg + h
    theta = masked(params, mask)
    return ScoreMap({i: -hg.grads[i]["weight"] * theta.tensors[i]["weight"] for i in mask}, mask)


# ---------------------------------------------------------------------------

DATA_FREE = ("random", "magnitude", "synflow")
DATA_DEPENDENT = ("snip", "grasp")
SCORERS = DATA_FREE + DATA_DEPENDENT


@dataclass
class ScoringContext:
    """Scorer choice plus whatever it consumes; ``__call__(params, mask)`` returns a ScoreMap."""

    kind: str
    batch: tuple | None = None
    loss: str = "cross-entropy"
    mode: str | None = None
    seed: int = 0
    batch_size: int | None = None
    calls: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in SCORERS:
            raise ValueError(f"unknown scorer {self.kind!r}; choose from {SCORERS}")
        if self.kind in DATA_DEPENDENT and self.batch is None:
            raise ValueError(f"{self.kind} needs a data batch")
        if self.kind in DATA_FREE and self.batch is not None:
            raise ValueError(f"{self.kind} is data-free and does not take a batch")
        if self.mode is None:
            self.mode = "train" if self.kind in DATA_DEPENDENT else "eval"

    def __call__(self, params: ParamSet, mask: Mask) -> ScoreMap:
        self.calls += 1
        if self.kind == "random":
            return score_random(params, mask, self.seed)
        if self.kind == "magnitude":
            return score_magnitude(params, mask)
        if self.kind == "synflow":
            return score_synflow(params, mask, self.mode)
        if self.kind == "snip":
            return score_snip(params, mask, self.batch, self.loss, self.batch_size, self.mode)
        return score_grasp(params, mask, self.batch, self.loss, self.batch_size, self.mode)


__all__ = [
    "ScoreMap", "ScoringContext", "SCORERS", "sum_objective", "param_saliency", "saliency",
    "saliency_gradients", "score_random", "score_magnitude", "score_snip", "score_grasp", "score_synflow",
    "synflow_closed_form", "synflow_flow", "absolute", "rescale_layers", "masked",
]
