"""Forward evaluation and reverse-mode gradients for :mod:`synflow.netgraph` networks.

Every layer kind has a hand-written vector-Jacobian product; ``backward``
walks the layers in reverse and also returns the gradient at every
activation point, which the conservation checks need.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netgraph import BN_EPS, Mask, ParamSet, StructureError, check_mask, ones_mask

HVP_DELTA = 1e-4


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity."""


@dataclass
class ForwardTrace:
    """Everything ``backward`` needs: ``acts[i]`` is the input of layer ``i``, ``acts[-1]`` the output."""

    params: ParamSet
    mask: Mask
    mode: str
    acts: list[np.ndarray]
    caches: list
    effective: dict[int, np.ndarray]

    @property
    def input(self) -> np.ndarray:
        return self.acts[0]

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]

    def pre_activations(self) -> dict[int, np.ndarray]:
        """Outputs of the parametric layers (the z of each hidden unit)."""
        return {i + 1: self.acts[i + 1] for i, l in enumerate(self.params.spec.layers) if l.parametric}


@dataclass
class GradientSet:
    grads: dict[int, dict[str, np.ndarray]]
    act_grads: list[np.ndarray] = field(default_factory=list)

    @property
    def input_grad(self) -> np.ndarray:
        return self.act_grads[0]

    @property
    def output_grad(self) -> np.ndarray:
        return self.act_grads[-1]

    def items(self):
        for i in sorted(self.grads):
            for name, g in self.grads[i].items():
                yield i, name, g

    def __add__(self, other: "GradientSet") -> "GradientSet":
        out = {i: dict(t) for i, t in self.grads.items()}
        for i, name, g in other.items():
            layer = out.setdefault(i, {})
            layer[name] = layer[name] + g if name in layer else g.copy()
        return GradientSet(out)

    def scale(self, alpha: float) -> "GradientSet":
        return GradientSet({i: {k: alpha * g for k, g in t.items()} for i, t in self.grads.items()})

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for _, _, g in self.items() if g.size), default=0.0)


# ---------------------------------------------------------------------------
# pass accounting

_passes: contextvars.ContextVar = contextvars.ContextVar("synflow_passes", default=None)


@dataclass
class PassTally:
    backward_calls: int = 0
    examples: int = 0


@contextlib.contextmanager
def count_passes():
    """Tally backward passes (and the examples they carry) made inside the block."""
    tally = PassTally()
    token = _passes.set(tally)
    try:
        yield tally
    finally:
        _passes.reset(token)


# ---------------------------------------------------------------------------
# conv / pool kernels (batch-first, NCHW)


def _windows(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def conv2d_forward(x, w, b, stride, padding):
    n = x.shape[0]
    o, c, k, _ = w.shape
    win = _windows(x, k, stride, padding)  # n c oh ow kh kw
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(g, x_shape, cols, w, stride, padding):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    oh, ow = g.shape[2], g.shape[3]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols).reshape(w.shape)
    gcols = (g2 @ w.reshape(o, -1)).reshape(n, oh, ow, c, k, k)
    gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 1, 2, 3))  # kh kw n oh ow c
    gx = np.zeros((n, h + 2 * padding, wd + 2 * padding, c))
    for i in range(k):
        for j in range(k):
            gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[i, j]
    gx = gx.transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx, gw, g2.sum(axis=0)


def maxpool_forward(x, k, s):
    cols = _windows(x, k, s, 0)
    flat = cols.reshape(*cols.shape[:4], k * k)
    arg = np.argmax(flat, axis=-1)  # first maximum on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(g, x_shape, arg, k, s):
    gx = np.zeros(x_shape)
    oh, ow = g.shape[2], g.shape[3]
    for idx in range(k * k):
        i, j = divmod(idx, k)
        gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(arg == idx, g, 0.0)
    return gx


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, x):
    return v if x.ndim == 2 else v[None, :, None, None]


# ---------------------------------------------------------------------------


def forward(params: ParamSet, mask: Mask | None, x: np.ndarray, mode: str = "eval") -> ForwardTrace:
    """Run the masked network on a batch ``x`` of shape ``(N, *input_shape)``."""
    spec = params.spec
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise StructureError(f"input shape {x.shape[1:]} != network input {spec.input_shape}")
    if mask is None:
        mask = ones_mask(params)
    check_mask(params, mask)
    effective = {i: params.tensors[i]["weight"] * m for i, m in mask.items()}

    acts = [x]
    caches = []
    a = x
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        t = params.tensors.get(i, {})
        cache = None
        if kind == "dense":
            out = a @ effective[i].T
            if "bias" in t:
                out = out + t["bias"]
        elif kind == "conv2d":
            out, cache = conv2d_forward(a, effective[i], t.get("bias"), layer.stride, layer.padding)
        elif kind == "relu":
            out = np.maximum(a, 0.0)
        elif kind == "maxpool":
            out, cache = maxpool_forward(a, layer.kernel, layer.stride)
        elif kind == "flatten":
            out = a.reshape(a.shape[0], -1)
        elif kind == "add":
            out = a + acts[layer.skip_from]
        elif kind == "batchnorm":
            axes = _bn_axes(a)
            if mode == "train":
                mean = a.mean(axis=axes)
                var = a.var(axis=axes)
            else:
                mean, var = t["running_mean"], t["running_var"]
            if mode == "train" and np.any(var + layer.eps == 0):
                raise ZeroDivisionError(f"layer {i}: zero batch variance with eps=0; batch-norm output is undefined")
            inv = 1.0 / np.sqrt(var + layer.eps)
            xhat = (a - _bn_view(mean, a)) * _bn_view(inv, a)
            out = _bn_view(t["gamma"], a) * xhat + _bn_view(t["beta"], a)
            if mode == "eval" and not np.all(np.isfinite(out)):
                raise NumericError(f"layer {i}: non-finite batch-norm output in eval mode (check running_var)")
            cache = (xhat, inv, mean, var)
        else:  # pragma: no cover - resolve() rejects unknown kinds
            raise StructureError(f"layer {i}: unknown kind {kind}")
        caches.append(cache)
        acts.append(out)
        a = out
    return ForwardTrace(params, mask, mode, acts, caches, effective)


def backward(trace: ForwardTrace, params: ParamSet, output_grad: np.ndarray) -> GradientSet:
    """Reverse-mode pass for the scalar ``R`` whose gradient w.r.t. the output is ``output_grad``.

    Weight gradients are taken w.r.t. the raw parameters, so masked
    positions receive zero.
    """
    if trace.params is not params and trace.params.spec is not params.spec:
        raise StructureError("trace was produced by a different network")
    spec = params.spec
    output_grad = np.asarray(output_grad, dtype=np.float64)
    if output_grad.shape != trace.output.shape:
        raise StructureError(f"output_grad shape {output_grad.shape} != output shape {trace.output.shape}")
    tally = _passes.get()
    if tally is not None:
        tally.backward_calls += 1
        tally.examples += trace.input.shape[0]

    acts = trace.acts
    act_grads: list = [None] * len(acts)
    act_grads[-1] = output_grad
    grads: dict[int, dict[str, np.ndarray]] = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        g = act_grads[i + 1]
        a = acts[i]
        t = params.tensors.get(i, {})
        cache = trace.caches[i]
        kind = layer.kind
        if kind == "dense":
            gw = g.T @ a
            grads[i] = {"weight": gw * trace.mask[i]}
            if "bias" in t:
                grads[i]["bias"] = g.sum(axis=0)
            gin = g @ trace.effective[i]
        elif kind == "conv2d":
            gin, gw, gb = conv2d_backward(g, a.shape, cache, trace.effective[i], layer.stride, layer.padding)
            grads[i] = {"weight": gw * trace.mask[i]}
            if "bias" in t:
                grads[i]["bias"] = gb
        elif kind == "relu":
            gin = g * (a > 0)
        elif kind == "maxpool":
            gin = maxpool_backward(g, a.shape, cache, layer.kernel, layer.stride)
        elif kind == "flatten":
            gin = g.reshape(a.shape)
        elif kind == "add":
            gin = g
            src = layer.skip_from
            act_grads[src] = g if act_grads[src] is None else act_grads[src] + g
        elif kind == "batchnorm":
            xhat, inv, mean, var = cache
            axes = _bn_axes(a)
            grads[i] = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
            gxhat = g * _bn_view(t["gamma"], a)
            if trace.mode == "train":
                gxhat_mean = gxhat.mean(axis=axes)
                proj = (gxhat * xhat).mean(axis=axes)
                gin = _bn_view(inv, a) * (gxhat - _bn_view(gxhat_mean, a) - xhat * _bn_view(proj, a))
            else:
                gin = gxhat * _bn_view(inv, a)
        else:  # pragma: no cover
            raise StructureError(f"layer {i}: unknown kind {kind}")
        act_grads[i] = gin if act_grads[i] is None else act_grads[i] + gin
    return GradientSet(grads, act_grads)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be integers in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def mean_squared(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of ``0.5 * ||y - t||^2`` and its gradient."""
    diff = outputs - np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    n = outputs.shape[0]
    return float(0.5 * np.sum(diff * diff) / n), diff / n


LOSSES = {"cross-entropy": cross_entropy, "mse": mean_squared}


def loss_and_grad(params: ParamSet, mask: Mask | None, batch, loss_kind: str = "cross-entropy",
                  mode: str = "train", return_trace: bool = False):
    """Mean loss over ``batch = (inputs, targets)`` and its parameter gradient.

    With ``return_trace`` the forward trace is appended to the result.
    """
    x, target = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    trace = forward(params, mask, x, mode)
    loss, gout = LOSSES[loss_kind](trace.output, target)
    grads = backward(trace, params, gout)
    return (loss, grads, trace) if return_trace else (loss, grads)


# ---------------------------------------------------------------------------
# Hessian-vector product


def perturb(params: ParamSet, v: GradientSet, eps: float) -> ParamSet:
    out = params.copy()
    for i, name, g in v.items():
        out.tensors[i][name] = out.tensors[i][name] + eps * g
    return out


def hvp(params: ParamSet, mask: Mask | None, loss_fn, batch, v: GradientSet) -> GradientSet:
    """Central-difference Hessian-vector product of ``loss_fn(params, mask, batch) -> (loss, GradientSet)``.

    The step is ``HVP_DELTA / max(1, |v|_inf)``.  Only the components present
    in ``v`` are returned.
    """
    eps = HVP_DELTA / max(1.0, v.max_abs())
    _, g_plus = loss_fn(perturb(params, v, eps), mask, batch)
    _, g_minus = loss_fn(perturb(params, v, -eps), mask, batch)
    out = {}
    for i, name, _ in v.items():
        hv = (g_plus.grads[i][name] - g_minus.grads[i][name]) / (2.0 * eps)
        if not np.all(np.isfinite(hv)):
            raise NumericError(f"layer {i}: non-finite Hessian-vector product for {name}")
        out.setdefault(i, {})[name] = hv
    return GradientSet(out)


def weights_only(grads: GradientSet, params: ParamSet) -> GradientSet:
    prunable = set(params.spec.prunable_layers)
    return GradientSet({i: {"weight": t["weight"]} for i, t in grads.grads.items() if i in prunable})


__all__ = [
    "BN_EPS", "HVP_DELTA", "NumericError", "ForwardTrace", "GradientSet", "PassTally", "count_passes",
    "forward", "backward", "loss_and_grad", "cross_entropy", "mean_squared", "hvp", "perturb",
    "weights_only",
]
