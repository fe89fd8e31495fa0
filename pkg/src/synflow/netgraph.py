"""Feedforward architectures, parameter storage, initialization and masks.

A network is an ordered list of layers applied to a single running tensor.
Residual connections are explicit ``add`` layers that read an earlier
activation point (``skip_from`` indexes ``acts[skip_from]``, where
``acts[0]`` is the network input and ``acts[i]`` is the input of layer
``i``).  Shapes are per-sample; the batch axis is implicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("dense", "conv2d", "maxpool", "relu", "batchnorm", "flatten", "add")
PRUNABLE_KINDS = ("dense", "conv2d")
PARAMETRIC_KINDS = ("dense", "conv2d", "batchnorm")


BN_EPS = 1e-5


class StructureError(ValueError):
    """A network description or a tensor does not have the expected shape."""


@dataclass
class LayerSpec:
    kind: str
    out_features: int | None = None  # dense
    out_channels: int | None = None  # conv2d
    kernel: int = 3  # conv2d / maxpool
    stride: int = 1
    padding: int = 0
    bias: bool = True  # dense / conv2d
    skip_from: int | None = None  # add
    eps: float = BN_EPS  # batchnorm
    in_shape: tuple = ()
    out_shape: tuple = ()

    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def param_shapes(self) -> dict[str, tuple]:
        if self.kind == "dense":
            shapes = {"weight": (self.out_features, self.in_shape[0])}
            if self.bias:
                shapes["bias"] = (self.out_features,)
            return shapes
        if self.kind == "conv2d":
            shapes = {"weight": (self.out_channels, self.in_shape[0], self.kernel, self.kernel)}
            if self.bias:
                shapes["bias"] = (self.out_channels,)
            return shapes
        if self.kind == "batchnorm":
            c = (self.in_shape[0],)
            return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
        return {}

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d.update(out_features=self.out_features, bias=self.bias)
        elif self.kind == "conv2d":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride,
                     padding=self.padding, bias=self.bias)
        elif self.kind == "maxpool":
            d.update(kernel=self.kernel, stride=self.stride)
        elif self.kind == "add":
            d.update(skip_from=self.skip_from)
        elif self.kind == "batchnorm":
            d.update(eps=self.eps)
        return d


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list[LayerSpec]
    num_classes: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.resolve()

    def resolve(self) -> None:
        """Infer every layer's shapes and check the graph, raising StructureError."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shape = shapes[-1]
            if layer.kind not in LAYER_KINDS:
                raise StructureError(f"layer {i}: unknown kind {layer.kind!r}")
            layer.in_shape = shape
            layer.out_shape = _infer_shape(i, layer, shape, shapes)
            shapes.append(layer.out_shape)
        if not self.layers:
            raise StructureError("network has no layers")
        out = self.layers[-1].out_shape
        if len(out) != 1:
            raise StructureError(f"layer {len(self.layers) - 1}: network output must be a vector, got {out}")
        if self.num_classes is None:
            self.num_classes = out[0]
        elif out[0] != self.num_classes:
            raise StructureError(
                f"layer {len(self.layers) - 1}: output dimension {out[0]} != num_classes {self.num_classes}")

    @property
    def residual_edges(self) -> list[tuple[int, int]]:
        """(source activation index, add layer index) pairs."""
        return [(l.skip_from, i) for i, l in enumerate(self.layers) if l.kind == "add"]

    @property
    def prunable_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.prunable]

    def activation_shape(self, index: int) -> tuple:
        return self.input_shape if index == 0 else self.layers[index - 1].out_shape

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(**layer) for layer in d["layers"]]
        return cls(tuple(d["input_shape"]), layers, d.get("num_classes"))


def _infer_shape(i: int, layer: LayerSpec, shape: tuple, shapes: list[tuple]) -> tuple:
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1:
            raise StructureError(f"layer {i}: dense expects a vector input, got {shape}")
        if not layer.out_features or layer.out_features < 1:
            raise StructureError(f"layer {i}: dense needs out_features >= 1")
        return (int(layer.out_features),)
    if kind in ("conv2d", "maxpool"):
        if len(shape) != 3:
            raise StructureError(f"layer {i}: {kind} expects (C, H, W) input, got {shape}")
        if kind == "maxpool" and layer.padding:
            raise StructureError(f"layer {i}: maxpool does not support padding")
        if kind == "conv2d" and (not layer.out_channels or layer.out_channels < 1):
            raise StructureError(f"layer {i}: conv2d needs out_channels >= 1")
        c, h, w = shape
        k, s, p = layer.kernel, layer.stride, layer.padding
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if k < 1 or s < 1 or oh < 1 or ow < 1:
            raise StructureError(f"layer {i}: {kind} kernel {k}/stride {s} does not fit input {shape}")
        return (int(layer.out_channels) if kind == "conv2d" else c, oh, ow)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "add":
        src = layer.skip_from
        if src is None or not 0 <= src <= i - 1:
            raise StructureError(f"layer {i}: add must read an earlier activation, got skip_from={src}")
        if shapes[src] != shape:
            raise StructureError(f"layer {i}: residual shapes differ: {shapes[src]} vs {shape}")
        return shape
    return shape  # relu, batchnorm


@dataclass
class ParamSet:
    """Per-layer parameter tensors (float64) bound to their network spec.

    ``tensors[i]`` maps names (``weight``, ``bias``, ``gamma``, ``beta``,
    ``running_mean``, ``running_var``) to arrays for layer ``i``.
    """

    spec: NetworkSpec
    tensors: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, {i: {k: v.copy() for k, v in t.items()} for i, t in self.tensors.items()})

    def weights(self) -> dict[int, np.ndarray]:
        return {i: self.tensors[i]["weight"] for i in self.spec.prunable_layers}

    def items(self):
        """Yield ``(layer, name, array)`` over every stored tensor in layer order."""
        for i in sorted(self.tensors):
            for name, arr in self.tensors[i].items():
                yield i, name, arr

    def num_prunable(self) -> int:
        return sum(w.size for w in self.weights().values())


Mask = dict  # layer index -> {0,1} float array shaped like that layer's weight


def build_network(spec: NetworkSpec, seed: int) -> ParamSet:
    """Kaiming-normal weights, zero biases and identity batch-norm at init."""
    spec.resolve()
    rng = np.random.default_rng(seed)
    tensors = {}
    for i, layer in enumerate(spec.layers):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        t = {}
        if layer.prunable:
            wshape = shapes["weight"]
            fan_in = int(np.prod(wshape[1:]))
            t["weight"] = rng.standard_normal(wshape) * math.sqrt(2.0 / fan_in)
            if "bias" in shapes:
                t["bias"] = np.zeros(shapes["bias"])
        else:
            t["gamma"] = np.ones(shapes["gamma"])
            t["beta"] = np.zeros(shapes["beta"])
            t["running_mean"] = np.zeros(shapes["running_mean"])
            t["running_var"] = np.ones(shapes["running_var"])
        tensors[i] = t
    return ParamSet(spec, tensors)


def ones_mask(params: ParamSet) -> Mask:
    return {i: np.ones_like(w) for i, w in params.weights().items()}


def check_mask(params: ParamSet, mask: Mask) -> None:
    weights = params.weights()
    if set(mask) != set(weights):
        raise StructureError(f"mask layers {sorted(mask)} != prunable layers {sorted(weights)}")
    for i, w in weights.items():
        if mask[i].shape != w.shape:
            raise StructureError(f"layer {i}: mask shape {mask[i].shape} != weight shape {w.shape}")


def apply_mask(params: ParamSet, mask: Mask) -> ParamSet:
    """Return a copy with prunable weights multiplied element-wise by the mask."""
    check_mask(params, mask)
    out = params.copy()
    for i, m in mask.items():
        out.tensors[i]["weight"] = out.tensors[i]["weight"] * m
    return out


def max_compression(spec: NetworkSpec) -> float:
    """N / L: compression when a single weight survives in every prunable layer."""
    counts = [int(np.prod(spec.layers[i].param_shapes()["weight"])) for i in spec.prunable_layers]
    if not counts:
        raise ValueError("network has no prunable layers")
    return sum(counts) / len(counts)


def layer_param_counts(spec: NetworkSpec, mask: Mask) -> list[tuple[int, int, int]]:
    return [(i, int(mask[i].size), int(np.count_nonzero(mask[i]))) for i in spec.prunable_layers]


# ---------------------------------------------------------------------------
# architectures used across tests and experiments


def dense(out: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", out_features=out, bias=bias)


def conv(out: int, kernel: int = 3, padding: int = 1, stride: int = 1, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out, kernel=kernel, padding=padding, stride=stride, bias=bias)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(kernel: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=stride or kernel)


def batchnorm(eps: float = BN_EPS) -> LayerSpec:
    """Batch-norm over features or channels; ``eps`` is added to the variance."""
    if eps < 0:
        raise StructureError(f"batch-norm eps must be >= 0, got {eps}")
    return LayerSpec("batchnorm", eps=float(eps))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def add(skip_from: int) -> LayerSpec:
    return LayerSpec("add", skip_from=skip_from)


def mlp(sizes: list[int], bias: bool = True, activation: bool = True) -> NetworkSpec:
    """Dense net ``sizes[0] -> ... -> sizes[-1]`` with ReLU between layers."""
    layers = []
    for k, out in enumerate(sizes[1:]):
        layers.append(dense(out, bias))
        if activation and k < len(sizes) - 2:
            layers.append(relu())
    return NetworkSpec((sizes[0],), layers)


def toy_conv(bias: bool = False, pool: bool = True, channels=(4, 6), image=(2, 6, 6), classes=3) -> NetworkSpec:
    c1, c2 = channels
    layers = [conv(c1, bias=bias), relu()]
    if pool:
        layers.append(maxpool(2))
    layers += [conv(c2, bias=bias), relu()]
    if pool:
        layers.append(maxpool(2))
    layers += [flatten(), dense(8, bias), relu(), dense(classes, bias)]
    return NetworkSpec(image, layers)


def toy_residual(width: int = 8, inputs: int = 5, classes: int = 3, bias: bool = True) -> NetworkSpec:
    """Dense stem, one two-layer residual block, dense head."""
    layers = [
        dense(width, bias), relu(),          # 0, 1 -> acts[2]
        dense(width, bias), relu(),          # 2, 3
        dense(width, bias), add(2), relu(),  # 4, 5, 6
        dense(classes, bias),                # 7
    ]
    return NetworkSpec((inputs,), layers)


def toy_conv_residual(classes: int = 3, bias: bool = True) -> NetworkSpec:
    layers = [
        conv(4, bias=bias), relu(),                         # 0, 1 -> acts[2]
        conv(4, bias=bias), relu(), conv(4, bias=bias),     # 2, 3, 4
        add(2), relu(), maxpool(2),                         # 5, 6, 7
        flatten(), dense(classes, bias),                    # 8, 9
    ]
    return NetworkSpec((2, 4, 4), layers)


def toy_vgg(image=(3, 14, 14), classes: int = 10, width: int = 16, bias: bool = True, batch_norm: bool = True,
            hidden: int = 32) -> NetworkSpec:
    """Four unpadded 3x3 conv layers in two stages split by a max-pool, then two dense layers.

    Every hidden layer is followed by batch-norm (unless disabled) and ReLU,
    so a unit fed by a single surviving weight cannot die.  Without padding
    every output position sees real pixels; the default 14x14 image shrinks
    to 1x1.  ``hidden=0`` drops the hidden dense layer.
    """
    layers = []

    def block(layer):
        layers.append(layer)
        if batch_norm:
            layers.append(batchnorm())
        layers.append(relu())

    block(conv(width, padding=0, bias=bias))
    block(conv(width, padding=0, bias=bias))
    layers.append(maxpool(2))
    block(conv(2 * width, padding=0, bias=bias))
    block(conv(2 * width, padding=0, bias=bias))
    layers.append(flatten())
    if hidden:
        block(dense(hidden, bias))
    layers.append(dense(classes, bias))
    return NetworkSpec(image, layers)


def imbalance_net(inputs: int = 1000, hidden: int = 10, outputs: int = 1, bias: bool = False) -> NetworkSpec:
    """Two dense layers of very different size: ``hidden*inputs`` vs ``outputs*hidden``."""
    return mlp([inputs, hidden, outputs], bias=bias)


ARCHITECTURES = {
    "toy-vgg": toy_vgg,
    "imbalance": imbalance_net,
    "toy-conv": toy_conv,
    "toy-residual": toy_residual,
    "toy-conv-residual": toy_conv_residual,
}


def spec_from_config(value) -> NetworkSpec:
    """Resolve a config entry: an architecture name, ``{"name": ..., **kwargs}``, or a full spec dict."""
    if isinstance(value, str):
        return ARCHITECTURES[value]()
    if "layers" in value:
        return NetworkSpec.from_dict(value)
    kwargs = dict(value)
    name = kwargs.pop("name")
    if name == "mlp":
        return mlp(**kwargs)
    for k, v in kwargs.items():
        if isinstance(v, list):
            kwargs[k] = tuple(v)
    return ARCHITECTURES[name](**kwargs)


__all__ = [
    "BN_EPS", "LayerSpec", "NetworkSpec", "ParamSet", "Mask", "StructureError",
    "build_network", "apply_mask", "ones_mask", "check_mask", "max_compression", "layer_param_counts",
    "dense", "conv", "relu", "maxpool", "batchnorm", "flatten", "add",
    "mlp", "toy_conv", "toy_residual", "toy_conv_residual", "toy_vgg", "imbalance_net", "spec_from_config",
]
