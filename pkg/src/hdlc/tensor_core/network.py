"""Declarative layer stacks, parameter containers and whole-network passes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ShapeError, SpecError
from . import layers as L

DTYPE = np.float32


# -- layer specs ----------------------------------------------------------------


def _positive(layer, **values):
    for name, value in values.items():
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise SpecError(f"{type(layer).__name__}.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    kind = "conv"

    def __post_init__(self):
        _positive(self, in_channels=self.in_channels, out_channels=self.out_channels,
                  kernel_h=self.kernel_h, kernel_w=self.kernel_w, stride=self.stride)
        if self.pad < 0:
            raise SpecError(f"Conv.pad must be non-negative, got {self.pad}")


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int
    pad: int = 0
    kind = "maxpool"

    def __post_init__(self):
        _positive(self, window=self.window, stride=self.stride)
        if self.pad < 0:
            raise SpecError(f"MaxPool.pad must be non-negative, got {self.pad}")


@dataclass(frozen=True)
class StochasticPool:
    window: int
    stride: int
    pad: int = 0
    kind = "stochpool"

    def __post_init__(self):
        _positive(self, window=self.window, stride=self.stride)
        if self.pad < 0:
            raise SpecError(f"StochasticPool.pad must be non-negative, got {self.pad}")


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5
    kind = "dropout"

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise SpecError(f"Dropout.p must lie in [0, 1), got {self.p}")


@dataclass(frozen=True)
class FullConnect:
    in_units: int
    out_units: int
    kind = "fc"

    def __post_init__(self):
        _positive(self, in_units=self.in_units, out_units=self.out_units)


@dataclass(frozen=True)
class Softmax:
    classes: int
    kind = "softmax"

    def __post_init__(self):
        _positive(self, classes=self.classes)


LAYER_TYPES = {cls.kind: cls for cls in (Conv, ReLU, MaxPool, StochasticPool, Dropout, FullConnect, Softmax)}
PARAM_TYPES = (Conv, FullConnect)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple  # (channels, height, width)
    layers: tuple
    class_count: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def param_layers(self):
        """Indices of layers that own weights, in declaration order."""
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, PARAM_TYPES)]


def infer_shapes(spec: NetworkSpec):
    """Output shape of every layer, ``(C, H, W)`` for maps and ``(units,)`` after flattening.

    Raises SpecError naming the first layer that cannot be applied.
    """
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"input shape must be (channels, height, width), got {spec.input_shape}")
    if not spec.layers:
        raise SpecError("network has no layers")
    shape = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise SpecError("convolution after flattening", i)
            if shape[0] != layer.in_channels:
                raise SpecError(f"expects {layer.in_channels} input channels, got {shape[0]}", i)
            h = L.output_extent(shape[1], layer.kernel_h, layer.stride, layer.pad)
            w = L.output_extent(shape[2], layer.kernel_w, layer.stride, layer.pad)
            if h < 1 or w < 1:
                raise SpecError(f"non-positive output extent {h}x{w}", i)
            shape = (layer.out_channels, h, w)
        elif isinstance(layer, (MaxPool, StochasticPool)):
            if len(shape) != 3:
                raise SpecError("pooling after flattening", i)
            h = L.output_extent(shape[1], layer.window, layer.stride, layer.pad)
            w = L.output_extent(shape[2], layer.window, layer.stride, layer.pad)
            if h < 1 or w < 1:
                raise SpecError(f"non-positive output extent {h}x{w}", i)
            shape = (shape[0], h, w)
        elif isinstance(layer, FullConnect):
            units = int(np.prod(shape))
            if units != layer.in_units:
                raise SpecError(f"in_units {layer.in_units} but incoming activation has {units}", i)
            shape = (layer.out_units,)
        elif isinstance(layer, Softmax):
            if i != len(spec.layers) - 1:
                raise SpecError("softmax must be the final layer", i)
            if shape != (layer.classes,):
                raise SpecError(f"softmax over {layer.classes} classes fed shape {shape}", i)
        elif not isinstance(layer, (ReLU, Dropout)):
            raise SpecError(f"unknown layer {layer!r}", i)
        shapes.append(shape)
    last = spec.layers[-1]
    if not isinstance(last, Softmax):
        raise SpecError("final layer must be Softmax", len(spec.layers) - 1)
    if last.classes != spec.class_count:
        raise SpecError(f"softmax width {last.classes} != class_count {spec.class_count}", len(spec.layers) - 1)
    return shapes


def param_shapes(layer):
    if isinstance(layer, Conv):
        return [(layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w), (layer.out_channels,)]
    if isinstance(layer, FullConnect):
        return [(layer.out_units, layer.in_units), (layer.out_units,)]
    return []


def parameter_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for layer in spec.layers for s in param_shapes(layer))


# -- spec files -------------------------------------------------------------------


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "class_count": spec.class_count,
        "layers": [{"type": layer.kind, **asdict(layer)} for layer in spec.layers],
    }


def spec_from_dict(data: dict) -> NetworkSpec:
    try:
        built = []
        for i, entry in enumerate(data["layers"]):
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in LAYER_TYPES:
                raise SpecError(f"unknown layer type {kind!r}", i)
            cls = LAYER_TYPES[kind]
            allowed = {f.name for f in fields(cls)}
            unknown = set(entry) - allowed
            if unknown:
                raise SpecError(f"unknown fields {sorted(unknown)} for {kind}", i)
            built.append(cls(**entry))
        spec = NetworkSpec(tuple(data["input_shape"]), tuple(built), int(data["class_count"]), data.get("name", ""))
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed network spec: {exc}") from exc
    infer_shapes(spec)
    return spec


def save_spec(spec: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


def load_spec(path) -> NetworkSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from exc
    return spec_from_dict(data)


# -- model state ------------------------------------------------------------------


@dataclass
class ModelState:
    """Learned parameters for a NetworkSpec.

    ``params`` maps a parameterised layer's index to ``[weights, bias]``.
    """

    spec: NetworkSpec
    params: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i in self.spec.param_layers():
            expected = param_shapes(self.spec.layers[i])
            got = [tuple(p.shape) for p in self.params.get(i, [])]
            if got != [tuple(s) for s in expected]:
                raise ShapeError(f"layer {i}: parameter shapes {got} do not match spec {expected}")
        extra = set(self.params) - set(self.spec.param_layers())
        if extra:
            raise ShapeError(f"parameters for non-parameterised layers {sorted(extra)}")

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {i: [p.copy() for p in ps] for i, ps in self.params.items()}, dict(self.meta))

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.spec, {i: [p.astype(dtype) for p in ps] for i, ps in self.params.items()}, dict(self.meta))

    def flat_params(self):
        """Parameter arrays in declaration order (weights then bias per layer)."""
        return [p for i in self.spec.param_layers() for p in self.params[i]]


def init_layer_params(layer, rng, dtype=DTYPE):
    """Glorot-uniform weights, zero biases."""
    wshape, bshape = param_shapes(layer)
    if isinstance(layer, Conv):
        area = layer.kernel_h * layer.kernel_w
        fan_in, fan_out = layer.in_channels * area, layer.out_channels * area
    else:
        fan_in, fan_out = layer.in_units, layer.out_units
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return [rng.uniform(-limit, limit, size=wshape).astype(dtype), np.zeros(bshape, dtype=dtype)]


def init_model(spec: NetworkSpec, rng, meta=None) -> ModelState:
    infer_shapes(spec)
    params = {i: init_layer_params(spec.layers[i], rng) for i in spec.param_layers()}
    return ModelState(spec, params, dict(meta or {}))


# -- forward / backward -----------------------------------------------------------


@dataclass
class ForwardTrace:
    """Everything a backward pass needs: per-layer activations and cached choices.

    ``activations[0]`` is the input batch and ``activations[i + 1]`` the output
    of layer ``i``; the final entry holds the softmax probabilities.
    """

    activations: list
    caches: list
    mode: str

    @property
    def probs(self):
        return self.activations[-1]

    @property
    def logits(self):
        return self.activations[-2]


def network_forward(model: ModelState, batch, mode=L.INFER, rng=None) -> ForwardTrace:
    spec = model.spec
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {spec.input_shape}")
    acts = [batch]
    caches = []
    x = batch
    for i, layer in enumerate(spec.layers):
        cache = None
        if isinstance(layer, Conv):
            w, b = model.params[i]
            x = L.conv_forward(x, w, b, layer.stride, layer.pad)
        elif isinstance(layer, ReLU):
            x = L.relu_forward(x)
        elif isinstance(layer, MaxPool):
            x, cache = L.maxpool_forward(x, layer.window, layer.stride, layer.pad)
        elif isinstance(layer, StochasticPool):
            if mode == L.TRAIN and rng is None:
                raise ValueError("stochastic pooling in train mode needs an rng")
            x, cache = L.stochpool_forward(x, layer.window, layer.stride, rng, mode, layer.pad)
        elif isinstance(layer, Dropout):
            if mode == L.TRAIN and rng is None:
                raise ValueError("dropout in train mode needs an rng")
            x, cache = L.dropout_forward(x, layer.p, rng, mode)
        elif isinstance(layer, FullConnect):
            w, b = model.params[i]
            x = L.fc_forward(x, w, b)
        elif isinstance(layer, Softmax):
            x = L.softmax(x)
        assert np.isfinite(x).all(), f"non-finite activation after layer {i}"
        acts.append(x)
        caches.append(cache)
    return ForwardTrace(acts, caches, mode)


def network_backward(model: ModelState, trace: ForwardTrace, labels, return_input_grad=False):
    """Cross-entropy loss of ``trace`` against ``labels`` and its parameter gradients.

    Returns ``(loss, grads)`` where ``grads`` mirrors ``model.params``; with
    ``return_input_grad`` the gradient w.r.t. the input batch is appended.
    """
    spec = model.spec
    _, loss, g = L.softmax_xent(trace.logits, labels)
    grads = {}
    for i in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[i]
        x = trace.activations[i]
        cache = trace.caches[i]
        if isinstance(layer, Conv):
            w, _ = model.params[i]
            g, gw, gb = L.conv_backward(x, w, g, layer.stride, layer.pad)
            grads[i] = [gw, gb]
        elif isinstance(layer, ReLU):
            g = L.relu_backward(x, g)
        elif isinstance(layer, MaxPool):
            g = L.maxpool_backward(cache, g)
        elif isinstance(layer, StochasticPool):
            if cache is None:
                g = L.stochpool_infer_backward(x, layer.window, layer.stride, g, layer.pad)
            else:
                g = L.stochpool_backward(cache, g)
        elif isinstance(layer, Dropout):
            g = L.dropout_backward(cache, g)
        elif isinstance(layer, FullConnect):
            w, _ = model.params[i]
            g, gw, gb = L.fc_backward(x, w, g)
            grads[i] = [gw, gb]
    grads = {i: grads[i] for i in spec.param_layers()}
    if return_input_grad:
        return loss, grads, g
    return loss, grads


def predict_proba(model: ModelState, batch, chunk=256):
    """Inference-mode softmax probabilities, evaluated in chunks."""
    out = [network_forward(model, batch[s:s + chunk], L.INFER).probs for s in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0)


def topk_indices(probs, k):
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def describe(spec: NetworkSpec) -> list[dict[str, Any]]:
    """One row per layer with its output shape and parameter count."""
    rows = []
    for i, (layer, shape) in enumerate(zip(spec.layers, infer_shapes(spec))):
        rows.append({"index": i, "type": layer.kind, "output": shape,
                     "params": sum(int(np.prod(s)) for s in param_shapes(layer))})
    return rows
