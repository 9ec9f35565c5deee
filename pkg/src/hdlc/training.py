"""Mini-batch SGD with momentum, warm starts and the root/leaf training recipes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetError, InputError, NonFiniteError, ShapeError
from .tensor_core import layers as L
from .tensor_core.network import (ModelState, NetworkSpec, init_model, network_backward,
                                  network_forward, param_shapes, topk_indices)

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    velocity: dict
    lr: float
    momentum: float
    epoch: int = 0
    batch_size: int = 32

    @classmethod
    def zeros_like(cls, model: ModelState, lr, momentum, batch_size=32):
        velocity = {i: [np.zeros_like(p) for p in ps] for i, ps in model.params.items()}
        return cls(velocity, lr, momentum, 0, batch_size)


def sgd_step(model: ModelState, grads: dict, optim: OptimState):
    """``v <- momentum * v - lr * g``; ``param <- param + v``, in place.

    Returns ``(model, optim)`` for convenience.
    """
    for i, ps in model.params.items():
        gs = grads.get(i)
        if gs is None or len(gs) != len(ps):
            raise ShapeError(f"layer {i}: missing gradients")
        for p, g in zip(ps, gs):
            if g.shape != p.shape:
                raise ShapeError(f"layer {i}: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"layer {i}: non-finite gradient")
    lr = np.float32(optim.lr)
    mu = np.float32(optim.momentum)
    for i, ps in model.params.items():
        for p, g, v in zip(ps, grads[i], optim.velocity[i]):
            v *= mu
            v -= lr * g.astype(v.dtype, copy=False)
            p += v
    return model, optim


# -- recipes ------------------------------------------------------------------------


@dataclass
class WarmStart:
    path: str | None = None
    layers: int | None = None  # None = every parameterised layer


@dataclass
class TrainRecipe:
    epochs: int = 15
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    init: WarmStart | None = None
    dropout: bool = True
    stochastic_pool: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if isinstance(self.init, dict):
            self.init = WarmStart(**self.init)


# Leaf models trained from scratch, later leaf models warm-started from them, and
# the root model warm-started from a model trained on a smaller label set.
LEAF_SCRATCH = TrainRecipe(epochs=15, lr=0.01, momentum=0.9)
LEAF_WARM = TrainRecipe(epochs=15, lr=0.001, momentum=0.9, init=WarmStart())
ROOT_WARM = TrainRecipe(epochs=32, lr=0.001, momentum=0.9, init=WarmStart())


def recipe_to_dict(recipe: TrainRecipe) -> dict:
    return asdict(recipe)


def load_recipe(path, **overrides) -> TrainRecipe:
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainRecipe(**data)
    except TypeError as exc:
        raise InputError(f"bad recipe: {exc}") from exc


def save_recipe(recipe: TrainRecipe, path):
    Path(path).write_text(json.dumps(recipe_to_dict(recipe), indent=2) + "\n")


# -- warm start ---------------------------------------------------------------------


def warm_start(target_spec: NetworkSpec, source: ModelState, layer_count=None, seed=0) -> ModelState:
    """Copy the first ``layer_count`` parameterised layers of ``source`` into a fresh model.

    ``layer_count=None`` transfers every layer. Remaining layers get fresh
    initialisation from ``seed``. ``meta["transferred"]`` lists copied layers.
    """
    target = init_model(target_spec, np.random.default_rng(seed))
    tgt_layers = target_spec.param_layers()
    src_layers = source.spec.param_layers()
    n = len(tgt_layers) if layer_count is None else layer_count
    if n > min(len(tgt_layers), len(src_layers)):
        raise ShapeError(f"cannot transfer {n} layers: source has {len(src_layers)}, target {len(tgt_layers)}")
    transferred = []
    for k in range(n):
        ti, si = tgt_layers[k], src_layers[k]
        want = param_shapes(target_spec.layers[ti])
        have = [p.shape for p in source.params[si]]
        if [tuple(s) for s in want] != [tuple(s) for s in have]:
            raise ShapeError(f"parameterised layer {k} (target layer {ti}): source shapes {have} != target {want}")
        target.params[ti] = [p.astype(np.float32, copy=True) for p in source.params[si]]
        transferred.append(ti)
    target.meta["transferred"] = transferred
    return target


# -- training loop ------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    top1: float
    top5: float

    def line(self) -> str:
        return f"{self.epoch}, {self.mean_loss:.6f}, {self.top1:.6f}, {self.top5:.6f}"


def _as_arrays(dataset):
    if hasattr(dataset, "arrays"):
        return dataset.arrays()
    images, labels = dataset
    return np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def _training_spec(spec: NetworkSpec, recipe: TrainRecipe) -> NetworkSpec:
    from .tensor_core.network import Dropout, MaxPool, StochasticPool

    layers = []
    for layer in spec.layers:
        if isinstance(layer, Dropout) and not recipe.dropout:
            layer = Dropout(0.0)
        elif isinstance(layer, StochasticPool) and not recipe.stochastic_pool:
            layer = MaxPool(layer.window, layer.stride, layer.pad)
        layers.append(layer)
    return replace(spec, layers=tuple(layers))


def train_model(spec: NetworkSpec, dataset, recipe: TrainRecipe, init_model_state: ModelState | None = None,
                log_path=None, on_epoch=None):
    """Train with mini-batch SGD; returns ``(model, [EpochStats, ...])``.

    ``dataset`` is ``(images, labels)`` or any object with an ``arrays()``
    method. The starting point is ``init_model_state`` if given, else a warm
    start from ``recipe.init.path``, else a fresh initialisation from
    ``recipe.seed``. Per-epoch loss and top-1/top-5 accuracy are measured on
    the training batches as they are processed.
    """
    images, labels = _as_arrays(dataset)
    if len(images) == 0:
        raise DatasetError("empty dataset")
    if len(labels) != len(images):
        raise DatasetError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= spec.class_count:
        raise ContractError(f"labels must lie in [0, {spec.class_count})")

    if init_model_state is not None:
        model = init_model_state.copy()
        if model.spec.param_layers() != spec.param_layers():
            raise ShapeError("initial model does not match spec")
        model = ModelState(spec, model.params, model.meta)
    elif recipe.init is not None and recipe.init.path:
        from .dataio import load_model

        model = warm_start(spec, load_model(recipe.init.path), recipe.init.layers, recipe.seed)
    else:
        model = init_model(spec, np.random.default_rng(recipe.seed))

    run_spec = _training_spec(spec, recipe)
    run_model = ModelState(run_spec, model.params, model.meta)
    optim = OptimState.zeros_like(model, recipe.lr, recipe.momentum, recipe.batch_size)
    rng = np.random.default_rng(recipe.seed + 1)
    k = min(5, spec.class_count)
    history = []
    sink = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, recipe.epochs + 1):
            order = rng.permutation(len(images))
            loss_sum = hit1 = hit5 = 0.0
            for start in range(0, len(order), recipe.batch_size):
                idx = order[start:start + recipe.batch_size]
                x, y = images[idx], labels[idx]
                trace = network_forward(run_model, x, L.TRAIN, rng)
                loss, grads = network_backward(run_model, trace, y)
                sgd_step(run_model, grads, optim)
                top = topk_indices(trace.probs, k)
                loss_sum += loss * len(idx)
                hit1 += float((top[:, 0] == y).sum())
                hit5 += float((top == y[:, None]).any(axis=1).sum())
            optim.epoch = epoch
            stats = EpochStats(epoch, loss_sum / len(images), hit1 / len(images), hit5 / len(images))
            history.append(stats)
            log.info("epoch %d loss %.4f top1 %.3f top5 %.3f", epoch, stats.mean_loss, stats.top1, stats.top5)
            if sink:
                sink.write(stats.line() + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(stats, model)
    finally:
        if sink:
            sink.close()
    model.meta.setdefault("provenance", []).append({"recipe": recipe_to_dict(recipe), "epochs": recipe.epochs})
    return model, history


def accuracy(model: ModelState, images, labels, k=5):
    """Inference-mode (top-1, top-k) accuracy."""
    from .tensor_core.network import predict_proba

    probs = predict_proba(model, images)
    top = topk_indices(probs, min(k, probs.shape[1]))
    labels = np.asarray(labels)
    return float((top[:, 0] == labels).mean()), float((top == labels[:, None]).any(axis=1).mean())
