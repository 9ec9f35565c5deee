"""Convolutional RBM: block Gibbs conditionals, probabilistic max pooling and CD-1.

Visible units are treated as Bernoulli probabilities in [0, 1]. Hidden
inference is a valid cross-correlation of the image with each filter;
reconstruction sums every hidden map fully convolved with its own filter.
The hidden bias is shared per filter and the visible bias across the image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DatasetError, ImageFormatError, NonFiniteError, ShapeError
from .tensor_core import layers as L
from .tensor_core.network import Conv, ModelState

log = logging.getLogger(__name__)


def sigmoid(x):
    return (0.5 * (1 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


@dataclass
class CrbmState:
    filters: np.ndarray  # (K, C, kh, kw)
    hidden_bias: np.ndarray  # (K,)
    visible_bias: float
    pool_block: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.filters.ndim != 4 or min(self.filters.shape) < 1:
            raise ShapeError(f"filters must be (K, C, kh, kw) with positive extents, got {self.filters.shape}")
        if self.hidden_bias.shape != (self.filters.shape[0],):
            raise ShapeError("one hidden bias per filter expected")
        if self.pool_block < 1:
            raise ContractError("pool_block must be >= 1")
        self.visible_bias = np.float32(self.visible_bias)

    @classmethod
    def init(cls, n_filters, in_channels, kh, kw, pool_block=1, rng=None, scale=0.01):
        rng = rng or np.random.default_rng(0)
        w = (scale * rng.standard_normal((n_filters, in_channels, kh, kw))).astype(np.float32)
        return cls(w, np.zeros(n_filters, np.float32), 0.0, pool_block)

    def copy(self):
        return CrbmState(self.filters.copy(), self.hidden_bias.copy(), self.visible_bias, self.pool_block,
                         dict(self.meta))

    def _check(self, v):
        if v.ndim != 4 or v.shape[1] != self.filters.shape[1]:
            raise ShapeError(f"visible batch {v.shape} does not match {self.filters.shape[1]} input channels")


def hidden_preact(v, s: CrbmState):
    s._check(v)
    return L.conv_forward(v, s.filters.astype(v.dtype, copy=False), s.hidden_bias.astype(v.dtype, copy=False))


def hidden_prob(v, s: CrbmState):
    """P(h_k[i,j] = 1 | v) without pooling: sigmoid of filter response plus bias."""
    return sigmoid(hidden_preact(v, s))


def visible_preact(h, s: CrbmState, visible_hw=None):
    k, c, kh, kw = s.filters.shape
    if h.ndim != 4 or h.shape[1] != k:
        raise ShapeError(f"hidden batch {h.shape} does not match {k} filters")
    hw = visible_hw or (h.shape[2] + kh - 1, h.shape[3] + kw - 1)
    if (h.shape[2], h.shape[3]) != (hw[0] - kh + 1, hw[1] - kw + 1):
        raise ShapeError(f"hidden maps {h.shape[2:]} do not fit visible size {hw}")
    return L.conv_input_grad(h, s.filters.astype(h.dtype, copy=False), hw) + h.dtype.type(s.visible_bias)


def visible_prob(h, s: CrbmState, visible_hw=None):
    """P(v[c,i,j] = 1 | h): sigmoid of summed full convolutions plus the visible bias."""
    return sigmoid(visible_preact(h, s, visible_hw))


# -- probabilistic max pooling ----------------------------------------------------


def _blocks(a, block, fill):
    n, k, h, w = a.shape
    hb, wb = -(-h // block), -(-w // block)
    if (hb * block, wb * block) != (h, w):
        padded = np.full((n, k, hb * block, wb * block), fill, dtype=a.dtype)
        padded[:, :, :h, :w] = a
        a = padded
    return a.reshape(n, k, hb, block, wb, block).transpose(0, 1, 2, 4, 3, 5).reshape(n, k, hb, wb, block * block)


def _unblock(b, block, shape):
    n, k, hb, wb, _ = b.shape
    full = b.reshape(n, k, hb, wb, block, block).transpose(0, 1, 2, 4, 3, 5).reshape(n, k, hb * block, wb * block)
    return full[:, :, :shape[2], :shape[3]]


def prob_maxpool_probs(preact, block):
    """Per-unit on-probabilities and per-block all-off probabilities.

    Within each non-overlapping block B, P(unit a on) = exp(x_a) / (1 + sum_B exp(x)),
    P(all off) = 1 / (1 + sum_B exp(x)). Maps are padded with -inf to a whole
    number of blocks.
    """
    blk = _blocks(preact, block, -np.inf)
    m = np.maximum(blk.max(axis=-1, keepdims=True), 0)
    e = np.exp(blk - m)
    off = np.exp(-m)
    denom = off + e.sum(axis=-1, keepdims=True)
    on = e / denom
    return _unblock(on, block, preact.shape), (off / denom)[..., 0]


def prob_maxpool(preact, block, rng):
    """Sample hidden units so that at most one per block is on.

    Returns ``(pooled, hidden_sample)`` where ``pooled`` is the block's
    probability of having any unit on (``1 - P(all off)``).
    """
    on, off = prob_maxpool_probs(preact, block)
    blk_on = _blocks(on, block, 0.0)
    cdf = np.cumsum(np.concatenate([blk_on, off[..., None]], axis=-1), axis=-1)
    u = rng.random(off.shape)[..., None]
    choice = np.minimum((cdf <= u).sum(axis=-1), block * block)
    onehot = (np.arange(block * block + 1) == choice[..., None])[..., :-1].astype(preact.dtype)
    return (1 - off).astype(preact.dtype), _unblock(onehot, block, preact.shape)


def _hidden_probs(v, s):
    pre = hidden_preact(v, s)
    if s.pool_block == 1:
        return pre, sigmoid(pre)
    return pre, prob_maxpool_probs(pre, s.pool_block)[0]


def sample_hidden(v, s: CrbmState, rng):
    pre, probs = _hidden_probs(v, s)
    if s.pool_block == 1:
        return probs, (rng.random(probs.shape) < probs).astype(v.dtype)
    return probs, prob_maxpool(pre, s.pool_block, rng)[1]


def pooled_features(v, s: CrbmState):
    """Pooling-layer probabilities, the input to a stacked CRBM."""
    on, off = prob_maxpool_probs(hidden_preact(v, s), s.pool_block)
    return (1 - off).astype(v.dtype)


# -- CD-1 ---------------------------------------------------------------------------


@dataclass
class Cd1Config:
    lr: float = 0.1
    momentum_initial: float = 0.5
    momentum_final: float = 0.9
    momentum_switch_epoch: int = 5
    batch_size: int = 10
    epochs: int = 30
    variance_ratio_limit: float = 2.0
    lr_decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("lr must be non-negative")
        if not (0 <= self.momentum_initial < 1 and 0 <= self.momentum_final < 1):
            raise ContractError("momenta must lie in [0, 1)")
        if self.variance_ratio_limit <= 0 or self.lr_decay <= 0 or self.batch_size < 1:
            raise ContractError("limits and batch size must be positive")

    def momentum_at(self, epoch):
        return self.momentum_final if epoch >= self.momentum_switch_epoch else self.momentum_initial


@dataclass
class Velocities:
    filters: np.ndarray
    hidden_bias: np.ndarray
    visible_bias: float = 0.0

    @classmethod
    def zeros(cls, s: CrbmState):
        return cls(np.zeros_like(s.filters), np.zeros_like(s.hidden_bias), 0.0)

    def reset_weights(self):
        self.filters[...] = 0
        self.hidden_bias[...] = 0


@dataclass
class ReconStats:
    mse: float
    var_ratio: float


@dataclass
class Cd1Gradients:
    filters: np.ndarray
    hidden_bias: np.ndarray
    visible_bias: float
    v_neg: np.ndarray
    h_neg: np.ndarray


def cd1_gradients(v, s: CrbmState, h_pos) -> Cd1Gradients:
    """CD-1 statistics for a given positive-phase hidden sample.

    The negative phase uses probabilities: ``v- = P(v | h+)`` and
    ``h- = P(h | v-)``. Filter gradients are data/reconstruction correlations
    averaged over the batch and the hidden positions, matching the bias
    gradients' normalisation.
    """
    k, c, kh, kw = s.filters.shape
    n, _, ho, wo = h_pos.shape
    v_neg = visible_prob(h_pos, s, v.shape[2:])
    _, h_neg = _hidden_probs(v_neg, s)
    scale = 1.0 / (n * ho * wo)
    pos = L.conv_filter_grad(v, h_pos, (kh, kw))
    neg = L.conv_filter_grad(v_neg, h_neg, (kh, kw))
    d_w = (pos - neg) * scale
    d_b = (h_pos.sum(axis=(0, 2, 3)) - h_neg.sum(axis=(0, 2, 3))) * scale
    d_c = float(v.mean() - v_neg.mean())
    return Cd1Gradients(d_w.astype(s.filters.dtype), d_b.astype(s.hidden_bias.dtype), d_c, v_neg, h_neg)


def cd1_update(batch, s: CrbmState, cfg: Cd1Config, velocities: Velocities, rng, lr=None, momentum=None):
    """One CD-1 step on ``batch``; returns ``(new_state, ReconStats)``.

    ``velocities`` is updated in place (``v <- momentum * v + lr * grad``) and
    the new parameters are ``old + v``.
    """
    lr = cfg.lr if lr is None else lr
    momentum = cfg.momentum_initial if momentum is None else momentum
    batch = np.asarray(batch, dtype=np.float32)
    _, h_pos = sample_hidden(batch, s, rng)
    g = cd1_gradients(batch, s, h_pos)
    if not (np.isfinite(g.filters).all() and np.isfinite(g.hidden_bias).all() and math.isfinite(g.visible_bias)):
        raise NonFiniteError("non-finite CD-1 update")
    mu, eta = np.float32(momentum), np.float32(lr)
    velocities.filters *= mu
    velocities.filters += eta * g.filters
    velocities.hidden_bias *= mu
    velocities.hidden_bias += eta * g.hidden_bias
    velocities.visible_bias = float(mu * np.float32(velocities.visible_bias) + eta * np.float32(g.visible_bias))
    new = CrbmState(s.filters + velocities.filters, s.hidden_bias + velocities.hidden_bias,
                    np.float32(s.visible_bias) + np.float32(velocities.visible_bias), s.pool_block, dict(s.meta))
    if not (np.isfinite(new.filters).all() and np.isfinite(new.hidden_bias).all()):
        raise NonFiniteError("non-finite CRBM parameters after update")
    mse = float(np.mean((batch - g.v_neg) ** 2))
    var_data = float(batch.var())
    var_neg = float(g.v_neg.var())
    ratio = var_neg / var_data if var_data > 0 else (math.inf if var_neg > 0 else 1.0)
    return new, ReconStats(mse, ratio)


@dataclass
class CrbmEpoch:
    epoch: int
    recon_mse: float
    var_ratio_mean: float
    lr: float

    def line(self):
        return f"{self.epoch}, {self.recon_mse:.6f}, {self.var_ratio_mean:.6f}, {self.lr:.6g}"


class CrbmTrainer:
    """Holds the mutable training state so the variance-ratio rule is observable."""

    def __init__(self, state: CrbmState, cfg: Cd1Config):
        self.state = state
        self.cfg = cfg
        self.lr = cfg.lr
        self.velocities = Velocities.zeros(state)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.triggers = 0

    def step(self, batch, epoch):
        self.state, stats = cd1_update(batch, self.state, self.cfg, self.velocities, self.rng,
                                       lr=self.lr, momentum=self.cfg.momentum_at(epoch))
        if stats.var_ratio > self.cfg.variance_ratio_limit:
            self.lr *= self.cfg.lr_decay
            self.velocities.reset_weights()
            self.triggers += 1
            log.debug("variance ratio %.3f > %.3f: lr -> %.4g", stats.var_ratio, self.cfg.variance_ratio_limit, self.lr)
        return stats

    def epoch(self, data, epoch):
        order = self.rng.permutation(len(data))
        stats = [self.step(data[order[i:i + self.cfg.batch_size]], epoch)
                 for i in range(0, len(order), self.cfg.batch_size)]
        return CrbmEpoch(epoch, float(np.mean([s.mse for s in stats])),
                         float(np.mean([s.var_ratio for s in stats])), self.lr)


def train_crbm(data, geometry, cfg: Cd1Config, log_path=None):
    """Train a CRBM with CD-1 on a (N, C, H, W) array of values in [0, 1].

    ``geometry`` is ``(n_filters, kernel_h, kernel_w)`` with an optional
    fourth entry for the pooling block. Returns ``(state, [CrbmEpoch, ...])``.
    """
    data = np.asarray(data, dtype=np.float32)
    if len(data) == 0:
        raise DatasetError("empty dataset")
    if data.min() < 0 or data.max() > 1:
        raise ContractError("CRBM inputs must lie in [0, 1]")
    n_filters, kh, kw, *rest = geometry
    pool_block = rest[0] if rest else 1
    state = CrbmState.init(n_filters, data.shape[1], kh, kw, pool_block, np.random.default_rng(cfg.seed))
    trainer = CrbmTrainer(state, cfg)
    history = []
    sink = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            rec = trainer.epoch(data, epoch)
            history.append(rec)
            log.info("crbm epoch %d recon %.5f ratio %.3f lr %.4g", epoch, rec.recon_mse, rec.var_ratio_mean, rec.lr)
            if sink:
                sink.write(rec.line() + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return trainer.state, history


# -- filters as images --------------------------------------------------------------


def tile_filters(filters):
    """Min-max normalise each filter to 0..255 and tile them with 1-pixel black borders.

    Returns uint8 (H, W) for single-channel filters or (3, H, W) for colour.
    A constant filter becomes uniform 128.
    """
    k, c, kh, kw = filters.shape
    if c not in (1, 3):
        raise ImageFormatError(f"can only render 1- or 3-channel filters, got {c}")
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    canvas = np.zeros((c, rows * (kh + 1) + 1, cols * (kw + 1) + 1), dtype=np.uint8)
    for idx in range(k):
        f = filters[idx].astype(np.float64)
        lo, hi = f.min(), f.max()
        tile = np.full(f.shape, 128, dtype=np.uint8) if hi == lo else np.rint(255 * (f - lo) / (hi - lo)).astype(np.uint8)
        r, q = divmod(idx, cols)
        y, x = 1 + r * (kh + 1), 1 + q * (kw + 1)
        canvas[:, y:y + kh, x:x + kw] = tile
    return canvas[0] if c == 1 else canvas


def first_layer_filters(source, layer_index=None):
    if isinstance(source, CrbmState):
        return source.filters
    if isinstance(source, ModelState):
        if layer_index is None:
            layer_index = source.spec.param_layers()[0]
        if not isinstance(source.spec.layers[layer_index], Conv):
            raise ShapeError(f"layer {layer_index} is not a convolution")
        return source.params[layer_index][0]
    return np.asarray(source)


def export_filters(source, path, layer_index=None):
    """Write the filter bank of a CRBM or a model's conv layer as a PGM/PPM tile image."""
    from .dataio import write_image

    canvas = tile_filters(first_layer_filters(source, layer_index))
    write_image(canvas, path)
    return canvas


# -- transfer -----------------------------------------------------------------------


def transfer_to_cnn(s: CrbmState, model: ModelState, layer_index=None) -> ModelState:
    """Copy CRBM filters and hidden biases into a conv layer of ``model`` (a copy is returned)."""
    if layer_index is None:
        layer_index = model.spec.param_layers()[0]
    layer = model.spec.layers[layer_index]
    if not isinstance(layer, Conv):
        raise ShapeError(f"layer {layer_index} is not a convolution")
    target = model.params[layer_index][0].shape
    if tuple(s.filters.shape) != tuple(target):
        raise ShapeError(f"CRBM filters {tuple(s.filters.shape)} do not match conv layer {layer_index} {tuple(target)}")
    out = model.copy()
    out.params[layer_index] = [s.filters.astype(np.float32, copy=True), s.hidden_bias.astype(np.float32, copy=True)]
    out.meta["crbm_transfer"] = layer_index
    return out
