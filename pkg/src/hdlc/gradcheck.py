"""Central finite-difference checks for every layer and for whole networks.

Checks run in float64 through the same layer code the float32 models use.
Entries whose perturbation flips a ReLU or changes a pooling choice are
skipped, since the function is not differentiable across that switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import layers as L
from .tensor_core.network import ModelState, NetworkSpec, init_model, network_backward, network_forward

EPS = 1e-3
LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
MIN_GRAD = 1e-6


@dataclass
class CheckResult:
    name: str
    worst: float
    checked: int
    skipped: int = 0
    where: str = ""

    def passed(self, tol):
        return self.worst < tol and self.checked > 0

    def line(self, tol):
        status = "ok" if self.passed(tol) else "FAIL"
        return f"{status:4} {self.name:28} worst rel err {self.worst:.2e} ({self.checked} checked, {self.skipped} skipped){self.where}"


def rel_errors(analytic, numeric, min_grad=MIN_GRAD):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale > min_grad
    return np.abs(a - n)[keep] / scale[keep]


def numeric_grad(f, x, eps=EPS, pattern=None):
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (modified in place, restored).

    If ``pattern`` is given, elements whose ``+eps`` or ``-eps`` evaluation
    changes ``pattern()`` are returned as NaN.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    base = pattern() if pattern else None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        moved = pattern and not _same(pattern(), base)
        flat[i] = orig - eps
        fm = f()
        moved = moved or (pattern and not _same(pattern(), base))
        flat[i] = orig
        gflat[i] = np.nan if moved else (fp - fm) / (2 * eps)
    return grad


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _compare(name, analytic, numeric):
    valid = ~np.isnan(numeric)
    errs = rel_errors(np.asarray(analytic)[valid], numeric[valid])
    worst = float(errs.max()) if errs.size else 0.0
    return CheckResult(name, worst, int(errs.size), int((~valid).sum()))


def _spaced(rng, shape, spacing=0.02):
    """Random values whose pairwise gaps are at least ``spacing`` (no max-pool near-ties)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * spacing + rng.uniform(0, spacing / 4, n)
    return vals.reshape(shape)


# -- per-layer checks -----------------------------------------------------------------


def check_conv(rng, eps=EPS):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = w = int(rng.integers(k, 7))
    x = rng.standard_normal((n, c, h, w))
    wts = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    out = L.conv_forward(x, wts, b, stride, pad)
    r = rng.standard_normal(out.shape)
    gx, gw, gb = L.conv_backward(x, wts, r, stride, pad)
    loss = lambda: float((L.conv_forward(x, wts, b, stride, pad) * r).sum())
    return [_compare("conv/input", gx, numeric_grad(loss, x, eps)),
            _compare("conv/filters", gw, numeric_grad(loss, wts, eps)),
            _compare("conv/bias", gb, numeric_grad(loss, b, eps))]


def check_relu(rng, eps=EPS):
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 10 * eps, np.sign(x + 1e-12) * 10 * eps, x)  # keep clear of the kink
    r = rng.standard_normal(x.shape)
    loss = lambda: float((L.relu_forward(x) * r).sum())
    return [_compare("relu", L.relu_backward(x, r), numeric_grad(loss, x, eps))]


def check_maxpool(rng, eps=EPS):
    window = int(rng.integers(2, 4))
    stride = int(rng.integers(1, window + 1))
    x = _spaced(rng, (2, 2, 7, 7))
    out, idx = L.maxpool_forward(x, window, stride)
    r = rng.standard_normal(out.shape)
    loss = lambda: float((L.maxpool_forward(x, window, stride)[0] * r).sum())
    return [_compare("maxpool", L.maxpool_backward(idx, r), numeric_grad(loss, x, eps))]


def check_stochpool(rng, eps=EPS):
    # truncation error of the rational infer-mode map grows like (eps / activation)^2
    x = rng.uniform(1.0, 10.0, (2, 2, 6, 6))
    out, idx = L.stochpool_forward(x, 3, 2, np.random.default_rng(int(rng.integers(1 << 30))), L.TRAIN)
    r = rng.standard_normal(out.shape)

    def routed():
        # the sampled positions are held fixed, leaving a linear gather
        win = L._pool_windows(x, 3, 2, 0, 0.0)
        return float((np.take_along_axis(win, idx.flat[..., None], -1)[..., 0] * r).sum())

    r2 = rng.standard_normal(L.stochpool_forward(x, 3, 2, None, L.INFER)[0].shape)
    infer = lambda: float((L.stochpool_forward(x, 3, 2, None, L.INFER)[0] * r2).sum())
    return [_compare("stochpool/train", L.stochpool_backward(idx, r), numeric_grad(routed, x, eps)),
            _compare("stochpool/infer", L.stochpool_infer_backward(x, 3, 2, r2), numeric_grad(infer, x, eps))]


def check_dropout(rng, eps=EPS):
    x = rng.standard_normal((3, 10))
    seed = int(rng.integers(1 << 30))
    out, mask = L.dropout_forward(x, 0.5, np.random.default_rng(seed), L.TRAIN)
    r = rng.standard_normal(out.shape)
    loss = lambda: float((L.dropout_forward(x, 0.5, np.random.default_rng(seed), L.TRAIN)[0] * r).sum())
    return [_compare("dropout", L.dropout_backward(mask, r), numeric_grad(loss, x, eps))]


def check_fc(rng, eps=EPS):
    n, i, o = rng.integers(1, 4), rng.integers(1, 8), rng.integers(1, 6)
    x = rng.standard_normal((n, i))
    w = rng.standard_normal((o, i))
    b = rng.standard_normal(o)
    r = rng.standard_normal((n, o))
    gx, gw, gb = L.fc_backward(x, w, r)
    loss = lambda: float((L.fc_forward(x, w, b) * r).sum())
    return [_compare("fc/input", gx, numeric_grad(loss, x, eps)),
            _compare("fc/weights", gw, numeric_grad(loss, w, eps)),
            _compare("fc/bias", gb, numeric_grad(loss, b, eps))]


def check_softmax_xent(rng, eps=EPS):
    n, c = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    logits = rng.standard_normal((n, c)) * 2
    labels = rng.integers(0, c, n)
    _, _, g = L.softmax_xent(logits, labels)
    loss = lambda: L.softmax_xent(logits, labels)[1]
    return [_compare("softmax_xent", g, numeric_grad(loss, logits, eps))]


LAYER_CHECKS = (check_conv, check_relu, check_maxpool, check_stochpool, check_dropout, check_fc,
                check_softmax_xent)


def check_layers(seed, eps=EPS):
    rng = np.random.default_rng(seed)
    return [res for check in LAYER_CHECKS for res in check(rng, eps)]


# -- whole-network check ----------------------------------------------------------------


def _pattern(trace):
    out = []
    for x, cache in zip(trace.activations[1:], trace.caches):
        if isinstance(cache, L.PoolIndices):
            out.append(cache.flat)
    return out


def check_network(model: ModelState, x, labels, eps=EPS, mode=L.TRAIN, seed=0):
    """Finite-difference check of every parameter (and the input) of a float64 copy of ``model``."""
    from .tensor_core.network import ReLU

    m = model.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    relu_at = [i for i, layer in enumerate(m.spec.layers) if isinstance(layer, ReLU)]

    def forward():
        return network_forward(m, x, mode, np.random.default_rng(seed))

    def loss():
        return network_backward(m, forward(), labels)[0]

    def pattern():
        t = forward()
        return _pattern(t) + [t.activations[i] > 0 for i in relu_at]

    _, grads, gx = network_backward(m, forward(), labels, return_input_grad=True)
    results = []
    for i in m.spec.param_layers():
        for name, p, g in zip(("weights", "bias"), m.params[i], grads[i]):
            results.append(_compare(f"layer{i}/{m.spec.layers[i].kind}/{name}", g, numeric_grad(loss, p, eps, pattern)))
    results.append(_compare("input", gx, numeric_grad(loss, x, eps, pattern)))
    return results


def toy_spec(classes=3):
    """Conv -> ReLU -> FC -> softmax on 2x5x5 inputs."""
    from .tensor_core.network import Conv, FullConnect, ReLU, Softmax

    return NetworkSpec((2, 5, 5), (Conv(2, 3, 3, 3), ReLU(), FullConnect(27, classes), Softmax(classes)), classes, "toy")


def check_spec(spec: NetworkSpec, seed=0, batch=2, eps=EPS):
    rng = np.random.default_rng(seed)
    model = init_model(spec, rng)
    for ps in model.params.values():
        ps[1][...] = rng.uniform(-0.1, 0.1, ps[1].shape)  # non-zero biases exercise the bias path
    x = rng.standard_normal((batch, *spec.input_shape))
    if any(layer.kind == "stochpool" for layer in spec.layers):
        x = np.abs(x)
    labels = rng.integers(0, spec.class_count, batch)
    return check_network(model, x, labels, eps, L.TRAIN, seed)


def worst(results):
    return max(results, key=lambda r: r.worst)
