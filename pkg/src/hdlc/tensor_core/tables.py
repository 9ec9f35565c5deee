"""The root and leaf architectures as printed, and their reconciliation into NetworkSpecs.

The printed tables give each layer's input size and kernel shape but not the
output channel count, stride or padding. Those are recovered here:

* output channels of a layer = channels of the next layer's input (or, before
  a fully-connected layer, its ``in_units`` divided by the spatial area);
* stride and pad = the smallest stride, then the smallest pad below the kernel
  size, that maps the declared input extent onto the next declared extent.

ReLU follows every convolution and every fully-connected layer except the
last; dropout with p=0.5 follows each hidden fully-connected ReLU.
"""

from __future__ import annotations

from importlib import resources

from ..errors import SpecError
from . import layers as L
from .network import (Conv, Dropout, FullConnect, MaxPool, NetworkSpec, ReLU, Softmax,
                      StochasticPool, load_spec)

# (printed layer number, type, input (H, W, C) or in_units, kernel (kh, kw[, depth]) or out_units)
TABLE1_ROOT = [
    (1, "conv", (225, 225, 3), (3, 3, 3)),
    (2, "maxpool", (223, 223, 64), (3, 3)),
    (3, "conv", (111, 111, 64), (3, 3, 64)),
    (4, "conv", (111, 111, 128), (3, 3, 128)),
    (5, "maxpool", (111, 111, 128), (3, 3)),
    (6, "conv", (55, 55, 128), (3, 3, 128)),
    (7, "conv", (55, 55, 256), (3, 3, 256)),
    (8, "maxpool", (55, 55, 256), (3, 3)),
    (9, "conv", (27, 27, 256), (3, 3, 256)),
    (10, "conv", (27, 27, 384), (3, 3, 384)),
    (11, "conv", (27, 27, 384), (3, 3, 384)),
    (12, "maxpool", (27, 27, 384), (3, 3)),
    (13, "conv", (13, 13, 384), (3, 3, 384)),
    (14, "conv", (13, 13, 512), (3, 3, 512)),
    (15, "conv", (13, 13, 512), (3, 3, 512)),
    (16, "maxpool", (13, 13, 512), (3, 3)),
    (17, "conv", (7, 7, 512), (1, 1, 512)),
    (18, "fc", 12544, 4096),
    (19, "fc", 4096, 2048),
    (20, "fc", 2048, 128),
]
TABLE1_SOFTMAX = 128


def _leaf_rows(pool):
    # printed numbering skips 11
    return [
        (1, "conv", (225, 225, 3), (7, 7, 3)),
        (2, pool, (111, 111, 64), (3, 3)),
        (3, "conv", (55, 55, 64), (3, 3, 64)),
        (4, "conv", (55, 55, 128), (3, 3, 128)),
        (5, pool, (55, 55, 128), (3, 3)),
        (6, "conv", (27, 27, 128), (3, 3, 128)),
        (7, "conv", (27, 27, 256), (3, 3, 256)),
        (8, pool, (27, 27, 256), (3, 3)),
        (9, "conv", (13, 13, 256), (3, 3, 256)),
        (10, "conv", (13, 13, 384), (3, 3, 384)),
        (12, pool, (13, 13, 384), (3, 3)),
        (13, "conv", (7, 7, 384), (1, 1, 384)),
        (14, "fc", 6272, 2048),
        (15, "fc", 2048, 2048),
        (16, "fc", 2048, 256),
    ]


TABLE2_LEAF_MAXPOOL = _leaf_rows("maxpool")
TABLE3_LEAF_STOCHPOOL = _leaf_rows("stochpool")
LEAF_SOFTMAX = 256

TABLES = {
    "table1_root": (TABLE1_ROOT, TABLE1_SOFTMAX),
    "table2_leaf_maxpool": (TABLE2_LEAF_MAXPOOL, LEAF_SOFTMAX),
    "table3_leaf_stochpool": (TABLE3_LEAF_STOCHPOOL, LEAF_SOFTMAX),
}


def solve_stride_pad(size_in, kernel, size_out, max_stride=4):
    """Smallest (stride, pad) with pad < kernel taking ``size_in`` to ``size_out``."""
    for stride in range(1, max_stride + 1):
        for pad in range(kernel):
            if L.output_extent(size_in, kernel, stride, pad) == size_out:
                return stride, pad
    return None


def _fit_before_fc(size_in, kernel, in_units, max_stride=4):
    for stride in range(1, max_stride + 1):
        for pad in range(kernel):
            out = L.output_extent(size_in, kernel, stride, pad)
            if out >= 1 and in_units % (out * out) == 0:
                return stride, pad, out
    return None


def reconcile(rows, softmax_classes, name="", dropout_p=0.5) -> NetworkSpec:
    layers = []
    first = rows[0]
    h, w, c = first[2]
    for pos, (number, kind, size, kernel) in enumerate(rows):
        nxt = rows[pos + 1] if pos + 1 < len(rows) else None
        last = nxt is None
        if kind == "fc":
            layers.append(FullConnect(size, kernel))
            if not last:
                layers += [ReLU(), Dropout(dropout_p)]
            elif kernel != softmax_classes:
                raise SpecError(f"final fc width {kernel} != softmax {softmax_classes}", number)
            continue
        ih, iw, ic = size
        if (ih, iw, ic) != (h, w, c):
            raise SpecError(f"declared input {size} but previous layer yields {(h, w, c)}", number)
        kh, kw = kernel[:2]
        if kind == "conv" and kernel[2] != ic:
            raise SpecError(f"kernel depth {kernel[2]} != input channels {ic}", number)
        if nxt is None:
            raise SpecError("table must end with a fully-connected layer", number)
        if nxt[1] == "fc":
            fit = _fit_before_fc(ih, kh, nxt[2])
            if fit is None:
                raise SpecError(f"no stride/pad reaches fc input {nxt[2]}", number)
            stride, pad, out = fit
            oc = nxt[2] // (out * out) if kind == "conv" else ic
            if out * out * oc != nxt[2]:
                raise SpecError(f"pool output {out}x{out}x{oc} does not flatten to {nxt[2]}", number)
            nh = nw = out
        else:
            nh, nw, oc = nxt[2]
            sp = solve_stride_pad(ih, kh, nh)
            if sp is None or solve_stride_pad(iw, kw, nw) != sp:
                raise SpecError(f"no stride/pad maps {ih}x{iw} to {nh}x{nw}", number)
            stride, pad = sp
        if kind == "conv":
            layers += [Conv(ic, oc, kh, kw, stride, pad), ReLU()]
        else:
            if oc != ic:
                raise SpecError(f"pooling changes channels {ic} -> {oc}", number)
            pool = MaxPool if kind == "maxpool" else StochasticPool
            layers.append(pool(kh, stride, pad))
        h, w, c = nh, nw, oc
    layers.append(Softmax(softmax_classes))
    return NetworkSpec((first[2][2], first[2][0], first[2][1]), tuple(layers), softmax_classes, name)


def reconciled(name: str) -> NetworkSpec:
    rows, classes = TABLES[name]
    return reconcile(rows, classes, name)


def load_table_spec(name: str) -> NetworkSpec:
    """Load one of the shipped reconciled spec files by table name."""
    if name not in TABLES:
        raise SpecError(f"unknown table {name!r}; choose from {sorted(TABLES)}")
    with resources.as_file(resources.files(__package__) / "specs" / f"{name}.json") as path:
        return load_spec(path)
