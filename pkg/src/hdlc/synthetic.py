"""Small synthetic datasets for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .taxonomy import IsaMap, SynsetId

SHAPES = ("square", "ring", "plus", "cross")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")


def bars_and_stripes(n, size=8, rng=None):
    """Binary images where either every row or every column is uniformly on or off."""
    rng = rng or np.random.default_rng(0)
    out = np.zeros((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        bits = (rng.random(size) < 0.5).astype(np.float32)
        if rng.random() < 0.5:
            out[i, 0] = bits[:, None]
        else:
            out[i, 0] = bits[None, :]
    return out


def _draw(shape, cy, cx, r, size):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r + 0.5) & (d >= r - 0.7)
    if shape == "plus":
        return ((np.abs(dy) <= r) & (np.abs(dx) < 1)) | ((np.abs(dx) <= r) & (np.abs(dy) < 1))
    if shape == "cross":
        return (np.abs(np.abs(dy) - np.abs(dx)) < 1) & (np.abs(dy) <= r)
    raise ValueError(shape)


def shape_image(shape, quadrant, rng, size=16, noise=0.08):
    """One grey image of ``shape`` centred in ``quadrant``, with jitter and noise."""
    half = size // 2
    qy, qx = divmod(quadrant, 2)
    cy = qy * half + half // 2 + rng.integers(-1, 2)
    cx = qx * half + half // 2 + rng.integers(-1, 2)
    r = rng.uniform(2.0, 3.0)
    mask = _draw(shape, cy, cx, r, size)
    img = mask * rng.uniform(0.7, 1.0) + rng.normal(0, noise, (size, size))
    return np.clip(img, 0, 1).astype(np.float32)[None]


def shape_dataset(per_class=200, size=16, seed=0, noise=0.08):
    """16 classes: 4 shape families (the coarse groups) x 4 positions (the fine classes).

    Returns ``(images, labels, group_of_label)`` with label ``4 * family + quadrant``.
    """
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for family, shape in enumerate(SHAPES):
        for quadrant in range(len(QUADRANTS)):
            for _ in range(per_class):
                images.append(shape_image(shape, quadrant, rng, size, noise))
                labels.append(4 * family + quadrant)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    return images[order], labels[order], np.arange(16) // 4


def shape_taxonomy():
    """ISA map and synset list for the 16 shape classes.

    One root, four family synsets beneath it, four position synsets under
    each family. Ids grow with depth like WordNet's.
    """
    root = SynsetId("n00001000")
    families = [SynsetId(f"n0000{2000 + f:04d}") for f in range(4)]
    leaves = [SynsetId(f"n0001{3000 + 10 * f + q:04d}") for f in range(4) for q in range(4)]
    isa = IsaMap()
    for f, fam in enumerate(families):
        isa.add(root, fam)
        for q in range(4):
            isa.add(fam, leaves[4 * f + q])
    return isa, leaves
