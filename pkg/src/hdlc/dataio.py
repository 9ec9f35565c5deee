"""Image decoding, directory datasets, augmentation and the model container format.

Container layout (all integers unsigned 32-bit little-endian)::

    b"HDLC" | version | metadata length | metadata (UTF-8 JSON) | payload

The payload is every parameter tensor as little-endian float32, concatenated
in declaration order.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, ImageFormatError, InputError, MagicError, PayloadLengthError, VersionError

log = logging.getLogger(__name__)

MAGIC = b"HDLC"
VERSION = 1
IMAGE_SUFFIXES = (".pgm", ".ppm")


# -- portable graymap / pixmap ------------------------------------------------------


def _read_header(data: bytes):
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported image magic {magic!r}; only binary PGM (P5) and PPM (P6)")
    values, pos = [], 2
    while len(values) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated or malformed PNM header")
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("malformed PNM header")
    width, height, maxval = values
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"only 8-bit images supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    return channels, height, width, maxval, pos + 1


def decode_image(data: bytes):
    """Decode a binary PGM/PPM into a float32 (C, H, W) array scaled to [0, 1]."""
    channels, h, w, maxval, offset = _read_header(data)
    need = channels * h * w
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset) if len(data) - offset >= need else None
    if pixels is None:
        raise ImageFormatError(f"pixel data truncated: need {need} bytes")
    img = pixels.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)
    return np.ascontiguousarray(img)


def encode_image(img) -> bytes:
    """Encode (H, W), (1, H, W) or (3, H, W) data as binary PGM/PPM.

    uint8 input is written as is; floating input is read as [0, 1] and rounded.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot encode array of shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64) * 255), 0, 255).astype(np.uint8)
    c, h, w = arr.shape
    head = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    return head + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes()


def read_image(path):
    try:
        return decode_image(Path(path).read_bytes())
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def write_image(img, path):
    Path(path).write_bytes(encode_image(img))


def resize(img, h: int, w: int):
    """Bilinear resize of a (C, H, W) array with corner-aligned sampling."""
    c, ih, iw = img.shape
    if (ih, iw) == (h, w):
        return img.copy()
    ys = np.zeros(h) if h == 1 else np.arange(h) * ((ih - 1) / (h - 1))
    xs = np.zeros(w) if w == 1 else np.arange(w) * ((iw - 1) / (w - 1))
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(img.dtype)


def match_channels(img, channels: int):
    if img.shape[0] == channels:
        return img
    if img.shape[0] == 1 and channels == 3:
        return np.repeat(img, 3, axis=0)
    if img.shape[0] == 3 and channels == 1:
        return img.mean(axis=0, keepdims=True).astype(img.dtype)
    raise ImageFormatError(f"cannot convert {img.shape[0]} channels to {channels}")


# -- augmentation -------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop_margin: int = 0
    hflip: bool = False


def sample_augment(rng, shape, config: AugmentConfig):
    """Draw (crop_y, crop_x, flip) for one image of ``shape`` (C, H, W)."""
    if config.crop_margin >= min(shape[1:]):
        raise InputError("crop margin must be smaller than the image")
    oy = int(rng.integers(0, config.crop_margin + 1))
    ox = int(rng.integers(0, config.crop_margin + 1))
    flip = bool(config.hflip and rng.random() < 0.5)
    return oy, ox, flip


def apply_augment(img, oy, ox, flip, margin):
    _, h, w = img.shape
    out = img
    if margin:
        out = resize(img[:, oy:oy + h - margin, ox:ox + w - margin], h, w)
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(img, rng, config: AugmentConfig):
    """Random crop of (H - margin) x (W - margin), resized back, plus an optional flip."""
    oy, ox, flip = sample_augment(rng, img.shape, config)
    return apply_augment(img, oy, ox, flip, config.crop_margin)


# -- directory datasets -------------------------------------------------------------


@dataclass
class Dataset:
    """Labelled image references; pixels are decoded on first use."""

    items: list
    class_names: list
    geometry: tuple  # (channels, height, width)
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.items)

    @property
    def class_count(self):
        return len(self.class_names)

    def image(self, i):
        if i not in self._cache:
            c, h, w = self.geometry
            img = match_channels(read_image(self.items[i][1]), c)
            self._cache[i] = resize(img, h, w)
        return self._cache[i]

    def arrays(self):
        """All images as a float32 (N, C, H, W) batch and int64 labels."""
        if not self.items:
            return np.zeros((0, *self.geometry), np.float32), np.zeros(0, np.int64)
        images = np.stack([self.image(i) for i in range(len(self.items))]).astype(np.float32)
        labels = np.array([label for label, _ in self.items], dtype=np.int64)
        return images, labels


def load_dataset(root_dir, geometry, split="train", split_fraction=0.8, seed=0) -> Dataset:
    """Index ``<root>/<class>/<image>.pgm|ppm`` and return one side of a seeded split.

    Classes are sorted by directory name. Within each class files are sorted,
    shuffled with ``seed`` and the first ``round(n * split_fraction)`` go to
    the train split. Headers are validated here so broken files fail early.
    """
    if split not in ("train", "val"):
        raise InputError(f"split must be 'train' or 'val', not {split!r}")
    if not 0 <= split_fraction <= 1:
        raise InputError("split_fraction must lie in [0, 1]")
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_names, per_class = [], []
    for d in sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name):
        files = sorted((f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES), key=lambda f: f.name)
        if not files:
            log.warning("class directory %s has no images; skipped", d)
            continue
        for f in files:
            with open(f, "rb") as fh:
                head = fh.read(64)
            try:
                _read_header(head + b" ")
            except ImageFormatError as exc:
                raise DatasetError(f"{f}: {exc}") from None
        class_names.append(d.name)
        per_class.append(files)
    if not class_names:
        raise DatasetError(f"{root} contains no image classes")
    rng = np.random.default_rng(seed)
    items = []
    for label, files in enumerate(per_class):
        order = rng.permutation(len(files))
        cut = int(round(len(files) * split_fraction))
        chosen = order[:cut] if split == "train" else order[cut:]
        items.extend((label, files[k]) for k in sorted(chosen))
    return Dataset(items, class_names, tuple(geometry))


def write_dataset(root_dir, images, labels, class_names):
    """Write a (N, C, H, W) array in the directory-per-class layout."""
    root = Path(root_dir)
    counts = {}
    for img, label in zip(images, labels):
        d = root / class_names[int(label)]
        d.mkdir(parents=True, exist_ok=True)
        k = counts.get(label, 0)
        counts[label] = k + 1
        suffix = ".pgm" if img.shape[0] == 1 else ".ppm"
        write_image(img, d / f"{k:05d}{suffix}")


# -- model container ----------------------------------------------------------------


def _atomic_write(path, blob: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(meta: dict, tensors) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in tensors)
    return MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes + payload


def _unpack_header(blob: bytes, path):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise MagicError(f"{path}: not a model container (bad magic {blob[:4]!r})")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise VersionError(f"{path}: container version {version}, this build reads version {VERSION}")
    if len(blob) < 12 + meta_len:
        raise PayloadLengthError(f"{path}: metadata truncated")
    try:
        meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MagicError(f"{path}: unreadable metadata ({exc})") from None
    return meta, 12 + meta_len


def read_metadata(path) -> dict:
    """Container metadata without touching the payload."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) == 12 and head[:4] == MAGIC:
            head += fh.read(struct.unpack("<I", head[8:12])[0])
    meta, _ = _unpack_header(head, path)
    return meta


def save_model(model, path) -> None:
    """Write a ModelState or CrbmState to ``path`` atomically."""
    from .crbm import CrbmState
    from .tensor_core.network import ModelState, spec_to_dict

    if isinstance(model, ModelState):
        meta = {"kind": "cnn", "spec": spec_to_dict(model.spec), "meta": model.meta}
        tensors = model.flat_params()
    elif isinstance(model, CrbmState):
        meta = {"kind": "crbm", "filters_shape": list(model.filters.shape), "pool_block": model.pool_block,
                "meta": model.meta}
        tensors = [model.filters, model.hidden_bias, np.array([model.visible_bias])]
    else:
        raise InputError(f"cannot save object of type {type(model).__name__}")
    _atomic_write(path, _pack(meta, tensors))


def load_model(path):
    """Read a container written by :func:`save_model`; validates the whole file first."""
    from .crbm import CrbmState
    from .tensor_core.network import ModelState, param_shapes, spec_from_dict

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read model {path}: {exc}") from None
    meta, offset = _unpack_header(blob, path)
    kind = meta.get("kind")
    if kind == "cnn":
        spec = spec_from_dict(meta["spec"])
        shapes = [s for i in spec.param_layers() for s in param_shapes(spec.layers[i])]
    elif kind == "crbm":
        k = meta["filters_shape"][0]
        shapes = [tuple(meta["filters_shape"]), (k,), (1,)]
    else:
        raise MagicError(f"{path}: unknown model kind {kind!r}")
    sizes = [int(np.prod(s)) for s in shapes]
    payload = blob[offset:]
    if len(payload) != 4 * sum(sizes):
        raise PayloadLengthError(f"{path}: payload has {len(payload)} bytes, expected {4 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    tensors, pos = [], 0
    for shape, size in zip(shapes, sizes):
        tensors.append(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    if kind == "cnn":
        params = {i: [tensors[2 * k], tensors[2 * k + 1]] for k, i in enumerate(spec.param_layers())}
        return ModelState(spec, params, meta.get("meta", {}))
    return CrbmState(tensors[0], tensors[1], float(tensors[2][0]), int(meta["pool_block"]), meta.get("meta", {}))
