"""Two-step classification: a root model picks leaf groups, leaf models pick classes.

Root softmax index ``r - 1`` is leaf group (RID) ``r``; leaf softmax index
``l - 1`` is that group's LID ``l``. Candidate confidences are the leaf
confidence times the root confidence of its group; the best ``out_k`` of the
pooled candidates are reported as GIDs.

Anything callable on a single image that returns a probability vector can
stand in for a model, which keeps routing testable without trained networks.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError, ShapeError
from .taxonomy import LeafPartition, load_partition, partition_to_dict, save_json
from .tensor_core.network import ModelState, predict_proba

log = logging.getLogger(__name__)

DEFAULT_K = 5


@dataclass
class TopK:
    """(label, confidence) pairs, best first; ties go to the lower label."""

    entries: list

    @classmethod
    def from_scores(cls, labels, scores, k):
        pairs = sorted(zip((int(l) for l in labels), (float(s) for s in scores)), key=lambda p: (-p[1], p[0]))
        return cls(pairs[:k])

    def labels(self):
        return [l for l, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _probs(classifier, images):
    """Probability rows for a list/array of single images."""
    if isinstance(classifier, ModelState):
        batch = np.stack([np.asarray(img, dtype=np.float32) for img in images])
        return predict_proba(classifier, batch).astype(np.float64)
    rows = [np.asarray(classifier(img), dtype=np.float64) for img in images]
    return np.stack(rows) if rows else np.zeros((0, 0))


def _class_count(classifier):
    return classifier.spec.class_count if isinstance(classifier, ModelState) else None


def classify_flat(model, image, k=DEFAULT_K) -> TopK:
    """Top-``k`` (0-based class index, confidence) from one inference pass."""
    if isinstance(model, ModelState) and tuple(np.shape(image)) != model.spec.input_shape:
        raise ShapeError(f"image shape {np.shape(image)} does not match model input {model.spec.input_shape}")
    probs = _probs(model, [image])[0]
    return TopK.from_scores(range(len(probs)), probs, k)


@dataclass
class HierarchyBundle:
    root: object
    leaves: dict  # RID -> ModelState or classifier callable
    partition: LeafPartition

    def __post_init__(self):
        groups = self.partition.group_count
        n = _class_count(self.root)
        if n is not None and n != groups:
            raise ShapeError(f"root model has {n} classes but the partition has {groups} groups")
        for rid, leaf in self.leaves.items():
            if not 1 <= rid <= groups:
                raise ShapeError(f"leaf model for unknown RID {rid}")
            n = _class_count(leaf)
            if n is not None and n != self.partition.group_size(rid):
                raise ShapeError(f"leaf {rid} has {n} classes, group has {self.partition.group_size(rid)}")

    def leaf(self, rid):
        if rid not in self.leaves:
            raise InputError(f"no leaf model for RID {rid}")
        return self.leaves[rid]


def _route(bundle, root_row, leaf_rows, root_k, leaf_k, out_k):
    root_top = TopK.from_scores(range(1, len(root_row) + 1), root_row, root_k)
    cands = []
    for rid, rconf in root_top:
        row = leaf_rows[rid]
        for lid, lconf in TopK.from_scores(range(1, len(row) + 1), row, leaf_k):
            cands.append((bundle.partition.gid(rid, lid), lconf * rconf))
    cands.sort(key=lambda p: (-p[1], p[0]))
    return TopK(cands[:out_k])


def classify_hierarchical(bundle: HierarchyBundle, image, root_k=DEFAULT_K, leaf_k=DEFAULT_K, out_k=DEFAULT_K) -> TopK:
    """Top-``out_k`` GIDs for one image via the root model and the selected leaf models."""
    return classify_hierarchical_batch(bundle, [image], root_k, leaf_k, out_k)[0]


def classify_hierarchical_batch(bundle, images, root_k=DEFAULT_K, leaf_k=DEFAULT_K, out_k=DEFAULT_K):
    """Same as :func:`classify_hierarchical` for many images, batching each model's work."""
    if min(root_k, leaf_k, out_k) < 1:
        raise ContractError("k values must be >= 1")
    if isinstance(bundle.root, ModelState):
        for img in images:
            if tuple(np.shape(img)) != bundle.root.spec.input_shape:
                raise ShapeError(f"image shape {np.shape(img)} does not match root input {bundle.root.spec.input_shape}")
    root_probs = _probs(bundle.root, images)
    wanted = {}
    for n, row in enumerate(root_probs):
        for rid in TopK.from_scores(range(1, len(row) + 1), row, root_k).labels():
            wanted.setdefault(rid, []).append(n)
    leaf_probs = {}
    for rid in sorted(wanted):
        rows = _probs(bundle.leaf(rid), [images[n] for n in wanted[rid]])
        for n, row in zip(wanted[rid], rows):
            leaf_probs[(n, rid)] = row
    out = []
    for n, row in enumerate(root_probs):
        leaf_rows = {rid: leaf_probs[(n, rid)] for rid in range(1, len(row) + 1) if (n, rid) in leaf_probs}
        out.append(_route(bundle, row, leaf_rows, root_k, leaf_k, out_k))
    return out


@dataclass
class EvalReport:
    total: int
    top5_errors: int
    top1_correct: int = 0
    per_rid: dict = field(default_factory=dict)  # RID -> [items, errors]
    warnings: list = field(default_factory=list)

    @property
    def top5_error_pct(self):
        return 100.0 * self.top5_errors / self.total if self.total else 0.0

    @property
    def top1_accuracy(self):
        return self.top1_correct / self.total if self.total else 0.0

    def machine_line(self):
        return f"{self.total}, {self.top5_errors}, {self.top5_error_pct:.4f}"

    def render(self):
        lines = [f"items: {self.total}", f"top-5 errors: {self.top5_errors} ({self.top5_error_pct:.2f}%)",
                 f"top-1 accuracy: {self.top1_accuracy:.4f}", "per RID (items, top-5 errors):"]
        for rid in sorted(self.per_rid):
            items, errs = self.per_rid[rid]
            lines.append(f"  {rid}: {items}, {errs}")
        lines += [f"warning: {w}" for w in self.warnings]
        lines.append(self.machine_line())
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"total": self.total, "top5_errors": self.top5_errors, "top5_error_pct": self.top5_error_pct,
                "top1_correct": self.top1_correct,
                "per_rid": {str(k): v for k, v in sorted(self.per_rid.items())}, "warnings": self.warnings}


def evaluate_top5(bundle: HierarchyBundle, test_set, root_k=DEFAULT_K, leaf_k=DEFAULT_K, out_k=DEFAULT_K,
                  threads=1, chunk=256) -> EvalReport:
    """Count items whose true GID is missing from the hierarchical top-5.

    ``test_set`` holds ``(gid, rid, image)`` triples. The RID is re-derived
    from the GID; a conflicting supplied RID only produces a warning.
    """
    n_gid = len(bundle.partition.gid_of)
    report = EvalReport(0, 0)
    items = list(test_set)
    for gid, rid, _ in items:
        if not 1 <= gid <= n_gid:
            raise InputError(f"unknown GID {gid}")
    chunks = [items[s:s + chunk] for s in range(0, len(items), chunk)]

    def run(part):
        return classify_hierarchical_batch(bundle, [img for _, _, img in part], root_k, leaf_k, out_k)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for part, tops in zip(chunks, results):
        for (gid, rid, _), top in zip(part, tops):
            true_rid, _ = bundle.partition.rid_lid_of_gid(gid)
            if rid is not None and rid != true_rid:
                report.warnings.append(f"GID {gid}: supplied RID {rid} ignored, partition says {true_rid}")
            labels = top.labels()
            miss = gid not in labels
            report.total += 1
            report.top5_errors += miss
            report.top1_correct += bool(labels) and labels[0] == gid
            slot = report.per_rid.setdefault(true_rid, [0, 0])
            slot[0] += 1
            slot[1] += miss
    for w in report.warnings[:5]:
        log.warning(w)
    return report


def evaluate_flat(model, test_set, k=DEFAULT_K) -> EvalReport:
    """Single-model evaluator over ``(label_index, image)`` pairs, for comparison."""
    report = EvalReport(0, 0)
    for label, image in test_set:
        labels = classify_flat(model, image, k).labels()
        report.total += 1
        report.top5_errors += label not in labels
        report.top1_correct += labels[0] == label
    return report


# -- manifest -----------------------------------------------------------------------


def save_bundle(bundle: HierarchyBundle, directory) -> Path:
    """Write root/leaf containers, the partition and ``bundle.json`` into ``directory``."""
    from .dataio import save_model

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(bundle.root, d / "root.hdlc")
    save_json(partition_to_dict(bundle.partition), d / "partition.json")
    leaves = {}
    for rid, model in sorted(bundle.leaves.items()):
        name = f"leaf{rid:03d}.hdlc"
        save_model(model, d / name)
        leaves[str(rid)] = name
    manifest = {"format": "hdlc-bundle/1", "root": "root.hdlc", "partition": "partition.json", "leaves": leaves}
    path = d / "bundle.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_bundle(path) -> HierarchyBundle:
    from .dataio import load_model

    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    try:
        manifest = json.loads(path.read_text())
        base = path.parent
        root = load_model(base / manifest["root"])
        partition = load_partition(base / manifest["partition"])
        leaves = {int(rid): load_model(base / p) for rid, p in manifest["leaves"].items()}
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot load bundle {path}: {exc}") from exc
    return HierarchyBundle(root, leaves, partition)
