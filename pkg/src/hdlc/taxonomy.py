"""ISA relationship parsing, deepest-branch hierarchy trees and leaf-group partitioning.

WordNet synset ids grow with depth, so the parent with the largest id is
taken as the closest one. Every synset's deepest branch is found by
following closest parents to a root; the union of those branches is the
hierarchy tree, which is then flattened by rolling its deepest leaves into
their parents one depth level per pass. Finally the tree is cut into leaf
groups whose sizes respect a maximum (and, where merging allows, a minimum).
"""

from __future__ import annotations

import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path

from .errors import CycleError, InputError, TaxonomyError, TaxonomyParseError

_SYNSET_RE = re.compile(r"n\d{8}")


@total_ordering
class SynsetId:
    """A WordNet noun synset id such as ``n02403454``; ordered by its number."""

    __slots__ = ("raw", "numeric")

    def __init__(self, raw: str):
        if not isinstance(raw, str) or not _SYNSET_RE.fullmatch(raw):
            raise ValueError(f"malformed synset id {raw!r}")
        self.raw = raw
        self.numeric = int(raw[1:])

    @classmethod
    def of(cls, value) -> "SynsetId":
        return value if isinstance(value, SynsetId) else cls(value)

    def __eq__(self, other):
        return isinstance(other, SynsetId) and self.numeric == other.numeric

    def __lt__(self, other):
        if not isinstance(other, SynsetId):
            return NotImplemented
        return self.numeric < other.numeric

    def __hash__(self):
        return hash(self.numeric)

    def __str__(self):
        return self.raw

    def __repr__(self):
        return f"SynsetId({self.raw!r})"


SYNTHETIC_ROOT = SynsetId("n00000000")


class IsaMap:
    """Child -> set of parents, built from "parent child" edges."""

    def __init__(self, edges=None):
        self.parents: dict[SynsetId, set[SynsetId]] = defaultdict(set)
        for parent, child in edges or ():
            self.add(parent, child)

    def add(self, parent, child):
        parent, child = SynsetId.of(parent), SynsetId.of(child)
        if parent == child:
            raise TaxonomyParseError(f"self-edge on {parent}")
        self.parents[child].add(parent)

    def parents_of(self, s) -> set:
        return self.parents.get(SynsetId.of(s), set())

    def edges(self):
        """All (parent, child) pairs, sorted by child then parent."""
        return [(p, c) for c in sorted(self.parents) for p in sorted(self.parents[c])]

    def nodes(self) -> set:
        out = set(self.parents)
        for ps in self.parents.values():
            out |= ps
        return out

    def __len__(self):
        return sum(len(ps) for ps in self.parents.values())

    def __eq__(self, other):
        return isinstance(other, IsaMap) and self.edges() == other.edges()

    def find_cycle(self):
        """Return one cycle as a list of synsets (first repeated at the end), or None."""
        white, grey, black = 0, 1, 2
        color = defaultdict(int)
        for start in sorted(self.parents):
            if color[start]:
                continue
            stack = [(start, iter(sorted(self.parents_of(start))))]
            path = [start]
            color[start] = grey
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = black
                    stack.pop()
                    path.pop()
                elif color[nxt] == grey:
                    return path[path.index(nxt):] + [nxt]
                elif color[nxt] == white:
                    color[nxt] = grey
                    path.append(nxt)
                    stack.append((nxt, iter(sorted(self.parents_of(nxt)))))
        return None

    def check_acyclic(self):
        cycle = self.find_cycle()
        if cycle:
            raise CycleError(cycle)


def parse_isa_map(text) -> IsaMap:
    """Parse "parent child" lines; blank lines and ``#`` comments are skipped.

    Accepts bytes, str or an iterable of lines. Raises TaxonomyParseError with
    the offending line number, or CycleError if the relation is cyclic.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines() if isinstance(text, str) else text
    isa = IsaMap()
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != 2:
            raise TaxonomyParseError(f"expected 2 tokens, got {len(tokens)}", lineno)
        try:
            parent, child = SynsetId(tokens[0]), SynsetId(tokens[1])
        except ValueError as exc:
            raise TaxonomyParseError(str(exc), lineno) from None
        if parent == child:
            raise TaxonomyParseError(f"self-edge on {parent}", lineno)
        isa.parents[child].add(parent)
    isa.check_acyclic()
    return isa


def serialize_isa_map(isa: IsaMap) -> str:
    return "".join(f"{p} {c}\n" for p, c in isa.edges())


def read_isa_file(path) -> IsaMap:
    return parse_isa_map(Path(path).read_bytes())


def parse_synset_list(text) -> list:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            out.append(SynsetId(stripped.split()[0]))
        except ValueError as exc:
            raise TaxonomyParseError(str(exc), lineno) from None
    return out


def read_synset_list(path) -> list:
    return parse_synset_list(Path(path).read_bytes())


def closest_parent(s, isa: IsaMap):
    """The parent with the largest numeric id, or None for a root."""
    parents = isa.parents_of(s)
    if not parents:
        return None
    best = max(parents)
    assert sum(1 for p in parents if p.numeric == best.numeric) == 1
    return best


def deepest_branch(s, isa: IsaMap) -> list:
    """Root-to-``s`` path choosing the closest parent at every step."""
    s = SynsetId.of(s)
    branch = [s]
    limit = len(isa.parents) + 1
    node = closest_parent(s, isa)
    while node is not None:
        branch.append(node)
        if len(branch) > limit:
            raise CycleError(list(reversed(branch)))
        node = closest_parent(node, isa)
    branch.reverse()
    return branch


@dataclass
class HierarchyTree:
    nodes: set
    parent: dict
    members: dict
    iteration: int = 0
    warnings: list = field(default_factory=list)

    def children(self) -> dict:
        kids = defaultdict(list)
        for child, par in self.parent.items():
            kids[par].append(child)
        return {k: sorted(v) for k, v in kids.items()}

    def roots(self) -> list:
        return sorted(n for n in self.nodes if n not in self.parent)

    def depth_of(self, node) -> int:
        d = 0
        while node in self.parent:
            node = self.parent[node]
            d += 1
        return d

    def depth(self) -> int:
        return max((self.depth_of(n) for n in self.nodes), default=0)

    def all_members(self) -> list:
        return [m for n in sorted(self.nodes) for m in self.members.get(n, [])]

    def subtree_members(self, node, children=None) -> list:
        children = self.children() if children is None else children
        out, stack = [], [node]
        while stack:
            n = stack.pop()
            out.extend(self.members.get(n, []))
            stack.extend(children.get(n, []))
        return out


def build_htree(synsets, isa: IsaMap, iterations: int = 9) -> HierarchyTree:
    """Union of deepest branches, then ``iterations`` roll-up passes.

    Each pass removes every leaf at the current maximum depth and appends its
    members (in child-id order) to its parent. Passes stop early once the tree
    is a single level below its roots (depth <= 1).
    """
    if iterations < 0:
        raise InputError("iterations must be >= 0")
    synsets = [SynsetId.of(s) for s in synsets]
    if len(set(synsets)) != len(synsets):
        raise TaxonomyError("duplicate synsets in input list")
    known = isa.nodes()
    nodes, parent, warnings = set(), {}, []
    for s in synsets:
        if s not in known:
            warnings.append(f"{s} has no ISA edges; attached under synthetic root {SYNTHETIC_ROOT}")
            nodes |= {SYNTHETIC_ROOT, s}
            parent[s] = SYNTHETIC_ROOT
            continue
        branch = deepest_branch(s, isa)
        nodes.update(branch)
        for a, b in zip(branch, branch[1:]):
            parent[b] = a
    members = {n: [] for n in nodes}
    for s in synsets:
        members[s].append(s)
    tree = HierarchyTree(nodes, parent, members, 0, warnings)
    for _ in range(iterations):
        if not _roll_up(tree):
            break
        tree.iteration += 1
    return tree


def _roll_up(tree: HierarchyTree) -> bool:
    depths = {n: tree.depth_of(n) for n in tree.nodes}
    max_depth = max(depths.values(), default=0)
    if max_depth <= 1:
        return False
    children = tree.children()
    leaves = sorted(n for n in tree.nodes if depths[n] == max_depth and n not in children)
    for leaf in leaves:
        par = tree.parent.pop(leaf)
        tree.members[par].extend(tree.members.pop(leaf))
        tree.nodes.discard(leaf)
    return True


@dataclass
class LeafPartition:
    """Leaf groups plus the RID / LID / GID label maps (all 1-based)."""

    leaves: list
    rid_of: dict
    lid_of: dict
    gid_of: dict
    warnings: list = field(default_factory=list)

    @classmethod
    def from_groups(cls, groups, warnings=None) -> "LeafPartition":
        groups = [sorted(SynsetId.of(s) for s in g) for g in groups if g]
        groups.sort(key=lambda g: (-len(g), g[0]))
        everything = sorted(s for g in groups for s in g)
        if len(set(everything)) != len(everything):
            raise TaxonomyError("leaf groups overlap")
        gid_of = {s: i + 1 for i, s in enumerate(everything)}
        rid_of, lid_of = {}, {}
        for r, g in enumerate(groups, start=1):
            for l, s in enumerate(g, start=1):
                rid_of[s], lid_of[s] = r, l
        return cls(groups, rid_of, lid_of, gid_of, list(warnings or []))

    @property
    def group_count(self) -> int:
        return len(self.leaves)

    def synsets(self) -> list:
        return sorted(self.gid_of, key=self.gid_of.get)

    def gid(self, rid: int, lid: int) -> int:
        return self.gid_of[self.leaves[rid - 1][lid - 1]]

    def synset_of_gid(self, gid: int):
        return self.synsets()[gid - 1]

    def rid_lid_of_gid(self, gid: int):
        s = self.synset_of_gid(gid)
        return self.rid_of[s], self.lid_of[s]

    def group_size(self, rid: int) -> int:
        return len(self.leaves[rid - 1])


def partition_leaves(tree: HierarchyTree, max_leaf_size: int = 256, min_leaf_size: int = 1) -> LeafPartition:
    """Cut the tree into leaf groups of at most ``max_leaf_size`` synsets.

    Subtrees that fit become candidate groups; larger ones are split along
    child boundaries (a node's own rolled-up members are chunked in id order).
    Among the candidates produced under one parent, undersized groups are
    greedily merged with the smallest sibling that keeps the result within
    the maximum. Groups that stay below ``min_leaf_size`` are kept and reported
    in ``warnings``.
    """
    if not max_leaf_size >= min_leaf_size >= 1:
        raise InputError("need max_leaf_size >= min_leaf_size >= 1")
    children = tree.children()
    warnings = []

    def split(node):
        total = tree.subtree_members(node, children)
        if len(total) <= max_leaf_size:
            return [sorted(total)] if total else []
        own = sorted(tree.members.get(node, []))
        cands = [own[i:i + max_leaf_size] for i in range(0, len(own), max_leaf_size)]
        for child in children.get(node, []):
            cands.extend(split(child))
        return _merge_small(cands, max_leaf_size, min_leaf_size)

    groups = []
    for root in tree.roots():
        groups.extend(split(root))
    groups = _merge_small(groups, max_leaf_size, min_leaf_size)
    for g in groups:
        if len(g) < min_leaf_size:
            warnings.append(f"group starting {g[0]} has {len(g)} synsets (< {min_leaf_size}) and no merge partner")
    return LeafPartition.from_groups(groups, warnings)


def _merge_small(cands, max_size, min_size):
    cands = [sorted(c) for c in cands if c]
    stuck = set()
    while True:
        small = [i for i, c in enumerate(cands) if len(c) < min_size and i not in stuck]
        if not small:
            return cands
        i = min(small, key=lambda k: (len(cands[k]), cands[k][0]))
        partners = [j for j, c in enumerate(cands) if j != i and len(c) + len(cands[i]) <= max_size]
        if not partners:
            stuck.add(i)
            continue
        j = min(partners, key=lambda k: (len(cands[k]), cands[k][0]))
        merged = sorted(cands[i] + cands[j])
        cands = [c for k, c in enumerate(cands) if k not in (i, j)] + [merged]
        # indices shifted; recompute which groups are stuck
        stuck = {k for k, c in enumerate(cands) if len(c) < min_size
                 and not any(len(c) + len(d) <= max_size for m, d in enumerate(cands) if m != k)}


# -- structured-text files ------------------------------------------------------


def tree_to_dict(tree: HierarchyTree) -> dict:
    return {
        "format": "hdlc-tree/1",
        "iteration": tree.iteration,
        "nodes": [str(n) for n in sorted(tree.nodes)],
        "parent": {str(c): str(p) for c, p in sorted(tree.parent.items())},
        "members": {str(n): [str(m) for m in tree.members.get(n, [])] for n in sorted(tree.nodes)},
        "warnings": list(tree.warnings),
    }


def tree_from_dict(data: dict) -> HierarchyTree:
    try:
        nodes = {SynsetId(n) for n in data["nodes"]}
        parent = {SynsetId(c): SynsetId(p) for c, p in data["parent"].items()}
        members = {SynsetId(n): [SynsetId(m) for m in ms] for n, ms in data["members"].items()}
    except (KeyError, ValueError, AttributeError) as exc:
        raise InputError(f"malformed tree file: {exc}") from exc
    for n in nodes:
        members.setdefault(n, [])
    return HierarchyTree(nodes, parent, members, int(data.get("iteration", 0)), list(data.get("warnings", [])))


def partition_to_dict(part: LeafPartition) -> dict:
    return {
        "format": "hdlc-partition/1",
        "groups": [{"rid": r, "synsets": [str(s) for s in g]} for r, g in enumerate(part.leaves, start=1)],
        "gid": {str(s): g for s, g in sorted(part.gid_of.items(), key=lambda kv: kv[1])},
        "rid": {str(s): part.rid_of[s] for s in sorted(part.gid_of)},
        "lid": {str(s): part.lid_of[s] for s in sorted(part.gid_of)},
        "warnings": list(part.warnings),
    }


def partition_from_dict(data: dict) -> LeafPartition:
    try:
        groups = sorted(data["groups"], key=lambda g: g["rid"])
        leaves = [[SynsetId(s) for s in g["synsets"]] for g in groups]
        gid_of = {SynsetId(s): int(v) for s, v in data["gid"].items()}
        rid_of = {SynsetId(s): int(v) for s, v in data["rid"].items()}
        lid_of = {SynsetId(s): int(v) for s, v in data["lid"].items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"malformed partition file: {exc}") from exc
    part = LeafPartition(leaves, rid_of, lid_of, gid_of, list(data.get("warnings", [])))
    check_partition(part)
    return part


def check_partition(part: LeafPartition, max_leaf_size=None):
    """Raise TaxonomyError unless the partition's invariants hold."""
    seen = [s for g in part.leaves for s in g]
    if len(seen) != len(set(seen)):
        raise TaxonomyError("leaf groups are not disjoint")
    if set(seen) != set(part.gid_of):
        raise TaxonomyError("leaf groups do not cover the GID map")
    if max_leaf_size is not None and any(len(g) > max_leaf_size for g in part.leaves):
        raise TaxonomyError(f"a leaf group exceeds {max_leaf_size}")
    for r, g in enumerate(part.leaves, start=1):
        for l, s in enumerate(g, start=1):
            if part.rid_of.get(s) != r or part.lid_of.get(s) != l:
                raise TaxonomyError(f"{s}: RID/LID maps disagree with group layout")
    if sorted(part.gid_of.values()) != list(range(1, len(seen) + 1)):
        raise TaxonomyError("GIDs are not 1..N")


def save_json(data: dict, path) -> None:
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def save_tree(tree, path):
    save_json(tree_to_dict(tree), path)


def load_tree(path) -> HierarchyTree:
    return tree_from_dict(load_json(path))


def save_partition(part, path):
    save_json(partition_to_dict(part), path)


def load_partition(path) -> LeafPartition:
    return partition_from_dict(load_json(path))
