"""Slow scalar-loop reference implementations used as test oracles."""

import math

import numpy as np

from hdlc.hierarchy import HierarchyBundle
from hdlc.taxonomy import LeafPartition


def conv_loops(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[f]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * stride + u - pad, j * stride + v - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[a, ch, y, xx] * w[f, ch, u, v]
                    out[a, f, i, j] = acc
    return out


def maxpool_loops(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[a, ch, i, j] = max(x[a, ch, i * stride + u, j * stride + v]
                                           for u in range(window) for v in range(window))
    return out


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def crbm_hidden_loops(v, w, hb):
    """P(h_k[i,j]=1 | v) = sigmoid(sum_{c,u,v} v[c,i+u,j+v] W[k,c,u,v] + b_k)."""
    n, c, h, wd = v.shape
    k, _, kh, kw = w.shape
    out = np.zeros((n, k, h - kh + 1, wd - kw + 1))
    for a in range(n):
        for f in range(k):
            for i in range(h - kh + 1):
                for j in range(wd - kw + 1):
                    z = hb[f]
                    for ch in range(c):
                        for u in range(kh):
                            for q in range(kw):
                                z += v[a, ch, i + u, j + q] * w[f, ch, u, q]
                    out[a, f, i, j] = sig(z)
    return out


def crbm_visible_loops(hid, w, vb):
    """P(v[c,y,x]=1 | h) = sigmoid(sum_k sum_{i,j: i+u=y, j+q=x} h_k[i,j] W[k,c,u,q] + c)."""
    n, k, ho, wo = hid.shape
    _, c, kh, kw = w.shape
    pre = np.full((n, c, ho + kh - 1, wo + kw - 1), float(vb))
    for a in range(n):
        for f in range(k):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        for u in range(kh):
                            for q in range(kw):
                                pre[a, ch, i + u, j + q] += hid[a, f, i, j] * w[f, ch, u, q]
    return np.vectorize(sig)(pre)


def prob_maxpool_loops(pre, block):
    """Per-unit on-probabilities and per-block off-probabilities, one block at a time."""
    n, k, h, w = pre.shape
    hb, wb = -(-h // block), -(-w // block)
    on = np.zeros_like(pre, dtype=np.float64)
    off = np.zeros((n, k, hb, wb))
    for a in range(n):
        for f in range(k):
            for bi in range(hb):
                for bj in range(wb):
                    cells = [(y, x) for y in range(bi * block, min(h, bi * block + block))
                             for x in range(bj * block, min(w, bj * block + block))]
                    denom = 1.0 + sum(math.exp(pre[a, f, y, x]) for y, x in cells)
                    for y, x in cells:
                        on[a, f, y, x] = math.exp(pre[a, f, y, x]) / denom
                    off[a, f, bi, bj] = 1.0 / denom
    return on, off


# -- taxonomy --------------------------------------------------------------------


def random_dag(rng, max_nodes=50, max_parents=3):
    """(edges, ids) for a random DAG over distinct 'nXXXXXXXX' ids.

    Node ``j`` draws up to ``max_parents`` parents among nodes ``0..j-1``, so
    the ids are unrelated to the topological order.
    """
    n = int(rng.integers(2, max_nodes + 1))
    nums = rng.choice(10 ** 6, size=n, replace=False)
    ids = [f"n{int(v):08d}" for v in nums]
    edges = set()
    for j in range(1, n):
        k = min(int(rng.integers(0, max_parents + 1)), j)
        for i in rng.choice(j, size=k, replace=False):
            edges.add((ids[int(i)], ids[j]))
    return sorted(edges), ids


def all_upward_paths(s, parents):
    """Every path from a parentless node down to ``s``, as root-first lists of strings."""
    ps = parents.get(s, [])
    if not ps:
        return [[s]]
    return [path + [s] for p in ps for path in all_upward_paths(p, parents)]


def brute_deepest_branch(s, edges):
    """The unique enumerated path in which every step up takes the numerically largest parent."""
    parents = {}
    for p, c in edges:
        parents.setdefault(c, []).append(p)
    keep = []
    for path in all_upward_paths(s, parents):
        ok = all(path[i] == max(parents[path[i + 1]], key=lambda x: int(x[1:])) for i in range(len(path) - 1))
        if ok:
            keep.append(path)
    assert len(keep) == 1
    return keep[0]


def brute_htree(synsets, edges, iterations):
    """Reference roll-up: nodes keyed by their branch position, leaves at max depth folded each pass."""
    known = {x for e in edges for x in e}
    depth, parent = {}, {}
    for s in synsets:
        if s not in known:
            depth.setdefault("n00000000", 0)
            depth[s], parent[s] = 1, "n00000000"
            continue
        path = brute_deepest_branch(s, edges)
        for d, node in enumerate(path):
            depth[node] = d
            if d:
                parent[node] = path[d - 1]
    members = {node: [] for node in depth}
    for s in synsets:
        members[s].append(s)
    done = 0
    for _ in range(iterations):
        top = max(depth.values())
        if top <= 1:
            break
        for node in sorted((x for x in depth if depth[x] == top), key=lambda x: int(x[1:])):
            members[parent[node]].extend(members.pop(node))
            del depth[node], parent[node]
        done += 1
    return set(depth), parent, members, done


def longest_path_depth(edges):
    parents = {}
    for p, c in edges:
        parents.setdefault(c, []).append(p)
    memo = {}

    def up(x):
        if x not in memo:
            memo[x] = 1 + max((up(p) for p in parents.get(x, [])), default=-1)
        return memo[x]

    return max((up(x) for e in edges for x in e), default=0)


# -- hierarchical routing ------------------------------------------------------------


def partition(sizes):
    groups, n = [], 1
    for size in sizes:
        groups.append([f"n{n + i:08d}" for i in range(size)])
        n += size
    return LeafPartition.from_groups(groups)


def table(rows):
    """A classifier that looks the image (an int) up in a probability table."""
    rows = [np.asarray(r, dtype=float) for r in rows]
    return lambda img: rows[int(img)]


def brute_top(bundle_tables, part, img, root_k, leaf_k, out_k):
    """Enumerate every (RID, LID) pair, keep those inside both top-k cuts, rank the products."""
    root_row, leaf_rows = bundle_tables
    r = root_row[img]
    root_cut = sorted(range(len(r)), key=lambda i: (-r[i], i))[:root_k]
    products = []
    for rid in range(1, len(r) + 1):
        row = leaf_rows[rid][img]
        leaf_cut = sorted(range(len(row)), key=lambda i: (-row[i], i))[:leaf_k]
        for lid in range(1, len(row) + 1):
            if rid - 1 in root_cut and lid - 1 in leaf_cut:
                products.append((part.gid(rid, lid), row[lid - 1] * r[rid - 1]))
    products.sort(key=lambda p: (-p[1], p[0]))
    return products[:out_k]


def random_case(rng):
    sizes = list(rng.integers(1, 7, int(rng.integers(1, 6))))
    part = partition(sizes)
    n_img = int(rng.integers(1, 6))
    root_rows = rng.dirichlet(np.ones(len(sizes)), n_img)
    # coarse rounding makes ties common, exercising the tie rule
    if rng.random() < 0.5:
        root_rows = np.round(root_rows, 1)
    leaf_rows = {}
    for rid in range(1, part.group_count + 1):
        rows = rng.dirichlet(np.ones(part.group_size(rid)), n_img)
        leaf_rows[rid] = np.round(rows, 1) if rng.random() < 0.5 else rows
    bundle = HierarchyBundle(table(root_rows), {rid: table(r) for rid, r in leaf_rows.items()}, part)
    return part, bundle, (root_rows, leaf_rows), n_img


def brute_error_count(tables, part, items, root_k, leaf_k, out_k):
    errors = 0
    for gid, img in items:
        if gid not in [g for g, _ in brute_top(tables, part, img, root_k, leaf_k, out_k)]:
            errors += 1
    return errors
