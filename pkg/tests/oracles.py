"""Brute-force reference implementations used only by the tests.

Nothing here imports from the package; each routine follows the plain
definition (pairwise distances, per-voxel scans, union-find) so it can
check the optimized paths independently.
"""
from __future__ import annotations

import itertools

import numpy as np


def neighbor_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        nz = sum(1 for c in d if c)
        if nz == 0:
            continue
        if connectivity == 6 and nz > 1:
            continue
        if connectivity == 18 and nz > 2:
            continue
        out.append(d)
    return out


def union_find_components(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Component labels numbered by first voxel in x-fastest order."""
    mask = np.asarray(mask, dtype=bool)
    parent: dict[tuple, tuple] = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    fg = [tuple(int(c) for c in p) for p in np.argwhere(mask)]
    for p in fg:
        parent[p] = p
    offs = neighbor_offsets(connectivity)
    for p in fg:
        for d in offs:
            q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
            if q in parent:
                ra, rb = find(p), find(q)
                if ra != rb:
                    parent[ra] = rb
    labels = np.zeros(mask.shape, dtype=np.int64)
    ids: dict[tuple, int] = {}
    nx, ny, nz = mask.shape
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if mask[x, y, z]:
                    r = find((x, y, z))
                    if r not in ids:
                        ids[r] = len(ids) + 1
                    labels[x, y, z] = ids[r]
    return labels


def chebyshev_dilation(mask: np.ndarray, r: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    pts = np.argwhere(mask)
    if not len(pts):
        return out
    for idx in np.ndindex(mask.shape):
        if np.abs(pts - np.array(idx)).max(axis=1).min() <= r:
            out[idx] = True
    return out


def border_points(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    pts = []
    for p in np.argwhere(mask):
        for d in neighbor_offsets(6):
            q = p + np.array(d)
            if (q < 0).any() or (q >= np.array(mask.shape)).any() or not mask[tuple(q)]:
                pts.append(p)
                break
    return np.array(pts, dtype=float).reshape(-1, 3)


def directed(a_pts: np.ndarray, b_pts: np.ndarray, spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=float)
    diff = (a_pts[:, None, :] - b_pts[None, :, :]) * s
    return np.sqrt((diff**2).sum(axis=2)).min(axis=1)


def dice(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.sum() + b.sum() == 0:
        return 1.0
    return 2 * (a & b).sum() / (a.sum() + b.sum())


def nsd(a, b, spacing, tau) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    pa, pb = border_points(a), border_points(b)
    dab, dba = directed(pa, pb, spacing), directed(pb, pa, spacing)
    return ((dab <= tau).sum() + (dba <= tau).sum()) / (len(pa) + len(pb))


def hd95(a, b, spacing) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return float("inf")
    pa, pb = border_points(a), border_points(b)
    d = np.sort(np.concatenate([directed(pa, pb, spacing), directed(pb, pa, spacing)]))
    # linear-interpolated percentile written out by hand
    pos = 0.95 * (len(d) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(d) - 1)
    return float(d[lo] + (d[hi] - d[lo]) * (pos - lo))


def lesion_wise(ref, pred, metric, spacing, tau=1.0, connectivity=26, radius=3) -> float:
    ref, pred = np.asarray(ref, bool), np.asarray(pred, bool)
    rl = union_find_components(ref, connectivity)
    pl = union_find_components(pred, connectivity)
    n_ref, n_pred = int(rl.max()), int(pl.max())
    if n_ref == 0:
        return 1.0 if n_pred == 0 else 0.0
    dil = [chebyshev_dilation(rl == i, radius) for i in range(1, n_ref + 1)]
    owner = {}
    for j in range(1, n_pred + 1):
        comp = pl == j
        inter = [int((comp & d).sum()) for d in dil]
        best = max(inter)
        if best > 0:
            owner[j] = inter.index(best) + 1
    scores = []
    for i in range(1, n_ref + 1):
        p = np.zeros_like(pred)
        for j, o in owner.items():
            if o == i:
                p |= pl == j
        r = rl == i
        scores.append(dice(r, p) if metric == "dice" else nsd(r, p, spacing, tau))
    scores += [0.0] * (n_pred - len(owner))
    return float(np.mean(scores))


def rank_scores(values: dict, directions: dict) -> dict:
    """values[candidate][(case, region, metric)] -> F, via explicit pairwise counting."""
    cands = sorted(values)
    keys = sorted(values[cands[0]])
    per_case: dict = {c: {} for c in cands}
    for key in keys:
        higher = directions[key[2]] == "higher-better"
        for c in cands:
            v = values[c][key]
            better = sum(1 for o in cands if (values[o][key] > v if higher else values[o][key] < v))
            equal = sum(1 for o in cands if values[o][key] == v)
            # average of positions better+1 .. better+equal
            rank = better + (equal + 1) / 2
            per_case[c].setdefault(key[0], []).append(rank)
    return {c: float(np.mean([np.mean(v) for _, v in sorted(per_case[c].items())])) for c in cands}


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette by explicit loops over point pairs."""
    n = len(points)
    scores = []
    for i in range(n):
        dist: dict = {}
        for j in range(n):
            if j != i:
                dist.setdefault(labels[j], []).append(float(np.sqrt(((points[i] - points[j]) ** 2).sum())))
        own = dist.get(labels[i], [])
        if not own:
            scores.append(0.0)  # singleton cluster
            continue
        a = sum(own) / len(own)
        b = min(sum(v) / len(v) for lab, v in dist.items() if lab != labels[i])
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return sum(scores) / n


def staple_binary(decisions: np.ndarray, iters: int, init: float = 0.99999) -> np.ndarray:
    """Binary STAPLE in the probability domain with per-voxel loops; fixed iteration count."""
    d = np.asarray(decisions, dtype=float)
    r, n = d.shape
    prior = d.mean()
    p = [init] * r
    q = [init] * r

    def posterior():
        w = []
        for v in range(n):
            a, b = prior, 1 - prior
            for j in range(r):
                a *= p[j] if d[j, v] else 1 - p[j]
                b *= (1 - q[j]) if d[j, v] else q[j]
            w.append(a / (a + b))
        return w

    for _ in range(iters):
        w = posterior()
        sw, sb = sum(w), sum(1 - x for x in w)
        p = [sum(w[v] * d[j, v] for v in range(n)) / sw for j in range(r)]
        q = [sum((1 - w[v]) * (1 - d[j, v]) for v in range(n)) / sb for j in range(r)]
        p = [min(max(x, 1e-12), 1 - 1e-12) for x in p]
        q = [min(max(x, 1e-12), 1 - 1e-12) for x in q]
    return np.array(posterior())
