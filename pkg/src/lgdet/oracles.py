"""Brute-force reference implementations of the spatial kernels.

These recompute everything from scratch with plain loops and no incremental
state. They are slow by design and exist to check :mod:`lgdet.pointops`.
"""
from __future__ import annotations

import numpy as np


def _d2(p, q) -> float:
    dx = p[0] - q[0]
    dy = p[1] - q[1]
    dz = p[2] - q[2]
    return dx * dx + dy * dy + dz * dz


def fps_oracle(xyz: np.ndarray, m: int, start: int = 0) -> list[int]:
    """O(N^2 M): every step recomputes the full chosen-by-candidate distance table."""
    xyz = np.asarray(xyz, dtype=np.float64)
    chosen = [start]
    while len(chosen) < m:
        c = xyz[chosen]
        dx = xyz[:, None, 0] - c[None, :, 0]
        dy = xyz[:, None, 1] - c[None, :, 1]
        dz = xyz[:, None, 2] - c[None, :, 2]
        mind = (dx * dx + dy * dy + dz * dz).min(axis=1)
        best_i, best_d = -1, -np.inf
        taken = set(chosen)
        for i in range(len(xyz)):
            if i not in taken and mind[i] > best_d:
                best_i, best_d = i, mind[i]
        chosen.append(best_i)
    return chosen


def ball_query_oracle(xyz: np.ndarray, centers: np.ndarray, radius: float, n: int):
    r2 = radius * radius
    rows, counts = [], []
    for c in centers:
        found = [i for i, p in enumerate(xyz) if _d2(p, c) <= r2]
        if not found:
            d = [_d2(p, c) for p in xyz]
            nearest = min(range(len(xyz)), key=lambda i: (d[i], i))
            rows.append([nearest] * n)
            counts.append(1)
            continue
        found = found[:n]
        counts.append(len(found))
        rows.append(found + [found[0]] * (n - len(found)))
    return np.array(rows, dtype=np.int64), np.array(counts, dtype=np.int64)


def knn_oracle(xyz: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    out = []
    for q in queries:
        keyed = sorted((_d2(p, q), i) for i, p in enumerate(xyz))
        out.append([i for _, i in keyed[:k]])
    return np.array(out, dtype=np.int64)


def group_oracle(xyz: np.ndarray, feats: np.ndarray | None, seeds, idx) -> np.ndarray:
    M, n = idx.shape
    C = 0 if feats is None else feats.shape[1]
    out = np.zeros((M, n, 3 + C))
    for i in range(M):
        s = xyz[seeds[i]]
        for j in range(n):
            p = idx[i, j]
            for a in range(3):
                out[i, j, a] = xyz[p][a] - s[a]
            for c in range(C):
                out[i, j, 3 + c] = feats[p, c]
    return out


def interpolate_oracle(sparse_xyz, sparse_feats, dense_xyz, eps: float = 1e-8) -> np.ndarray:
    k = min(3, len(sparse_xyz))
    out = np.zeros((len(dense_xyz), sparse_feats.shape[1]))
    for i, q in enumerate(dense_xyz):
        keyed = sorted((_d2(p, q), j) for j, p in enumerate(sparse_xyz))[:k]
        if keyed[0][0] == 0.0:
            out[i] = sparse_feats[keyed[0][1]]
            continue
        ws = [1.0 / (d + eps) for d, _ in keyed]
        tot = sum(ws)
        for w, (_, j) in zip(ws, keyed):
            out[i] += (w / tot) * sparse_feats[j]
    return out
