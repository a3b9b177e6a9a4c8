"""Exact spatial-query kernels on point clouds.

All distances are squared Euclidean, computed as ``dx*dx + dy*dy + dz*dz`` so
that every kernel agrees bit-for-bit with the brute-force references in
:mod:`lgdet.oracles`. Single-cloud functions take ``[N, 3]`` arrays; the
``*_batch`` variants take ``[B, N, 3]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np


@dataclass
class PointCloud:
    coords: np.ndarray  # [N, 3], meters, z up
    features: np.ndarray | None = None  # [N, C], includes the height channel

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be [N>=1, 3], got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim == 1:
                self.features = self.features[:, None]
            if len(self.features) != len(self.coords):
                raise ValueError("features row count must equal number of points")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class NeighborIndex:
    indices: np.ndarray  # [M, n] int64
    valid_count: np.ndarray  # [M] int64, genuine neighbors before padding


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances ``[..., M, N]`` between a ``[..., M, 3]`` and b ``[..., N, 3]``."""
    dx = a[..., :, None, 0] - b[..., None, :, 0]
    dy = a[..., :, None, 1] - b[..., None, :, 1]
    dz = a[..., :, None, 2] - b[..., None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _coords(cloud) -> np.ndarray:
    return cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy FPS; each step takes the unchosen point farthest from the chosen set.

    Ties go to the lowest index. Output is in selection order.
    """
    xyz = _coords(cloud)
    return farthest_point_sample_batch(xyz[None], m, np.array([start]))[0]


@numba.njit(cache=True)
def _fps_kernel(xyz, m, start, out):
    N = xyz.shape[0]
    best = np.full(N, np.inf)
    last = start
    out[0] = last
    for i in range(1, m):
        lx, ly, lz = xyz[last, 0], xyz[last, 1], xyz[last, 2]
        best[last] = -1.0
        arg = 0
        top = -np.inf
        for j in range(N):
            if best[j] >= 0.0:
                dx = xyz[j, 0] - lx
                dy = xyz[j, 1] - ly
                dz = xyz[j, 2] - lz
                d = dx * dx + dy * dy + dz * dz
                if d < best[j]:
                    best[j] = d
            if best[j] > top:
                top = best[j]
                arg = j
        last = arg
        out[i] = last


def farthest_point_sample_batch(xyz: np.ndarray, m: int, start: np.ndarray | int = 0) -> np.ndarray:
    B, N, _ = xyz.shape
    if not 1 <= m <= N:
        raise ValueError(f"cannot sample {m} of {N} points")
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64), (B,))
    if (starts < 0).any() or (starts >= N).any():
        raise ValueError("FPS start index out of range")
    out = np.empty((B, m), dtype=np.int64)
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    for b in range(B):
        _fps_kernel(xyz[b], m, int(starts[b]), out[b])
    return out


def ball_query(cloud, centers: np.ndarray, radius: float, n: int) -> NeighborIndex:
    """First ``n`` points (ascending index) within ``radius`` of each center.

    Short rows are padded with their first neighbor; a center with no point in
    range falls back to its nearest point with ``valid_count = 1``.
    """
    if radius <= 0 or n < 1:
        raise ValueError("ball_query needs radius > 0 and n >= 1")
    return _first_in_radius(_coords(cloud), centers, radius * radius, n)


@numba.njit(cache=True)
def _ball_query_kernel(xyz, centers, r2, n, idx, valid):
    N = xyz.shape[0]
    for i in range(centers.shape[0]):
        cx, cy, cz = centers[i, 0], centers[i, 1], centers[i, 2]
        cnt = 0
        near = 0
        near_d = np.inf
        for j in range(N):
            dx = xyz[j, 0] - cx
            dy = xyz[j, 1] - cy
            dz = xyz[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d <= r2:
                idx[i, cnt] = j
                cnt += 1
                if cnt == n:
                    break
            elif cnt == 0 and d < near_d:
                near_d = d
                near = j
        if cnt == 0:
            idx[i, 0] = near
            cnt = 1
        for k in range(cnt, n):
            idx[i, k] = idx[i, 0]
        valid[i] = cnt


def _first_in_radius(xyz: np.ndarray, centers: np.ndarray, r2: float, n: int) -> NeighborIndex:
    M = len(centers)
    idx = np.empty((M, n), dtype=np.int64)
    valid = np.empty(M, dtype=np.int64)
    _ball_query_kernel(np.ascontiguousarray(xyz), np.ascontiguousarray(centers, dtype=np.float64),
                       r2, n, idx, valid)
    return NeighborIndex(idx, valid)


def ball_query_batch(xyz: np.ndarray, centers: np.ndarray, radius: float, n: int) -> np.ndarray:
    """Batched ball query; returns indices ``[B, M, n]``."""
    return np.stack([ball_query(xyz[b], centers[b], radius, n).indices for b in range(len(xyz))])


def knn(cloud, queries: np.ndarray, k: int) -> NeighborIndex:
    """``k`` nearest points by squared distance, ties to the lower index."""
    xyz = _coords(cloud)
    if not 1 <= k <= len(xyz):
        raise ValueError(f"k={k} out of range for {len(xyz)} points")
    d2 = sq_dist(np.asarray(queries, dtype=np.float64), xyz)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return NeighborIndex(idx.astype(np.int64), np.full(len(idx), k, dtype=np.int64))


def group_relative(cloud, seed_indices: np.ndarray, neighbors: NeighborIndex | np.ndarray) -> np.ndarray:
    """Gather ``[M, n, 3 + C]`` with channels ``[x_j - x_seed, features_j]``."""
    xyz = _coords(cloud)
    feats = cloud.features if isinstance(cloud, PointCloud) else None
    idx = neighbors.indices if isinstance(neighbors, NeighborIndex) else neighbors
    rel = xyz[idx] - xyz[seed_indices][:, None, :]
    if feats is None:
        return rel
    return np.concatenate([rel, feats[idx]], axis=-1)


def three_nn_weights(sparse_coords: np.ndarray, dense_coords: np.ndarray,
                     eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Indices ``[D, k]`` and normalized inverse-squared-distance weights, k = min(3, S).

    A dense point that coincides with a sparse point takes that point's weight 1.
    """
    k = min(3, len(sparse_coords))
    nn = knn(sparse_coords, dense_coords, k).indices
    d2 = sq_dist(np.asarray(dense_coords, dtype=np.float64), np.asarray(sparse_coords, dtype=np.float64))
    d2 = np.take_along_axis(d2, nn, axis=1)
    w = 1.0 / (d2 + eps)
    w = w / w.sum(axis=1, keepdims=True)
    hit = d2[:, 0] == 0.0
    if hit.any():
        w[hit] = 0.0
        w[hit, 0] = 1.0
    return nn, w


def three_interpolate(sparse_coords: np.ndarray, sparse_feats: np.ndarray, dense_coords: np.ndarray,
                      eps: float = 1e-8) -> np.ndarray:
    nn, w = three_nn_weights(sparse_coords, dense_coords, eps)
    return (np.asarray(sparse_feats)[nn] * w[..., None]).sum(axis=1)
