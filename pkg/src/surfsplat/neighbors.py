"""K-nearest-neighbor graphs over the kernel set, fixed at frame 0.

The primary builder walks the triangle-adjacency graph of the binding
mesh (edge-sharing triangles), ranking candidates by BFS depth, then
Euclidean distance, then index, which makes neighborhoods follow the
surface rather than jump across folds. A Euclidean fallback covers
scenes without a mesh. Pair weights are a Gaussian falloff of rest
distance; by default the bandwidth is set so the weight at the median
neighbor distance is one half.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .mesh import TriangleMesh
from .surface import BindingMap


@dataclass
class NeighborGraph:
    neighbors: np.ndarray  # (N, r) kernel indices, -1 where a component is too small
    weights: np.ndarray  # (N, r) pair weights, 0 at padding
    r: int
    lambda_w: float

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (i, j, w) arrays over real (non-padded) edges."""
        n, r = self.neighbors.shape
        src = np.repeat(np.arange(n), r)
        dst = self.neighbors.reshape(-1)
        w = self.weights.reshape(-1)
        keep = dst >= 0
        return src[keep], dst[keep], w[keep]


def _finish(positions: np.ndarray, neigh: np.ndarray, r: int, lambda_w: float | None) -> NeighborGraph:
    n = len(positions)
    dist = np.zeros_like(neigh, dtype=float)
    valid = neigh >= 0
    if valid.any():
        src = np.repeat(np.arange(n), r).reshape(n, r)
        d = np.linalg.norm(positions[np.where(valid, neigh, 0)] - positions[src], axis=2)
        dist = np.where(valid, d, 0.0)
    if lambda_w is None:
        med = np.median(dist[valid]) if valid.any() else 1.0
        lambda_w = float(np.log(2.0) / max(med * med, 1e-24))
    weights = np.where(valid, np.exp(-lambda_w * dist * dist), 0.0)
    return NeighborGraph(neighbors=neigh, weights=weights, r=r, lambda_w=float(lambda_w))


def build_neighborhoods(
    gaussian_positions: np.ndarray,
    binding: BindingMap,
    mesh: TriangleMesh,
    r: int = 8,
    lambda_w: float | None = None,
) -> NeighborGraph:
    """Graph-nearest kernels via BFS on the triangle adjacency."""
    positions = np.atleast_2d(np.asarray(gaussian_positions, dtype=float))
    n = len(positions)
    if not binding.is_bijection(len(mesh)):
        raise DataError("neighborhood construction requires a kernel/triangle bijection")
    tri_adj = mesh.edge_adjacency()
    kernel_of_tri = np.empty(len(mesh), dtype=np.int64)
    kernel_of_tri[binding.triangle_of] = np.arange(n)

    neigh = np.full((n, r), -1, dtype=np.int64)
    for i in range(n):
        start = binding.triangle_of[i]
        depth = {start: 0}
        queue = deque([start])
        found: list[tuple[int, float, int]] = []
        # expand until one full BFS layer beyond the r-th candidate
        cap_depth = None
        while queue:
            tri = queue.popleft()
            d = depth[tri]
            if cap_depth is not None and d > cap_depth:
                break
            if tri != start:
                k = int(kernel_of_tri[tri])
                found.append((d, float(np.linalg.norm(positions[k] - positions[i])), k))
                if len(found) >= r and cap_depth is None:
                    cap_depth = d
            for nb in tri_adj[tri]:
                if nb not in depth:
                    depth[nb] = d + 1
                    queue.append(nb)
        found.sort()
        for slot, (_, _, k) in enumerate(found[:r]):
            neigh[i, slot] = k
    return _finish(positions, neigh, r, lambda_w)


def build_euclidean_neighborhoods(
    positions: np.ndarray, r: int = 8, lambda_w: float | None = None
) -> NeighborGraph:
    """Plain kNN fallback for unbound kernel sets."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(positions)
    k = min(r + 1, n)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k)
    idx = np.atleast_2d(idx)
    neigh = np.full((n, r), -1, dtype=np.int64)
    for i in range(n):
        others = [int(j) for j in idx[i] if j != i][:r]
        neigh[i, : len(others)] = others
    return _finish(positions, neigh, r, lambda_w)
