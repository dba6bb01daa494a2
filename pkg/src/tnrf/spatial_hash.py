"""Uniform hash grid for exact nearest-neighbour queries in 3D."""
from __future__ import annotations

import math

import numpy as np


class SpatialHashGrid:
    """Bucket points into cubic cells and answer exact nearest-point queries.

    Cells are searched in growing Chebyshev rings around the query cell;
    the search stops once no unvisited cell can hold a closer point. Ties
    on distance go to the lowest point index.
    """

    def __init__(self, points, cell_size: float):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        if self.points.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        keys = np.floor(self.points / self.cell_size).astype(np.int64)
        self.key_min = keys.min(axis=0)
        self.key_max = keys.max(axis=0)
        order = np.lexsort((np.arange(len(keys)), keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        uniq, start, counts = np.unique(sorted_keys, axis=0, return_index=True, return_counts=True)
        self._order = order
        self._cells = {
            tuple(k): order[s : s + c] for k, s, c in zip(uniq.tolist(), start, counts)
        }

    def _cell_indices(self, key, ring):
        cx, cy, cz = key
        out = []
        for dx in range(-ring, ring + 1):
            for dy in range(-ring, ring + 1):
                edge_xy = abs(dx) == ring or abs(dy) == ring
                if edge_xy:
                    dzs = range(-ring, ring + 1)
                else:
                    dzs = (-ring, ring) if ring else (0,)
                for dz in dzs:
                    idx = self._cells.get((cx + dx, cy + dy, cz + dz))
                    if idx is not None:
                        out.append(idx)
        return out

    def _max_ring(self, key) -> int:
        key = np.asarray(key)
        span = np.maximum(np.abs(key - self.key_min), np.abs(self.key_max - key))
        return int(span.max()) + 1

    def query_one(self, q):
        q = np.asarray(q, dtype=np.float64)
        key = tuple(int(v) for v in np.floor(q / self.cell_size))
        best_d2, best_i = math.inf, -1
        max_ring = self._max_ring(key)
        ring = 0
        while ring <= max_ring:
            if 24 * ring * ring + 2 > len(self._cells):
                # the ring holds more cells than are occupied: scanning every
                # point is cheaper and exact (argmin keeps the lowest index)
                diff = self.points - q
                d2 = np.einsum("ij,ij->i", diff, diff)
                j = int(np.argmin(d2))
                return j, math.sqrt(float(d2[j]))
            for idx in self._cell_indices(key, ring):
                diff = self.points[idx] - q
                d2 = np.einsum("ij,ij->i", diff, diff)
                j = int(np.argmin(d2))
                # argmin takes the first minimum; cells hold indices ascending
                cand_d2, cand_i = float(d2[j]), int(idx[j])
                if cand_d2 < best_d2 or (cand_d2 == best_d2 and cand_i < best_i):
                    best_d2, best_i = cand_d2, cand_i
            # every unvisited cell is at least ring * cell_size away
            if best_i >= 0 and math.sqrt(best_d2) < ring * self.cell_size:
                break
            ring += 1
        return best_i, math.sqrt(best_d2)

    def query(self, queries):
        """Nearest indexed point for each query; returns ``(indices, distances)``."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        idx = np.empty(len(queries), dtype=np.int64)
        dist = np.empty(len(queries))
        for n, q in enumerate(queries):
            idx[n], dist[n] = self.query_one(q)
        return idx, dist


def brute_force_nearest(points, queries):
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(queries)), idx])
