"""KD-tree over 3D points with inclusive radius search and visit accounting.

The tree is static once built; the map store layers incremental inserts on
top via a side buffer. Leaf distance tests are vectorized, and the per-query
``last_visited`` counter exposes how many tree nodes a search touched.
"""

from __future__ import annotations

import heapq

import numpy as np

_LEAF_SIZE = 256


class KdTree:
    """Median-split KD-tree over an (N, 3) point array."""

    def __init__(self, points, leaf_size: int = _LEAF_SIZE):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        self._pts = np.ascontiguousarray(pts)
        self._idx = np.arange(len(pts), dtype=np.int64)
        self._leaf_size = leaf_size
        self.last_visited = 0
        self.total_visited = 0
        # Node arrays: internal nodes carry (dim, val, left, right); leaves
        # carry (start, end) into the permuted index array and left == -1.
        dims, vals, lefts, rights, starts, ends = [], [], [], [], [], []
        if len(pts):
            stack = [(0, len(pts), -1, False, 0)]
            while stack:
                start, end, parent, is_right, depth = stack.pop()
                node = len(dims)
                if parent >= 0:
                    if is_right:
                        rights[parent] = node
                    else:
                        lefts[parent] = node
                if end - start <= leaf_size:
                    dims.append(-1)
                    vals.append(0.0)
                    lefts.append(-1)
                    rights.append(-1)
                    starts.append(start)
                    ends.append(end)
                    continue
                dim = depth % 3
                sub = self._idx[start:end]
                half = (end - start) // 2
                order = np.argpartition(self._pts[sub, dim], half)
                self._idx[start:end] = sub[order]
                mid = start + half
                val = float(self._pts[self._idx[mid], dim])
                dims.append(dim)
                vals.append(val)
                lefts.append(0)
                rights.append(0)
                starts.append(start)
                ends.append(end)
                stack.append((mid, end, node, True, depth + 1))
                stack.append((start, mid, node, False, depth + 1))
        self._dim = np.array(dims, dtype=np.int8)
        self._val = np.array(vals, dtype=np.float64)
        self._left = np.array(lefts, dtype=np.int32)
        self._right = np.array(rights, dtype=np.int32)
        self._start = np.array(starts, dtype=np.int64)
        self._end = np.array(ends, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._pts)

    @property
    def points(self) -> np.ndarray:
        return self._pts

    def radius_search(self, center, r: float) -> np.ndarray:
        """Indices of all points with Euclidean distance <= r from center."""
        if r < 0:
            raise ValueError(f"radius must be non-negative, got {r}")
        self.last_visited = 0
        if not len(self._pts):
            return np.empty(0, dtype=np.int64)
        center = np.asarray(center, dtype=np.float64)
        r2 = r * r
        hits = []
        stack = [0]
        while stack:
            node = stack.pop()
            self.last_visited += 1
            if self._left[node] < 0:
                sub = self._idx[self._start[node] : self._end[node]]
                d2 = np.sum((self._pts[sub] - center) ** 2, axis=1)
                hits.append(sub[d2 <= r2])
                continue
            delta = center[self._dim[node]] - self._val[node]
            if delta <= r:
                stack.append(self._left[node])
            if delta >= -r:
                stack.append(self._right[node])
        self.total_visited += self.last_visited
        if not hits:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(hits)

    def any_within(self, centers: np.ndarray, r: float) -> np.ndarray:
        """Boolean mask: which of the (M, 3) centers have a point within r."""
        if r < 0:
            raise ValueError(f"radius must be non-negative, got {r}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        found = np.zeros(len(centers), dtype=bool)
        self.last_visited = 0
        if not len(self._pts) or not len(centers):
            return found
        r2 = r * r

        def visit(node: int, subset: np.ndarray):
            subset = subset[~found[subset]]
            if not len(subset):
                return
            self.last_visited += 1
            if self._left[node] < 0:
                leaf = self._pts[self._idx[self._start[node] : self._end[node]]]
                diff = centers[subset, None, :] - leaf[None, :, :]
                d2 = np.sum(diff * diff, axis=2)
                found[subset[np.any(d2 <= r2, axis=1)]] = True
                return
            delta = centers[subset, self._dim[node]] - self._val[node]
            visit(self._left[node], subset[delta <= r])
            visit(self._right[node], subset[delta >= -r])

        visit(0, np.arange(len(centers), dtype=np.int64))
        self.total_visited += self.last_visited
        return found

    def query_nearest(self, center, k: int = 1) -> np.ndarray:
        """Indices of the k nearest points, closest first."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not len(self._pts):
            return np.empty(0, dtype=np.int64)
        center = np.asarray(center, dtype=np.float64)
        heap: list[tuple[float, int]] = []  # max-heap via negated distances

        def visit(node: int):
            if self._left[node] < 0:
                sub = self._idx[self._start[node] : self._end[node]]
                d2 = np.sum((self._pts[sub] - center) ** 2, axis=1)
                for dist, i in zip(d2, sub):
                    if len(heap) < k:
                        heapq.heappush(heap, (-dist, int(i)))
                    elif dist < -heap[0][0]:
                        heapq.heapreplace(heap, (-dist, int(i)))
                return
            delta = float(center[self._dim[node]] - self._val[node])
            near, far = (
                (self._left[node], self._right[node])
                if delta <= 0
                else (self._right[node], self._left[node])
            )
            visit(near)
            if len(heap) < k or delta * delta <= -heap[0][0]:
                visit(far)

        visit(0)
        order = sorted(heap, key=lambda t: (-t[0], t[1]))
        return np.array([i for _, i in order], dtype=np.int64)


def build_point_kdtree(points) -> KdTree:
    """Spatial index over the given points answering exact radius queries."""
    return KdTree(points)


def linear_radius_search(points: np.ndarray, center, r: float) -> np.ndarray:
    """Brute-force reference for radius_search (identical arithmetic)."""
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        return np.empty(0, dtype=np.int64)
    center = np.asarray(center, dtype=np.float64)
    d2 = np.sum((points - center) ** 2, axis=1)
    return np.nonzero(d2 <= r * r)[0].astype(np.int64)
