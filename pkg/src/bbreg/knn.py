"""Exact nearest-neighbour search and best-buddy (mutual nearest neighbour) pairing.

Search runs on :class:`scipy.spatial.cKDTree` with median splits. Candidate
distances are recomputed here with one fixed formula so that results,
including the lowest-index tie-break, agree exactly with a brute-force scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud

# relative gap under which two candidate distances are re-checked as a possible tie
_TIE_RTOL = 1e-9


def _norm(d):
    # fixed summation order keeps tree and brute-force distances bitwise equal
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def point_distances(x, pts):
    """Euclidean distances from one point ``x`` to each row of ``pts``."""
    return _norm(pts - x)


def brute_force_knn(points, queries, k):
    """O(nm) reference: k nearest indices/distances per query, ties by index."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    idx = np.empty((len(queries), k), dtype=np.intp)
    dist = np.empty((len(queries), k))
    order_key = np.arange(len(points))
    for r, x in enumerate(queries):
        d = point_distances(x, points)
        o = np.lexsort((order_key, d))[:k]
        idx[r], dist[r] = o, d[o]
    return idx, dist


class KdTree:
    """Immutable KD-tree over a point set, answering exact k-NN queries.

    Parameters
    ----------
    points : array_like, shape (n, 3) or PointCloud
    leafsize : int
        Maximum number of points stored in a leaf.
    """

    def __init__(self, points, leafsize=16):
        if isinstance(points, PointCloud):
            points = points.points
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("KdTree needs a non-empty (n, d) point array")
        pts.flags.writeable = False
        self.data = pts
        self._tree = cKDTree(pts, leafsize=leafsize, balanced_tree=True, compact_nodes=False)

    def __len__(self):
        return len(self.data)

    def leaves(self):
        """Index arrays of every leaf, for structural checks."""
        out = []
        stack = [self._tree.tree]
        while stack:
            node = stack.pop()
            if node.split_dim == -1:
                out.append(np.asarray(node.indices))
            else:
                stack.extend((node.lesser, node.greater))
        return out

    def k_nearest(self, queries, k):
        """k exact nearest neighbours of each query row.

        Returns ``(indices, distances)`` each of shape (q, k), ascending by
        distance with ties broken by the lower index. A single 3-vector query
        gives arrays of shape (k,).
        """
        n = len(self.data)
        if k < 1 or k > n:
            raise ValueError(f"k={k} must lie in [1, {n}]")
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        kk = min(k + 1, n)
        _, cand = self._tree.query(q, k=kk)
        cand = np.asarray(cand, dtype=np.intp).reshape(len(q), kk)
        dist = _norm(self.data[cand] - q[:, None, :])
        # sort candidates by (distance, index)
        order = np.lexsort((cand, dist), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)

        if kk > k:
            # the k-th and (k+1)-th neighbours nearly tie: other points at the
            # same distance may be missing from the candidate list
            dk, dk1 = dist[:, k - 1], dist[:, k]
            suspect = np.nonzero(dk1 - dk <= _TIE_RTOL * np.maximum(dk1, 1e-300))[0]
            for r in suspect:
                radius = dk1[r] * (1 + 4 * _TIE_RTOL) + 1e-300
                ball = np.asarray(self._tree.query_ball_point(q[r], radius), dtype=np.intp)
                d = point_distances(q[r], self.data[ball])
                o = np.lexsort((ball, d))[:kk]
                cand[r], dist[r] = ball[o], d[o]
            cand, dist = cand[:, :k], dist[:, :k]

        if single:
            return cand[0], dist[0]
        return cand, dist

    def nearest(self, queries):
        """Nearest neighbour index and distance of each query (ties by lower index)."""
        idx, dist = self.k_nearest(queries, 1)
        return idx[..., 0], dist[..., 0]


def build_kdtree(cloud) -> KdTree:
    return KdTree(cloud)


def nearest(tree: KdTree, query):
    i, d = tree.nearest(query)
    return int(i), float(d)


def k_nearest(tree: KdTree, query, k):
    idx, dist = tree.k_nearest(np.asarray(query, dtype=np.float64).reshape(3), k)
    return list(zip(idx.tolist(), dist.tolist()))


def mutual_nearest_pairs(P, Q, tree_p=None, tree_q=None):
    """Best-buddy pairs between clouds ``P`` and ``Q``.

    Returns an int array of shape (k, 2) with rows ``(i, j)`` such that
    ``q_j`` is the nearest neighbour of ``p_i`` and vice versa. Rows are
    sorted by ``i``. Prebuilt trees may be passed to skip construction.
    """
    p = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=np.float64)
    q = Q.points if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    tree_p = KdTree(p) if tree_p is None else tree_p
    tree_q = KdTree(q) if tree_q is None else tree_q
    nn_of_p, _ = tree_q.nearest(p)  # j*(i)
    nn_of_q, _ = tree_p.nearest(q)  # i*(j)
    i = np.arange(len(p))
    keep = nn_of_q[nn_of_p] == i
    return np.column_stack([i[keep], nn_of_p[keep]]).astype(np.intp)


def brute_force_mutual_pairs(P, Q):
    """Reference best-buddy pairs from the full distance matrix (double argmin)."""
    p = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=np.float64)
    q = Q.points if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    D = np.empty((len(p), len(q)))
    for i in range(len(p)):
        D[i] = point_distances(p[i], q)
    row_min = np.argmin(D, axis=1)  # argmin returns the first (lowest) index on ties
    col_min = np.argmin(D, axis=0)
    i = np.arange(len(p))
    keep = col_min[row_min] == i
    return np.column_stack([i[keep], row_min[keep]]).astype(np.intp)
