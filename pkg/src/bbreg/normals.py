"""Surface normal estimation from local principal axes."""

from __future__ import annotations

import numpy as np

from .geom import PointCloud
from .knn import KdTree

# ratio of middle to largest covariance eigenvalue below which a neighbourhood is degenerate
_RANK_TOL = 1e-10
_ZERO_TOL = 1e-12


class DegenerateNeighborhoodError(ValueError):
    def __init__(self, indices):
        self.indices = list(indices)
        shown = ", ".join(map(str, self.indices[:10]))
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"rank-deficient neighbourhood at point(s) {shown}{more}")


def neighborhood_covariances(points, k, tree=None):
    """Covariance matrix of the k-neighbourhood (self included) of every point."""
    tree = KdTree(points) if tree is None else tree
    idx, _ = tree.k_nearest(points, k)
    nb = points[idx]  # (n, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered) / k


def orient_normals(normals, points, centroid):
    """Flip normals to point away from ``centroid``.

    When the normal is (numerically) tangent to the centroid direction the
    first nonzero component is made positive instead.
    """
    normals = normals.copy()
    dots = np.einsum("ij,ij->i", normals, points - centroid)
    flip = dots < -_ZERO_TOL
    tangent = np.abs(dots) <= _ZERO_TOL
    if np.any(tangent):
        nt = normals[tangent]
        first = np.argmax(np.abs(nt) > _ZERO_TOL, axis=1)
        flip[tangent] = nt[np.arange(len(nt)), first] < 0
    normals[flip] *= -1.0
    return normals


def estimate_normals(cloud: PointCloud, k: int = 13) -> PointCloud:
    """Estimate a unit normal per point as the smallest-eigenvalue eigenvector
    of its k-neighbourhood covariance (the point itself counts as a neighbour).

    Raises
    ------
    ValueError
        If ``k < 3`` or ``k`` exceeds the number of points.
    DegenerateNeighborhoodError
        If any neighbourhood covariance has rank below two.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError(f"k must be at least 3, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the cloud size {n}")
    pts = cloud.points
    cov = neighborhood_covariances(pts, k)
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    bad = np.nonzero(evals[:, 1] <= _RANK_TOL * scale)[0]
    if len(bad):
        raise DegenerateNeighborhoodError(bad.tolist())
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals = orient_normals(normals, pts, pts.mean(axis=0))
    return PointCloud(pts, normals)
