import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbreg.geom import PointCloud, RigidTransform, apply_transform
from bbreg.knn import KdTree
from bbreg.normals import (
    DegenerateNeighborhoodError,
    estimate_normals,
    neighborhood_covariances,
    orient_normals,
)

from oracles import knn_sorted, mp_smallest_eigvec, rodrigues


def sphere(n, seed):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_plane_patch_normal_is_plus_z():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), np.zeros(50)])
    out = estimate_normals(PointCloud(pts), 13)
    assert np.allclose(out.normals, [0, 0, 1], atol=1e-12)


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    a = np.pi * (1 + 5**0.5) * i
    return np.column_stack([r * np.cos(a), r * np.sin(a), z])


def radial_error_deg(pts, k=13):
    out = estimate_normals(PointCloud(pts), k)
    return np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", out.normals, pts), -1, 1)))


def test_unit_sphere_normals_are_radial():
    # evenly spread samples: every neighbourhood is balanced
    assert radial_error_deg(fibonacci_sphere(2000)).max() < 5.0


def test_random_sphere_normals_mostly_radial():
    # i.i.d. samples leave a few lopsided neighbourhoods that tilt slightly past 5 degrees
    err = radial_error_deg(sphere(2000, 1))
    assert np.percentile(err, 99) < 5.0
    assert err.max() < 10.0


def test_collinear_points_are_degenerate():
    with pytest.raises(DegenerateNeighborhoodError) as info:
        estimate_normals(PointCloud([[0, 0, 0], [1, 1, 1], [2, 2, 2]]), 3)
    assert info.value.indices == [0, 1, 2]


def test_k_bounds():
    c = PointCloud(sphere(10, 2))
    with pytest.raises(ValueError):
        estimate_normals(c, 2)
    with pytest.raises(ValueError):
        estimate_normals(c, 11)


def test_covariance_uses_self_inclusive_neighbourhood():
    pts = sphere(60, 3)
    C = neighborhood_covariances(pts, 13)
    for i in (0, 17, 59):
        nb = pts[[j for j, _ in knn_sorted(pts, pts[i], 13)]]
        assert i in [j for j, _ in knn_sorted(pts, pts[i], 13)]
        assert np.allclose(C[i], np.cov(nb.T, bias=True), atol=1e-15)


def test_eigh_matches_high_precision_oracle():
    rng = np.random.default_rng(4)
    for _ in range(40):
        A = rng.normal(size=(3, 3))
        C = A @ A.T
        w, V = np.linalg.eigh(C)
        v_ref, w_ref = mp_smallest_eigvec(C)
        assert np.allclose(w, w_ref, atol=1e-8 * max(1.0, abs(w_ref[-1])))
        assert min(np.abs(V[:, 0] - v_ref).max(), np.abs(V[:, 0] + v_ref).max()) < 1e-8


def test_estimated_normals_match_oracle_on_noisy_surface():
    rng = np.random.default_rng(5)
    pts = sphere(300, 5) + rng.normal(scale=0.01, size=(300, 3))
    out = estimate_normals(PointCloud(pts), 13)
    C = neighborhood_covariances(pts, 13)
    for i in range(0, 300, 30):
        v_ref, _ = mp_smallest_eigvec(C[i])
        assert abs(abs(out.normals[i] @ v_ref) - 1) < 1e-8


def test_normals_unit_and_smallest_direction():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(200, 3)) * [1.0, 0.6, 0.3]
    out = estimate_normals(PointCloud(pts), 13)
    assert np.abs(np.linalg.norm(out.normals, axis=1) - 1).max() < 1e-9
    C = neighborhood_covariances(pts, 13, KdTree(pts))
    v = rng.normal(size=(100, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for i in range(0, 200, 10):
        n = out.normals[i]
        assert n @ C[i] @ n <= np.min(np.einsum("ij,jk,ik->i", v, C[i], v)) + 1e-12


def test_orientation_points_outward():
    pts = sphere(500, 7) * [1.0, 0.7, 0.5]
    out = estimate_normals(PointCloud(pts), 13)
    dots = np.einsum("ij,ij->i", out.normals, pts - pts.mean(axis=0))
    assert np.all(dots >= -1e-12)


def test_tangent_case_uses_first_nonzero_component():
    n = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    pts = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    out = orient_normals(n, pts, np.zeros(3))
    assert np.array_equal(out, [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normals_rotate_with_the_cloud(seed):
    rng = np.random.default_rng(seed)
    pts = sphere(300, seed % 1000) * [1.0, 0.8, 0.6]
    T = RigidTransform(rodrigues(rng.normal(size=3), rng.uniform(0, math.pi)), rng.normal(size=3))
    a = estimate_normals(PointCloud(pts), 13)
    b = estimate_normals(apply_transform(T, PointCloud(pts)), 13)
    rotated = a.normals @ T.rotation.T
    # atan2 of |cross| and |dot| stays accurate for tiny angles, unlike arccos
    ang = np.arctan2(np.linalg.norm(np.cross(rotated, b.normals), axis=1),
                     np.abs(np.einsum("ij,ij->i", rotated, b.normals)))
    assert ang.max() < 1e-6
