import numpy as np
import pytest

from urbanmesh.delaunay import delaunay_triangulation
from urbanmesh.exceptions import DegenerateGeometryError


def circumcircle_violations(points, tris, tol=1e-9):
    """Exhaustive empty-circumcircle scan; returns violation count."""
    bad = 0
    for t in tris:
        a, b, c = points[t[0]], points[t[1]], points[t[2]]
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        if abs(d) < 1e-15:
            continue
        ux = (
            (a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])
        ) / d
        uy = (
            (a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])
        ) / d
        center = np.array([ux, uy])
        r = np.linalg.norm(a - center)
        for k, p in enumerate(points):
            if k in t:
                continue
            if np.linalg.norm(p - center) < r - tol * max(r, 1.0):
                bad += 1
    return bad


def triangulation_area(points, tris):
    area = 0.0
    for t in tris:
        a, b, c = points[t[0]], points[t[1]], points[t[2]]
        area += 0.5 * abs(
            (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        )
    return area


def hull_area(points):
    from scipy.spatial import ConvexHull

    return ConvexHull(points).volume


def test_three_points_single_triangle():
    pts = np.array([[0.0, 0], [1, 0], [0, 1]])
    tris = delaunay_triangulation(pts)
    assert len(tris) == 1
    assert sorted(tris[0]) == [0, 1, 2]


def test_four_points_takes_delaunay_diagonal():
    # convex quad where the empty-circumcircle diagonal is unambiguous
    pts = np.array([[0.0, 0], [2, 0], [2.2, 1.8], [0, 2]])
    tris = delaunay_triangulation(pts)
    assert len(tris) == 2
    assert circumcircle_violations(pts, tris) == 0
    edges = set()
    for t in tris:
        for k in range(3):
            edges.add(tuple(sorted((t[k], t[(k + 1) % 3]))))
    # exactly one of the two diagonals appears and it must be the Delaunay one
    assert ((0, 2) in edges) != ((1, 3) in edges)


def test_random_points_pass_circumcircle_oracle():
    rng = np.random.default_rng(42)
    pts = rng.uniform(0, 10, size=(200, 2))
    tris = delaunay_triangulation(pts)
    assert circumcircle_violations(pts, tris) == 0
    assert triangulation_area(pts, tris) == pytest.approx(hull_area(pts), rel=1e-9)


def test_collinear_boundary_points_survive():
    # dense collinear points on one side, as produced by plane clipping
    rng = np.random.default_rng(7)
    inner = rng.uniform(0.2, 1.0, size=(60, 2))
    line = np.stack([np.zeros(25), np.linspace(0, 1, 25)], axis=1)
    pts = np.vstack([inner, line])
    tris = delaunay_triangulation(pts)
    used = set(int(v) for t in tris for v in t)
    assert used == set(range(len(pts)))  # nobody dropped
    assert circumcircle_violations(pts, tris) == 0
    # boundary edges along the line connect consecutive points only
    edges = {}
    for t in tris:
        for k in range(3):
            e = tuple(sorted((int(t[k]), int(t[(k + 1) % 3]))))
            edges[e] = edges.get(e, 0) + 1
    line_ids = sorted(range(60, 85), key=lambda i: pts[i][1])
    for a, b in zip(line_ids[:-1], line_ids[1:]):
        assert edges.get(tuple(sorted((a, b)))) == 1  # consecutive hull edges


def test_cocircular_grid_valid():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2)
    tris = delaunay_triangulation(g)
    assert triangulation_area(g, tris) == pytest.approx(16.0, rel=1e-9)
    used = set(int(v) for t in tris for v in t)
    assert used == set(range(25))


def test_degenerate_inputs_raise():
    with pytest.raises(DegenerateGeometryError):
        delaunay_triangulation(np.array([[0.0, 0], [1, 1]]))
    line = np.stack([np.linspace(0, 1, 10), np.linspace(0, 2, 10)], axis=1)
    with pytest.raises(DegenerateGeometryError):
        delaunay_triangulation(line)


def test_duplicate_points_alias_first_index():
    pts = np.array([[0.0, 0], [1, 0], [0, 1], [0, 0], [1, 0]])
    tris = delaunay_triangulation(pts)
    used = set(int(v) for t in tris for v in t)
    assert used == {0, 1, 2}


def test_deterministic():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-5, 5, size=(120, 2))
    a = delaunay_triangulation(pts)
    b = delaunay_triangulation(pts.copy())
    np.testing.assert_array_equal(a, b)
