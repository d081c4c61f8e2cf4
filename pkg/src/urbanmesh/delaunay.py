"""2D Delaunay triangulation with exact-duplicate aliasing.

Qhull (via scipy) handles near- and exactly-collinear boundary points such as
mesh clip boundaries without dropping them; exact duplicates are the one case
it discards, so duplicates are aliased to their first occurrence up front
(seam welding needs that alias map anyway). Output triangles are
counter-clockwise and deterministic for identical input.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay as _SciDelaunay
from scipy.spatial import QhullError

from .exceptions import DegenerateGeometryError


def delaunay_triangulation(points: np.ndarray) -> np.ndarray:
    """Triangulate 2D points; returns (T, 3) ccw index triples.

    Duplicate points alias the first occurrence's index. Raises
    DegenerateGeometryError for fewer than 3 distinct points or an
    all-collinear input.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < 3:
        raise DegenerateGeometryError("Delaunay needs >= 3 points")

    first_of: dict[tuple[float, float], int] = {}
    alias = np.zeros(len(points), dtype=np.int64)
    uniq_rows: list[int] = []
    for i, p in enumerate(points):
        key = (float(p[0]), float(p[1]))
        if key in first_of:
            alias[i] = first_of[key]
        else:
            first_of[key] = i
            alias[i] = i
            uniq_rows.append(i)
    if len(uniq_rows) < 3:
        raise DegenerateGeometryError("fewer than 3 distinct points")
    uniq = points[uniq_rows]

    try:
        tri = _SciDelaunay(uniq)
    except QhullError as exc:
        raise DegenerateGeometryError(f"degenerate point set: {exc}") from exc
    if len(tri.coplanar):
        # should not happen after exact dedup; joggle as a deterministic rescue
        tri = _SciDelaunay(uniq, qhull_options="QJ")
        if len(tri.coplanar):
            raise DegenerateGeometryError("triangulation dropped input points")

    simplices = tri.simplices.astype(np.int64)
    # enforce ccw orientation in the parameter plane
    a = uniq[simplices[:, 0]]
    b = uniq[simplices[:, 1]]
    c = uniq[simplices[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
        c[:, 0] - a[:, 0]
    )
    flip = area2 < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    keep = np.abs(area2) > 0
    simplices = simplices[keep]
    if len(simplices) == 0:
        raise DegenerateGeometryError("all points collinear")

    row_map = np.array(uniq_rows, dtype=np.int64)
    out = row_map[simplices]
    order = np.lexsort((out[:, 2], out[:, 1], out[:, 0]))
    return out[order]
