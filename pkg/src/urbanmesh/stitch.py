"""Merging adjacent partition meshes: clip, seam-triangulate, weld.

Each mesh is clipped against the other's bounding volume (straddling faces
split along the box planes with a shared-edge cache, so neighbouring faces
stay conforming); the removed overlap region is re-covered by a Delaunay
seam over the overlap vertices projected onto the support plane, and the
three parts are welded at boundary vertices within a distance threshold.
The weld never moves a non-boundary vertex; unweldable gaps are reported as
residual boundary loops, not silently closed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .delaunay import delaunay_triangulation
from .exceptions import DegenerateGeometryError
from .halfedge import (
    HalfEdgeMesh,
    drop_overpopulated_edges,
    split_nonmanifold_vertices,
    unique_edges,
)
from .partition import BoundingVolume, SupportPlane


@dataclass
class SeamPatch:
    vertices: np.ndarray  # (N, 3) original 3D positions
    param_uv: np.ndarray  # (N, 2) projections used for the triangulation
    triangles: np.ndarray  # (T, 3)

    def as_mesh(self) -> HalfEdgeMesh:
        return HalfEdgeMesh(self.vertices, self.triangles)

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


@dataclass
class StitchReport:
    welded_pairs: int = 0
    dropped_duplicate_faces: int = 0
    dropped_degenerate_faces: int = 0
    residual_boundary_loops: int = 0
    seam_faces: int = 0
    fallback_weld_only: bool = False

    def summary(self) -> str:
        return (
            f"welds={self.welded_pairs} dup_faces={self.dropped_duplicate_faces} "
            f"degen={self.dropped_degenerate_faces} seam_faces={self.seam_faces} "
            f"residual_loops={self.residual_boundary_loops}"
        )


# ---- clipping -------------------------------------------------------------------


def clip_mesh(mesh: HalfEdgeMesh, volume: BoundingVolume) -> HalfEdgeMesh:
    """Exterior part of a mesh w.r.t. an axis-oriented bounding volume.

    Faces fully outside are kept; straddling faces are split along the box
    planes; faces whose centroid lands strictly inside are dropped. A mesh
    fully inside yields a valid empty mesh.
    """
    if mesh.is_empty():
        return mesh.copy()
    plane = volume.plane
    verts3d = [v.copy() for v in mesh.vertices]
    coords = [
        np.array([*plane.to_plane_coords(v), plane.heights(np.atleast_2d(v))[0]])
        for v in mesh.vertices
    ]
    faces = [tuple(int(x) for x in f) for f in mesh.faces]
    chans = {k: list(v) for k, v in mesh.channels.items()}

    planes = [
        (0, volume.u_range[0]), (0, volume.u_range[1]),
        (1, volume.v_range[0]), (1, volume.v_range[1]),
        (2, volume.h_range[0]), (2, volume.h_range[1]),
    ]
    scale = max(
        volume.u_range[1] - volume.u_range[0],
        volume.v_range[1] - volume.v_range[0],
        volume.h_range[1] - volume.h_range[0],
    )
    eps = 1e-12 * max(scale, 1.0)

    for axis, level in planes:
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def cut(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                ca, cb = coords[key[0]], coords[key[1]]
                t = (level - ca[axis]) / (cb[axis] - ca[axis])
                coords.append(ca + t * (cb - ca))
                coords[-1][axis] = level  # exact on the plane
                verts3d.append(verts3d[key[0]] + t * (verts3d[key[1]] - verts3d[key[0]]))
                for name in chans:
                    va, vb = chans[name][key[0]], chans[name][key[1]]
                    chans[name].append(va + t * (vb - va))
                cache[key] = len(coords) - 1
            return cache[key]

        for tri in faces:
            side = [coords[v][axis] - level for v in tri]
            if all(s >= -eps for s in side) or all(s <= eps for s in side):
                new_faces.append(tri)
                continue
            # Sutherland-Hodgman against the plane, both halves kept
            lo_poly, hi_poly = [], []
            for k in range(3):
                a, b = tri[k], tri[(k + 1) % 3]
                sa, sb = side[k], side[(k + 1) % 3]
                if sa <= eps:
                    lo_poly.append(a)
                if sa >= -eps:
                    hi_poly.append(a)
                if (sa < -eps and sb > eps) or (sa > eps and sb < -eps):
                    m = cut(a, b)
                    lo_poly.append(m)
                    hi_poly.append(m)
            for poly in (lo_poly, hi_poly):
                uniqued = []
                for v in poly:
                    if not uniqued or uniqued[-1] != v:
                        uniqued.append(v)
                if len(uniqued) > 1 and uniqued[0] == uniqued[-1]:
                    uniqued.pop()
                for k in range(1, len(uniqued) - 1):
                    new_faces.append((uniqued[0], uniqued[k], uniqued[k + 1]))
        faces = new_faces

    # drop faces whose centroid is inside the box
    kept = []
    for tri in faces:
        cen = (coords[tri[0]] + coords[tri[1]] + coords[tri[2]]) / 3.0
        inside = (
            volume.u_range[0] + eps < cen[0] < volume.u_range[1] - eps
            and volume.v_range[0] + eps < cen[1] < volume.v_range[1] - eps
            and volume.h_range[0] + eps < cen[2] < volume.h_range[1] - eps
        )
        if not inside:
            a, b, c = verts3d[tri[0]], verts3d[tri[1]], verts3d[tri[2]]
            if 0.5 * np.linalg.norm(np.cross(b - a, c - a)) > 1e-18:
                kept.append(tri)
    if not kept:
        return HalfEdgeMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    used = sorted({v for tri in kept for v in tri})
    remap = {v: i for i, v in enumerate(used)}
    out_faces = np.array([[remap[v] for v in tri] for tri in kept], dtype=np.int64)
    out_verts = np.array([verts3d[v] for v in used])
    out_ch = {
        name: np.array([vals[v] for v in used], dtype=np.float64)
        for name, vals in chans.items()
    }
    return HalfEdgeMesh(out_verts, out_faces, out_ch)


# ---- seam -----------------------------------------------------------------------


def seam_points(
    mesh1: HalfEdgeMesh,
    mesh2: HalfEdgeMesh,
    m1_ext: HalfEdgeMesh,
    m2_ext: HalfEdgeMesh,
    overlap: BoundingVolume,
    subsample_spacing: float | None = None,
) -> np.ndarray:
    """Overlap-region vertex set: original vertices inside the overlap volume
    (grid-subsampled at roughly the local edge spacing) plus every clipped
    boundary vertex on the overlap faces (always kept, exact positions)."""
    pts = []
    margin = 1e-9
    for m in (mesh1, mesh2):
        if m.is_empty():
            continue
        inside = overlap.contains(m.vertices, margin=margin)
        pts.append(m.vertices[inside])
    interior = np.vstack(pts) if pts else np.zeros((0, 3))
    if subsample_spacing and len(interior):
        plane = overlap.plane
        uv = plane.to_plane_coords(interior)
        cells: dict[tuple[int, int], int] = {}
        keep = []
        for k in np.lexsort((uv[:, 1], uv[:, 0])):
            cell = (
                int(np.floor(uv[k, 0] / subsample_spacing)),
                int(np.floor(uv[k, 1] / subsample_spacing)),
            )
            if cell not in cells:
                cells[cell] = k
                keep.append(k)
        interior = interior[sorted(keep)]
    borders = []
    for ext in (m1_ext, m2_ext):
        if ext.is_empty():
            continue
        bmask = ext.boundary_vertex_mask()
        on_box = overlap.contains(ext.vertices, margin=1e-9)
        borders.append(ext.vertices[bmask & on_box])
    stack = [p for p in ([interior] + borders) if len(p)]
    return np.vstack(stack) if stack else np.zeros((0, 3))


def seam_triangulate(p_int: np.ndarray, plane: SupportPlane) -> SeamPatch:
    """Delaunay of the overlap vertices projected onto the support plane.

    Triangles are lifted back through the original 3D positions. Collinear or
    tiny inputs raise DegenerateGeometryError (callers fall back to weld-only
    stitching, flagged in the report).
    """
    p_int = np.asarray(p_int, dtype=np.float64).reshape(-1, 3)
    if len(p_int) < 3:
        raise DegenerateGeometryError("seam needs >= 3 vertices")
    uv = plane.to_plane_coords(p_int)
    tris = delaunay_triangulation(uv)
    # ccw in (u, v) lifts to normals along +n (the camera side)
    return SeamPatch(p_int, uv, tris)


# ---- welding --------------------------------------------------------------------


def stitch(
    m1_ext: HalfEdgeMesh,
    m2_ext: HalfEdgeMesh,
    seam: SeamPatch | None,
    weld_eps: float,
) -> tuple[HalfEdgeMesh, StitchReport]:
    """Weld the exteriors and the seam into one mesh.

    Boundary vertices within ``weld_eps`` merge (the copy with the smallest
    global index keeps its exact position); duplicate and degenerate faces
    are removed and manifold connectivity enforced. Residual boundary loops
    beyond the single exterior one are counted in the report.
    """
    report = StitchReport()
    parts = [m1_ext, m2_ext]
    if seam is not None and not seam.empty:
        parts.append(seam.as_mesh())
        report.seam_faces = len(seam.triangles)
    parts = [p for p in parts if not p.is_empty()]
    if not parts:
        return HalfEdgeMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), report

    verts = np.vstack([p.vertices for p in parts])
    faces = []
    part_of = np.concatenate(
        [np.full(p.n_vertices, k, dtype=np.int64) for k, p in enumerate(parts)]
    )
    offset = 0
    for p in parts:
        faces.append(p.faces + offset)
        offset += p.n_vertices
    faces = np.vstack(faces)

    # boundary vertices per part
    bmask = np.zeros(len(verts), dtype=bool)
    offset = 0
    for p in parts:
        bm = p.boundary_vertex_mask()
        bmask[offset:offset + p.n_vertices] = bm
        offset += p.n_vertices

    bidx = np.nonzero(bmask)[0]
    parent = np.arange(len(verts), dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    if len(bidx):
        tree = cKDTree(verts[bidx])
        pairs = tree.query_pairs(weld_eps, output_type="ndarray")
        for a, b in sorted(map(tuple, pairs.tolist())):
            ga, gb = int(bidx[a]), int(bidx[b])
            if part_of[ga] == part_of[gb]:
                continue  # only cross-part welds
            ra, rb = find(ga), find(gb)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
                report.welded_pairs += 1

    canon = np.array([find(v) for v in range(len(verts))], dtype=np.int64)
    faces = canon[faces]

    # drop collapsed faces
    ok = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    report.dropped_degenerate_faces += int((~ok).sum())
    faces = faces[ok]
    # drop duplicate faces (same vertex set), keeping the first
    seen: set[frozenset] = set()
    keep_rows = []
    for i, tri in enumerate(faces):
        key = frozenset(int(x) for x in tri)
        if key in seen:
            report.dropped_duplicate_faces += 1
            continue
        seen.add(key)
        keep_rows.append(i)
    faces = faces[keep_rows]
    merged = HalfEdgeMesh(verts, faces)
    # degenerate faces are closed by collapsing their shortest edge (dropping
    # them would slit the surface open); only un-collapsible ones are dropped
    merged, n_fixed, n_dropped = _collapse_degenerate_faces(merged)
    report.dropped_degenerate_faces += n_dropped
    verts, faces = merged.vertices, merged.faces
    merged = drop_overpopulated_edges(merged)
    merged = split_nonmanifold_vertices(merged)
    if merged.n_faces:
        used = np.unique(merged.faces)
        remap = -np.ones(merged.n_vertices, dtype=np.int64)
        remap[used] = np.arange(len(used))
        merged = HalfEdgeMesh(merged.vertices[used], remap[merged.faces])

    report.residual_boundary_loops = _boundary_loops(merged)
    return merged, report


def _collapse_degenerate_faces(mesh: HalfEdgeMesh) -> tuple[HalfEdgeMesh, int, int]:
    """Collapse away faces below the scene-scaled degeneracy threshold.

    Returns (mesh, collapsed count, dropped count); dropping happens only
    when every edge collapse of a degenerate face is rejected by the
    validity checks.
    """
    from .halfedge import MeshEditor

    if mesh.is_empty():
        return mesh, 0, 0
    diag = float(np.linalg.norm(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))
    eps = max(1e-12 * diag * diag, 1e-18)
    areas = mesh.face_areas()
    bad = np.nonzero(areas <= eps)[0]
    if len(bad) == 0:
        return mesh, 0, 0
    editor = MeshEditor(mesh)
    fixed = 0
    stubborn = []
    for fi in bad.tolist():
        if fi in editor.dead_faces:
            continue
        tri = editor.faces[fi]
        if any(v in editor.dead_verts for v in tri):
            continue
        pos = [editor.positions[v] for v in tri]
        order = sorted(
            range(3), key=lambda k: np.linalg.norm(pos[(k + 1) % 3] - pos[k])
        )
        done = False
        for k in order:
            a, b = tri[k], tri[(k + 1) % 3]
            if editor.collapse(a, b):
                fixed += 1
                done = True
                break
        if not done:
            stubborn.append(fi)
    for fi in stubborn:
        if fi not in editor.dead_faces:
            editor._remove_face(fi)
    out = editor.finish()
    return out, fixed, len(stubborn)


def _boundary_loops(mesh: HalfEdgeMesh) -> int:
    edges, counts = unique_edges(mesh.faces)
    boundary = edges[counts == 1]
    if len(boundary) == 0:
        return 0
    verts = np.unique(boundary)
    slot = {int(v): i for i, v in enumerate(verts)}
    parent = list(range(len(verts)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in boundary:
        ra, rb = find(slot[int(a)]), find(slot[int(b)])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return len({find(slot[int(v)]) for v in verts})


def stitch_pair(
    mesh1: HalfEdgeMesh,
    vol1: BoundingVolume,
    mesh2: HalfEdgeMesh,
    vol2: BoundingVolume,
    weld_eps: float | None = None,
) -> tuple[HalfEdgeMesh, BoundingVolume, StitchReport]:
    """Full pairwise merge of two partition meshes with their volumes.

    Returns the merged mesh, the union bounding volume (for chained
    stitches), and the report. Disjoint volumes produce a plain union.
    """
    union = BoundingVolume(
        vol1.plane,
        (min(vol1.u_range[0], vol2.u_range[0]), max(vol1.u_range[1], vol2.u_range[1])),
        (min(vol1.v_range[0], vol2.v_range[0]), max(vol1.v_range[1], vol2.v_range[1])),
        (min(vol1.h_range[0], vol2.h_range[0]), max(vol1.h_range[1], vol2.h_range[1])),
    )
    overlap = vol1.intersection(vol2)
    med_edges = [m.mean_edge_length() for m in (mesh1, mesh2) if not m.is_empty()]
    med = float(np.median([m for m in med_edges if m > 0])) if med_edges else 1.0
    if weld_eps is None:
        weld_eps = 0.5 * med
    if overlap is None:
        merged, report = stitch(mesh1, mesh2, None, weld_eps)
        return merged, union, report

    m1_ext = clip_mesh(mesh1, vol2)
    m2_ext = clip_mesh(mesh2, vol1)
    report_fallback = False
    try:
        pts = seam_points(mesh1, mesh2, m1_ext, m2_ext, overlap, subsample_spacing=med)
        seam = seam_triangulate(pts, overlap.plane)
    except DegenerateGeometryError:
        seam = None
        report_fallback = True
    merged, report = stitch(m1_ext, m2_ext, seam, weld_eps)
    report.fallback_weld_only = report_fallback
    return merged, union, report
