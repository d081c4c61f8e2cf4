"""Mesh-quality metrics and point-based precision/recall/F1.

Eight structural metrics: mean aspect ratio (longest edge over twice the
inradius, averaged over non-degenerate faces), angle bad ratio, degenerate
triangle ratio, non-manifold edge and vertex ratios, mean vertex valence
deviation from 6, connected components, and interior boundary loops of the
largest component (all loops beyond the single longest one). The mesh need
not be manifold: the metrics exist to measure defects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .halfedge import HalfEdgeMesh, unique_edges


@dataclass
class MeshQualityReport:
    aspect_ratio: float
    angle_bad_ratio: float
    degenerate_ratio: float
    nonmanifold_edge_ratio: float
    nonmanifold_vertex_ratio: float
    valence_deviation: float
    connected_components: int
    interior_boundary_loops: int
    theta_lo_deg: float
    theta_hi_deg: float
    area_eps: float
    empty: bool = False

    def as_dict(self) -> dict:
        return {
            "AR": self.aspect_ratio,
            "ANG": self.angle_bad_ratio,
            "DTR": self.degenerate_ratio,
            "NME": self.nonmanifold_edge_ratio,
            "NMV": self.nonmanifold_vertex_ratio,
            "VVD": self.valence_deviation,
            "CC": self.connected_components,
            "IBL": self.interior_boundary_loops,
        }

    def summary(self) -> str:
        d = self.as_dict()
        return " ".join(f"{k}={d[k]:.6g}" for k in d)


@dataclass
class GeometryScore:
    precision: float
    recall: float
    f1: float
    threshold: float
    n_pred_samples: int
    n_gt_samples: int
    empty: bool = False


def _triangle_geometry(verts: np.ndarray, faces: np.ndarray):
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    e0 = np.linalg.norm(v1 - v0, axis=1)
    e1 = np.linalg.norm(v2 - v1, axis=1)
    e2 = np.linalg.norm(v0 - v2, axis=1)
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    return e0, e1, e2, area


def _interior_angles(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """(F, 3) interior angles in radians."""
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]

    def ang(a, b, c):
        u = b - a
        w = c - a
        nu = np.linalg.norm(u, axis=1)
        nw = np.linalg.norm(w, axis=1)
        cosang = np.einsum("ij,ij->i", u, w) / np.maximum(nu * nw, 1e-300)
        return np.arccos(np.clip(cosang, -1.0, 1.0))

    return np.stack([ang(v0, v1, v2), ang(v1, v2, v0), ang(v2, v0, v1)], axis=1)


def _vertex_fan_groups(faces: np.ndarray, n_vertices: int):
    """Yield (vertex, incident faces, edge->face lists at the vertex)."""
    vfaces: list[list[int]] = [[] for _ in range(n_vertices)]
    for fi, tri in enumerate(faces):
        for v in tri:
            vfaces[v].append(fi)
    for v in range(n_vertices):
        fs = vfaces[v]
        if not fs:
            continue
        edge_faces: dict[int, list[int]] = {}
        for fi in fs:
            for u in faces[fi]:
                if u != v:
                    edge_faces.setdefault(int(u), []).append(fi)
        yield v, fs, edge_faces


def _is_nonmanifold_vertex(fs, edge_faces) -> bool:
    open_ends = 0
    for flist in edge_faces.values():
        if len(flist) > 2:
            return True
        if len(flist) == 1:
            open_ends += 1
    if open_ends not in (0, 2):
        return True
    adj: dict[int, set[int]] = {fi: set() for fi in fs}
    for flist in edge_faces.values():
        if len(flist) == 2:
            adj[flist[0]].add(flist[1])
            adj[flist[1]].add(flist[0])
    seen = {fs[0]}
    stack = [fs[0]]
    while stack:
        cur = stack.pop()
        for nb in adj[cur]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) != len(fs)


def _boundary_loop_count(faces: np.ndarray, component_faces: np.ndarray):
    """Boundary loops of a face subset as connected components of the
    boundary-edge graph; returns (number of loops, edge count of the largest).
    """
    edges, counts = unique_edges(faces[component_faces])
    boundary = edges[counts == 1]
    if len(boundary) == 0:
        return 0, 0
    # union-find over boundary vertices through boundary edges
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
    loop_sizes: dict[int, int] = {}
    for a, b in boundary:
        loop_sizes[find(slot[int(a)])] = loop_sizes.get(find(slot[int(a)]), 0) + 1
    sizes = sorted(loop_sizes.values(), reverse=True)
    return len(sizes), sizes[0]


def mesh_quality(
    mesh: HalfEdgeMesh,
    theta_lo_deg: float = 15.0,
    theta_hi_deg: float = 150.0,
    area_eps: float | None = None,
) -> MeshQualityReport:
    """Compute all eight structural metrics.

    ``area_eps`` defaults to 1e-12 x (bbox diagonal)^2. An empty mesh returns
    an all-zero report flagged ``empty``.
    """
    if mesh.is_empty():
        return MeshQualityReport(
            0, 0, 0, 0, 0, 0, 0, 0, theta_lo_deg, theta_hi_deg, 0.0, empty=True
        )
    verts, faces = mesh.vertices, mesh.faces
    if area_eps is None:
        diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
        area_eps = 1e-12 * diag * diag

    e0, e1, e2, area = _triangle_geometry(verts, faces)
    degenerate = area <= area_eps
    dtr = float(degenerate.mean())

    longest = np.maximum(np.maximum(e0, e1), e2)
    perimeter = e0 + e1 + e2
    ok = ~degenerate
    # inradius r = area / s with s the semi-perimeter; AR = h / (2 r)
    inradius = area[ok] / np.maximum(perimeter[ok] / 2.0, 1e-300)
    ar = float((longest[ok] / (2.0 * inradius)).mean()) if ok.any() else 0.0

    angles = _interior_angles(verts, faces)
    lo = np.deg2rad(theta_lo_deg)
    hi = np.deg2rad(theta_hi_deg)
    bad = (angles.min(axis=1) < lo) | (angles.max(axis=1) > hi)
    ang = float(bad.mean())

    edges, counts = unique_edges(faces)
    nme = float((counts > 2).mean()) if len(edges) else 0.0

    referenced = np.unique(faces)
    nmv_count = 0
    for v, fs, edge_faces in _vertex_fan_groups(faces, len(verts)):
        if _is_nonmanifold_vertex(fs, edge_faces):
            nmv_count += 1
    nmv = nmv_count / max(len(referenced), 1)

    val = np.zeros(len(verts), dtype=np.int64)
    np.add.at(val, edges[:, 0], 1)
    np.add.at(val, edges[:, 1], 1)
    vvd = float(np.abs(val[referenced] - 6).mean())

    # connected components over referenced vertices through edges
    slot = {int(v): i for i, v in enumerate(referenced)}
    parent = list(range(len(referenced)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(slot[int(a)]), find(slot[int(b)])
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comp_of_vertex = {int(v): find(slot[int(v)]) for v in referenced}
    cc = len(set(comp_of_vertex.values()))

    # largest component by face count (ties: more vertices, then smaller root)
    face_comp = np.array([comp_of_vertex[int(f[0])] for f in faces])
    comp_faces: dict[int, int] = {}
    for c in face_comp:
        comp_faces[c] = comp_faces.get(c, 0) + 1
    comp_verts: dict[int, int] = {}
    for v, c in comp_of_vertex.items():
        comp_verts[c] = comp_verts.get(c, 0) + 1
    largest = min(
        comp_faces, key=lambda c: (-comp_faces[c], -comp_verts.get(c, 0), c)
    )
    n_loops, _ = _boundary_loop_count(faces, face_comp == largest)
    ibl = max(n_loops - 1, 0)

    return MeshQualityReport(
        ar, ang, dtr, nme, nmv, vvd, cc, ibl, theta_lo_deg, theta_hi_deg, area_eps
    )


def sample_mesh_surface(
    mesh: HalfEdgeMesh, n_samples: int, seed: int = 0
) -> np.ndarray:
    """Area-weighted uniform surface samples, deterministic for a seed."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0 or mesh.is_empty():
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    probs = areas / total
    chosen = rng.choice(len(areas), size=n_samples, p=probs)
    r1 = rng.uniform(size=n_samples)
    r2 = rng.uniform(size=n_samples)
    su = np.sqrt(r1)
    b0 = 1.0 - su
    b1 = su * (1.0 - r2)
    b2 = su * r2
    tri = mesh.vertices[mesh.faces[chosen]]
    return (
        b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]
    )


def geometry_prf(
    pred,
    gt_points: np.ndarray,
    threshold: float | None = None,
    samples: int = 20000,
    seed: int = 0,
) -> GeometryScore:
    """Point-based precision / recall / F1 at a distance threshold.

    ``pred`` is a mesh (sampled on its surface) or an (N, 3) point cloud.
    The threshold defaults to 0.05 x the ground-truth bbox diagonal.
    """
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if isinstance(pred, HalfEdgeMesh):
        pred_points = sample_mesh_surface(pred, samples, seed)
    else:
        pred_points = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
        if len(pred_points) > samples:
            rng = np.random.default_rng(seed)
            pred_points = pred_points[
                rng.choice(len(pred_points), size=samples, replace=False)
            ]
    if len(gt_points) > samples:
        rng = np.random.default_rng(seed + 1)
        gt_points = gt_points[rng.choice(len(gt_points), size=samples, replace=False)]
    if len(pred_points) == 0 or len(gt_points) == 0:
        return GeometryScore(0.0, 0.0, 0.0, threshold or 0.0, len(pred_points), len(gt_points), empty=True)
    if threshold is None:
        diag = float(np.linalg.norm(gt_points.max(axis=0) - gt_points.min(axis=0)))
        threshold = 0.05 * diag
    d_pred, _ = cKDTree(gt_points).query(pred_points, k=1)
    d_gt, _ = cKDTree(pred_points).query(gt_points, k=1)
    precision = float((d_pred <= threshold).mean())
    recall = float((d_gt <= threshold).mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return GeometryScore(precision, recall, f1, threshold, len(pred_points), len(gt_points))


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(d_ab.mean() + d_ba.mean())


def write_quality_report(report: MeshQualityReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("# urbanmesh quality v1\n")
        for k, v in report.as_dict().items():
            fh.write(f"{k} {v:.17g}\n")
        fh.write(f"theta_lo_deg {report.theta_lo_deg}\n")
        fh.write(f"theta_hi_deg {report.theta_hi_deg}\n")
        fh.write(f"area_eps {report.area_eps:.17g}\n")
        fh.write(f"empty {int(report.empty)}\n")
