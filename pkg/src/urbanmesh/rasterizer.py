"""Vectorized z-buffer triangle rasterizer with flat per-face attributes.

Produces per-view buffers: face-id map (-1 background), perspective-correct
depth, flat per-face unit normals in the camera frame, and a binary
silhouette. Raster cell [r, c] is sampled at pixel (c + 0.5, r + 0.5). Ties
in the z-buffer resolve to the smallest face id, so output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .halfedge import HalfEdgeMesh


@dataclass
class RenderBuffers:
    face_id: np.ndarray  # (H, W) int64, -1 background
    depth: np.ndarray  # (H, W) float64, 0 background
    normal: np.ndarray  # (H, W, 3) float64 camera-frame unit normals
    silhouette: np.ndarray  # (H, W) float64 in {0, 1}

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_id.shape

    def coverage(self) -> np.ndarray:
        return self.face_id >= 0


def rasterize(
    mesh: HalfEdgeMesh, camera: Camera, cull_backfaces: bool = True
) -> RenderBuffers:
    """Render a mesh into a camera; empty coverage when nothing is visible."""
    H, W = camera.height, camera.width
    face_id = np.full((H, W), -1, dtype=np.int64)
    depth = np.zeros((H, W), dtype=np.float64)
    normal = np.zeros((H, W, 3), dtype=np.float64)
    if mesh.is_empty():
        return RenderBuffers(face_id, depth, normal, np.zeros((H, W)))

    Vc = mesh.vertices @ camera.R.T + camera.t
    z = Vc[:, 2]
    tri = mesh.faces
    tz = z[tri]
    ok = (tz > 1e-9).all(axis=1)  # no near-plane clipping: skip faces behind

    n_cam = np.cross(
        Vc[tri[:, 1]] - Vc[tri[:, 0]], Vc[tri[:, 2]] - Vc[tri[:, 0]]
    )
    if cull_backfaces:
        centroid = Vc[tri].mean(axis=1)
        ok &= np.einsum("ij,ij->i", n_cam, centroid) < 0.0

    fids = np.nonzero(ok)[0]
    if len(fids) == 0:
        return RenderBuffers(face_id, depth, normal, np.zeros((H, W)))

    px = camera.fx * Vc[:, 0] / np.where(z > 1e-9, z, 1.0) + camera.cx
    py = camera.fy * Vc[:, 1] / np.where(z > 1e-9, z, 1.0) + camera.cy
    P = np.stack([px, py], axis=1)

    A = P[tri[fids, 0]]
    B = P[tri[fids, 1]]
    C = P[tri[fids, 2]]
    area2 = (B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (B[:, 1] - A[:, 1]) * (
        C[:, 0] - A[:, 0]
    )
    nz = np.abs(area2) > 1e-12
    fids, A, B, C, area2 = fids[nz], A[nz], B[nz], C[nz], area2[nz]
    if len(fids) == 0:
        return RenderBuffers(face_id, depth, normal, np.zeros((H, W)))

    # clipped integer bboxes over pixel centers
    xs = np.stack([A[:, 0], B[:, 0], C[:, 0]], axis=1)
    ys = np.stack([A[:, 1], B[:, 1], C[:, 1]], axis=1)
    x0 = np.clip(np.floor(xs.min(axis=1) - 0.5).astype(np.int64), 0, W - 1)
    x1 = np.clip(np.ceil(xs.max(axis=1) - 0.5).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(ys.min(axis=1) - 0.5).astype(np.int64), 0, H - 1)
    y1 = np.clip(np.ceil(ys.max(axis=1) - 0.5).astype(np.int64), 0, H - 1)
    inb = (xs.max(axis=1) >= 0) & (xs.min(axis=1) <= W) & (ys.max(axis=1) >= 0) & (
        ys.min(axis=1) <= H
    )
    fsel = np.nonzero(inb)[0]
    if len(fsel) == 0:
        return RenderBuffers(face_id, depth, normal, np.zeros((H, W)))

    widths = (x1[fsel] - x0[fsel] + 1).astype(np.int64)
    heights = (y1[fsel] - y0[fsel] + 1).astype(np.int64)
    counts = widths * heights
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    cand = np.repeat(np.arange(len(fsel)), counts)
    k = np.arange(total) - offsets[cand]
    local_x = k % widths[cand]
    local_y = k // widths[cand]
    pix_x = x0[fsel][cand] + local_x
    pix_y = y0[fsel][cand] + local_y
    sx = pix_x + 0.5
    sy = pix_y + 0.5

    Af, Bf, Cf = A[fsel][cand], B[fsel][cand], C[fsel][cand]
    a2 = area2[fsel][cand]
    w0 = ((Bf[:, 0] - sx) * (Cf[:, 1] - sy) - (Bf[:, 1] - sy) * (Cf[:, 0] - sx)) / a2
    w1 = ((Cf[:, 0] - sx) * (Af[:, 1] - sy) - (Cf[:, 1] - sy) * (Af[:, 0] - sx)) / a2
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return RenderBuffers(face_id, depth, normal, np.zeros((H, W)))

    gf = fids[fsel][cand][inside]
    tz_sel = z[tri[gf]]
    inv_z = (
        w0[inside] / tz_sel[:, 0] + w1[inside] / tz_sel[:, 1] + w2[inside] / tz_sel[:, 2]
    )
    zi = 1.0 / inv_z
    lin = pix_y[inside] * W + pix_x[inside]

    order = np.lexsort((gf, zi, lin))
    lin_s, zi_s, gf_s = lin[order], zi[order], gf[order]
    first = np.ones(len(lin_s), dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win_lin, win_z, win_f = lin_s[first], zi_s[first], gf_s[first]

    face_id.reshape(-1)[win_lin] = win_f
    depth.reshape(-1)[win_lin] = win_z
    n_unit = n_cam / np.maximum(np.linalg.norm(n_cam, axis=1, keepdims=True), 1e-300)
    normal.reshape(-1, 3)[win_lin] = n_unit[win_f]
    sil = (face_id >= 0).astype(np.float64)
    return RenderBuffers(face_id, depth, normal, sil)


def vertex_visibility(
    mesh: HalfEdgeMesh, camera: Camera, buffers: RenderBuffers, rel_tol: float = 0.02
) -> np.ndarray:
    """Depth-test visibility of each vertex against rendered buffers."""
    Vc = mesh.vertices @ camera.R.T + camera.t
    z = Vc[:, 2]
    vis = z > 1e-9
    px = camera.fx * Vc[:, 0] / np.where(vis, z, 1.0) + camera.cx
    py = camera.fy * Vc[:, 1] / np.where(vis, z, 1.0) + camera.cy
    H, W = buffers.shape
    cols = np.floor(px).astype(np.int64)
    rows = np.floor(py).astype(np.int64)
    inb = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    vis &= inb
    idx = np.nonzero(vis)[0]
    buf_z = buffers.depth[rows[idx], cols[idx]]
    ok = (buf_z > 0) & (z[idx] <= buf_z * (1.0 + rel_tol) + 1e-9)
    vis[idx] = ok
    return vis


def project_vertices(mesh: HalfEdgeMesh, camera: Camera):
    """(pixels (V,2), depths (V,), in-front mask) for all vertices."""
    Vc = mesh.vertices @ camera.R.T + camera.t
    z = Vc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    px = camera.fx * Vc[:, 0] / zs + camera.cx
    py = camera.fy * Vc[:, 1] / zs + camera.cy
    return np.stack([px, py], axis=1), z, front
