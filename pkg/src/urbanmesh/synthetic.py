"""Synthetic scenes for desk-scale verification of every pipeline stage.

The mini-city is a ground plane with box buildings and a dome; cameras fly an
aerial grid with slight off-nadir tilt. Targets (depth / normal / silhouette
rasters), pairwise pixel matches, frustum-overlap descriptors, and per-cluster
sparse maps are all derived from the ground-truth mesh with the package's own
renderer, so every stage is verifiable against the same geometry.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, backproject, project, rotation_about_axis
from .denseview import DenseView, MatchSet
from .halfedge import HalfEdgeMesh
from .metrics import sample_mesh_surface
from .rasterizer import rasterize
from .sparsemap import SparseMap, apply_sim3
from .transforms import Sim3Transform


def look_at_camera(cam_id, center, target, f=100.0, width=96, height=96, up=(0, 0, 1)):
    """World-to-camera pose looking from center toward target."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(fwd @ up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    K = np.array([[f, 0, width / 2.0], [0, f, height / 2.0], [0, 0, 1.0]])
    return Camera(cam_id, K, R, -R @ center, width, height)


# ---- mesh primitives -------------------------------------------------------------


def plane_grid(x0, x1, y0, y1, z=0.0, nx=10, ny=10) -> HalfEdgeMesh:
    """Regular triangulated rectangle in the z plane, normals up."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    verts = np.array([[x, y, z] for y in ys for x in xs])
    faces = []
    for r in range(ny):
        for c in range(nx):
            a = r * (nx + 1) + c
            b = a + 1
            cc = a + nx + 1
            d = cc + 1
            faces.append([a, b, d])
            faces.append([a, d, cc])
    return HalfEdgeMesh(verts, np.array(faces))


def box_mesh(center, size) -> HalfEdgeMesh:
    """Axis-aligned closed box with outward normals."""
    c = np.asarray(center, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64) / 2.0
    verts = np.array(
        [
            [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
            [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
        ],
        dtype=np.float64,
    ) * s + c
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],
            [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4],
            [1, 2, 6], [1, 6, 5],
            [2, 3, 7], [2, 7, 6],
            [3, 0, 4], [3, 4, 7],
        ]
    )
    return HalfEdgeMesh(verts, faces)


def icosphere(subdivisions=2, radius=1.0, center=(0, 0, 0)) -> HalfEdgeMesh:
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (verts[a] + verts[b]) / 2.0
                m = m / np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    V = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return HalfEdgeMesh(V, np.array(faces))


def hemisphere_bump(center, radius, n_ring=8) -> HalfEdgeMesh:
    """Upper half of an icosphere, open at the equator."""
    sph = icosphere(2, radius, center)
    keep = []
    for f in sph.faces:
        zc = sph.vertices[f][:, 2].mean()
        if zc >= center[2] - 1e-9:
            keep.append(f)
    faces = np.array(keep)
    used = np.unique(faces)
    remap = -np.ones(sph.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return HalfEdgeMesh(sph.vertices[used], remap[faces])


def merge_meshes(meshes: list[HalfEdgeMesh]) -> HalfEdgeMesh:
    verts = []
    faces = []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    return HalfEdgeMesh(np.vstack(verts), np.vstack(faces))


# ---- scenes ---------------------------------------------------------------------


@dataclass
class SyntheticScene:
    name: str
    gt_mesh: HalfEdgeMesh
    cameras: dict[int, Camera]
    views: dict[int, DenseView] = field(default_factory=dict)
    matches: list[MatchSet] = field(default_factory=list)
    descriptors: dict[int, np.ndarray] = field(default_factory=dict)
    gt_structures: int = 1

    def gt_points(self, n=20000, seed=0) -> np.ndarray:
        return sample_mesh_surface(self.gt_mesh, n, seed)


def analytic_sphere_view(cam: Camera, center=(0, 0, 0), radius: float = 1.0) -> DenseView:
    """Exact ray-traced depth/normal/silhouette of a sphere (smooth normals)."""
    H, W = cam.height, cam.width
    cols, rows = np.meshgrid(np.arange(W), np.arange(H))
    d_cam = np.stack(
        [(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy, np.ones((H, W))],
        axis=-1,
    )
    d_world = d_cam @ cam.R
    o = cam.center() - np.asarray(center, dtype=np.float64)
    a = (d_world ** 2).sum(-1)
    b = 2 * (d_world @ o)
    c = float(o @ o) - radius ** 2
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 0.0)
    t = np.where(t > 0, t, 0.0)
    hit = t > 0
    X = o + t[..., None] * d_world
    n_w = X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1e-300)
    n_c = n_w @ cam.R.T
    n_c[~hit] = 0.0
    return DenseView(cam.id, t, n_c, hit.astype(np.float64))


def mini_city_mesh() -> tuple[HalfEdgeMesh, int]:
    """Ground plane with box buildings and a dome; returns (mesh, structures)."""
    ground = plane_grid(0.0, 20.0, 0.0, 12.0, z=0.0, nx=20, ny=12)
    parts = [ground]
    # keep the partition seam band (x ~ 9..11 for a 1x2 grid) over open ground
    blocks = [
        ((4.0, 3.0), (2.4, 2.0, 2.2)),
        ((7.0, 3.5), (2.0, 2.6, 3.0)),
        ((14.5, 4.0), (3.0, 2.2, 1.6)),
        ((17.0, 9.0), (1.6, 1.6, 2.6)),
    ]
    for (bx, by), (sx, sy, sz) in blocks:
        # sink slightly below ground so box walls meet the plane
        parts.append(box_mesh((bx, by, sz / 2 - 0.05), (sx, sy, sz + 0.1)))
    parts.append(icosphere(2, 1.2, (6.5, 9.0, 0.9)))
    mesh = merge_meshes(parts)
    return mesh, len(parts)


BUMPS_SPHERES = ((2.6, 2.6, 0.15, 1.2), (7.3, 3.0, 0.15, 0.9), (4.6, 7.2, 0.15, 1.5))
BUMPS_FOOTPRINT = (0.0, 10.0, 0.0, 10.0)


def bumps_mesh(subdiv: int = 3, plane_res: int = 40) -> HalfEdgeMesh:
    """Flat plane with localized spherical bumps (curvature contrast scene)."""
    x0, x1, y0, y1 = BUMPS_FOOTPRINT
    ground = plane_grid(x0, x1, y0, y1, z=0.0, nx=plane_res, ny=plane_res)
    parts = [ground]
    for (bx, by, bz, r) in BUMPS_SPHERES:
        parts.append(icosphere(subdiv, r, (bx, by, bz)))
    return merge_meshes(parts)


def analytic_bumps_view(cam: Camera) -> DenseView:
    """Exact first-hit depth/normal/silhouette of the bumps scene.

    The plane and each sphere are ray-traced analytically, so normal maps are
    smooth (what a monocular normal network would produce), unlike the
    faceted rasterized renders.
    """
    H, W = cam.height, cam.width
    cols, rows = np.meshgrid(np.arange(W), np.arange(H))
    d_cam = np.stack(
        [(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy, np.ones((H, W))],
        axis=-1,
    )
    d_world = d_cam @ cam.R
    o = cam.center()
    best_t = np.full((H, W), np.inf)
    normal_w = np.zeros((H, W, 3))

    # plane z = 0 over the footprint
    x0, x1, y0, y1 = BUMPS_FOOTPRINT
    dz = d_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pl = np.where(np.abs(dz) > 1e-12, -o[2] / dz, np.inf)
    hit_xy = o[None, None, :2] + t_pl[..., None] * d_world[..., :2]
    ok = (t_pl > 0) & (hit_xy[..., 0] >= x0) & (hit_xy[..., 0] <= x1) & (
        hit_xy[..., 1] >= y0
    ) & (hit_xy[..., 1] <= y1)
    best_t = np.where(ok, t_pl, best_t)
    normal_w[ok] = [0.0, 0.0, 1.0]

    for (bx, by, bz, r) in BUMPS_SPHERES:
        oc = o - np.array([bx, by, bz])
        a = (d_world ** 2).sum(-1)
        b = 2 * (d_world @ oc)
        c = float(oc @ oc) - r * r
        disc = b * b - 4 * a * c
        hit = disc > 0
        t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), np.inf)
        t = np.where(t > 0, t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        t_safe = np.where(np.isfinite(t), t, 0.0)
        X = o + t_safe[..., None] * d_world - np.array([bx, by, bz])
        n = X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1e-300)
        normal_w[closer] = n[closer]

    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t, 0.0)
    n_cam = normal_w @ cam.R.T
    n_cam[~hit] = 0.0
    return DenseView(cam.id, depth, n_cam, hit.astype(np.float64))


def aerial_cameras(
    extent_x, extent_y, rows, cols, height, f=110.0, width=96, height_px=96,
    tilt=0.25,
) -> dict[int, Camera]:
    """Grid of slightly tilted downward-looking cameras over a rectangle."""
    cams = {}
    cid = 0
    xs = np.linspace(0.18 * extent_x, 0.82 * extent_x, cols)
    ys = np.linspace(0.18 * extent_y, 0.82 * extent_y, rows)
    for r, y in enumerate(ys):
        for c, x in enumerate(xs):
            # tilt direction cycles so walls get multi-directional coverage
            ang = (cid % 4) * np.pi / 2.0 + np.pi / 4.0
            look = np.array(
                [x + tilt * height * np.cos(ang), y + tilt * height * np.sin(ang), 0.0]
            )
            cams[cid] = look_at_camera(
                cid, [x, y, height], look, f=f, width=width, height=height_px
            )
            cid += 1
    return cams


def render_views(mesh: HalfEdgeMesh, cameras: dict[int, Camera]) -> dict[int, DenseView]:
    """Ground-truth raster bundles rendered from the mesh."""
    views = {}
    for cid in sorted(cameras):
        buf = rasterize(mesh, cameras[cid])
        views[cid] = DenseView(cid, buf.depth, buf.normal, buf.silhouette)
    return views


def frustum_descriptors(
    cameras: dict[int, Camera], views: dict[int, DenseView], grid=12, sigma_cells=2.5
) -> dict[int, np.ndarray]:
    """Descriptors whose cosine similarity tracks footprint overlap.

    Each camera's descriptor is a Gaussian splat of its ground-footprint
    center over a fixed scene grid, so nearby/overlapping cameras score high.
    """
    centers = {}
    for cid, cam in cameras.items():
        view = views[cid]
        h, w = view.shape
        d = view.depth[h // 2, w // 2]
        if d <= 0:
            valid = view.depth[view.depth > 0]
            d = float(np.median(valid)) if len(valid) else 1.0
        centers[cid] = backproject(cam, [w / 2.0, h / 2.0], float(d))
    pts = np.stack(list(centers.values()))
    lo = pts.min(axis=0)[:2] - 1e-6
    hi = pts.max(axis=0)[:2] + 1e-6
    cell = (hi - lo) / grid
    gx, gy = np.meshgrid(np.arange(grid) + 0.5, np.arange(grid) + 0.5)
    grid_pts = np.stack([lo[0] + gx * cell[0], lo[1] + gy * cell[1]], axis=-1).reshape(-1, 2)
    sigma = sigma_cells * float(np.linalg.norm(cell))
    out = {}
    for cid in sorted(cameras):
        c = centers[cid][:2]
        d2 = ((grid_pts - c) ** 2).sum(axis=1)
        out[cid] = np.exp(-d2 / (2 * sigma * sigma))
    return out


def make_matches(
    mesh: HalfEdgeMesh,
    cameras: dict[int, Camera],
    views: dict[int, DenseView],
    step: int = 7,
    min_shared: int = 12,
) -> list[MatchSet]:
    """Pixel correspondences between co-visible views via the GT geometry."""
    out = []
    ids = sorted(cameras)
    for a, b in itertools.combinations(ids, 2):
        cam_a, cam_b = cameras[a], cameras[b]
        view_a, view_b = views[a], views[b]
        pa, pb = [], []
        H, W = view_a.shape
        for r in range(2, H - 2, step):
            for c in range(2, W - 2, step):
                d = view_a.depth[r, c]
                if d <= 0:
                    continue
                pix_a = np.array([c + 0.5, r + 0.5])
                X = backproject(cam_a, pix_a, float(d))
                pix, depth, ok = project(cam_b, X)
                if not ok:
                    continue
                if not (0 <= pix[0] < W and 0 <= pix[1] < H):
                    continue
                d_b = view_b.sample_depth(pix)[0]
                if d_b <= 0 or abs(d_b - depth) > 0.05 * depth:
                    continue  # occluded in view b
                pa.append(pix_a)
                pb.append(pix)
        if len(pa) >= min_shared:
            out.append(MatchSet(a, b, np.array(pa), np.array(pb), np.ones(len(pa))))
    return out


def mini_city_scene(
    rows=3, cols=5, height=14.0, f=110.0, size=96
) -> SyntheticScene:
    mesh, structures = mini_city_mesh()
    cams = aerial_cameras(20.0, 12.0, rows, cols, height, f=f, width=size, height_px=size)
    views = render_views(mesh, cams)
    desc = frustum_descriptors(cams, views)
    matches = make_matches(mesh, cams, views)
    return SyntheticScene("mini-city", mesh, cams, views, matches, desc, structures)


def bumps_scene(n_cams=8, height=9.0, f=150.0, size=144, n_low=4) -> SyntheticScene:
    """Aerial ring + nadir view + low oblique cameras.

    The low ring sees bump tops against empty background, giving the
    silhouette term real leverage on bump geometry; bumps span tens of
    pixels so curvature-adaptive targets out-resolve a uniform budget.
    """
    mesh = bumps_mesh()
    cams = {}
    for k in range(n_cams):
        ang = 2 * np.pi * k / n_cams
        center = np.array([5 + 3.2 * np.cos(ang), 5 + 3.2 * np.sin(ang), height])
        cams[k] = look_at_camera(k, center, [5, 5, 0], f=f, width=size, height=size)
    cams[n_cams] = look_at_camera(n_cams, [5.0, 5.0, height + 2.5], [5, 5, 0], f=f, width=size, height=size)
    for j in range(n_low):
        ang = 2 * np.pi * (j + 0.5) / n_low
        center = np.array([5 + 7.5 * np.cos(ang), 5 + 7.5 * np.sin(ang), 1.6])
        cams[n_cams + 1 + j] = look_at_camera(
            n_cams + 1 + j, center, [5, 5, 0.5], f=f, width=size, height=size
        )
    views = {cid: analytic_bumps_view(cams[cid]) for cid in sorted(cams)}
    return SyntheticScene("bumps", mesh, cams, views, [], {}, 4)


def synthetic_sparse_map(
    scene: SyntheticScene,
    camera_ids: list[int],
    n_points: int = 400,
    seed: int = 0,
    pixel_noise: float = 0.0,
    warp: Sim3Transform | None = None,
) -> SparseMap:
    """Stand-in for per-cluster SfM: GT surface samples tracked in the given
    cameras, optionally expressed in a warped local frame."""
    rng = np.random.default_rng(seed)
    pts = sample_mesh_surface(scene.gt_mesh, n_points * 3, seed=seed)
    m = SparseMap()
    for cid in sorted(camera_ids):
        m.add_camera(scene.cameras[cid])
    pid = 0
    for X in pts:
        if pid >= n_points:
            break
        track = []
        for cid in sorted(camera_ids):
            cam = scene.cameras[cid]
            pix, depth, ok = project(cam, X)
            if not ok or not (0 <= pix[0] < cam.width and 0 <= pix[1] < cam.height):
                continue
            d_r = scene.views[cid].sample_depth(pix)[0]
            if d_r <= 0 or abs(d_r - depth) > 0.05 * depth:
                continue  # occluded
            if pixel_noise > 0:
                pix = pix + rng.normal(scale=pixel_noise, size=2)
            track.append((cid, pix))
        if len(track) >= 2:
            m.add_point(pid, X, track)
            pid += 1
    if warp is not None:
        m = apply_sim3(m, warp)
    return m


def random_sim3(rng: np.random.Generator, max_scale_log=0.4, max_trans=3.0) -> Sim3Transform:
    from .camera import random_rotation

    return Sim3Transform(
        float(np.exp(rng.uniform(-max_scale_log, max_scale_log))),
        random_rotation(rng),
        rng.uniform(-max_trans, max_trans, size=3),
    )
