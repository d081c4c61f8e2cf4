"""Differentiable-loss mesh refinement with curvature-guided adaptive remeshing.

Each iteration renders the mesh into every target view, compares silhouettes
and flat-shaded normals against the targets, backpropagates analytic
gradients to vertex positions (pixel-to-face assignment frozen per
iteration), takes an isotropic adaptive step, updates the per-vertex
reference edge length from a static curvature field plus a speed-aware
slack, and remeshes (collapse / split / flip) toward that reference. The
best-objective snapshot wins.

The reference-length controller: a screen-space normal-rotation rate
``s = sqrt(lambda_max(J^T J))`` of the target normal maps converts a rotation
tolerance into a projected edge-length target ``clip(theta0 / s, p_min,
p_max)``, lifted to world units by ``z / f_iso`` and median-pooled over the
views that see each vertex. A nonnegative slack, driven by the optimizer's
relative vertex velocity, delays refinement until motion settles:
``zeta <- max(0, zeta + gain (nu - nu_ref))`` and
``L_ref = clip(L_ref_curv + zeta, L_min, L_max)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .denseview import DenseView
from .exceptions import InvalidInputError
from .halfedge import HalfEdgeMesh, MeshEditor, unique_edges
from .rasterizer import RenderBuffers, rasterize

logger = logging.getLogger(__name__)

ADAM_EPS = 1e-8


@dataclass
class RefineConfig:
    lambda_n: float = 1.0
    lambda_s: float = 1.0
    laplacian_weight: float = 0.02
    theta0: float = 0.3  # radians of normal rotation per target edge
    p_min: float = 2.0  # pixels
    p_max: float = 40.0
    gain: float | None = None  # default 0.02 * L_min once bounds are known
    nu_ref: float = 0.3
    tau_collapse: float = 0.5
    tau_split: float = 1.5
    # collapses across sharp creases (endpoint vertex normals differing by
    # more than this) are rejected so box edges survive coarsening
    crease_angle_deg: float = 40.0
    # occluding-contour silhouette forces act along the surface normal too;
    # disable on well-covered near-planar scenes where they only inject
    # pixel-quantization noise
    contour_normal_force: bool = True
    k1: float = 4.0
    k2: float = 10.0
    depth_percentile: float = 90.0
    iterations: int = 100
    step_size: float = 0.3
    betas: tuple[float, float] = (0.8, 0.8)
    remesh_interval: int = 1
    vertex_cap: int | None = None
    snapshot_min_improvement: float = 1e-3
    divergence_patience: int = 25
    cull_backfaces: bool = True
    # "lref": steps scale with the local reference length (reference-optimizer
    # behaviour); "lmin": steps scale with the one-pixel world length, keeping
    # motion at the supervision's geometric resolution
    step_scale: str = "lref"
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.tau_collapse < 1 < self.tau_split):
            raise InvalidInputError("need 0 < tau_collapse < 1 < tau_split")
        if self.p_min >= self.p_max:
            raise InvalidInputError("p_min must be < p_max")
        if self.theta0 <= 0:
            raise InvalidInputError("theta0 must be positive")
        if self.k1 <= 1 or self.k2 <= 1:
            raise InvalidInputError("k1 and k2 must exceed 1")


@dataclass
class LossBreakdown:
    phi: float
    silhouette: float
    normal: float
    regularizer: float
    grad: np.ndarray  # (V, 3)


# ---- losses -------------------------------------------------------------------------


def _face_normal_grads(vertices, faces, face_ids, g_nhat_world):
    """Scatter d(loss)/d(unit face normal) to vertex position gradients."""
    grad = np.zeros_like(vertices)
    tri = faces[face_ids]
    v0 = vertices[tri[:, 0]]
    v1 = vertices[tri[:, 1]]
    v2 = vertices[tri[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    norm = np.maximum(norm, 1e-300)
    nhat = n / norm
    # project through the normalization Jacobian
    g_n = (g_nhat_world - nhat * np.einsum("ij,ij->i", nhat, g_nhat_world)[:, None]) / norm
    g_v1 = np.cross(e2, g_n)
    g_v2 = np.cross(g_n, e1)
    g_v0 = -(g_v1 + g_v2)
    np.add.at(grad, tri[:, 0], g_v0)
    np.add.at(grad, tri[:, 1], g_v1)
    np.add.at(grad, tri[:, 2], g_v2)
    return grad


def normal_loss(
    mesh: HalfEdgeMesh,
    camera: Camera,
    buffers: RenderBuffers,
    target: DenseView,
) -> tuple[float, np.ndarray]:
    """Mean (1 - rendered . target) over the target foreground, with the
    pixel-to-face assignment frozen to ``buffers``.

    Rendered normals are recomputed from current vertex positions for the
    assigned faces, so the value is a smooth function of the vertices; target
    foreground pixels the render leaves uncovered contribute the constant 1.
    Empty foreground yields loss 0 with zero gradient.
    """
    fg = target.silhouette > 0.5
    if target.domain is not None:
        fg = fg & target.domain
    n_fg = int(fg.sum())
    if n_fg == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    covered = fg & buffers.coverage()
    face_ids = buffers.face_id[covered]
    tgt = target.normal[covered]  # camera-frame unit targets

    tri = mesh.faces[face_ids]
    v0 = mesh.vertices[tri[:, 0]]
    v1 = mesh.vertices[tri[:, 1]]
    v2 = mesh.vertices[tri[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    norm = np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    nhat_w = n / norm
    nhat_c = nhat_w @ camera.R.T
    dots = np.einsum("ij,ij->i", nhat_c, tgt)
    value = (n_fg - int(covered.sum()) + np.sum(1.0 - dots)) / n_fg
    # d/d nhat_c = -tgt / n_fg; back to world frame
    g_world = -(tgt @ camera.R) / n_fg
    grad = _face_normal_grads(mesh.vertices, mesh.faces, face_ids, g_world)
    return float(value), grad


def silhouette_loss(
    mesh: HalfEdgeMesh,
    camera: Camera,
    buffers: RenderBuffers,
    target: DenseView,
    contour_normal_force: bool = True,
) -> tuple[float, np.ndarray]:
    """Mean squared coverage error, with screen-space band gradients.

    The value uses the hard rendered coverage. Gradients act on the faces
    bordering the rendered silhouette: for each covered/uncovered neighbour
    pixel pair the residual pushes the boundary face's vertices along the
    screen-space outward direction, scaled through the projection Jacobian.
    """
    S = target.silhouette
    S_hat = buffers.silhouette
    H, W = S.shape
    domain = target.domain if target.domain is not None else np.ones((H, W), dtype=bool)
    n_px = max(int(domain.sum()), 1)
    diff = (S_hat - S) * domain
    value = float((diff * diff).sum() / n_px)
    grad = np.zeros_like(mesh.vertices)

    cov = buffers.coverage()
    pairs = []  # (covered r, c, outward dr, dc)
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        inner = cov & ~np.roll(cov, (-dr, -dc), axis=(0, 1))
        # exclude wrap-around borders
        if dr == 1:
            inner[-1, :] = cov[-1, :]
        elif dr == -1:
            inner[0, :] = cov[0, :]
        if dc == 1:
            inner[:, -1] = cov[:, -1]
        elif dc == -1:
            inner[:, 0] = cov[:, 0]
        rows, cols = np.nonzero(inner & domain)
        orow, ocol = rows + dr, cols + dc
        inb = (orow >= 0) & (orow < H) & (ocol >= 0) & (ocol < W)
        rows, cols, orow, ocol = rows[inb], cols[inb], orow[inb], ocol[inb]
        ind = domain[orow, ocol]
        pairs.append((rows[ind], cols[ind], orow[ind], ocol[ind], dr, dc))

    Vc = mesh.vertices @ camera.R.T + camera.t
    z = np.maximum(Vc[:, 2], 1e-9)
    face_n = mesh.face_normals()
    # faces carrying an open mesh boundary: their silhouette is the sheet
    # border, moved by in-surface deformation; all other silhouette faces are
    # occluding contours, moved along the surface normal as well
    edges, counts = unique_edges(mesh.faces)
    boundary_vertices = np.zeros(mesh.n_vertices, dtype=bool)
    boundary_vertices[edges[counts == 1].reshape(-1)] = True
    face_on_border = boundary_vertices[mesh.faces].any(axis=1)

    for rows, cols, orow, ocol, dr, dc in pairs:
        if len(rows) == 0:
            continue
        fids = buffers.face_id[rows, cols]
        # dL/db along the outward direction (b in pixels)
        g_b = (
            2.0 * (S_hat[orow, ocol] - S[orow, ocol])
            + 2.0 * (S_hat[rows, cols] - S[rows, cols])
        ) / n_px
        d_hat = np.array([dc, dr], dtype=np.float64)  # pixel-space direction
        tri = mesh.faces[fids]
        # barycentric attribution at the covered pixel
        px = np.stack([cols + 0.5, rows + 0.5], axis=1)
        A = _project_pts(mesh.vertices[tri[:, 0]], camera)
        B = _project_pts(mesh.vertices[tri[:, 1]], camera)
        C = _project_pts(mesh.vertices[tri[:, 2]], camera)
        area2 = (B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (B[:, 1] - A[:, 1]) * (
            C[:, 0] - A[:, 0]
        )
        area2 = np.where(np.abs(area2) < 1e-12, 1e-12, area2)
        w0 = ((B[:, 0] - px[:, 0]) * (C[:, 1] - px[:, 1]) - (B[:, 1] - px[:, 1]) * (C[:, 0] - px[:, 0])) / area2
        w1 = ((C[:, 0] - px[:, 0]) * (A[:, 1] - px[:, 1]) - (C[:, 1] - px[:, 1]) * (A[:, 0] - px[:, 0])) / area2
        w2 = 1.0 - w0 - w1
        for corner, wgt in ((0, w0), (1, w1), (2, w2)):
            vid = tri[:, corner]
            g_screen = (g_b * wgt)[:, None] * d_hat[None, :]
            # chain through the projection Jacobian at the vertex
            zi = z[vid]
            xi = Vc[vid, 0]
            yi = Vc[vid, 1]
            gx = g_screen[:, 0] * camera.fx / zi
            gy = g_screen[:, 1] * camera.fy / zi
            gz = (
                -g_screen[:, 0] * camera.fx * xi / (zi * zi)
                - g_screen[:, 1] * camera.fy * yi / (zi * zi)
            )
            g_cam = np.stack([gx, gy, gz], axis=1)
            g_world = g_cam @ camera.R
            n_f = face_n[fids]
            n_dot_g = np.einsum("ij,ij->i", n_f, g_world)
            if contour_normal_force:
                strip = face_on_border[fids].astype(np.float64)
            else:
                strip = np.ones(len(fids))
            g_world = g_world - (strip * n_dot_g)[:, None] * n_f
            np.add.at(grad, vid, g_world)
    return value, grad


def _project_pts(X, camera):
    Xc = X @ camera.R.T + camera.t
    z = np.maximum(Xc[:, 2], 1e-9)
    return np.stack(
        [camera.fx * Xc[:, 0] / z + camera.cx, camera.fy * Xc[:, 1] / z + camera.cy],
        axis=1,
    )


def laplacian_energy(mesh: HalfEdgeMesh) -> tuple[float, np.ndarray]:
    """Uniform-weight Laplacian energy: mean |v_i - mean(neighbours)|^2."""
    V = mesh.n_vertices
    if V == 0:
        return 0.0, np.zeros((0, 3))
    indptr, indices = mesh.adjacency_csr()
    deg = np.maximum(np.diff(indptr), 1)
    nbr_sum = np.zeros_like(mesh.vertices)
    np.add.at(nbr_sum, np.repeat(np.arange(V), np.diff(indptr)), mesh.vertices[indices])
    delta = mesh.vertices - nbr_sum / deg[:, None]
    value = float((delta * delta).sum() / V)
    grad = 2.0 * delta / V
    scaled = delta / deg[:, None]
    np.add.at(grad, indices, -2.0 * scaled[np.repeat(np.arange(V), np.diff(indptr))] / V)
    return value, grad


def compute_losses(
    mesh: HalfEdgeMesh,
    cameras: dict[int, Camera],
    targets: dict[int, DenseView],
    cfg: RefineConfig,
    buffers: dict[int, RenderBuffers] | None = None,
    include_regularizer_gradient: bool = True,
) -> tuple[LossBreakdown, dict[int, RenderBuffers]]:
    """Full objective over all views plus the regularizer.

    With ``include_regularizer_gradient=False`` the returned gradient carries
    only the data terms (the optimization loop applies velocity-scaled
    Laplacian smoothing itself, so settled vertices feel no regularizer
    drift); the objective value always includes the regularizer energy.
    """
    if buffers is None:
        buffers = {
            vid: rasterize(mesh, cameras[vid], cfg.cull_backfaces)
            for vid in sorted(targets)
        }
    total_sil = 0.0
    total_norm = 0.0
    grad = np.zeros_like(mesh.vertices)
    for vid in sorted(targets):
        buf = buffers[vid]
        ln, gn = normal_loss(mesh, cameras[vid], buf, targets[vid])
        ls, gs = silhouette_loss(
            mesh, cameras[vid], buf, targets[vid], cfg.contour_normal_force
        )
        total_norm += ln
        total_sil += ls
        grad += cfg.lambda_n * gn + cfg.lambda_s * gs
    reg, g_reg = laplacian_energy(mesh)
    reg *= cfg.laplacian_weight
    if include_regularizer_gradient:
        grad += cfg.laplacian_weight * g_reg
    phi = cfg.lambda_n * total_norm + cfg.lambda_s * total_sil + reg
    return LossBreakdown(phi, total_sil, total_norm, reg, grad), buffers


def laplace_vectors(mesh: HalfEdgeMesh) -> np.ndarray:
    """Per-vertex uniform umbrella vector v_i - mean(neighbours)."""
    V = mesh.n_vertices
    if V == 0:
        return np.zeros((0, 3))
    indptr, indices = mesh.adjacency_csr()
    deg = np.maximum(np.diff(indptr), 1)
    nbr_sum = np.zeros_like(mesh.vertices)
    np.add.at(nbr_sum, np.repeat(np.arange(V), np.diff(indptr)), mesh.vertices[indices])
    return mesh.vertices - nbr_sum / deg[:, None]


# ---- isotropic adaptive optimizer ----------------------------------------------------


def _lerp_unbiased(prev, new, beta, step):
    c_prev = 1.0 - beta ** max(step - 1, 0)
    c = 1.0 - beta ** step
    return (prev * (beta * c_prev) + new * (1.0 - beta)) / c


def isotropic_step(
    mesh: HalfEdgeMesh, grad: np.ndarray, step_index: int, cfg: RefineConfig
) -> np.ndarray:
    """One adaptive step with a single second-moment scalar per vertex.

    Uses the mesh channels ``m1`` (3-vector), ``m2`` (scalar) and writes
    ``nu`` (clamped ratio of the bias-corrected first-moment magnitude to the
    running RMS gradient). The step is scaled by the per-vertex reference
    length channel ``lref`` when present. Vertices with non-finite gradients
    are frozen for the iteration. Returns the per-vertex nu.
    """
    V = mesh.n_vertices
    if "m1" not in mesh.channels:
        mesh.channels["m1"] = np.zeros((V, 3))
    if "m2" not in mesh.channels:
        mesh.channels["m2"] = np.zeros(V)
    bad = ~np.isfinite(grad).all(axis=1)
    if bad.any():
        logger.warning("%d vertices frozen this iteration (non-finite gradients)", int(bad.sum()))
        grad = np.where(bad[:, None], 0.0, grad)
    b1, b2 = cfg.betas
    m1 = _lerp_unbiased(mesh.channels["m1"], grad, b1, step_index)
    m2 = _lerp_unbiased(mesh.channels["m2"], (grad * grad).sum(axis=1), b2, step_index)
    mesh.channels["m1"] = m1
    mesh.channels["m2"] = m2
    velocity = m1 / (np.sqrt(np.maximum(m2, 0.0))[:, None] + ADAM_EPS)
    nu = np.minimum(np.linalg.norm(velocity, axis=1), 1.0)
    nu = np.where(bad, 0.0, nu)
    mesh.channels["nu"] = nu
    if cfg.step_scale == "lmin" and "step_scale" in mesh.channels:
        step_scale = mesh.channels["step_scale"]
    else:
        scale = mesh.channels.get("lref")
        step_scale = scale if scale is not None else np.ones(V)
    delta = -cfg.step_size * velocity * step_scale[:, None]
    delta = np.where(bad[:, None], 0.0, delta)
    mesh.vertices = mesh.vertices + delta
    return nu


# ---- curvature reference field --------------------------------------------------------


def normal_rotation_rate(normal_map: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Worst-case screen-space rotation rate of a unit normal field.

    Central-difference Jacobian per pixel; the rate is the spectral norm
    sqrt(lambda_max(J^T J)). Invalid pixels (zero normals) rate 0.
    """
    n = np.asarray(normal_map, dtype=np.float64)
    du = np.gradient(n, axis=1)
    dv = np.gradient(n, axis=0)
    a = (du * du).sum(axis=-1)
    b = (du * dv).sum(axis=-1)
    c = (dv * dv).sum(axis=-1)
    half_tr = (a + c) / 2.0
    root = np.sqrt(((a - c) / 2.0) ** 2 + b * b)
    lam_max = half_tr + root
    s = np.sqrt(np.maximum(lam_max, 0.0))
    if valid is not None:
        s = np.where(valid, s, 0.0)
    return s


def pixel_target_map(normal_map: np.ndarray, cfg: RefineConfig, valid=None) -> np.ndarray:
    s = normal_rotation_rate(normal_map, valid)
    with np.errstate(divide="ignore"):
        p = np.where(s > 0, cfg.theta0 / np.maximum(s, 1e-300), np.inf)
    return np.clip(p, cfg.p_min, cfg.p_max)


def curvature_reference(
    mesh: HalfEdgeMesh,
    cameras: dict[int, Camera],
    p_maps: dict[int, np.ndarray],
    buffers: dict[int, RenderBuffers],
    cfg: RefineConfig,
    vis_tol: float = 0.02,
) -> np.ndarray:
    """Per-vertex curvature-guided reference length (median over visible views).

    A vertex is visible in a view when its projection passes a depth test
    against that view's rendered buffers. Vertices visible nowhere inherit
    the mesh median.
    """
    V = mesh.n_vertices
    per_view = []
    for vid in sorted(p_maps):
        cam = cameras[vid]
        buf = buffers[vid]
        H, W = buf.shape
        Vc = mesh.vertices @ cam.R.T + cam.t
        z = Vc[:, 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        px = cam.fx * Vc[:, 0] / zs + cam.cx
        py = cam.fy * Vc[:, 1] / zs + cam.cy
        cols = np.floor(px).astype(np.int64)
        rows = np.floor(py).astype(np.int64)
        inb = front & (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
        vals = np.full(V, np.nan)
        idx = np.nonzero(inb)[0]
        if len(idx):
            buf_z = buf.depth[rows[idx], cols[idx]]
            vis = (buf_z > 0) & (z[idx] <= buf_z * (1.0 + vis_tol) + 1e-9)
            sel = idx[vis]
            p = p_maps[vid][rows[sel], cols[sel]]
            vals[sel] = z[sel] / cam.f_iso * p
        per_view.append(vals)
    stack = np.stack(per_view) if per_view else np.full((1, V), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(stack, axis=0)
    have = np.isfinite(med)
    if have.any():
        fallback = float(np.median(med[have]))
    else:
        fallback = float(mesh.mean_edge_length()) or 1.0
    med[~have] = fallback
    return med


# ---- slack schedule and bounds --------------------------------------------------------


def slack_update(
    zeta: np.ndarray, nu: np.ndarray, gain: float, nu_ref: float
) -> np.ndarray:
    """zeta <- max(0, zeta + gain (nu - nu_ref))."""
    return np.maximum(0.0, zeta + gain * (nu - nu_ref))


def reference_lengths(
    lref_curv: np.ndarray, zeta: np.ndarray, l_min: float, l_max: float
) -> np.ndarray:
    return np.clip(lref_curv + zeta, l_min, l_max)


def vertex_local_edge_scale(mesh: HalfEdgeMesh) -> np.ndarray:
    """Mean incident edge length per vertex (used for the slack init)."""
    edges, _ = mesh.edges()
    V = mesh.n_vertices
    acc = np.zeros(V)
    cnt = np.zeros(V)
    lens = mesh.edge_lengths(edges)
    np.add.at(acc, edges[:, 0], lens)
    np.add.at(acc, edges[:, 1], lens)
    np.add.at(cnt, edges[:, 0], 1)
    np.add.at(cnt, edges[:, 1], 1)
    return acc / np.maximum(cnt, 1)


def estimate_bounds(
    mesh: HalfEdgeMesh,
    cameras: dict[int, Camera],
    depth_rasters: list[np.ndarray],
    cfg: RefineConfig,
) -> tuple[float, float, bool]:
    """(L_min, L_max, fallback_used) from intrinsics and rendered depths.

    L_min is the world length of one pixel at a robust depth percentile
    (z_p / f_iso); L_max = max(k1 * median edge length, k2 * L_min). With no
    valid rendered depths, falls back to mesh statistics and flags it.
    """
    lens = mesh.edge_lengths()
    l_med = float(np.median(lens)) if len(lens) else 1.0
    valid = [d[d > 0] for d in depth_rasters]
    valid = np.concatenate(valid) if valid else np.zeros(0)
    f_isos = sorted(cam.f_iso for cam in cameras.values())
    if len(valid) == 0 or not f_isos:
        l_min = 0.1 * l_med
        return l_min, max(cfg.k1 * l_med, cfg.k2 * l_min), True
    f_iso = float(np.median(f_isos))
    z_p = float(np.percentile(valid, cfg.depth_percentile))
    l_min = z_p / f_iso
    l_max = max(cfg.k1 * l_med, cfg.k2 * l_min)
    return l_min, l_max, False


# ---- remeshing -----------------------------------------------------------------------


def _vertex_normals(mesh: HalfEdgeMesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    n = np.zeros_like(mesh.vertices)
    fn = mesh.face_normals(normalized=False)
    for k in range(3):
        np.add.at(n, mesh.faces[:, k], fn)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(lens, 1e-300)


def remesh_step(
    mesh: HalfEdgeMesh, cfg: RefineConfig
) -> tuple[HalfEdgeMesh, dict[str, int]]:
    """Collapse short edges, split long ones, flip for valence regularity.

    Edge targets are the mean of the endpoint ``lref`` channel. Collapses and
    splits run most-extreme-first in deterministic order; splits stop at the
    vertex cap (flagged in the stats). Channels ride along (averaged).
    """
    stats = {"collapsed": 0, "split": 0, "flipped": 0, "cap_hit": 0}
    lref = mesh.channels["lref"]

    # collapse pass (crease-protected)
    editor = MeshEditor(mesh)
    edges, _ = mesh.edges()
    lens = mesh.edge_lengths(edges)
    targets = (lref[edges[:, 0]] + lref[edges[:, 1]]) / 2.0
    ratio = lens / np.maximum(targets, 1e-300)
    vnormals = _vertex_normals(mesh)
    cos_crease = np.cos(np.deg2rad(cfg.crease_angle_deg))
    dots = np.einsum("ij,ij->i", vnormals[edges[:, 0]], vnormals[edges[:, 1]])
    order = np.argsort(ratio, kind="stable")
    for k in order:
        if ratio[k] >= cfg.tau_collapse:
            break
        if dots[k] < cos_crease:
            continue
        a, b = int(edges[k, 0]), int(edges[k, 1])
        if editor.collapse(a, b):
            stats["collapsed"] += 1
    mesh = editor.finish()

    # split pass
    lref = mesh.channels["lref"]
    editor = MeshEditor(mesh)
    edges, _ = mesh.edges()
    lens = mesh.edge_lengths(edges)
    targets = (lref[edges[:, 0]] + lref[edges[:, 1]]) / 2.0
    ratio = lens / np.maximum(targets, 1e-300)
    order = np.argsort(-ratio, kind="stable")
    for k in order:
        if ratio[k] <= cfg.tau_split:
            break
        if cfg.vertex_cap is not None and editor.n_live_vertices() >= cfg.vertex_cap:
            stats["cap_hit"] = 1
            break
        a, b = int(edges[k, 0]), int(edges[k, 1])
        if editor.split(a, b) is not None:
            stats["split"] += 1
    mesh = editor.finish()

    # flip pass for valence regularity
    editor = MeshEditor(mesh)
    he_edges, counts = mesh.edges()
    interior = he_edges[counts == 2]
    for a, b in interior.tolist():
        fs = editor._edge_faces(a, b)
        if len(fs) != 2:
            continue
        tri1, tri2 = editor.faces[fs[0]], editor.faces[fs[1]]
        c = next((v for v in tri1 if v not in (a, b)), None)
        d = next((v for v in tri2 if v not in (a, b)), None)
        if c is None or d is None or c == d:
            continue
        va, vb = editor.valence(a), editor.valence(b)
        vc, vd = editor.valence(c), editor.valence(d)
        # a flip removes edge (a,b) and adds (c,d)
        before = (va - 6) ** 2 + (vb - 6) ** 2 + (vc - 6) ** 2 + (vd - 6) ** 2
        after = (va - 1 - 6) ** 2 + (vb - 1 - 6) ** 2 + (vc + 1 - 6) ** 2 + (vd + 1 - 6) ** 2
        if after < before and editor.flip(a, b):
            stats["flipped"] += 1
    mesh = editor.finish()

    mesh, fixed = _sliver_pass(mesh)
    stats["slivers_fixed"] = fixed
    return mesh, stats


def _sliver_pass(
    mesh: HalfEdgeMesh, min_angle_deg: float = 4.0
) -> tuple[HalfEdgeMesh, int]:
    """Remove needle and cap triangles left behind by motion and edits.

    Needles collapse their shortest edge; caps (obtuse angle near pi) flip
    their longest edge when the flip improves the local worst angle. All
    edits go through the validity-checked editor.
    """
    editor = MeshEditor(mesh)
    verts = mesh.vertices
    tri = mesh.faces
    v0, v1, v2 = verts[tri[:, 0]], verts[tri[:, 1]], verts[tri[:, 2]]

    def angles(a, b, c):
        out = []
        for p, q, r in ((a, b, c), (b, c, a), (c, a, b)):
            u, w = q - p, r - p
            cosv = np.einsum("ij,ij->i", u, w) / np.maximum(
                np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1), 1e-300
            )
            out.append(np.arccos(np.clip(cosv, -1, 1)))
        return np.stack(out, axis=1)

    ang = angles(v0, v1, v2)
    lo = np.deg2rad(min_angle_deg)
    bad = np.nonzero(ang.min(axis=1) < lo)[0]
    fixed = 0
    for fi in bad.tolist():
        face = editor.faces[fi] if fi < len(editor.faces) else None
        if face is None or fi in editor.dead_faces:
            continue
        ids = list(face)
        if any(v in editor.dead_verts for v in ids):
            continue
        pos = [editor.positions[v] for v in ids]
        lens = [
            (np.linalg.norm(pos[(k + 1) % 3] - pos[k]), k) for k in range(3)
        ]
        lens.sort()
        shortest, longest = lens[0], lens[-1]
        if shortest[0] < 0.25 * longest[0]:
            a, b = ids[shortest[1]], ids[(shortest[1] + 1) % 3]
            if editor.collapse(a, b):
                fixed += 1
                continue
        a, b = ids[longest[1]], ids[(longest[1] + 1) % 3]
        if editor.flip(a, b):
            fixed += 1
    return editor.finish(), fixed


# ---- main loop -----------------------------------------------------------------------


@dataclass
class RefineResult:
    mesh: HalfEdgeMesh
    best_phi: float
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


def refine(
    mesh0: HalfEdgeMesh,
    cameras: dict[int, Camera],
    targets: dict[int, DenseView],
    cfg: RefineConfig | None = None,
    adaptive: bool = True,
    uniform_level: float | None = None,
    phi_log_path=None,
) -> RefineResult:
    """Alternate render / compare / update / remesh; return the best snapshot.

    ``adaptive=False`` replaces the curvature field with a spatially uniform
    one (``uniform_level`` when given, else the mean of the initial adaptive
    field) for fixed-budget ablations; the slack schedule still applies.
    Deterministic for a given config.
    """
    cfg = cfg or RefineConfig()
    mesh = mesh0.copy()
    if mesh.is_empty():
        return RefineResult(mesh, float("inf"))

    init_buffers = {
        vid: rasterize(mesh, cameras[vid], cfg.cull_backfaces) for vid in sorted(targets)
    }
    l_min, l_max, _ = estimate_bounds(
        mesh, cameras, [init_buffers[v].depth for v in sorted(targets)], cfg
    )
    gain = cfg.gain if cfg.gain is not None else 0.02 * l_min
    p_maps = {
        vid: pixel_target_map(
            targets[vid].normal,
            cfg,
            valid=np.linalg.norm(targets[vid].normal, axis=-1) > 0.5,
        )
        if targets[vid].normal is not None
        else np.full(targets[vid].shape, cfg.p_max)
        for vid in sorted(targets)
    }

    lref_curv = curvature_reference(mesh, cameras, p_maps, init_buffers, cfg)
    if uniform_level is None:
        uniform_level = float(np.mean(lref_curv)) if len(lref_curv) else l_max
    if not adaptive:
        # fair ablation: same demand, no spatial allocation
        lref_curv = np.full(mesh.n_vertices, uniform_level)
    local_scale = vertex_local_edge_scale(mesh)
    zeta = np.maximum(0.0, local_scale - lref_curv)
    mesh.channels["lref_curv"] = lref_curv
    mesh.channels["zeta"] = zeta
    mesh.channels["lref"] = reference_lengths(lref_curv, zeta, l_min, l_max)
    mesh.channels["m1"] = np.zeros((mesh.n_vertices, 3))
    mesh.channels["m2"] = np.zeros(mesh.n_vertices)
    mesh.channels["nu"] = np.zeros(mesh.n_vertices)
    if cfg.step_scale == "lmin":
        mesh.channels["step_scale"] = np.full(mesh.n_vertices, l_min)

    best_phi = np.inf
    best_mesh = mesh.copy()
    history = []
    worse_streak = 0
    log_fh = open(phi_log_path, "w") if phi_log_path else None
    try:
        for it in range(1, cfg.iterations + 1):
            losses, buffers = compute_losses(
                mesh, cameras, targets, cfg, include_regularizer_gradient=False
            )
            # velocity-scaled smoothing: settled vertices feel no regularizer
            nu_prev = mesh.channels.get("nu", np.zeros(mesh.n_vertices))
            losses.grad = losses.grad + cfg.laplacian_weight * (
                nu_prev[:, None] * laplace_vectors(mesh)
            )
            history.append(
                {
                    "iteration": it,
                    "phi": losses.phi,
                    "sil": losses.silhouette,
                    "normal": losses.normal,
                    "reg": losses.regularizer,
                    "vertices": mesh.n_vertices,
                    "faces": mesh.n_faces,
                }
            )
            if log_fh:
                log_fh.write(
                    f"{it} {losses.phi:.9g} {losses.silhouette:.9g} "
                    f"{losses.normal:.9g} {losses.regularizer:.9g} "
                    f"{mesh.n_vertices} {mesh.n_faces}\n"
                )
            if losses.phi < best_phi * (1.0 - cfg.snapshot_min_improvement) or not np.isfinite(best_phi):
                best_phi = losses.phi
                best_mesh = mesh.copy()
            if losses.phi <= best_phi:
                worse_streak = 0
            else:
                worse_streak += 1
                if worse_streak >= cfg.divergence_patience:
                    return RefineResult(best_mesh, best_phi, history, stopped_early=True)

            nu = isotropic_step(mesh, losses.grad, it, cfg)
            if adaptive:
                lref_curv = curvature_reference(mesh, cameras, p_maps, buffers, cfg)
            else:
                lref_curv = np.full(mesh.n_vertices, uniform_level)
            zeta = slack_update(mesh.channels["zeta"], nu, gain, cfg.nu_ref)
            mesh.channels["lref_curv"] = lref_curv
            mesh.channels["zeta"] = zeta
            mesh.channels["lref"] = reference_lengths(lref_curv, zeta, l_min, l_max)

            if it % cfg.remesh_interval == 0:
                mesh, _ = remesh_step(mesh, cfg)
    finally:
        if log_fh:
            log_fh.close()

    losses, _ = compute_losses(mesh, cameras, targets, cfg)
    if losses.phi < best_phi:
        best_phi = losses.phi
        best_mesh = mesh.copy()
    return RefineResult(best_mesh, best_phi, history)
