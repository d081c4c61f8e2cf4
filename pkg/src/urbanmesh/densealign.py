"""Two-stage dense-geometry alignment under frozen cameras.

Stage 1 estimates one global scale per view by minimizing a robust norm of
matched back-projected point discrepancies over log-scales; scales are
gauge-normalized so the smallest is 1 (per connected component of the match
graph). Stage 2 frees every matched 3D point and minimizes the bidirectional
reprojection inconsistency ``rho(u_c^n - proj_n(X_c^m)) + rho(u_c^m -
proj_n(X_c^n))`` with ``rho(x) = (|x|^2 + delta^2)^(lambda/2)``. Both stages
use first-order updates with per-parameter adaptive moments; cameras never
move.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, backproject
from .denseview import DenseView, MatchSet
from .exceptions import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass
class AlignConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    stage1_iterations: int = 300
    stage1_step: float = 0.05
    stage2_iterations: int = 500
    stage2_step_rel: float = 1e-3  # times the scene diameter
    tolerance: float = 1e-12
    delta: float = 1e-6  # smoothing of the robust norm at zero residual
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.lambda1 <= 1 and 0 < self.lambda2 <= 1):
            raise InvalidInputError("robust exponents must lie in (0, 1]")
        if self.stage1_iterations < 1 or self.stage2_iterations < 1:
            raise InvalidInputError("iteration counts must be >= 1")


@dataclass
class ScaleSet:
    scales: dict[int, float]
    components: list[list[int]] = field(default_factory=list)

    def __getitem__(self, view_id: int) -> float:
        return self.scales[view_id]


@dataclass
class MatchProblem:
    """Flattened match table: row c couples X_c^n (side 0) and X_c^m (side 1)."""

    view_n: np.ndarray  # (N,) view ids
    view_m: np.ndarray
    pix_n: np.ndarray  # (N, 2) pixels in view n
    pix_m: np.ndarray
    X_n: np.ndarray  # (N, 3) back-projected from view n's depth
    X_m: np.ndarray
    q: np.ndarray  # (N,) confidences
    cameras: dict[int, Camera]

    def __len__(self) -> int:
        return len(self.q)


def build_match_problem(
    views: dict[int, DenseView], cameras: dict[int, Camera], matches: list[MatchSet]
) -> MatchProblem:
    """Back-project matched pixels through their view depth maps.

    Match records with invalid (<= 0) depth on either side are dropped.
    """
    vn, vm, pn, pm, xn, xm, qs = [], [], [], [], [], [], []
    for ms in sorted(matches, key=lambda m: (m.view_a, m.view_b)):
        va, vb = ms.view_a, ms.view_b
        da = views[va].sample_depth(ms.pixels_a)
        db = views[vb].sample_depth(ms.pixels_b)
        ok = (da > 0) & (db > 0)
        if not ok.any():
            continue
        Xa = backproject(cameras[va], ms.pixels_a[ok], da[ok])
        Xb = backproject(cameras[vb], ms.pixels_b[ok], db[ok])
        n = int(ok.sum())
        vn.append(np.full(n, va, dtype=np.int64))
        vm.append(np.full(n, vb, dtype=np.int64))
        pn.append(ms.pixels_a[ok])
        pm.append(ms.pixels_b[ok])
        xn.append(Xa)
        xm.append(Xb)
        qs.append(ms.confidence[ok])
    if not vn:
        return MatchProblem(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
            np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros(0), dict(cameras),
        )
    return MatchProblem(
        np.concatenate(vn), np.concatenate(vm),
        np.vstack(pn), np.vstack(pm), np.vstack(xn), np.vstack(xm),
        np.concatenate(qs), dict(cameras),
    )


def _rho(sq_norm: np.ndarray, lam: float, delta: float) -> np.ndarray:
    # the -delta^lam offset zeroes the smoothing floor without changing gradients
    return (sq_norm + delta * delta) ** (lam / 2.0) - delta ** lam


def _drho_scale(sq_norm: np.ndarray, lam: float, delta: float) -> np.ndarray:
    """d rho / d r = scale * r with this scale factor."""
    return lam * (sq_norm + delta * delta) ** (lam / 2.0 - 1.0)


# ---- stage 1: per-view global scales -----------------------------------------------


def scale_objective_and_grad(
    log_s: np.ndarray, problem: MatchProblem, view_ids: list[int], cfg: AlignConfig
) -> tuple[float, np.ndarray]:
    """Robust discrepancy of per-view-scaled matched points over log-scales.

    A view's scale acts about its own camera center (equivalent to scaling its
    depth map), the operation a per-view depth-scale error actually is; this
    also removes the degenerate all-scales-to-zero direction that scaling
    about the world origin would have.
    """
    slot = {v: k for k, v in enumerate(view_ids)}
    s = np.exp(log_s)
    idx_n = np.array([slot[int(v)] for v in problem.view_n])
    idx_m = np.array([slot[int(v)] for v in problem.view_m])
    centers = {v: problem.cameras[v].center() for v in view_ids}
    o_n = np.stack([centers[int(v)] for v in problem.view_n])
    o_m = np.stack([centers[int(v)] for v in problem.view_m])
    Yn = problem.X_n - o_n
    Ym = problem.X_m - o_m
    sn = s[idx_n]
    sm = s[idx_m]
    r = (o_n + sn[:, None] * Yn) - (o_m + sm[:, None] * Ym)
    sq = (r * r).sum(axis=1)
    val = float((problem.q * _rho(sq, cfg.lambda1, cfg.delta)).sum())
    w = problem.q * _drho_scale(sq, cfg.lambda1, cfg.delta)
    gn = w * np.einsum("ij,ij->i", r, Yn) * sn
    gm = -w * np.einsum("ij,ij->i", r, Ym) * sm
    grad = np.zeros(len(view_ids))
    np.add.at(grad, idx_n, gn)
    np.add.at(grad, idx_m, gm)
    return val, grad


def _match_components(problem: MatchProblem, view_ids: list[int]) -> list[list[int]]:
    parent = {v: v for v in view_ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in zip(problem.view_n, problem.view_m):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: dict[int, list[int]] = {}
    for v in view_ids:
        comps.setdefault(find(v), []).append(v)
    return [sorted(c) for _, c in sorted(comps.items())]


def coarse_scale_align(
    views: dict[int, DenseView],
    cameras: dict[int, Camera],
    matches: list[MatchSet],
    cfg: AlignConfig | None = None,
) -> ScaleSet:
    """Estimate gauge-normalized per-view scales from matched dense points.

    Monotone accepted-step first-order optimization on log-scales; a
    disconnected match graph logs a warning and normalizes per component.
    """
    cfg = cfg or AlignConfig()
    view_ids = sorted(views)
    problem = build_match_problem(views, cameras, matches)
    components = _match_components(problem, view_ids)
    if len(components) > 1:
        logger.warning(
            "match graph has %d connected components; per-component gauges",
            len(components),
        )
    log_s = np.zeros(len(view_ids))
    if len(problem):
        log_s = _adam_monotone(
            log_s,
            lambda x: scale_objective_and_grad(x, problem, view_ids, cfg),
            cfg.stage1_step,
            cfg.stage1_iterations,
            cfg.tolerance,
        )
    s = np.exp(log_s)
    scales = {v: float(s[k]) for k, v in enumerate(view_ids)}
    for comp in components:
        m = min(scales[v] for v in comp)
        for v in comp:
            scales[v] /= m
    return ScaleSet(scales, components)


def _adam_monotone(x0, fn, step, iterations, tol, betas=(0.9, 0.999), eps=1e-8):
    """Adam with rejected-step backoff: the objective never increases."""
    x = x0.astype(np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_val, grad = fn(x)
    lr = step
    t = 0
    for _ in range(iterations):
        t += 1
        m = betas[0] * m + (1 - betas[0]) * grad
        v = betas[1] * v + (1 - betas[1]) * grad * grad
        mh = m / (1 - betas[0] ** t)
        vh = v / (1 - betas[1] ** t)
        cand = x - lr * mh / (np.sqrt(vh) + eps)
        val, g = fn(cand)
        if val <= best_val:
            improved = best_val - val
            x, grad = cand, g
            best_val = val
            if improved < tol * max(abs(best_val), 1.0):
                break
        else:
            lr *= 0.5
            if lr < 1e-14:
                break
    return x


# ---- stage 2: dense point refinement ------------------------------------------------


def _stack_stage2(problem: MatchProblem):
    """Free stage-2 variables and their residual terms.

    One free 3D point per distinct (view, pixel) - a view's pointmap has a
    single point per pixel, so matches referencing the same pixel share the
    variable (this is what lets the robust penalty bound a gross outlier's
    influence when a clean term shares its point). Term k projects variable
    ``var_of_term[k]`` into ``proj_view[k]`` against ``target[k]``.

    Returns (P0 (V,3), var_of_term, proj_view, target, q).
    """
    key_to_var: dict[tuple[int, float, float], int] = {}
    positions: list[np.ndarray] = []

    def var_for(vid: int, pix: np.ndarray, X: np.ndarray) -> int:
        key = (vid, round(float(pix[0]), 6), round(float(pix[1]), 6))
        if key not in key_to_var:
            key_to_var[key] = len(positions)
            positions.append(X)
        return key_to_var[key]

    n = len(problem)
    var_of_term = np.zeros(2 * n, dtype=np.int64)
    for k in range(n):
        var_of_term[k] = var_for(int(problem.view_n[k]), problem.pix_n[k], problem.X_n[k])
    for k in range(n):
        var_of_term[n + k] = var_for(int(problem.view_m[k]), problem.pix_m[k], problem.X_m[k])
    P0 = np.vstack(positions) if positions else np.zeros((0, 3))
    proj_view = np.concatenate([problem.view_m, problem.view_n])
    target = np.vstack([problem.pix_m, problem.pix_n])
    q = np.concatenate([problem.q, problem.q])
    return P0, var_of_term, proj_view, target, q


def reprojection_objective_and_grad(
    P: np.ndarray,
    var_of_term: np.ndarray,
    proj_view: np.ndarray,
    target: np.ndarray,
    q: np.ndarray,
    cameras: dict[int, Camera],
    cfg: AlignConfig,
) -> tuple[float, np.ndarray]:
    """Robust bidirectional reprojection objective and its point gradient.

    Points behind their projecting camera are masked out of the objective and
    gradient for the evaluation.
    """
    val = 0.0
    grad = np.zeros_like(P)
    for vid in np.unique(proj_view):
        cam = cameras[int(vid)]
        terms = np.nonzero(proj_view == vid)[0]
        vars_ = var_of_term[terms]
        Xc = P[vars_] @ cam.R.T + cam.t
        z = Xc[:, 2]
        front = z > 1e-9
        terms = terms[front]
        vars_ = vars_[front]
        if len(terms) == 0:
            continue
        Xc = Xc[front]
        z = z[front]
        u = cam.fx * Xc[:, 0] / z + cam.cx
        v = cam.fy * Xc[:, 1] / z + cam.cy
        e = target[terms] - np.stack([u, v], axis=1)
        sq = (e * e).sum(axis=1)
        val += float((q[terms] * _rho(sq, cfg.lambda2, cfg.delta)).sum())
        w = q[terms] * _drho_scale(sq, cfg.lambda2, cfg.delta)
        # d e / d X = -(d proj / d Xc) @ R
        du = np.zeros((len(terms), 2, 3))
        du[:, 0, 0] = cam.fx / z
        du[:, 0, 2] = -cam.fx * Xc[:, 0] / (z * z)
        du[:, 1, 1] = cam.fy / z
        du[:, 1, 2] = -cam.fy * Xc[:, 1] / (z * z)
        g_e = (w[:, None] * e)  # d objective / d e
        g_cam = -np.einsum("nk,nkj->nj", g_e, du)
        np.add.at(grad, vars_, g_cam @ cam.R)
    return val, grad


@dataclass
class RefineResult:
    refined_n: np.ndarray  # (N, 3) refined X_c^n
    refined_m: np.ndarray
    problem: MatchProblem
    initial_objective: float
    final_objective: float
    updated_views: dict[int, DenseView] = field(default_factory=dict)


def refine_points(
    views: dict[int, DenseView],
    cameras: dict[int, Camera],
    matches: list[MatchSet],
    scales: ScaleSet | None = None,
    cfg: AlignConfig | None = None,
) -> RefineResult:
    """Refine matched dense points by bidirectional reprojection consistency.

    Applies per-view scales first (depth maps rescaled), runs adaptive-moment
    descent on all stacked points, then rewrites each view's depth map: the
    median refined depth lands at every matched cell and unmatched valid
    depths inherit the per-view median refined/original ratio.
    """
    cfg = cfg or AlignConfig()
    if scales is not None:
        views = {
            vid: DenseView(
                vid,
                np.where(v.depth > 0, v.depth * scales[vid], v.depth),
                v.normal,
                v.silhouette,
            )
            for vid, v in views.items()
        }
    problem = build_match_problem(views, cameras, matches)
    P0, var_of_term, proj_view, target, q = _stack_stage2(problem)
    diameter = 1.0
    if len(P0):
        diameter = max(float(np.linalg.norm(P0.max(0) - P0.min(0))), 1e-9)

    def fn(P_flat):
        val, g = reprojection_objective_and_grad(
            P_flat.reshape(-1, 3), var_of_term, proj_view, target, q,
            problem.cameras, cfg,
        )
        return val, g.reshape(-1)

    init_val, _ = fn(P0.reshape(-1))
    P = _adam_monotone(
        P0.reshape(-1),
        fn,
        cfg.stage2_step_rel * diameter,
        cfg.stage2_iterations,
        cfg.tolerance,
    ).reshape(-1, 3)
    final_val, _ = fn(P.reshape(-1))

    n = len(problem)
    refined_n = P[var_of_term[:n]]
    refined_m = P[var_of_term[n:]]
    result = RefineResult(refined_n, refined_m, problem, init_val, final_val)
    result.updated_views = _rewrite_depths(views, cameras, problem, result)
    return result


def _rewrite_depths(views, cameras, problem, result) -> dict[int, DenseView]:
    n = len(problem)
    per_view_cells: dict[int, dict[tuple[int, int], list[float]]] = {
        vid: {} for vid in views
    }
    for side, (vids, pixels, pts) in enumerate(
        (
            (problem.view_n, problem.pix_n, result.refined_n),
            (problem.view_m, problem.pix_m, result.refined_m),
        )
    ):
        for k in range(n):
            vid = int(vids[k])
            cam = cameras[vid]
            z = float((cam.R @ pts[k] + cam.t)[2])
            if z <= 0:
                continue
            h, w = views[vid].shape
            c = min(max(int(pixels[k, 0]), 0), w - 1)
            r = min(max(int(pixels[k, 1]), 0), h - 1)
            per_view_cells[vid].setdefault((r, c), []).append(z)

    out = {}
    for vid in sorted(views):
        view = views[vid]
        depth = view.depth.copy()
        cells = per_view_cells[vid]
        ratios = []
        matched_mask = np.zeros_like(depth, dtype=bool)
        for (r, c), zs in sorted(cells.items()):
            z_new = float(np.median(zs))
            old = depth[r, c]
            if old > 0:
                ratios.append(z_new / old)
            depth[r, c] = z_new
            matched_mask[r, c] = True
        if ratios:
            ratio = float(np.median(ratios))
            unmatched = (depth > 0) & ~matched_mask
            depth[unmatched] *= ratio
        out[vid] = DenseView(vid, depth, view.normal, view.silhouette)
    return out


def mean_reprojection_inconsistency(
    problem: MatchProblem, P_n: np.ndarray, P_m: np.ndarray
) -> float:
    """Mean pixel magnitude of the bidirectional reprojection residuals."""
    if len(problem) == 0:
        return 0.0
    errs = []
    for vids, pixels, pts in (
        (problem.view_m, problem.pix_m, P_n),
        (problem.view_n, problem.pix_n, P_m),
    ):
        for k in range(len(problem)):
            cam = problem.cameras[int(vids[k])]
            Xc = cam.R @ pts[k] + cam.t
            if Xc[2] <= 0:
                continue
            u = cam.fx * Xc[0] / Xc[2] + cam.cx
            v = cam.fy * Xc[1] / Xc[2] + cam.cy
            errs.append(np.hypot(pixels[k, 0] - u, pixels[k, 1] - v))
    return float(np.mean(errs)) if errs else 0.0
