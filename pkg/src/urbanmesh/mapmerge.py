"""Aligning cluster reconstructions and fusing their tracks.

Alignment runs RANSAC over shared camera centers with a 3-point Umeyama
minimal solver; rotation consistency (< 5 degrees after alignment) is an
additional inlier gate, and the final transform is a closed-form similarity
refit on all inlier centers. Track merging fuses observations of the same
(camera, pixel-within-gate) into one point with a median-per-axis position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import project, rotation_angle
from .exceptions import DegenerateGeometryError, InsufficientCorrespondenceError
from .sparsemap import SparseMap, apply_sim3
from .transforms import Sim3Transform

ROTATION_GATE_RAD = np.deg2rad(5.0)


@dataclass
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 0.1  # meters; pipeline scales by scene diameter
    seed: int = 0


@dataclass
class MergeReport:
    transform: Sim3Transform | None = None
    shared_cameras: int = 0
    inliers: int = 0
    merged_tracks: int = 0
    removed_observations: int = 0
    mean_reprojection_error: float = 0.0

    def summary(self) -> str:
        s = self.transform.scale if self.transform else 1.0
        return (
            f"shared={self.shared_cameras} inliers={self.inliers} scale={s:.6g} "
            f"merged={self.merged_tracks} removed={self.removed_observations} "
            f"reproj={self.mean_reprojection_error:.4f}px"
        )


def umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> Sim3Transform:
    """Closed-form least-squares similarity aligning src onto dst.

    Raises
    ------
    DegenerateGeometryError
        If the source points are collinear (rank < 2) or have zero variance.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    var_s = (cs ** 2).sum() / len(src)
    if var_s <= 0:
        raise DegenerateGeometryError("zero-variance source points")
    cov = cd.T @ cs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateGeometryError("collinear correspondence set")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    if scale <= 0:
        raise DegenerateGeometryError("non-positive similarity scale")
    t = mu_d - scale * (R @ mu_s)
    return Sim3Transform(scale, R, t)


def estimate_sim3(
    source: SparseMap,
    target: SparseMap,
    shared: list[tuple[int, int]] | None = None,
    ransac: RansacConfig | None = None,
) -> tuple[Sim3Transform, MergeReport]:
    """RANSAC Sim(3) between two maps from shared camera poses.

    ``shared`` lists (source_camera_id, target_camera_id) pairs; by default
    cameras with equal ids are paired. Deterministic for a given seed.

    Raises
    ------
    InsufficientCorrespondenceError
        Fewer than 3 shared cameras, or no non-degenerate sample found.
    """
    ransac = ransac or RansacConfig()
    if shared is None:
        ids = sorted(set(source.cameras) & set(target.cameras))
        shared = [(i, i) for i in ids]
    if len(shared) < 3:
        raise InsufficientCorrespondenceError(
            f"need >= 3 shared cameras, got {len(shared)}"
        )
    src_centers = np.stack([source.cameras[a].center() for a, _ in shared])
    dst_centers = np.stack([target.cameras[b].center() for _, b in shared])
    src_R = [source.cameras[a].R for a, _ in shared]
    dst_R = [target.cameras[b].R for _, b in shared]
    n = len(shared)
    rng = np.random.default_rng(ransac.seed)

    best_inliers: np.ndarray | None = None
    best_count = -1
    best_rms = np.inf
    for _ in range(ransac.iterations):
        idx = rng.choice(n, size=3, replace=False)
        try:
            T = umeyama_similarity(src_centers[idx], dst_centers[idx])
        except DegenerateGeometryError:
            continue  # collinear minimal sample: skip
        mapped = T.apply(src_centers)
        dist = np.linalg.norm(mapped - dst_centers, axis=1)
        ok = dist < ransac.inlier_threshold
        # rotation-consistency gate: R_dst ~ R_src @ T.R^T
        for k in np.nonzero(ok)[0]:
            R_err = dst_R[k] @ T.R @ src_R[k].T
            if rotation_angle(R_err) > ROTATION_GATE_RAD:
                ok[k] = False
        count = int(ok.sum())
        if count < 3:
            continue
        rms = float(np.sqrt((dist[ok] ** 2).mean()))
        if count > best_count or (count == best_count and rms < best_rms):
            best_count, best_rms, best_inliers = count, rms, ok.copy()

    if best_inliers is None:
        raise InsufficientCorrespondenceError("no valid RANSAC sample succeeded")
    T = umeyama_similarity(src_centers[best_inliers], dst_centers[best_inliers])
    report = MergeReport(transform=T, shared_cameras=n, inliers=best_count)
    return T, report


def merge_tracks(
    a: SparseMap, b_aligned: SparseMap, pixel_gate: float = 4.0
) -> tuple[SparseMap, MergeReport]:
    """Union two same-frame maps, fusing tracks that share observations.

    Observations of the same camera within ``pixel_gate`` pixels link their
    points; linked groups fuse into one point at the median-per-axis position
    with the union of observations. Observations whose reprojection error
    exceeds the gate are removed, and points left with fewer than two
    observations are dropped.
    """
    merged = SparseMap()
    for cid in sorted(set(a.cameras) | set(b_aligned.cameras)):
        cam = a.cameras.get(cid) or b_aligned.cameras[cid]
        merged.add_camera(cam)

    # global point table: (map_tag, pid) -> handle
    entries: list[tuple[int, int]] = [(0, pid) for pid in sorted(a.points)]
    entries += [(1, pid) for pid in sorted(b_aligned.points)]
    handle = {key: k for k, key in enumerate(entries)}
    maps = (a, b_aligned)

    parent = list(range(len(entries)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x: int, y: int) -> None:
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    # per-camera observation tables
    shared_cams = sorted(set(a.cameras) & set(b_aligned.cameras))
    obs_by_cam_a: dict[int, list[tuple[np.ndarray, int]]] = {c: [] for c in shared_cams}
    obs_by_cam_b: dict[int, list[tuple[np.ndarray, int]]] = {c: [] for c in shared_cams}
    for tag, table in ((0, a), (1, b_aligned)):
        dest = obs_by_cam_a if tag == 0 else obs_by_cam_b
        for pid in sorted(table.tracks):
            for cid, pix in table.tracks[pid]:
                if cid in dest:
                    dest[cid].append((pix, handle[(tag, pid)]))

    merged_links = 0
    for cid in shared_cams:
        rows_a, rows_b = obs_by_cam_a[cid], obs_by_cam_b[cid]
        if not rows_a or not rows_b:
            continue
        pix_a = np.stack([r[0] for r in rows_a])
        tree = cKDTree(pix_a)
        for pix, hb in rows_b:
            dist, j = tree.query(pix, k=1)
            if dist <= pixel_gate:
                ha = rows_a[j][1]
                if find(ha) != find(hb):
                    merged_links += 1
                union(ha, hb)

    # gather fused groups
    groups: dict[int, list[int]] = {}
    for k in range(len(entries)):
        groups.setdefault(find(k), []).append(k)

    removed = 0
    next_pid = 0
    for root in sorted(groups):
        members = groups[root]
        positions = np.stack([maps[entries[k][0]].points[entries[k][1]] for k in members])
        fused = np.median(positions, axis=0)
        obs: list[tuple[int, np.ndarray]] = []
        seen_px = set()
        for k in members:
            tag, pid = entries[k]
            for cid, pix in maps[tag].tracks[pid]:
                key = (cid, round(float(pix[0]), 9), round(float(pix[1]), 9))
                if key in seen_px:
                    continue
                seen_px.add(key)
                obs.append((cid, pix))
        # reprojection gate on the fused position
        kept = []
        for cid, pix in obs:
            p, _, valid = project(merged.cameras[cid], fused)
            if valid and np.linalg.norm(p - pix) <= pixel_gate:
                kept.append((cid, pix))
            else:
                removed += 1
        if len(kept) < 2:
            removed += len(kept)
            continue
        merged.add_point(next_pid, fused, kept)
        next_pid += 1

    errs = merged.reprojection_errors()
    report = MergeReport(
        merged_tracks=merged_links,
        removed_observations=removed,
        mean_reprojection_error=float(errs.mean()) if len(errs) else 0.0,
    )
    return merged, report


def merge_pair(
    source: SparseMap,
    target: SparseMap,
    ransac: RansacConfig | None = None,
    pixel_gate: float = 4.0,
) -> tuple[SparseMap, MergeReport]:
    """Align source onto target and fuse; cross-component pairs (no shared
    cameras) are concatenated without alignment."""
    shared = sorted(set(source.cameras) & set(target.cameras))
    if len(shared) >= 3:
        T, rep = estimate_sim3(source, target, [(i, i) for i in shared], ransac)
        aligned = apply_sim3(source, T)
    else:
        T, rep = Sim3Transform.identity(), MergeReport(shared_cameras=len(shared))
        aligned = source
    # keep target cameras authoritative for shared ids
    stripped = SparseMap()
    for cid in sorted(aligned.cameras):
        if cid not in target.cameras:
            stripped.add_camera(aligned.cameras[cid])
    for cid in sorted(target.cameras):
        stripped.add_camera(target.cameras[cid])
    # reattach aligned points/tracks
    for pid in sorted(aligned.points):
        track = [
            (cid, pix)
            for cid, pix in aligned.tracks[pid]
            if cid in stripped.cameras
        ]
        stripped.add_point(pid, aligned.points[pid], track)
    merged, mrep = merge_tracks(target, stripped, pixel_gate)
    mrep.transform = rep.transform
    mrep.shared_cameras = rep.shared_cameras
    mrep.inliers = rep.inliers
    return merged, mrep
