"""Per-partition pair-based camera ranking.

A camera pair is admissible when its in-partition co-visibility ratio clears a
threshold. Each admissible pair carries a prior (Gaussian preference for a
moderate relative rotation times a log-normalized overlap term); per point,
observing pairs are further scored by triangulation-angle quality and
image-plane centrality, the top-K pairs are kept and their scores normalized
into one unit vote that is split equally between the pair's two cameras.
Cameras are ranked by accumulated score and the top M retained.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .camera import project, rotation_angle
from .partition import Partition
from .sparsemap import SparseMap


@dataclass
class RankingConfig:
    tau_cov: float = 0.05
    mu_rot: float = np.deg2rad(15.0)
    sigma_rot: float = np.deg2rad(10.0)
    w_rot: float = 1.0
    w_overlap: float = 1.0
    mu_triang: float = np.deg2rad(10.0)
    sigma_triang: float = np.deg2rad(8.0)
    sigma_cent: float = 0.5
    w_triang: float = 1.0
    w_cent: float = 1.0
    top_k_pairs: int = 5
    top_m_cameras: int = 30
    eps: float = 1e-12

    def __post_init__(self):
        if self.sigma_rot <= 0 or self.sigma_triang <= 0 or self.sigma_cent <= 0:
            raise ValueError("all sigmas must be positive")
        if self.top_k_pairs < 1 or self.top_m_cameras < 1:
            raise ValueError("K and M must be >= 1")
        if min(self.w_rot, self.w_overlap, self.w_triang, self.w_cent) < 0:
            raise ValueError("weights must be >= 0")


@dataclass
class CameraScoreTable:
    scores: dict[int, float]
    # per point id: list of ((i, j), normalized weight) for the retained pairs
    point_votes: dict[int, list[tuple[tuple[int, int], float]]] = field(
        default_factory=dict
    )

    def ranked(self) -> list[tuple[int, float]]:
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))


def admissible_pairs(
    partition: Partition, sparse_map: SparseMap, cfg: RankingConfig
) -> dict[tuple[int, int], int]:
    """Unordered camera pairs with co-visibility ratio >= tau_cov.

    Returns {(i, j): m_ij} with i < j; empty when the partition has no
    sufficiently co-visible pair.
    """
    pids = partition.point_ids
    n_points = len(pids)
    if n_points == 0:
        return {}
    counts: dict[tuple[int, int], int] = {}
    for pid in pids:
        cams = sorted(set(sparse_map.observing_cameras(pid)))
        for i, j in itertools.combinations(cams, 2):
            counts[(i, j)] = counts.get((i, j), 0) + 1
    return {
        pair: m for pair, m in counts.items() if m / n_points >= cfg.tau_cov
    }


def _pair_priors(
    pairs: dict[tuple[int, int], int], sparse_map: SparseMap, cfg: RankingConfig
) -> dict[tuple[int, int], float]:
    if not pairs:
        return {}
    m_max = max(pairs.values())
    priors = {}
    for (i, j), m in pairs.items():
        theta = rotation_angle(sparse_map.cameras[i].R @ sparse_map.cameras[j].R.T)
        p_rot = np.exp(-((theta - cfg.mu_rot) ** 2) / (2.0 * cfg.sigma_rot ** 2))
        if m_max > 0:
            p_overlap = np.log1p(m) / np.log1p(m_max)
        else:
            p_overlap = 1.0
        priors[(i, j)] = float(p_rot ** cfg.w_rot * p_overlap ** cfg.w_overlap)
    return priors


def _normalized_radial_distance(camera, pixel) -> float:
    """Pixel distance from the principal point over half the image diagonal."""
    half_diag = 0.5 * float(np.hypot(camera.width, camera.height))
    return float(np.hypot(pixel[0] - camera.cx, pixel[1] - camera.cy)) / half_diag


def rank_cameras(
    partition: Partition, sparse_map: SparseMap, cfg: RankingConfig
) -> tuple[CameraScoreTable, list[int]]:
    """Accumulate per-point pair votes into camera scores; return the top M.

    Points whose admissible observing-pair set is empty contribute no vote.
    Accumulation runs in ascending point-id order so results are independent
    of any outer parallelization. Returns the score table and at most M
    camera ids sorted by descending score (ties by camera id).
    """
    pairs = admissible_pairs(partition, sparse_map, cfg)
    scores: dict[int, float] = {cid: 0.0 for cid in partition.camera_ids}
    table = CameraScoreTable(scores)
    if not pairs:
        return table, []
    priors = _pair_priors(pairs, sparse_map, cfg)

    for pid in sorted(partition.point_ids):
        P = sparse_map.points[pid]
        obs = {cid: pix for cid, pix in sparse_map.tracks[pid]}
        cams = sorted(obs)
        cand = [
            (i, j)
            for i, j in itertools.combinations(cams, 2)
            if (i, j) in pairs
        ]
        if not cand:
            continue
        scored: list[tuple[float, tuple[int, int]]] = []
        for (i, j) in cand:
            cam_i, cam_j = sparse_map.cameras[i], sparse_map.cameras[j]
            ray_i = cam_i.view_ray(P)
            ray_j = cam_j.view_ray(P)
            alpha = float(np.arccos(np.clip(ray_i @ ray_j, -1.0, 1.0)))
            T = np.exp(-((alpha - cfg.mu_triang) ** 2) / (2.0 * cfg.sigma_triang ** 2))
            pix_i, _, ok_i = project(cam_i, P)
            pix_j, _, ok_j = project(cam_j, P)
            if not (ok_i and ok_j):
                continue
            r_i = _normalized_radial_distance(cam_i, pix_i)
            r_j = _normalized_radial_distance(cam_j, pix_j)
            C_i = np.exp(-(r_i ** 2) / (2.0 * cfg.sigma_cent ** 2))
            C_j = np.exp(-(r_j ** 2) / (2.0 * cfg.sigma_cent ** 2))
            C_ij = np.sqrt(C_i * C_j)
            s = priors[(i, j)] * T ** cfg.w_triang * C_ij ** cfg.w_cent
            scored.append((float(s), (i, j)))
        if not scored:
            continue
        scored.sort(key=lambda kv: (-kv[0], kv[1]))
        kept = scored[: cfg.top_k_pairs]
        total = sum(s for s, _ in kept)
        votes = []
        if total > 0.0:
            for s, pair in kept:
                votes.append((pair, s / (total + cfg.eps)))
        else:
            # all retained scores underflowed: fall back to equal weights so
            # the point still emits one unit of vote
            for _, pair in kept:
                votes.append((pair, 1.0 / len(kept)))
        table.point_votes[pid] = votes
        for (i, j), w in votes:
            scores[i] = scores.get(i, 0.0) + 0.5 * w
            scores[j] = scores.get(j, 0.0) + 0.5 * w

    ranked = table.ranked()
    top = [cid for cid, _ in ranked[: cfg.top_m_cameras]]
    return table, top
