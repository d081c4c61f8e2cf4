"""Stage orchestration: file layout, config, resumability, worker pool.

Every stage reads and writes only documented files under the stage
directory, records a manifest (input hashes + its config block + seed) and
is skipped on rerun when the manifest matches. Per-partition stages (align,
fuse, refine) fan out over a process pool; results are keyed by partition,
so the output is bit-identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import synthetic
from .camera import Camera
from .camerarank import RankingConfig, rank_cameras
from .densealign import AlignConfig, coarse_scale_align, refine_points
from .denseview import (
    DenseView,
    MatchSet,
    read_dense_view,
    read_matches,
    write_dense_view,
    write_matches,
)
from .exceptions import StageError
from .fusion import TSDFVolume, extract_surface, fill_unobserved, tsdf_integrate, write_volume
from .halfedge import HalfEdgeMesh
from .mapmerge import RansacConfig, merge_pair
from .metrics import geometry_prf, mesh_quality, write_quality_report
from .partition import (
    Partition,
    PlaneRansacConfig,
    build_partitions,
    fit_support_plane,
    read_partitions,
    refine_orientation,
    write_partitions,
)
from .plyio import read_ply, write_ply
from .rasters import read_raster, write_raster
from .refine import RefineConfig, refine
from .sparsemap import SparseMap, read_sparse_map, write_sparse_map
from .stitch import stitch_pair
from .viewgraph import (
    build_similarity_graph,
    merge_schedule,
    read_clusters,
    read_schedule,
    slpa_cluster,
    write_clusters,
    write_schedule,
)

logger = logging.getLogger(__name__)

STAGES = [
    "synth", "cluster", "merge-maps", "partition", "rank",
    "align", "fuse", "refine", "stitch", "metrics",
]

DEFAULT_CONFIG = {
    "seed": 0,
    "workers": 1,
    "scene": {
        "kind": "mini-city",
        "rows": 3,
        "cols": 5,
        "height": 14.0,
        "focal": 110.0,
        "size": 96,
        "gt_samples": 40000,
        "depth_noise": 0.0,
    },
    "cluster": {
        "tau": 0.6,
        "iterations": 50,
        "membership_threshold": 0.3,
        "min_overlap": 8,
    },
    "merge_maps": {
        "points_per_cluster": 500,
        "pixel_noise": 0.0,
        "ransac_iterations": 500,
        "inlier_threshold_rel": 0.01,
        "pixel_gate": 4.0,
        "warp_clusters": True,
    },
    "partition": {
        "rows": 1,
        "cols": 2,
        "alpha_u": 0.2,
        "alpha_v": 0.0,
        "plane_iterations": 300,
        "plane_threshold_rel": 0.02,
        "angular_resolution_deg": 0.5,
    },
    "rank": {
        "tau_cov": 0.05,
        "mu_rot_deg": 15.0,
        "sigma_rot_deg": 10.0,
        "w_rot": 1.0,
        "w_overlap": 1.0,
        "mu_triang_deg": 10.0,
        "sigma_triang_deg": 8.0,
        "sigma_cent": 0.5,
        "w_triang": 1.0,
        "w_cent": 1.0,
        "top_k_pairs": 5,
        "top_m_cameras": 30,
    },
    "align": {
        "lambda1": 0.5,
        "lambda2": 0.5,
        "stage1_iterations": 150,
        "stage1_step": 0.05,
        "stage2_iterations": 200,
        "stage2_step_rel": 1e-3,
    },
    "fuse": {
        "voxel_rel": 0.0078125,  # scene diameter / 128
        "truncation_voxels": 4.0,
        "min_weight": 1.0,
        "min_component_faces": 30,
        "volume_margin_rel": 0.02,
        "fill_passes": 10,
    },
    "refine": {
        "iterations": 120,
        "step_size": 0.1,
        "theta0": 0.3,
        "p_min": 2.0,
        "p_max": 40.0,
        "nu_ref": 0.3,
        "tau_collapse": 0.5,
        "tau_split": 1.5,
        "k1": 4.0,
        "k2": 10.0,
        "lambda_n": 1.0,
        "lambda_s": 1.0,
        "laplacian_weight": 0.02,
        "vertex_cap": 0,
        "remesh_interval": 1,
    },
    "stitch": {"weld_eps_factor": 0.5, "source": "refine"},
    "metrics": {
        "theta_lo_deg": 15.0,
        "theta_hi_deg": 150.0,
        "tau_rel": 0.05,
        "samples": 20000,
    },
}


def resolve_config(user: dict | None) -> dict:
    """Materialize defaults; unknown keys are rejected."""
    def merge(defaults, overrides, path):
        out = dict(defaults)
        for key, val in (overrides or {}).items():
            if key not in defaults:
                raise StageError("config", f"unknown config key {'.'.join(path + [key])!r}")
            if isinstance(defaults[key], dict):
                if not isinstance(val, dict):
                    raise StageError("config", f"{'.'.join(path + [key])} must be a table")
                out[key] = merge(defaults[key], val, path + [key])
            else:
                out[key] = type(defaults[key])(val) if defaults[key] is not None else val
        return out

    return merge(DEFAULT_CONFIG, user or {}, [])


def stage_seed(global_seed: int, stage: str, key: str = "") -> int:
    digest = hashlib.sha256(f"{global_seed}|{stage}|{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 31)


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(inputs: list[str], cfg_block, seed: int) -> dict:
    return {
        "inputs": {os.path.basename(p): _hash_file(p) for p in sorted(inputs)},
        "config": cfg_block,
        "seed": seed,
    }


def _stage_fresh(stage_dir: str, manifest: dict) -> bool:
    path = os.path.join(stage_dir, ".manifest.json")
    if not os.path.exists(path):
        return False
    try:
        with open(path) as fh:
            return json.load(fh) == json.loads(json.dumps(manifest))
    except (OSError, json.JSONDecodeError):
        return False


def _write_manifest(stage_dir: str, manifest: dict) -> None:
    with open(os.path.join(stage_dir, ".manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


class PipelineRun:
    """File-based pipeline over a stage directory."""

    def __init__(self, stage_dir: str, config: dict | None = None,
                 seed: int | None = None, workers: int | None = None):
        self.stage_dir = str(stage_dir)
        self.config = resolve_config(config)
        if seed is not None:
            self.config["seed"] = int(seed)
        if workers is not None:
            self.config["workers"] = int(workers)
        os.makedirs(self.stage_dir, exist_ok=True)
        with open(os.path.join(self.stage_dir, "resolved_config.json"), "w") as fh:
            json.dump(self.config, fh, indent=1, sort_keys=True)

    # -- helpers ---------------------------------------------------------------

    def path(self, *parts) -> str:
        p = os.path.join(self.stage_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def dir(self, *parts) -> str:
        p = os.path.join(self.stage_dir, *parts)
        os.makedirs(p, exist_ok=True)
        return p

    def _require(self, stage: str, *paths) -> None:
        for p in paths:
            if not os.path.exists(p):
                raise StageError(stage, f"missing input {p}")

    # -- stages ------------------------------------------------------------------

    def run_stage(self, stage: str) -> None:
        runner = {
            "synth": self.stage_synth,
            "cluster": self.stage_cluster,
            "merge-maps": self.stage_merge_maps,
            "partition": self.stage_partition,
            "rank": self.stage_rank,
            "align": self.stage_align,
            "fuse": self.stage_fuse,
            "refine": self.stage_refine,
            "stitch": self.stage_stitch,
            "metrics": self.stage_metrics,
        }[stage]
        runner()

    def run_all(self) -> None:
        for stage in STAGES:
            self.run_stage(stage)

    def stage_synth(self) -> None:
        cfg = self.config["scene"]
        out = self.dir("scene")
        manifest = _manifest([], cfg, stage_seed(self.config["seed"], "synth"))
        if _stage_fresh(out, manifest):
            logger.info("synth: up to date")
            return
        if cfg["kind"] == "mini-city":
            scene = synthetic.mini_city_scene(
                rows=cfg["rows"], cols=cfg["cols"], height=cfg["height"],
                f=cfg["focal"], size=cfg["size"],
            )
        elif cfg["kind"] == "bumps":
            scene = synthetic.bumps_scene(f=cfg["focal"], size=cfg["size"])
        else:
            raise StageError("synth", f"unknown scene kind {cfg['kind']!r}")
        if cfg["depth_noise"] > 0:
            # multiplicative depth noise (per-view seeded): the dense-depth
            # stand-in is noisy while normals/silhouettes stay clean, the
            # situation the alignment/refinement stages exist for
            for cid in sorted(scene.views):
                v = scene.views[cid]
                nrng = np.random.default_rng(
                    stage_seed(self.config["seed"], "synth", f"noise{cid}")
                )
                noisy = np.where(
                    v.depth > 0,
                    v.depth * (1.0 + cfg["depth_noise"] * nrng.normal(size=v.depth.shape)),
                    v.depth,
                )
                scene.views[cid] = synthetic.DenseView(cid, noisy, v.normal, v.silhouette)
        write_ply(self.path("scene", "gt_mesh.ply"), scene.gt_mesh.vertices, scene.gt_mesh.faces)
        gt_pts = scene.gt_points(cfg["gt_samples"], seed=stage_seed(self.config["seed"], "synth", "gt"))
        write_ply(self.path("scene", "gt_points.ply"), gt_pts)
        cams = SparseMap()
        for cid in sorted(scene.cameras):
            cams.add_camera(scene.cameras[cid])
        write_sparse_map(cams, self.path("scene", "cameras.txt"))
        views_dir = self.dir("scene", "views")
        for cid in sorted(scene.views):
            write_dense_view(views_dir, scene.views[cid])
        match_dir = self.dir("scene", "matches")
        for ms in scene.matches:
            write_matches(
                os.path.join(match_dir, f"match_{ms.view_a:05d}_{ms.view_b:05d}.bin"), ms
            )
        ids = sorted(scene.descriptors)
        if ids:
            desc = np.stack([scene.descriptors[i] for i in ids]).astype(np.float32)
            write_raster(self.path("scene", "descriptors.raster"), desc, "descriptor")
            with open(self.path("scene", "descriptor_ids.txt"), "w") as fh:
                fh.write("\n".join(str(i) for i in ids) + "\n")
        with open(self.path("scene", "scene.json"), "w") as fh:
            json.dump(
                {"kind": cfg["kind"], "structures": scene.gt_structures,
                 "n_cameras": len(scene.cameras)},
                fh,
            )
        _write_manifest(out, manifest)
        logger.info("synth: %d cameras, %d matches", len(scene.cameras), len(scene.matches))

    def _load_scene_cameras(self) -> dict[int, Camera]:
        cams = read_sparse_map(os.path.join(self.stage_dir, "scene", "cameras.txt"))
        return dict(cams.cameras)

    def _load_descriptors(self) -> dict[int, np.ndarray]:
        data, kind = read_raster(os.path.join(self.stage_dir, "scene", "descriptors.raster"))
        ids = [
            int(line)
            for line in open(os.path.join(self.stage_dir, "scene", "descriptor_ids.txt"))
            if line.strip()
        ]
        return {i: np.asarray(data[k], dtype=np.float64) for k, i in enumerate(ids)}

    def stage_cluster(self) -> None:
        cfg = self.config["cluster"]
        scene_dir = os.path.join(self.stage_dir, "scene")
        self._require("cluster", os.path.join(scene_dir, "descriptors.raster"))
        out = self.dir("cluster")
        seed = stage_seed(self.config["seed"], "cluster")
        manifest = _manifest(
            [os.path.join(scene_dir, "descriptors.raster")], cfg, seed
        )
        if _stage_fresh(out, manifest):
            logger.info("cluster: up to date")
            return
        descriptors = self._load_descriptors()
        graph = build_similarity_graph(descriptors, cfg["tau"])
        clusters = slpa_cluster(
            graph, cfg["iterations"], cfg["membership_threshold"], cfg["min_overlap"], seed
        )
        schedule = merge_schedule(clusters)
        write_clusters(clusters, self.path("cluster", "clusters.txt"))
        write_schedule(schedule, self.path("cluster", "schedule.txt"))
        _write_manifest(out, manifest)
        logger.info(
            "cluster: %d communities, base %d", len(clusters.communities), schedule.base
        )

    def stage_merge_maps(self) -> None:
        cfg = self.config["merge_maps"]
        cl_path = os.path.join(self.stage_dir, "cluster", "clusters.txt")
        sc_path = os.path.join(self.stage_dir, "cluster", "schedule.txt")
        self._require("merge-maps", cl_path, sc_path)
        out = self.dir("maps")
        seed = stage_seed(self.config["seed"], "merge-maps")
        manifest = _manifest([cl_path, sc_path], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("merge-maps: up to date")
            return
        clusters = read_clusters(cl_path)
        schedule = read_schedule(sc_path)
        scene = self._reload_scene()
        rng = np.random.default_rng(seed)
        maps: dict[int, SparseMap] = {}
        for cid in sorted(clusters.communities):
            warp = None
            if cfg["warp_clusters"] and cid != schedule.base:
                warp = synthetic.random_sim3(rng)
            maps[cid] = synthetic.synthetic_sparse_map(
                scene,
                sorted(clusters.communities[cid]),
                n_points=cfg["points_per_cluster"],
                seed=stage_seed(self.config["seed"], "merge-maps", str(cid)),
                pixel_noise=cfg["pixel_noise"],
                warp=warp,
            )
            write_sparse_map(maps[cid], self.path("maps", f"cluster_{cid:03d}.txt"))
        log_lines = []
        current = {cid: maps[cid] for cid in maps}
        for src, dst in schedule.merge_order:
            diameter = max(current[dst].scene_diameter(), 1e-6)
            ransac = RansacConfig(
                iterations=cfg["ransac_iterations"],
                inlier_threshold=cfg["inlier_threshold_rel"] * diameter,
                seed=stage_seed(self.config["seed"], "merge-maps", f"{src}->{dst}"),
            )
            merged, report = merge_pair(
                current[src], current[dst], ransac, cfg["pixel_gate"]
            )
            log_lines.append(f"merge {src} -> {dst}: {report.summary()}")
            current[dst] = merged
            del current[src]
        final = current[schedule.base]
        write_sparse_map(final, self.path("maps", "merged.txt"))
        with open(self.path("maps", "merge_log.txt"), "w") as fh:
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))
        _write_manifest(out, manifest)
        logger.info(
            "merge-maps: %d clusters -> %d cameras, %d points",
            len(maps), len(final.cameras), len(final.points),
        )

    def _reload_scene(self) -> synthetic.SyntheticScene:
        """Rebuild a scene view-bundle from the synth stage files."""
        scene_dir = os.path.join(self.stage_dir, "scene")
        cams = self._load_scene_cameras()
        views = {cid: read_dense_view(os.path.join(scene_dir, "views"), cid) for cid in cams}
        verts, faces = read_ply(os.path.join(scene_dir, "gt_mesh.ply"))
        with open(os.path.join(scene_dir, "scene.json")) as fh:
            meta = json.load(fh)
        matches = []
        mdir = os.path.join(scene_dir, "matches")
        if os.path.isdir(mdir):
            for name in sorted(os.listdir(mdir)):
                if name.endswith(".bin"):
                    matches.append(read_matches(os.path.join(mdir, name)))
        return synthetic.SyntheticScene(
            meta["kind"], HalfEdgeMesh(verts, faces), cams, views, matches, {},
            meta["structures"],
        )

    def stage_partition(self) -> None:
        cfg = self.config["partition"]
        map_path = os.path.join(self.stage_dir, "maps", "merged.txt")
        self._require("partition", map_path)
        out = self.dir("partition")
        seed = stage_seed(self.config["seed"], "partition")
        manifest = _manifest([map_path], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("partition: up to date")
            return
        merged = read_sparse_map(map_path)
        diameter = max(merged.scene_diameter(), 1e-6)
        plane = fit_support_plane(
            merged,
            PlaneRansacConfig(
                iterations=cfg["plane_iterations"],
                inlier_threshold=cfg["plane_threshold_rel"] * diameter,
                seed=seed,
            ),
        )
        plane = refine_orientation(plane, merged, cfg["angular_resolution_deg"])
        parts = build_partitions(
            plane, merged, cfg["rows"], cfg["cols"], cfg["alpha_u"], cfg["alpha_v"]
        )
        write_partitions(parts, plane, self.path("partition", "partitions.txt"))
        _write_manifest(out, manifest)
        logger.info(
            "partition: %dx%d grid, %s points per cell",
            cfg["rows"], cfg["cols"], [len(p.point_ids) for p in parts],
        )

    def _ranking_config(self) -> RankingConfig:
        r = self.config["rank"]
        return RankingConfig(
            tau_cov=r["tau_cov"],
            mu_rot=np.deg2rad(r["mu_rot_deg"]),
            sigma_rot=np.deg2rad(r["sigma_rot_deg"]),
            w_rot=r["w_rot"],
            w_overlap=r["w_overlap"],
            mu_triang=np.deg2rad(r["mu_triang_deg"]),
            sigma_triang=np.deg2rad(r["sigma_triang_deg"]),
            sigma_cent=r["sigma_cent"],
            w_triang=r["w_triang"],
            w_cent=r["w_cent"],
            top_k_pairs=r["top_k_pairs"],
            top_m_cameras=r["top_m_cameras"],
        )

    def stage_rank(self) -> None:
        part_path = os.path.join(self.stage_dir, "partition", "partitions.txt")
        map_path = os.path.join(self.stage_dir, "maps", "merged.txt")
        self._require("rank", part_path, map_path)
        out = self.dir("rank")
        seed = stage_seed(self.config["seed"], "rank")
        manifest = _manifest([part_path, map_path], self.config["rank"], seed)
        if _stage_fresh(out, manifest):
            logger.info("rank: up to date")
            return
        parts, _plane = read_partitions(part_path)
        merged = read_sparse_map(map_path)
        cfg = self._ranking_config()
        with open(self.path("rank", "rank.txt"), "w") as fh:
            fh.write("# urbanmesh rank v1\n")
            for part in parts:
                table, top = rank_cameras(part, merged, cfg)
                fh.write(
                    f"top {part.row} {part.col} " + " ".join(map(str, top)) + "\n"
                )
                for cid, score in table.ranked():
                    fh.write(f"score {part.row} {part.col} {cid} {score:.17g}\n")
        _write_manifest(out, manifest)
        logger.info("rank: wrote rankings for %d partitions", len(parts))

    def read_rank(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        with open(os.path.join(self.stage_dir, "rank", "rank.txt")) as fh:
            for line in fh:
                parts = line.split()
                if parts and parts[0] == "top":
                    out[(int(parts[1]), int(parts[2]))] = [int(x) for x in parts[3:]]
        return out

    # -- per-partition stages -------------------------------------------------------

    def _partition_tasks(self):
        parts, plane = read_partitions(
            os.path.join(self.stage_dir, "partition", "partitions.txt")
        )
        ranks = self.read_rank()
        return parts, plane, ranks

    def _pool_map(self, fn, tasks: list):
        workers = max(int(self.config["workers"]), 1)
        if workers == 1 or len(tasks) <= 1:
            return [fn(t) for t in tasks]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))

    def stage_align(self) -> None:
        cfg = self.config["align"]
        rank_path = os.path.join(self.stage_dir, "rank", "rank.txt")
        self._require("align", rank_path)
        out = self.dir("align")
        seed = stage_seed(self.config["seed"], "align")
        manifest = _manifest([rank_path], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("align: up to date")
            return
        parts, _plane, ranks = self._partition_tasks()
        tasks = []
        for part in parts:
            if part.empty:
                continue
            tasks.append((self.stage_dir, part.row, part.col, ranks[part.key], cfg))
        results = self._pool_map(_align_partition_task, tasks)
        with open(self.path("align", "scales.txt"), "w") as fh:
            for (r, c), scales in sorted(zip([(t[1], t[2]) for t in tasks], results)):
                for vid in sorted(scales):
                    fh.write(f"scale {r} {c} {vid} {scales[vid]:.17g}\n")
        _write_manifest(out, manifest)
        logger.info("align: %d partitions", len(tasks))

    def stage_fuse(self) -> None:
        cfg = self.config["fuse"]
        align_dir = os.path.join(self.stage_dir, "align")
        self._require("fuse", os.path.join(align_dir, "scales.txt"))
        out = self.dir("fuse")
        seed = stage_seed(self.config["seed"], "fuse")
        manifest = _manifest([os.path.join(align_dir, "scales.txt")], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("fuse: up to date")
            return
        parts, _plane, ranks = self._partition_tasks()
        tasks = [
            (self.stage_dir, part.row, part.col, ranks[part.key], cfg)
            for part in parts
            if not part.empty
        ]
        stats = self._pool_map(_fuse_partition_task, tasks)
        _write_manifest(out, manifest)
        logger.info("fuse: %s", stats)

    def stage_refine(self) -> None:
        cfg = self.config["refine"]
        fuse_dir = os.path.join(self.stage_dir, "fuse")
        self._require("refine", os.path.join(fuse_dir, ".manifest.json"))
        out = self.dir("refine")
        seed = stage_seed(self.config["seed"], "refine")
        manifest = _manifest([os.path.join(fuse_dir, ".manifest.json")], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("refine: up to date")
            return
        parts, _plane, ranks = self._partition_tasks()
        tasks = [
            (self.stage_dir, part.row, part.col, ranks[part.key], cfg)
            for part in parts
            if not part.empty
        ]
        stats = self._pool_map(_refine_partition_task, tasks)
        _write_manifest(out, manifest)
        logger.info("refine: %s", stats)

    def stage_stitch(self) -> None:
        cfg = self.config["stitch"]
        refine_dir = os.path.join(self.stage_dir, "refine")
        dep_dir = refine_dir if cfg["source"] == "refine" else os.path.join(self.stage_dir, "fuse")
        self._require("stitch", os.path.join(dep_dir, ".manifest.json"))
        out = self.dir("stitch")
        seed = stage_seed(self.config["seed"], "stitch")
        manifest = _manifest([os.path.join(dep_dir, ".manifest.json")], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("stitch: up to date")
            return
        parts, plane, _ranks = self._partition_tasks()
        source_dir = refine_dir if cfg["source"] == "refine" else os.path.join(self.stage_dir, "fuse")
        grid: dict[tuple[int, int], tuple[HalfEdgeMesh, object]] = {}
        for part in parts:
            ply = os.path.join(source_dir, f"part_{part.row:02d}_{part.col:02d}.ply")
            if not os.path.exists(ply):
                continue
            verts, faces = read_ply(ply)
            grid[part.key] = (HalfEdgeMesh(verts, faces), part.volume)
        if not grid:
            raise StageError("stitch", "no refined partition meshes found")
        log_lines = []
        # stitch each row left-to-right, then rows top to bottom
        rows = sorted({k[0] for k in grid})
        row_results = []
        for r in rows:
            keys = sorted(k for k in grid if k[0] == r)
            mesh, volume = grid[keys[0]]
            for k in keys[1:]:
                m2, v2 = grid[k]
                mesh, volume, report = stitch_pair(mesh, volume, m2, v2)
                log_lines.append(f"stitch row {r} += {k}: {report.summary()}")
            row_results.append((mesh, volume))
        mesh, volume = row_results[0]
        for m2, v2 in row_results[1:]:
            mesh, volume, report = stitch_pair(mesh, volume, m2, v2)
            log_lines.append(f"stitch rows: {report.summary()}")
        write_ply(self.path("stitch", "final_mesh.ply"), mesh.vertices, mesh.faces)
        with open(self.path("stitch", "seam_log.txt"), "w") as fh:
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))
        _write_manifest(out, manifest)
        logger.info("stitch: final mesh %d verts %d faces", mesh.n_vertices, mesh.n_faces)

    def stage_metrics(self) -> None:
        cfg = self.config["metrics"]
        final_path = os.path.join(self.stage_dir, "stitch", "final_mesh.ply")
        gt_path = os.path.join(self.stage_dir, "scene", "gt_points.ply")
        self._require("metrics", final_path, gt_path)
        out = self.dir("metrics")
        seed = stage_seed(self.config["seed"], "metrics")
        manifest = _manifest([final_path, gt_path], cfg, seed)
        if _stage_fresh(out, manifest):
            logger.info("metrics: up to date")
            return
        verts, faces = read_ply(final_path)
        mesh = HalfEdgeMesh(verts, faces)
        report = mesh_quality(mesh, cfg["theta_lo_deg"], cfg["theta_hi_deg"])
        write_quality_report(report, self.path("metrics", "quality.txt"))
        gt_pts, _ = read_ply(gt_path)
        diag = float(np.linalg.norm(gt_pts.max(axis=0) - gt_pts.min(axis=0)))
        score = geometry_prf(
            mesh, gt_pts, threshold=cfg["tau_rel"] * diag,
            samples=cfg["samples"], seed=seed,
        )
        with open(self.path("metrics", "prf.txt"), "w") as fh:
            fh.write("# urbanmesh prf v1\n")
            fh.write(f"precision {score.precision:.17g}\n")
            fh.write(f"recall {score.recall:.17g}\n")
            fh.write(f"f1 {score.f1:.17g}\n")
            fh.write(f"threshold {score.threshold:.17g}\n")
        _write_manifest(out, manifest)
        logger.info("metrics: %s | F1=%.4f", report.summary(), score.f1)


# --- per-partition workers (top level for pickling) -----------------------------------


def _partition_views_and_matches(stage_dir, cam_ids):
    scene_views = os.path.join(stage_dir, "scene", "views")
    cams_map = read_sparse_map(os.path.join(stage_dir, "scene", "cameras.txt"))
    cams = {cid: cams_map.cameras[cid] for cid in cam_ids}
    views = {cid: read_dense_view(scene_views, cid) for cid in cam_ids}
    matches = []
    mdir = os.path.join(stage_dir, "scene", "matches")
    wanted = set(cam_ids)
    if os.path.isdir(mdir):
        for name in sorted(os.listdir(mdir)):
            if not name.endswith(".bin"):
                continue
            ms = read_matches(os.path.join(mdir, name))
            if ms.view_a in wanted and ms.view_b in wanted:
                matches.append(ms)
    return cams, views, matches


def _align_partition_task(task):
    stage_dir, row, col, cam_ids, cfg = task
    cams, views, matches = _partition_views_and_matches(stage_dir, cam_ids)
    acfg = AlignConfig(
        lambda1=cfg["lambda1"],
        lambda2=cfg["lambda2"],
        stage1_iterations=cfg["stage1_iterations"],
        stage1_step=cfg["stage1_step"],
        stage2_iterations=cfg["stage2_iterations"],
        stage2_step_rel=cfg["stage2_step_rel"],
    )
    scales = coarse_scale_align(views, cams, matches, acfg)
    result = refine_points(views, cams, matches, scales, acfg)
    out_dir = os.path.join(stage_dir, "align", f"part_{row:02d}_{col:02d}")
    os.makedirs(out_dir, exist_ok=True)
    for vid, view in sorted(result.updated_views.items()):
        write_dense_view(out_dir, view)
    return dict(scales.scales)


def _fuse_partition_task(task):
    stage_dir, row, col, cam_ids, cfg = task
    parts, plane = read_partitions(os.path.join(stage_dir, "partition", "partitions.txt"))
    part = next(p for p in parts if (p.row, p.col) == (row, col))
    cams_map = read_sparse_map(os.path.join(stage_dir, "scene", "cameras.txt"))
    aligned_dir = os.path.join(stage_dir, "align", f"part_{row:02d}_{col:02d}")
    views = {cid: read_dense_view(aligned_dir, cid) for cid in cam_ids}
    cams = {cid: cams_map.cameras[cid] for cid in cam_ids}

    vol = part.volume
    # integrate over the unpadded data window (the padded clip volume would
    # add unobservable border voxels that only grow fill skirts)
    u0, u1, v0, v1 = part.window
    corners = []
    for u in (u0, u1):
        for v in (v0, v1):
            for h in vol.h_range:
                corners.append(plane.from_plane_coords(np.array([u, v]), h))
    corners = np.stack(corners)
    margin = cfg["volume_margin_rel"] * float(np.linalg.norm(corners.max(0) - corners.min(0)))
    lo = corners.min(axis=0) - margin
    hi = corners.max(axis=0) + margin
    diameter = float(np.linalg.norm(hi - lo))
    voxel = max(cfg["voxel_rel"] * diameter, 1e-6)
    volume = TSDFVolume.for_bounds(lo, hi, voxel, cfg["truncation_voxels"])
    for cid in sorted(views):
        tsdf_integrate(volume, views[cid], cams[cid])
    if cfg["fill_passes"] > 0:
        fill_unobserved(volume, cfg["fill_passes"], fill_weight=cfg["min_weight"])
    write_volume(os.path.join(stage_dir, "fuse", f"part_{row:02d}_{col:02d}.vol"), volume)
    mesh = extract_surface(
        volume, cfg["min_weight"], min_component_faces=cfg["min_component_faces"]
    )
    write_ply(
        os.path.join(stage_dir, "fuse", f"part_{row:02d}_{col:02d}.ply"),
        mesh.vertices, mesh.faces,
    )
    return {"partition": (row, col), "vertices": mesh.n_vertices, "faces": mesh.n_faces}


def _refine_partition_task(task):
    stage_dir, row, col, cam_ids, cfg = task
    fuse_ply = os.path.join(stage_dir, "fuse", f"part_{row:02d}_{col:02d}.ply")
    verts, faces = read_ply(fuse_ply)
    mesh = HalfEdgeMesh(verts, faces)
    cams_map = read_sparse_map(os.path.join(stage_dir, "scene", "cameras.txt"))
    aligned_dir = os.path.join(stage_dir, "align", f"part_{row:02d}_{col:02d}")
    targets = {cid: read_dense_view(aligned_dir, cid) for cid in cam_ids}
    cams = {cid: cams_map.cameras[cid] for cid in cam_ids}

    # restrict each view's loss domain to target pixels whose geometry lies in
    # this partition's volume (plus pixels with no valid target depth), so the
    # partition border feels no spurious silhouette pull
    parts, plane = read_partitions(os.path.join(stage_dir, "partition", "partitions.txt"))
    part = next(p for p in parts if (p.row, p.col) == (row, col))
    from .camera import backproject, pixel_centers

    for cid, view in targets.items():
        h, w = view.shape
        valid = view.depth > 0
        domain = np.ones((h, w), dtype=bool)
        if valid.any():
            pix = pixel_centers(h, w)[valid]
            pts = backproject(cams[cid], pix, view.depth[valid])
            # zero margin: pixels beyond the partition volume must not vote,
            # otherwise coverage bookkeeping swamps the geometric signal
            domain[valid] = part.volume.contains(pts)
        targets[cid] = DenseView(cid, view.depth, view.normal, view.silhouette, domain)
    rcfg = RefineConfig(
        lambda_n=cfg["lambda_n"],
        lambda_s=cfg["lambda_s"],
        laplacian_weight=cfg["laplacian_weight"],
        theta0=cfg["theta0"],
        p_min=cfg["p_min"],
        p_max=cfg["p_max"],
        nu_ref=cfg["nu_ref"],
        tau_collapse=cfg["tau_collapse"],
        tau_split=cfg["tau_split"],
        k1=cfg["k1"],
        k2=cfg["k2"],
        iterations=cfg["iterations"],
        step_size=cfg["step_size"],
        remesh_interval=cfg["remesh_interval"],
        vertex_cap=cfg["vertex_cap"] or None,
    )
    result = refine(
        mesh, cams, targets, rcfg,
        phi_log_path=os.path.join(stage_dir, "refine", f"phi_{row:02d}_{col:02d}.log"),
    )
    write_ply(
        os.path.join(stage_dir, "refine", f"part_{row:02d}_{col:02d}.ply"),
        result.mesh.vertices, result.mesh.faces,
    )
    return {
        "partition": (row, col),
        "phi": result.best_phi,
        "vertices": result.mesh.n_vertices,
    }
