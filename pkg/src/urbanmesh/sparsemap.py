"""Sparse reconstruction container: cameras, 3D points, observation tracks."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, project
from .exceptions import (
    DuplicateIdError,
    InvalidInputError,
    MalformedHeaderError,
    ParseError,
)
from .transforms import Sim3Transform


@dataclass
class SparseMap:
    """Cameras, 3D points, and per-point observation tracks.

    ``points`` maps point id -> (3,) world position.
    ``tracks`` maps point id -> list of (camera_id, (2,) pixel) observations.
    """

    cameras: dict[int, Camera] = field(default_factory=dict)
    points: dict[int, np.ndarray] = field(default_factory=dict)
    tracks: dict[int, list[tuple[int, np.ndarray]]] = field(default_factory=dict)

    def add_camera(self, camera: Camera) -> None:
        if camera.id in self.cameras:
            raise DuplicateIdError(f"camera id {camera.id} already present")
        self.cameras[camera.id] = camera

    def add_point(self, pid: int, position, track=None) -> None:
        if pid in self.points:
            raise DuplicateIdError(f"point id {pid} already present")
        self.points[pid] = np.asarray(position, dtype=np.float64).reshape(3)
        self.tracks[pid] = []
        for cam_id, pix in track or []:
            self.add_observation(pid, cam_id, pix)

    def add_observation(self, pid: int, cam_id: int, pixel) -> None:
        if cam_id not in self.cameras:
            raise InvalidInputError(f"observation references unknown camera {cam_id}")
        if pid not in self.points:
            raise InvalidInputError(f"observation references unknown point {pid}")
        self.tracks[pid].append((cam_id, np.asarray(pixel, dtype=np.float64).reshape(2)))

    def observing_cameras(self, pid: int) -> list[int]:
        return [cam_id for cam_id, _ in self.tracks.get(pid, [])]

    def point_array(self) -> tuple[np.ndarray, np.ndarray]:
        """(ids, (N, 3) positions) in ascending point-id order."""
        ids = np.array(sorted(self.points), dtype=np.int64)
        if len(ids) == 0:
            return ids, np.zeros((0, 3))
        return ids, np.stack([self.points[i] for i in ids])

    def camera_centers(self) -> dict[int, np.ndarray]:
        return {cid: cam.center() for cid, cam in self.cameras.items()}

    def scene_diameter(self) -> float:
        """Diagonal of the axis-aligned bounding box of points and camera centers."""
        pts = [p for p in self.points.values()]
        pts += [c.center() for c in self.cameras.values()]
        if not pts:
            return 0.0
        arr = np.stack(pts)
        return float(np.linalg.norm(arr.max(axis=0) - arr.min(axis=0)))

    def reprojection_errors(self) -> np.ndarray:
        """Pixel reprojection error of every observation, in track order."""
        errs = []
        for pid in sorted(self.tracks):
            X = self.points[pid]
            for cam_id, pix in self.tracks[pid]:
                p, _, valid = project(self.cameras[cam_id], X)
                errs.append(np.linalg.norm(p - pix) if valid else np.inf)
        return np.asarray(errs, dtype=np.float64)

    def validate(self, reprojection_gate: float = 8.0) -> None:
        """Check track references and the reprojection gate.

        Raises
        ------
        InvalidInputError
            On a dangling camera reference, an out-of-bounds observation, or a
            reprojection residual beyond the gate.
        """
        for pid in sorted(self.tracks):
            if pid not in self.points:
                raise InvalidInputError(f"track for unknown point {pid}")
            for cam_id, pix in self.tracks[pid]:
                if cam_id not in self.cameras:
                    raise InvalidInputError(
                        f"point {pid} observed by unknown camera {cam_id}"
                    )
                cam = self.cameras[cam_id]
                p, _, valid = project(cam, self.points[pid])
                if not valid:
                    raise InvalidInputError(
                        f"point {pid} behind camera {cam_id}"
                    )
                if not (
                    -reprojection_gate <= p[0] <= cam.width + reprojection_gate
                    and -reprojection_gate <= p[1] <= cam.height + reprojection_gate
                ):
                    raise InvalidInputError(
                        f"point {pid} projects outside camera {cam_id} bounds"
                    )
                if np.linalg.norm(p - pix) > reprojection_gate:
                    raise InvalidInputError(
                        f"point {pid} fails the {reprojection_gate}px gate in camera {cam_id}"
                    )


def apply_sim3(sparse_map: SparseMap, T: Sim3Transform) -> SparseMap:
    """Transform a map into another frame, preserving all reprojections.

    Points move as x -> s R x + t; camera poses are re-composed so the
    camera-frame point scales uniformly (R' = R_cam R^T, t' = s t_cam - R' t),
    leaving every pixel projection unchanged and scaling depths by s.
    """
    out = SparseMap()
    for cid in sorted(sparse_map.cameras):
        cam = sparse_map.cameras[cid]
        R_new = cam.R @ T.R.T
        t_new = T.scale * cam.t - R_new @ T.t
        out.add_camera(
            Camera(cam.id, cam.K.copy(), R_new, t_new, cam.width, cam.height)
        )
    for pid in sorted(sparse_map.points):
        out.add_point(
            pid,
            T.apply(sparse_map.points[pid]),
            [(cid, pix.copy()) for cid, pix in sparse_map.tracks[pid]],
        )
    return out


# --- structured-text serialization -------------------------------------------------

_MAGIC = "# urbanmesh sparsemap v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_sparse_map(sparse_map: SparseMap, path) -> None:
    """Write a map as line-oriented text; floats round-trip exactly."""
    with open(path, "w") as fh:
        fh.write(_MAGIC + "\n")
        for cid in sorted(sparse_map.cameras):
            c = sparse_map.cameras[cid]
            vals = [c.fx, c.fy, c.cx, c.cy, *c.R.ravel(), *c.t]
            fh.write(
                f"camera {cid} {c.width} {c.height} "
                + " ".join(_fmt(v) for v in vals)
                + "\n"
            )
        for pid in sorted(sparse_map.points):
            p = sparse_map.points[pid]
            fh.write(f"point {pid} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        for pid in sorted(sparse_map.tracks):
            for cid, pix in sparse_map.tracks[pid]:
                fh.write(f"obs {pid} {cid} {_fmt(pix[0])} {_fmt(pix[1])}\n")


def read_sparse_map(path) -> SparseMap:
    """Parse a map written by :func:`write_sparse_map`.

    Raises
    ------
    MalformedHeaderError, ParseError, DuplicateIdError
        On a bad magic line, a malformed record, or a repeated id.
    """
    out = SparseMap()
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != _MAGIC:
            raise MalformedHeaderError(f"{path}: bad magic line {first!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                kind = parts[0]
                if kind == "camera":
                    cid, w, h = int(parts[1]), int(parts[2]), int(parts[3])
                    vals = [float(v) for v in parts[4:]]
                    if len(vals) != 16:
                        raise ValueError("camera record needs 16 floats")
                    fx, fy, cx, cy = vals[:4]
                    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
                    R = np.array(vals[4:13]).reshape(3, 3)
                    t = np.array(vals[13:16])
                    out.add_camera(Camera(cid, K, R, t, w, h))
                elif kind == "point":
                    out.add_point(int(parts[1]), [float(v) for v in parts[2:5]])
                elif kind == "obs":
                    out.add_observation(
                        int(parts[1]), int(parts[2]), [float(parts[3]), float(parts[4])]
                    )
                else:
                    raise ValueError(f"unknown record {kind!r}")
            except DuplicateIdError:
                raise
            except (ValueError, IndexError, InvalidInputError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return out
