"""Dominant-support-plane parameterization and inflated grid partitioning.

The scene is parameterized by one dominant support plane n.x + d = 0 fitted
with RANSAC, an in-plane orthonormal basis rotated to minimize the projected
axis-aligned bounding-box area, and a regular R x C grid of windows inflated
about their centers by (1 + alpha) before point assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateGeometryError, InvalidInputError, MalformedHeaderError, ParseError
from .sparsemap import SparseMap


@dataclass
class PlaneRansacConfig:
    iterations: int = 500
    inlier_threshold: float = 0.1  # meters
    seed: int = 0


@dataclass
class SupportPlane:
    """Unit normal + offset with an in-plane right-handed basis {u, v, n}."""

    normal: np.ndarray
    d: float
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    phi_star: float = 0.0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise InvalidInputError("plane normal must be unit length")
        if abs(float(self.normal @ self.origin) + self.d) > 1e-9:
            raise InvalidInputError("plane origin must satisfy n.o + d = 0")

    def to_plane_coords(self, X) -> np.ndarray:
        """(..., 3) world points -> (..., 2) in-plane (u, v) coordinates."""
        r = np.asarray(X, dtype=np.float64) - self.origin
        return np.stack([r @ self.u, r @ self.v], axis=-1)

    def heights(self, X) -> np.ndarray:
        """Signed distance along the normal."""
        X = np.asarray(X, dtype=np.float64)
        return X @ self.normal + self.d

    def from_plane_coords(self, uv, h=0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        return (
            self.origin
            + uv[..., :1] * self.u
            + uv[..., 1:2] * self.v
            + h[..., None] * self.normal
            if uv.ndim > 1
            else self.origin + uv[0] * self.u + uv[1] * self.v + h * self.normal
        )

    def rotated(self, phi: float) -> "SupportPlane":
        c, s = np.cos(phi), np.sin(phi)
        u_new = c * self.u + s * self.v
        v_new = -s * self.u + c * self.v
        return SupportPlane(self.normal, self.d, self.origin, u_new, v_new, self.phi_star + phi)


@dataclass
class BoundingVolume:
    """Axis-oriented box in plane coordinates: [u0,u1] x [v0,v1] x [h0,h1]."""

    plane: SupportPlane
    u_range: tuple[float, float]
    v_range: tuple[float, float]
    h_range: tuple[float, float]

    def contains(self, X, margin: float = 0.0) -> np.ndarray:
        uv = self.plane.to_plane_coords(np.atleast_2d(X))
        h = self.plane.heights(np.atleast_2d(X))
        return (
            (uv[:, 0] >= self.u_range[0] - margin)
            & (uv[:, 0] <= self.u_range[1] + margin)
            & (uv[:, 1] >= self.v_range[0] - margin)
            & (uv[:, 1] <= self.v_range[1] + margin)
            & (h >= self.h_range[0] - margin)
            & (h <= self.h_range[1] + margin)
        )

    def intersection(self, other: "BoundingVolume") -> "BoundingVolume | None":
        u0 = max(self.u_range[0], other.u_range[0])
        u1 = min(self.u_range[1], other.u_range[1])
        v0 = max(self.v_range[0], other.v_range[0])
        v1 = min(self.v_range[1], other.v_range[1])
        h0 = max(self.h_range[0], other.h_range[0])
        h1 = min(self.h_range[1], other.h_range[1])
        if u0 >= u1 or v0 >= v1 or h0 >= h1:
            return None
        return BoundingVolume(self.plane, (u0, u1), (v0, v1), (h0, h1))


@dataclass
class Partition:
    row: int
    col: int
    window: tuple[float, float, float, float]  # u0, u1, v0, v1
    point_ids: list[int]
    camera_ids: list[int]
    volume: BoundingVolume
    empty: bool = False

    @property
    def key(self) -> tuple[int, int]:
        return (self.row, self.col)


def fit_support_plane(
    sparse_map_or_points, ransac: PlaneRansacConfig | None = None
) -> SupportPlane:
    """RANSAC plane fit with a least-squares refit on the inliers.

    The normal is oriented toward the mean camera center when cameras are
    available, otherwise toward the positive half-space with more points.

    Raises
    ------
    DegenerateGeometryError
        Fewer than 3 points or an all-collinear cloud.
    """
    ransac = ransac or PlaneRansacConfig()
    if isinstance(sparse_map_or_points, SparseMap):
        ids, pts = sparse_map_or_points.point_array()
        cam_centers = [c.center() for c in sparse_map_or_points.cameras.values()]
    else:
        pts = np.asarray(sparse_map_or_points, dtype=np.float64).reshape(-1, 3)
        cam_centers = []
    if len(pts) < 3:
        raise DegenerateGeometryError("plane fit needs >= 3 points")

    rng = np.random.default_rng(ransac.seed)
    best_count = -1
    best_normal, best_d = None, None
    n_pts = len(pts)
    for _ in range(ransac.iterations):
        idx = rng.choice(n_pts, size=3, replace=False)
        p0, p1, p2 = pts[idx]
        n = np.cross(p1 - p0, p2 - p0)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        n = n / nn
        d = -float(n @ p0)
        dist = np.abs(pts @ n + d)
        count = int((dist < ransac.inlier_threshold).sum())
        if count > best_count:
            best_count = count
            best_normal, best_d = n, d
    if best_normal is None:
        raise DegenerateGeometryError("all minimal samples were collinear")

    inliers = np.abs(pts @ best_normal + best_d) < ransac.inlier_threshold
    P = pts[inliers]
    centroid = P.mean(axis=0)
    _, sv, Vt = np.linalg.svd(P - centroid)
    if len(P) < 3 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("inlier set is collinear")
    normal = Vt[2]
    # sign convention: normal points toward the mean camera center
    if cam_centers:
        ref = np.mean(cam_centers, axis=0)
        if float(normal @ (ref - centroid)) < 0:
            normal = -normal
    elif float(normal @ (pts.mean(axis=0) - centroid)) < 0:
        normal = -normal
    d = -float(normal @ centroid)
    origin = centroid
    # deterministic in-plane basis: cross with the least-aligned world axis
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(normal)))] = 1.0
    u = np.cross(normal, axis)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    # right-handed: u x v = n
    if float(np.cross(u, v) @ normal) < 0:
        v = -v
    return SupportPlane(normal, d, origin, u, v)


def refine_orientation(
    plane: SupportPlane, sparse_map_or_points, angular_resolution_deg: float = 0.5
) -> SupportPlane:
    """Rotate the in-plane basis to minimize the projected AABB area.

    Sweeps phi over [0, 90) degrees at the given resolution; ties go to the
    smallest angle.
    """
    if isinstance(sparse_map_or_points, SparseMap):
        _, pts = sparse_map_or_points.point_array()
    else:
        pts = np.asarray(sparse_map_or_points, dtype=np.float64).reshape(-1, 3)
    uv = plane.to_plane_coords(pts)
    phis = np.deg2rad(np.arange(0.0, 90.0, angular_resolution_deg))
    best_phi, best_area = 0.0, np.inf
    for phi in phis:
        c, s = np.cos(phi), np.sin(phi)
        u_rot = c * uv[:, 0] + s * uv[:, 1]
        v_rot = -s * uv[:, 0] + c * uv[:, 1]
        area = (u_rot.max() - u_rot.min()) * (v_rot.max() - v_rot.min())
        if area < best_area - 1e-15:
            best_area, best_phi = area, float(phi)
    return plane.rotated(best_phi)


def build_partitions(
    plane: SupportPlane,
    sparse_map: SparseMap,
    rows: int,
    cols: int,
    alpha_u: float = 0.0,
    alpha_v: float = 0.0,
    height_pad: float = 0.05,
) -> list[Partition]:
    """Regular grid of inflated windows with closed-interval point assignment.

    Candidate cameras of a partition are every camera observing at least one
    of its points. Empty partitions are returned flagged, not dropped. The 3D
    bounding volume extrudes the window along the plane normal over the
    padded height range of the full cloud.
    """
    if rows < 1 or cols < 1:
        raise InvalidInputError("rows and cols must be >= 1")
    if alpha_u < 0 or alpha_v < 0:
        raise InvalidInputError("inflation factors must be >= 0")
    ids, pts = sparse_map.point_array()
    if len(pts) == 0:
        raise InvalidInputError("cannot partition an empty map")
    uv = plane.to_plane_coords(pts)
    h = plane.heights(pts)
    u_min, u_max = float(uv[:, 0].min()), float(uv[:, 0].max())
    v_min, v_max = float(uv[:, 1].min()), float(uv[:, 1].max())
    h_lo, h_hi = float(h.min()), float(h.max())
    pad = height_pad * max(h_hi - h_lo, 1e-12)
    h_range = (h_lo - pad, h_hi + pad)

    u_bounds = u_min + np.arange(cols + 1) / cols * (u_max - u_min)
    v_bounds = v_min + np.arange(rows + 1) / rows * (v_max - v_min)

    # bounding volumes of border cells extend past the data extent so that
    # reconstructed surfaces bulging a little beyond the sparse cloud still
    # fall inside exactly one volume (clipping would otherwise strand them)
    border_pad_u = 0.05 * max(u_max - u_min, 1e-12)
    border_pad_v = 0.05 * max(v_max - v_min, 1e-12)

    partitions = []
    for r in range(rows):
        for c in range(cols):
            u_c = (u_bounds[c] + u_bounds[c + 1]) / 2.0
            v_c = (v_bounds[r] + v_bounds[r + 1]) / 2.0
            du = (1.0 + alpha_u) * (u_bounds[c + 1] - u_bounds[c])
            dv = (1.0 + alpha_v) * (v_bounds[r + 1] - v_bounds[r])
            u0 = max(u_c - du / 2.0, u_min)
            u1 = min(u_c + du / 2.0, u_max)
            v0 = max(v_c - dv / 2.0, v_min)
            v1 = min(v_c + dv / 2.0, v_max)
            inside = (
                (uv[:, 0] >= u0) & (uv[:, 0] <= u1)
                & (uv[:, 1] >= v0) & (uv[:, 1] <= v1)
            )
            pids = [int(ids[k]) for k in np.nonzero(inside)[0]]
            cams: set[int] = set()
            for pid in pids:
                cams.update(sparse_map.observing_cameras(pid))
            vol_u0 = u0 - border_pad_u if c == 0 else u0
            vol_u1 = u1 + border_pad_u if c == cols - 1 else u1
            vol_v0 = v0 - border_pad_v if r == 0 else v0
            vol_v1 = v1 + border_pad_v if r == rows - 1 else v1
            volume = BoundingVolume(plane, (vol_u0, vol_u1), (vol_v0, vol_v1), h_range)
            partitions.append(
                Partition(
                    r, c, (u0, u1, v0, v1), pids, sorted(cams), volume,
                    empty=not pids,
                )
            )
    return partitions


def suggest_grid(n_points: int, target_per_partition: int = 200_000) -> tuple[int, int]:
    """Rows/cols so each partition holds about the target point count."""
    cells = max(1, round(n_points / target_per_partition))
    rows = int(np.floor(np.sqrt(cells)))
    rows = max(rows, 1)
    cols = int(np.ceil(cells / rows))
    return rows, cols


# --- manifest serialization -----------------------------------------------------

_PARTITION_MAGIC = "# urbanmesh partitions v1"


def write_partitions(partitions: list[Partition], plane: SupportPlane, path) -> None:
    with open(path, "w") as fh:
        fh.write(_PARTITION_MAGIC + "\n")
        n = plane.normal
        fh.write(
            "plane "
            + " ".join(
                format(x, ".17g")
                for x in [*n, plane.d, *plane.origin, *plane.u, *plane.v, plane.phi_star]
            )
            + "\n"
        )
        for p in partitions:
            fh.write(
                f"partition {p.row} {p.col} "
                + " ".join(format(x, ".17g") for x in p.window)
                + " "
                + " ".join(
                    format(x, ".17g")
                    for x in [*p.volume.u_range, *p.volume.v_range, *p.volume.h_range]
                )
                + "\n"
            )
            fh.write(
                f"points {p.row} {p.col} " + " ".join(map(str, p.point_ids)) + "\n"
            )
            fh.write(
                f"cameras {p.row} {p.col} " + " ".join(map(str, p.camera_ids)) + "\n"
            )


def read_partitions(path) -> tuple[list[Partition], SupportPlane]:
    plane = None
    parts: dict[tuple[int, int], dict] = {}
    with open(path) as fh:
        if fh.readline().rstrip("\n") != _PARTITION_MAGIC:
            raise MalformedHeaderError(f"{path}: bad partitions magic")
        for lineno, line in enumerate(fh, start=2):
            t = line.split()
            if not t:
                continue
            try:
                if t[0] == "plane":
                    vals = [float(x) for x in t[1:]]
                    plane = SupportPlane(
                        vals[0:3], vals[3], vals[4:7], vals[7:10], vals[10:13], vals[13]
                    )
                elif t[0] == "partition":
                    key = (int(t[1]), int(t[2]))
                    vals = [float(x) for x in t[3:]]
                    parts.setdefault(key, {})["window"] = tuple(vals[0:4])
                    parts[key]["volume"] = (
                        (vals[4], vals[5]), (vals[6], vals[7]), (vals[8], vals[9])
                    )
                elif t[0] == "points":
                    parts.setdefault((int(t[1]), int(t[2])), {})["points"] = [
                        int(x) for x in t[3:]
                    ]
                elif t[0] == "cameras":
                    parts.setdefault((int(t[1]), int(t[2])), {})["cameras"] = [
                        int(x) for x in t[3:]
                    ]
                else:
                    raise ValueError(f"unknown record {t[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if plane is None:
        raise ParseError(f"{path}: missing plane record")
    out = []
    for (r, c) in sorted(parts):
        rec = parts[(r, c)]
        vol = BoundingVolume(plane, *rec["volume"])
        pids = rec.get("points", [])
        out.append(
            Partition(
                r, c, rec["window"], pids, rec.get("cameras", []), vol, empty=not pids
            )
        )
    return out, plane
