"""Per-view dense raster bundle: depth, normals, silhouette, and matches."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, MalformedHeaderError, TruncatedPayloadError
from .rasters import read_raster, write_raster


@dataclass
class MatchSet:
    """Pixel correspondences between two views.

    ``pixels_a[k] <-> pixels_b[k]`` with confidence ``confidence[k] >= 0``.
    Stored once per unordered view pair (view_a < view_b).
    """

    view_a: int
    view_b: int
    pixels_a: np.ndarray  # (N, 2) float64
    pixels_b: np.ndarray  # (N, 2)
    confidence: np.ndarray  # (N,)

    def __post_init__(self):
        self.pixels_a = np.asarray(self.pixels_a, dtype=np.float64).reshape(-1, 2)
        self.pixels_b = np.asarray(self.pixels_b, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not (len(self.pixels_a) == len(self.pixels_b) == len(self.confidence)):
            raise InvalidInputError("match arrays must have equal length")
        if np.any(self.confidence < 0):
            raise InvalidInputError("match confidences must be >= 0")
        if self.view_a >= self.view_b:
            raise InvalidInputError("matches are stored with view_a < view_b")

    def __len__(self) -> int:
        return len(self.confidence)


@dataclass
class DenseView:
    """Raster bundle for one camera.

    depth: HxW float (meters, <=0 invalid); normal: HxWx3 unit vectors in the
    camera frame (zero where invalid); silhouette: HxW in [0,1], defaults to
    all-ones when not supplied.
    """

    camera_id: int
    depth: np.ndarray
    normal: np.ndarray | None = None
    silhouette: np.ndarray | None = None
    # optional loss-domain mask (True = pixel participates); not serialized
    domain: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise InvalidInputError("depth must be HxW")
        h, w = self.depth.shape
        if self.normal is not None:
            self.normal = np.asarray(self.normal, dtype=np.float64)
            if self.normal.shape != (h, w, 3):
                raise InvalidInputError("normal raster shape mismatch")
            valid = self.depth > 0
            norms = np.linalg.norm(self.normal[valid], axis=-1)
            if norms.size and np.any(np.abs(norms - 1.0) > 1e-4):
                raise InvalidInputError("valid normals must be unit length")
        if self.silhouette is None:
            self.silhouette = np.ones((h, w), dtype=np.float64)
        else:
            self.silhouette = np.asarray(self.silhouette, dtype=np.float64)
            if self.silhouette.shape != (h, w):
                raise InvalidInputError("silhouette raster shape mismatch")
        if self.domain is not None:
            self.domain = np.asarray(self.domain, dtype=bool)
            if self.domain.shape != (h, w):
                raise InvalidInputError("domain mask shape mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def valid_mask(self) -> np.ndarray:
        return self.depth > 0

    def sample_depth(self, pixels: np.ndarray) -> np.ndarray:
        """Nearest-cell depth lookup at continuous pixel coordinates."""
        h, w = self.depth.shape
        pix = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        cols = np.clip(np.floor(pix[:, 0]).astype(int), 0, w - 1)
        rows = np.clip(np.floor(pix[:, 1]).astype(int), 0, h - 1)
        return self.depth[rows, cols]


def view_paths(directory, camera_id: int) -> dict[str, str]:
    stem = os.path.join(str(directory), f"view_{camera_id:05d}")
    return {
        "depth": stem + ".depth.raster",
        "normal": stem + ".normal.raster",
        "silhouette": stem + ".sil.raster",
    }


def write_dense_view(directory, view: DenseView) -> None:
    os.makedirs(str(directory), exist_ok=True)
    paths = view_paths(directory, view.camera_id)
    write_raster(paths["depth"], view.depth, "depth")
    if view.normal is not None:
        write_raster(paths["normal"], view.normal, "normal")
    write_raster(paths["silhouette"], view.silhouette, "silhouette")


def read_dense_view(directory, camera_id: int) -> DenseView:
    paths = view_paths(directory, camera_id)
    depth, kind = read_raster(paths["depth"])
    if kind != "depth":
        raise MalformedHeaderError(f"{paths['depth']}: kind {kind!r}, expected depth")
    normal = None
    if os.path.exists(paths["normal"]):
        normal, kind = read_raster(paths["normal"])
        if kind != "normal":
            raise MalformedHeaderError(
                f"{paths['normal']}: kind {kind!r}, expected normal"
            )
    sil = None
    if os.path.exists(paths["silhouette"]):
        sil, kind = read_raster(paths["silhouette"])
        if kind != "silhouette":
            raise MalformedHeaderError(
                f"{paths['silhouette']}: kind {kind!r}, expected silhouette"
            )
    return DenseView(camera_id, depth, normal, sil)


# --- binary match files -------------------------------------------------------------

_MATCH_MAGIC = b"UMMATCH1"


def write_matches(path, matches: MatchSet) -> None:
    """Binary layout: magic, view ids, count, then (ua, va, ub, vb, q) float64 rows."""
    with open(path, "wb") as fh:
        fh.write(_MATCH_MAGIC)
        fh.write(struct.pack("<iiq", matches.view_a, matches.view_b, len(matches)))
        rows = np.concatenate(
            [matches.pixels_a, matches.pixels_b, matches.confidence[:, None]], axis=1
        )
        fh.write(rows.astype("<f8").tobytes())


def read_matches(path) -> MatchSet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MATCH_MAGIC:
            raise MalformedHeaderError(f"{path}: bad match-file magic")
        header = fh.read(16)
        if len(header) != 16:
            raise TruncatedPayloadError(f"{path}: truncated match header")
        va, vb, n = struct.unpack("<iiq", header)
        payload = fh.read()
    expected = n * 5 * 8
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: match payload is {len(payload)} bytes, expected {expected}"
        )
    rows = np.frombuffer(payload, dtype="<f8").reshape(n, 5)
    return MatchSet(va, vb, rows[:, 0:2], rows[:, 2:4], rows[:, 4])
