"""Pinhole camera model and projection math.

Conventions used throughout the toolkit:

* ``T_wc`` maps world points into the camera frame: ``X_cam = R @ X_world + t``.
* Depth is the camera-frame z coordinate, not the ray length.
* Pixel coordinates are continuous; raster cell ``[row, col]`` is sampled at
  pixel ``(col + 0.5, row + 0.5)``.
* Invalid depth is encoded as a value <= 0 so rasters stay bit-comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError

ROTATION_TOL = 1e-9


def is_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    """True when R is orthonormal with determinant +1 within tol."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    return (
        np.allclose(R @ R.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise InvalidInputError("rotation axis must be nonzero")
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a QR decomposition."""
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    return Q


@dataclass
class Camera:
    """Calibrated pinhole camera with a rigid world-to-camera pose.

    Attributes
    ----------
    id : int
        Image / view identifier, unique within a map.
    K : (3, 3) float array
        Upper-triangular intrinsics; fx = K[0,0], fy = K[1,1],
        principal point (K[0,2], K[1,2]).
    R : (3, 3) float array
        World-to-camera rotation.
    t : (3,) float array
        World-to-camera translation, meters.
    width, height : int
        Image size in pixels.
    """

    id: int
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.K[1, 0] != 0 or self.K[2, 0] != 0 or self.K[2, 1] != 0:
            raise InvalidInputError(f"camera {self.id}: K must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise InvalidInputError(f"camera {self.id}: fx and fy must be positive")
        if not is_rotation(self.R):
            raise InvalidInputError(f"camera {self.id}: R is not a rotation matrix")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def f_iso(self) -> float:
        """Isotropic focal length sqrt(fx * fy), pixels."""
        return float(np.sqrt(self.fx * self.fy))

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def view_ray(self, X: np.ndarray) -> np.ndarray:
        """Unit ray from the camera center toward world point(s) X."""
        d = np.asarray(X, dtype=np.float64) - self.center()
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-300)


def project(camera: Camera, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world point(s) into a camera.

    Parameters
    ----------
    camera : Camera
    X : (3,) or (N, 3) array
        World points.

    Returns
    -------
    pixel : (2,) or (N, 2) array
    depth : scalar or (N,) array
        Camera-frame z.
    valid : bool or (N,) bool array
        False where the point is behind the camera (depth <= 0); pixel
        values there are meaningless, no exception is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    Xc = camera.to_camera(np.atleast_2d(X))
    z = Xc[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    px = camera.fx * Xc[:, 0] / zs + camera.cx
    py = camera.fy * Xc[:, 1] / zs + camera.cy
    pix = np.stack([px, py], axis=-1)
    if single:
        return pix[0], float(z[0]), bool(valid[0])
    return pix, z, valid


def backproject(camera: Camera, pixel, depth) -> np.ndarray:
    """Lift pixel(s) at camera-frame depth(s) back to world points.

    Raises
    ------
    InvalidInputError
        If any depth is <= 0.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    single = pixel.ndim == 1
    pix = np.atleast_2d(pixel)
    z = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(z <= 0):
        raise InvalidInputError("backproject requires positive depth")
    x = (pix[:, 0] - camera.cx) / camera.fx * z
    y = (pix[:, 1] - camera.cy) / camera.fy * z
    Xc = np.stack([x, y, z], axis=-1)
    Xw = (Xc - camera.t) @ camera.R
    return Xw[0] if single else Xw


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates for a raster."""
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([cols + 0.5, rows + 0.5], axis=-1).astype(np.float64)
