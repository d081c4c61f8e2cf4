"""Similarity (scale + rotation + translation) transforms between map frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import is_rotation
from .exceptions import InvalidInputError


@dataclass
class Sim3Transform:
    """x -> scale * R @ x + t.

    Composition and inverse round-trip to identity within 1e-9.
    """

    scale: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.scale = float(self.scale)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise InvalidInputError("similarity scale must be positive")
        if not is_rotation(self.R, tol=1e-8):
            raise InvalidInputError("similarity rotation is not orthonormal")

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.scale * (X @ self.R.T) + self.t

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """Return self o other (apply `other` first)."""
        return Sim3Transform(
            self.scale * other.scale,
            self.R @ other.R,
            self.scale * (self.R @ other.t) + self.t,
        )

    def inverse(self) -> "Sim3Transform":
        Rinv = self.R.T
        return Sim3Transform(1.0 / self.scale, Rinv, -(Rinv @ self.t) / self.scale)

    def params(self) -> np.ndarray:
        """Flat (13,) parameter vector [s, R.ravel(), t] for comparisons."""
        return np.concatenate([[self.scale], self.R.ravel(), self.t])
