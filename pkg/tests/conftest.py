import numpy as np
import pytest

from urbanmesh.camera import Camera


@pytest.fixture
def simple_camera():
    """Identity-pose camera with f=100 and principal point (50, 50)."""
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    return Camera(0, K, np.eye(3), np.zeros(3), 100, 100)


def make_camera(cam_id, f, c, R, t, width, height):
    K = np.array([[f, 0, c[0]], [0, f, c[1]], [0, 0, 1.0]])
    return Camera(cam_id, K, R, t, width, height)
