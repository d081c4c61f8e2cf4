import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanmesh.camera import (
    Camera,
    backproject,
    pixel_centers,
    project,
    random_rotation,
    rotation_about_axis,
)
from urbanmesh.exceptions import InvalidInputError


def test_project_principal_ray(simple_camera):
    pix, depth, valid = project(simple_camera, np.array([0.0, 0.0, 2.0]))
    assert valid
    assert depth == pytest.approx(2.0)
    assert pix == pytest.approx([50.0, 50.0])


def test_project_offset_point(simple_camera):
    pix, depth, valid = project(simple_camera, np.array([1.0, 0.0, 2.0]))
    assert valid
    assert pix == pytest.approx([100.0, 50.0])


def test_project_behind_camera_flagged_not_raised(simple_camera):
    _, _, valid = project(simple_camera, np.array([0.0, 0.0, -1.0]))
    assert not valid


def test_backproject_trivial_cases(simple_camera):
    assert backproject(simple_camera, [50.0, 50.0], 2.0) == pytest.approx([0, 0, 2.0])
    assert backproject(simple_camera, [100.0, 50.0], 2.0) == pytest.approx([1, 0, 2.0])


def test_backproject_rejects_nonpositive_depth(simple_camera):
    with pytest.raises(InvalidInputError):
        backproject(simple_camera, [50.0, 50.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_project_backproject_roundtrip_random_pose(seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    K = np.array([[120.0, 0, 64], [0, 90.0, 48], [0, 0, 1]])
    cam = Camera(1, K, R, t, 128, 96)
    X = cam.center() + cam.R.T @ np.array([rng.normal(), rng.normal(), rng.uniform(0.5, 10)])
    pix, depth, valid = project(cam, X)
    assert valid
    back = backproject(cam, pix, depth)
    np.testing.assert_allclose(back, X, atol=1e-9)


def test_backprojected_plane_grid_is_coplanar(simple_camera):
    # synthetic fronto-parallel plane depth map; plane-fit residual is the oracle
    centers = pixel_centers(20, 20).reshape(-1, 2)
    pts = backproject(simple_camera, centers, np.full(len(centers), 3.0))
    centroid = pts.mean(axis=0)
    _, sv, _ = np.linalg.svd(pts - centroid)
    assert sv[-1] < 1e-9


def test_camera_validation():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    with pytest.raises(InvalidInputError):
        Camera(0, K, np.eye(3) * 1.001, np.zeros(3), 10, 10)
    K_bad = K.copy()
    K_bad[1, 0] = 0.5
    with pytest.raises(InvalidInputError):
        Camera(0, K_bad, np.eye(3), np.zeros(3), 10, 10)


def test_rotation_about_axis_right_angle():
    R = rotation_about_axis([0, 0, 1], np.pi / 2)
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
