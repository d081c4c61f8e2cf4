import numpy as np
import pytest

from urbanmesh.camera import Camera, rotation_about_axis
from urbanmesh.halfedge import HalfEdgeMesh
from urbanmesh.rasterizer import rasterize, vertex_visibility


def look_down_camera(cam_id=0, f=64.0, size=64, height=4.0):
    K = np.array([[f, 0, size / 2], [0, f, size / 2], [0, 0, 1.0]])
    R = rotation_about_axis([1, 0, 0], np.pi)  # +z world maps to -z cam; looks down
    center = np.array([0.0, 0.0, height])
    return Camera(cam_id, K, R, -R @ center, size, size)


def test_single_triangle_center_pixel(simple_camera):
    # fronto-parallel triangle at depth 2 covering the principal point
    verts = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.5, 2.0]])
    mesh = HalfEdgeMesh(verts, np.array([[0, 2, 1]]))
    buf = rasterize(mesh, simple_camera, cull_backfaces=True)
    r, c = 50, 50
    assert buf.face_id[r, c] == 0
    assert buf.depth[r, c] == pytest.approx(2.0, abs=1e-9)
    assert buf.silhouette[r, c] == 1.0


def test_backface_culling_blanks_everything(simple_camera):
    verts = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.5, 2.0]])
    mesh = HalfEdgeMesh(verts, np.array([[0, 1, 2]]))  # winding faces away
    buf = rasterize(mesh, simple_camera, cull_backfaces=True)
    assert (buf.face_id == -1).all()
    buf2 = rasterize(mesh, simple_camera, cull_backfaces=False)
    assert (buf2.face_id >= 0).any()


def unit_cube_mesh(center=(0, 0, 0), size=1.0):
    c = np.asarray(center, dtype=np.float64)
    h = size / 2.0
    verts = np.array(
        [
            [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
            [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
        ]
    ) + c
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (z = -h), outward -z
            [4, 5, 6], [4, 6, 7],  # top, outward +z
            [0, 1, 5], [0, 5, 4],  # y = -h
            [1, 2, 6], [1, 6, 5],  # x = +h
            [2, 3, 7], [2, 7, 6],  # y = +h
            [3, 0, 4], [3, 4, 7],  # x = -h
        ]
    )
    return HalfEdgeMesh(verts, faces)


def test_cube_coverage_matches_bruteforce():
    cam = look_down_camera(size=64, height=4.0)
    mesh = unit_cube_mesh()
    mesh.audit()
    buf = rasterize(mesh, cam, cull_backfaces=True)

    # brute force: per pixel, test every front-facing triangle
    Vc = mesh.vertices @ cam.R.T + cam.t
    z = Vc[:, 2]
    px = cam.fx * Vc[:, 0] / z + cam.cx
    py = cam.fy * Vc[:, 1] / z + cam.cy
    P = np.stack([px, py], axis=1)
    cover = np.zeros((64, 64), dtype=bool)
    for r in range(64):
        for c in range(64):
            s = np.array([c + 0.5, r + 0.5])
            for f, tri in enumerate(mesh.faces):
                n = np.cross(Vc[tri[1]] - Vc[tri[0]], Vc[tri[2]] - Vc[tri[0]])
                if n @ Vc[tri].mean(axis=0) >= 0:
                    continue
                a, b, cc = P[tri]
                d = (b[0] - a[0]) * (cc[1] - a[1]) - (b[1] - a[1]) * (cc[0] - a[0])
                if abs(d) < 1e-12:
                    continue
                w0 = ((b[0] - s[0]) * (cc[1] - s[1]) - (b[1] - s[1]) * (cc[0] - s[0])) / d
                w1 = ((cc[0] - s[0]) * (a[1] - s[1]) - (cc[1] - s[1]) * (a[0] - s[0])) / d
                w2 = 1 - w0 - w1
                if w0 >= 0 and w1 >= 0 and w2 >= 0:
                    cover[r, c] = True
                    break
    np.testing.assert_array_equal(buf.coverage(), cover)


def test_normals_are_camera_frame_units():
    cam = look_down_camera()
    mesh = unit_cube_mesh()
    buf = rasterize(mesh, cam)
    covered = buf.coverage()
    norms = np.linalg.norm(buf.normal[covered], axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    # top face of the cube faces the camera: camera-frame normal ~ (0, 0, -1)
    r, c = 32, 32
    assert buf.face_id[r, c] >= 0
    np.testing.assert_allclose(buf.normal[r, c], [0, 0, -1], atol=1e-9)


def test_empty_mesh_and_out_of_view():
    cam = look_down_camera()
    empty = HalfEdgeMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    buf = rasterize(empty, cam)
    assert (buf.face_id == -1).all()
    far = unit_cube_mesh(center=(100, 100, 0))
    buf2 = rasterize(far, cam)
    assert (buf2.face_id == -1).all()


def test_depth_is_perspective_correct():
    # slanted quad: depth at a pixel should equal exact ray-plane intersection z
    cam = look_down_camera(size=32, height=4.0)
    verts = np.array(
        [[-1, -1, 0.0], [1, -1, 0.5], [1, 1, 0.5], [-1, 1, 0.0]], dtype=np.float64
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = HalfEdgeMesh(verts, faces)
    buf = rasterize(mesh, cam, cull_backfaces=False)
    r, c = 16, 20
    assert buf.face_id[r, c] >= 0
    # ray through the pixel: world direction; intersect with plane z = 0.25*(x+1)
    u = (c + 0.5 - cam.cx) / cam.fx
    v = (r + 0.5 - cam.cy) / cam.fy
    d_cam = np.array([u, v, 1.0])
    d_world = cam.R.T @ d_cam
    o = cam.center()
    # plane through (x,y,z): z = 0.25 (x + 1)
    tt = (0.25 * (o[0] + 1) - o[2]) / (d_world[2] - 0.25 * d_world[0])
    X = o + tt * d_world
    z_cam = (cam.R @ X + cam.t)[2]
    assert buf.depth[r, c] == pytest.approx(z_cam, rel=1e-9)


def test_vertex_visibility_occlusion():
    cam = look_down_camera(size=64, height=4.0)
    top = unit_cube_mesh(center=(0, 0, 1.0), size=1.0)
    # vertices of a plane below the cube get occluded in the middle
    verts = np.array(
        [[-1.5, -1.5, 0.0], [1.5, -1.5, 0.0], [1.5, 1.5, 0.0], [-1.5, 1.5, 0.0], [0, 0, 0.0]]
    )
    faces = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    plane = HalfEdgeMesh(verts, faces)
    both = HalfEdgeMesh(
        np.vstack([top.vertices, plane.vertices]),
        np.vstack([top.faces, plane.faces + top.n_vertices]),
    )
    buf = rasterize(both, cam)
    vis = vertex_visibility(both, cam, buf)
    assert not vis[both.n_vertices - 1]  # plane center hidden under the cube
    assert vis[top.n_vertices:top.n_vertices + 4].any()  # some far corner seen
    assert vis[:top.n_vertices].any()  # cube's top ring visible
