import numpy as np
import pytest

from urbanmesh.exceptions import MeshAuditError
from urbanmesh.halfedge import HalfEdgeMesh, MeshEditor, halfedge_arrays, unique_edges


def icosahedron():
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return verts, faces


def single_triangle():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2]])
    return verts, faces


def quad_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return verts, faces


def test_audit_passes_on_manifolds():
    for verts, faces in (icosahedron(), single_triangle(), quad_mesh()):
        HalfEdgeMesh(verts, faces).audit()


def test_halfedge_involutions():
    verts, faces = icosahedron()
    he = halfedge_arrays(faces)
    h = np.arange(3 * len(faces))
    nxt, twin = he["next"], he["twin"]
    assert np.array_equal(nxt[nxt[nxt]], h)
    assert (twin >= 0).all()  # closed surface
    assert np.array_equal(twin[twin], h)


def test_audit_detects_nonmanifold_edge():
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=np.float64
    )
    faces = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])  # edge (0,1) on 3 faces
    with pytest.raises(MeshAuditError):
        HalfEdgeMesh(verts, faces).audit()


def test_audit_detects_bowtie_vertex():
    # two triangles sharing only vertex 0
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [-1, 0, 0], [-1, -1, 0]], dtype=np.float64
    )
    faces = np.array([[0, 1, 2], [0, 3, 4]])
    with pytest.raises(MeshAuditError):
        HalfEdgeMesh(verts, faces).audit()


def test_audit_detects_inconsistent_orientation():
    verts, faces = quad_mesh()
    faces = faces.copy()
    faces[1] = faces[1][::-1]
    with pytest.raises(MeshAuditError):
        HalfEdgeMesh(verts, faces).audit()


def test_unique_edges_counts():
    _, faces = quad_mesh()
    edges, counts = unique_edges(faces)
    assert len(edges) == 5
    assert sorted(counts) == [1, 1, 1, 1, 2]


def test_split_preserves_audit_and_channels():
    verts, faces = quad_mesh()
    mesh = HalfEdgeMesh(verts, faces, {"val": np.array([0.0, 1.0, 2.0, 3.0])})
    ed = MeshEditor(mesh)
    m = ed.split(0, 2)  # interior diagonal
    assert m is not None
    out = ed.finish()
    out.audit()
    assert out.n_faces == 4
    # midpoint channel average of endpoints 0 and 2
    new_idx = out.n_vertices - 1
    assert out.channels["val"][new_idx] == pytest.approx(1.0)
    np.testing.assert_allclose(
        out.vertices[new_idx], (verts[0] + verts[2]) / 2.0
    )


def test_collapse_midpoint_and_validity():
    verts, faces = icosahedron()
    mesh = HalfEdgeMesh(verts, faces)
    ed = MeshEditor(mesh)
    edges, _ = unique_edges(faces)
    a, b = int(edges[0][0]), int(edges[0][1])
    mid = (verts[a] + verts[b]) / 2
    assert ed.collapse(a, b)
    out = ed.finish()
    out.audit()
    assert out.n_vertices == 11
    assert out.n_faces == 18
    assert any(np.allclose(v, mid) for v in out.vertices)


def test_collapse_rejects_link_condition_violation():
    # tetrahedron: collapsing any edge would create a degenerate closed surface;
    # link condition (common neighbours == opposite vertices) fails.
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64
    )
    faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    HalfEdgeMesh(verts, faces).audit()
    ed = MeshEditor(HalfEdgeMesh(verts, faces))
    assert not ed.collapse(0, 1)


def test_flip_quad_diagonal():
    verts, faces = quad_mesh()
    mesh = HalfEdgeMesh(verts, faces)
    ed = MeshEditor(mesh)
    assert ed.flip(0, 2)
    out = ed.finish()
    out.audit()
    edges, _ = out.edges()
    pairs = {tuple(e) for e in edges.tolist()}
    assert (1, 3) in pairs and (0, 2) not in pairs


def test_flip_rejects_existing_edge():
    # two adjacent faces where the opposite diagonal already exists elsewhere
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64
    )
    faces = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1]])  # edge (1,3) would duplicate
    ed = MeshEditor(HalfEdgeMesh(verts, faces))
    assert not ed.flip(0, 2)


def test_editor_sequences_keep_audits_passing():
    rng = np.random.default_rng(5)
    verts, faces = icosahedron()
    mesh = HalfEdgeMesh(verts, faces, {"s": np.zeros(len(verts))})
    for step in range(6):
        ed = MeshEditor(mesh)
        edges, _ = mesh.edges()
        for e in edges[rng.permutation(len(edges))[:4]]:
            op = rng.integers(3)
            a, b = int(e[0]), int(e[1])
            if op == 0:
                ed.collapse(a, b)
            elif op == 1:
                ed.split(a, b)
            else:
                ed.flip(a, b)
        mesh = ed.finish()
        mesh.audit()
