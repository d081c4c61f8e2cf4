"""Editable manifold triangle mesh with halfedge connectivity and audits.

The mesh owns vertex positions, int64 face triples, and named per-vertex
float channels. Halfedge arrays (vertex/face/next/twin) are derived from the
face table on demand; halfedge ``h = 3*f + i`` runs from ``faces[f, i]`` to
``faces[f, (i+1) % 3]``. Editing (collapse / split / flip) goes through
:class:`MeshEditor`, which enforces link conditions and normal-fold checks so
that the structural audits keep passing.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError, MeshAuditError


def _face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return np.cross(v1 - v0, v2 - v0)


def halfedge_arrays(faces: np.ndarray):
    """Derive halfedge connectivity from a face table.

    Returns
    -------
    dict with int64 arrays ``vertex`` (source vertex of h), ``face``,
    ``next``, and ``twin`` (-1 for boundary halfedges).

    Raises
    ------
    MeshAuditError
        If any directed edge appears twice (non-manifold or inconsistently
        oriented faces).
    """
    F = len(faces)
    h_from = faces.reshape(-1)
    h_to = faces[:, [1, 2, 0]].reshape(-1)
    h_face = np.repeat(np.arange(F, dtype=np.int64), 3)
    base = np.arange(F, dtype=np.int64) * 3
    h_next = (np.tile([1, 2, 0], F) + np.repeat(base, 3)).astype(np.int64)

    span = int(max(h_from.max(initial=0), h_to.max(initial=0))) + 1
    key = h_from.astype(np.int64) * span + h_to.astype(np.int64)
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    if len(order) > 1 and np.any(sorted_key[1:] == sorted_key[:-1]):
        raise MeshAuditError("duplicate directed edge (non-manifold or flipped face)")

    rev_key = h_to.astype(np.int64) * span + h_from.astype(np.int64)
    pos = np.searchsorted(sorted_key, rev_key)
    pos = np.clip(pos, 0, len(sorted_key) - 1)
    twin = np.where(sorted_key[pos] == rev_key, order[pos], -1).astype(np.int64)
    return {"vertex": h_from.copy(), "face": h_face, "next": h_next, "twin": twin}


def unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(E, 2) unique undirected edges (lo < hi) and their face-incidence counts."""
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges.astype(np.int64), counts.astype(np.int64)


class HalfEdgeMesh:
    """Triangle mesh with per-vertex scalar channels.

    Channels are float arrays of shape (V,) or (V, k); they ride along with
    every edit (averaged on collapse/split endpoints).
    """

    def __init__(self, vertices, faces, channels=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3).copy()
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3).copy()
        self.channels: dict[str, np.ndarray] = {}
        for name, arr in (channels or {}).items():
            self.set_channel(name, arr)
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise InvalidInputError("face index out of range")

    # -- basic queries ---------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def copy(self) -> "HalfEdgeMesh":
        return HalfEdgeMesh(
            self.vertices, self.faces, {k: v.copy() for k, v in self.channels.items()}
        )

    def set_channel(self, name: str, arr) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[0] != len(self.vertices):
            raise InvalidInputError(f"channel {name!r} length mismatch")
        self.channels[name] = arr.copy()

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        n = _face_normals(self.vertices, self.faces)
        if normalized:
            lens = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(lens, 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_normals(self.vertices, self.faces), axis=1)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return unique_edges(self.faces)

    def edge_lengths(self, edges: np.ndarray | None = None) -> np.ndarray:
        if edges is None:
            edges, _ = self.edges()
        d = self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]]
        return np.linalg.norm(d, axis=1)

    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.vertices), dtype=bool)
        edges, counts = self.edges()
        b = edges[counts == 1]
        mask[b.reshape(-1)] = True
        return mask

    def vertex_valences(self) -> np.ndarray:
        """One-ring neighbour counts via unique edges."""
        val = np.zeros(len(self.vertices), dtype=np.int64)
        edges, _ = self.edges()
        np.add.at(val, edges[:, 0], 1)
        np.add.at(val, edges[:, 1], 1)
        return val

    def adjacency_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Symmetric one-ring adjacency as (indptr, indices), sorted per row."""
        edges, _ = self.edges()
        V = len(self.vertices)
        deg = np.zeros(V, dtype=np.int64)
        np.add.at(deg, edges[:, 0], 1)
        np.add.at(deg, edges[:, 1], 1)
        indptr = np.zeros(V + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        indices = np.zeros(indptr[-1], dtype=np.int64)
        cursor = indptr[:-1].copy()
        for a, b in edges:
            indices[cursor[a]] = b
            cursor[a] += 1
            indices[cursor[b]] = a
            cursor[b] += 1
        for v in range(V):
            indices[indptr[v]:indptr[v + 1]].sort()
        return indptr, indices

    def mean_edge_length(self) -> float:
        lens = self.edge_lengths()
        return float(lens.mean()) if len(lens) else 0.0

    # -- audits ----------------------------------------------------------------

    def audit(self) -> None:
        """Full structural audit; raises MeshAuditError on the first violation.

        Checks: valid and distinct face indices, unique directed edges,
        twin/next involutions, each undirected edge on <= 2 faces, and every
        referenced vertex whose incident faces form a single closed or open
        fan.
        """
        V, F = len(self.vertices), len(self.faces)
        if F == 0:
            return
        if self.faces.min() < 0 or self.faces.max() >= V:
            raise MeshAuditError("face index out of range")
        if np.any(
            (self.faces[:, 0] == self.faces[:, 1])
            | (self.faces[:, 1] == self.faces[:, 2])
            | (self.faces[:, 0] == self.faces[:, 2])
        ):
            raise MeshAuditError("face with repeated vertex")
        he = halfedge_arrays(self.faces)  # raises on duplicate directed edges
        nxt, twin = he["next"], he["twin"]
        h = np.arange(3 * F)
        if not np.array_equal(nxt[nxt[nxt]], h):
            raise MeshAuditError("next^3 != identity")
        interior = twin >= 0
        if not np.array_equal(twin[twin[interior]], h[interior]):
            raise MeshAuditError("twin(twin(h)) != h")
        _, counts = self.edges()
        if np.any(counts > 2):
            raise MeshAuditError("edge incident to more than 2 faces")
        self._audit_fans()

    def _audit_fans(self) -> None:
        V = len(self.vertices)
        vfaces: list[list[int]] = [[] for _ in range(V)]
        for fi, (a, b, c) in enumerate(self.faces):
            vfaces[a].append(fi)
            vfaces[b].append(fi)
            vfaces[c].append(fi)
        for v in range(V):
            fs = vfaces[v]
            if not fs:
                continue
            # edges at v -> incident faces among fs
            edge_faces: dict[int, list[int]] = {}
            for fi in fs:
                tri = self.faces[fi]
                others = [int(u) for u in tri if u != v]
                for u in others:
                    edge_faces.setdefault(u, []).append(fi)
            open_ends = 0
            for u, flist in edge_faces.items():
                if len(flist) > 2:
                    raise MeshAuditError(f"vertex {v}: edge ({v},{u}) on >2 faces")
                if len(flist) == 1:
                    open_ends += 1
            if open_ends not in (0, 2):
                raise MeshAuditError(f"vertex {v}: incident faces are not a single fan")
            # connectivity of the face graph at v
            adj: dict[int, set[int]] = {fi: set() for fi in fs}
            for flist in edge_faces.values():
                if len(flist) == 2:
                    adj[flist[0]].add(flist[1])
                    adj[flist[1]].add(flist[0])
            seen = {fs[0]}
            stack = [fs[0]]
            while stack:
                cur = stack.pop()
                for nb in adj[cur]:
                    if nb not in seen:
                        seen.add(nb)
                        stack.append(nb)
            if len(seen) != len(fs):
                raise MeshAuditError(f"vertex {v}: disconnected incident-face fan")

    def passes_audit(self) -> bool:
        try:
            self.audit()
        except MeshAuditError:
            return False
        return True


def split_nonmanifold_vertices(mesh: HalfEdgeMesh) -> HalfEdgeMesh:
    """Duplicate every vertex whose incident faces form more than one fan.

    Geometry is unchanged; each extra fan group gets its own copy of the
    vertex (position and channels). Resolves bowtie configurations so the
    one-ring audit passes.
    """
    V = len(mesh.vertices)
    vfaces: list[list[int]] = [[] for _ in range(V)]
    for fi, tri in enumerate(mesh.faces):
        for v in tri:
            vfaces[v].append(int(fi))
    faces = mesh.faces.copy()
    new_positions = [mesh.vertices]
    new_channel_rows: dict[str, list] = {name: [] for name in mesh.channels}
    next_id = V
    for v in range(V):
        fs = vfaces[v]
        if len(fs) < 2:
            continue
        # group incident faces by edge-connectivity at v
        edge_faces: dict[int, list[int]] = {}
        for fi in fs:
            for u in mesh.faces[fi]:
                if u != v:
                    edge_faces.setdefault(int(u), []).append(fi)
        adj: dict[int, set[int]] = {fi: set() for fi in fs}
        for flist in edge_faces.values():
            if len(flist) == 2:
                adj[flist[0]].add(flist[1])
                adj[flist[1]].add(flist[0])
        groups = []
        seen: set[int] = set()
        for fi in fs:
            if fi in seen:
                continue
            grp = {fi}
            stack = [fi]
            while stack:
                cur = stack.pop()
                for nb in adj[cur]:
                    if nb not in grp:
                        grp.add(nb)
                        stack.append(nb)
            seen |= grp
            groups.append(sorted(grp))
        for grp in groups[1:]:
            for fi in grp:
                tri = faces[fi]
                faces[fi] = [next_id if x == v else x for x in tri]
            new_positions.append(mesh.vertices[v:v + 1])
            for name in mesh.channels:
                new_channel_rows[name].append(mesh.channels[name][v])
            next_id += 1
    if next_id == V:
        return mesh
    verts = np.vstack(new_positions)
    channels = {}
    for name, arr in mesh.channels.items():
        extra = np.array(new_channel_rows[name], dtype=np.float64)
        channels[name] = np.concatenate([arr, extra.reshape((-1,) + arr.shape[1:])])
    return HalfEdgeMesh(verts, np.asarray(faces, dtype=np.int64), channels)


def largest_component(mesh: HalfEdgeMesh) -> HalfEdgeMesh:
    """The face-connected component with the most faces (ties: more vertices,
    then smaller smallest-vertex id); unreferenced vertices dropped."""
    if mesh.is_empty():
        return mesh
    V = len(mesh.vertices)
    parent = np.arange(V, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b, c in mesh.faces:
        parent[find(b)] = find(a)
        parent[find(c)] = find(a)
    labels = np.array([find(f[0]) for f in mesh.faces])
    uniq, counts = np.unique(labels, return_counts=True)
    vert_counts = {}
    for lab in uniq:
        vert_counts[lab] = len(np.unique(mesh.faces[labels == lab]))
    best = min(uniq, key=lambda lab: (-counts[uniq.tolist().index(lab)], -vert_counts[lab], lab))
    keep = labels == best
    faces = mesh.faces[keep]
    used = np.unique(faces)
    remap = -np.ones(V, dtype=np.int64)
    remap[used] = np.arange(len(used))
    channels = {k: v[used] for k, v in mesh.channels.items()}
    return HalfEdgeMesh(mesh.vertices[used], remap[faces], channels)


def drop_overpopulated_edges(mesh: HalfEdgeMesh) -> HalfEdgeMesh:
    """Remove faces until no undirected edge has more than two incident faces.

    Faces are removed smallest-area-first (ties by larger face id), which is
    deterministic and keeps the dominant surface.
    """
    faces = mesh.faces
    while True:
        edges, counts = unique_edges(faces)
        bad = edges[counts > 2]
        if len(bad) == 0:
            break
        bad_set = {tuple(e) for e in bad.tolist()}
        areas = 0.5 * np.linalg.norm(
            np.cross(
                mesh.vertices[faces[:, 1]] - mesh.vertices[faces[:, 0]],
                mesh.vertices[faces[:, 2]] - mesh.vertices[faces[:, 0]],
            ),
            axis=1,
        )
        drop: set[int] = set()
        for a, b in sorted(bad_set):
            incident = [
                fi for fi in range(len(faces))
                if fi not in drop
                and a in faces[fi] and b in faces[fi]
            ]
            incident.sort(key=lambda fi: (areas[fi], -fi))
            for fi in incident[: max(len(incident) - 2, 0)]:
                drop.add(fi)
        if not drop:
            break
        keep = np.array([fi for fi in range(len(faces)) if fi not in drop], dtype=np.int64)
        faces = faces[keep]
    return HalfEdgeMesh(mesh.vertices, faces, mesh.channels)


class MeshEditor:
    """Sequential, validity-checked edit session on a HalfEdgeMesh.

    Operations mutate internal python-side tables; call :meth:`finish` to get
    the compacted mesh back. Collapses enforce the link condition, boundary
    rules, and a normal-fold rejection so audits keep passing.
    """

    AREA_EPS = 1e-300

    def __init__(self, mesh: HalfEdgeMesh, min_area: float = 0.0):
        self.positions = [mesh.vertices[i].copy() for i in range(mesh.n_vertices)]
        self.channel_names = sorted(mesh.channels)
        self.channel_vals = {
            name: [mesh.channels[name][i].copy() if mesh.channels[name].ndim > 1
                   else float(mesh.channels[name][i])
                   for i in range(mesh.n_vertices)]
            for name in self.channel_names
        }
        self.faces: list = [tuple(int(v) for v in f) for f in mesh.faces]
        self.dead_faces: set[int] = set()
        self.dead_verts: set[int] = set()
        self.vfaces: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(fi)
        self.min_area = max(min_area, self.AREA_EPS)
        self._boundary_cache: np.ndarray | None = None

    # -- helpers ---------------------------------------------------------------

    def _neighbors(self, v: int) -> set[int]:
        out: set[int] = set()
        for fi in self.vfaces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def _edge_faces(self, a: int, b: int) -> list[int]:
        return sorted(self.vfaces[a] & self.vfaces[b])

    def _face_normal(self, tri, positions=None) -> np.ndarray:
        p = positions or self.positions
        v0, v1, v2 = p[tri[0]], p[tri[1]], p[tri[2]]
        return np.cross(v1 - v0, v2 - v0)

    def edge_is_boundary(self, a: int, b: int) -> bool:
        return len(self._edge_faces(a, b)) == 1

    def vertex_is_boundary(self, v: int) -> bool:
        for u in self._neighbors(v):
            if len(self.vfaces[v] & self.vfaces[u]) == 1:
                return True
        return False

    def n_live_vertices(self) -> int:
        return len(self.positions) - len(self.dead_verts)

    def _mid_channels(self, a: int, b: int):
        out = {}
        for name in self.channel_names:
            va, vb = self.channel_vals[name][a], self.channel_vals[name][b]
            out[name] = (va + vb) / 2.0 if not np.isscalar(va) else (va + vb) / 2.0
        return out

    def _remove_face(self, fi: int) -> None:
        for v in self.faces[fi]:
            self.vfaces[v].discard(fi)
        self.dead_faces.add(fi)

    def _add_face(self, tri) -> int:
        fi = len(self.faces)
        self.faces.append(tuple(int(v) for v in tri))
        for v in tri:
            self.vfaces[v].add(fi)
        return fi

    def _add_vertex(self, pos, chans) -> int:
        vi = len(self.positions)
        self.positions.append(np.asarray(pos, dtype=np.float64))
        self.vfaces.append(set())
        for name in self.channel_names:
            self.channel_vals[name].append(chans[name])
        return vi

    # -- operations -------------------------------------------------------------

    def can_collapse(self, a: int, b: int) -> bool:
        fs = self._edge_faces(a, b)
        if len(fs) not in (1, 2):
            return False
        opposite = set()
        for fi in fs:
            opposite.update(v for v in self.faces[fi] if v not in (a, b))
        if len(opposite) != len(fs):
            return False
        # link condition: shared one-ring = exactly the opposite vertices
        if self._neighbors(a) & self._neighbors(b) != opposite:
            return False
        boundary_edge = len(fs) == 1
        if not boundary_edge and (self.vertex_is_boundary(a) or self.vertex_is_boundary(b)):
            return False
        # reject collapses that would produce duplicate faces (e.g. a tetrahedron
        # folding into a two-face pillow)
        surviving = (self.vfaces[a] | self.vfaces[b]) - set(fs)
        new_sets = []
        for fi in surviving:
            tri = frozenset(a if v == b else v for v in self.faces[fi])
            new_sets.append(tri)
        if len(new_sets) != len(set(new_sets)):
            return False
        # normal-fold / degenerate check at the midpoint
        mid = (self.positions[a] + self.positions[b]) / 2.0
        for fi in (self.vfaces[a] | self.vfaces[b]) - set(fs):
            tri = self.faces[fi]
            before = self._face_normal(tri)
            new_tri_pos = [
                mid if v in (a, b) else self.positions[v] for v in tri
            ]
            after = np.cross(new_tri_pos[1] - new_tri_pos[0], new_tri_pos[2] - new_tri_pos[0])
            if np.linalg.norm(after) / 2.0 <= self.min_area:
                return False
            if float(np.dot(before, after)) <= 0.0:
                return False
        return True

    def collapse(self, a: int, b: int) -> bool:
        """Collapse edge (a, b) to its midpoint at vertex a. Returns success."""
        if a in self.dead_verts or b in self.dead_verts:
            return False
        if not self.can_collapse(a, b):
            return False
        fs = self._edge_faces(a, b)
        mid = (self.positions[a] + self.positions[b]) / 2.0
        chans = self._mid_channels(a, b)
        for fi in fs:
            self._remove_face(fi)
        moved = sorted(self.vfaces[b])
        for fi in moved:
            tri = tuple(a if v == b else v for v in self.faces[fi])
            for v in self.faces[fi]:
                self.vfaces[v].discard(fi)
            self.faces[fi] = tri
            for v in tri:
                self.vfaces[v].add(fi)
        self.positions[a] = mid
        for name in self.channel_names:
            self.channel_vals[name][a] = chans[name]
        self.dead_verts.add(b)
        return True

    def split(self, a: int, b: int) -> int | None:
        """Split edge (a, b) at its midpoint; returns the new vertex id."""
        if a in self.dead_verts or b in self.dead_verts:
            return None
        fs = self._edge_faces(a, b)
        if not fs:
            return None
        m = self._add_vertex(
            (self.positions[a] + self.positions[b]) / 2.0, self._mid_channels(a, b)
        )
        for fi in fs:
            tri = self.faces[fi]
            # rotate so the split edge is (tri[0], tri[1]) in winding order
            for r in range(3):
                x, y, z = tri[r], tri[(r + 1) % 3], tri[(r + 2) % 3]
                if (x, y) == (a, b) or (x, y) == (b, a):
                    self._remove_face(fi)
                    self._add_face((x, m, z))
                    self._add_face((m, y, z))
                    break
        return m

    def flip(self, a: int, b: int) -> bool:
        """Flip interior edge (a, b) to the opposite diagonal. Returns success."""
        if a in self.dead_verts or b in self.dead_verts:
            return False
        fs = self._edge_faces(a, b)
        if len(fs) != 2:
            return False
        f1, f2 = fs
        tri1, tri2 = self.faces[f1], self.faces[f2]
        c = next(v for v in tri1 if v not in (a, b))
        d = next(v for v in tri2 if v not in (a, b))
        if c == d or self.vfaces[c] & self.vfaces[d]:
            return False
        # orient relative to the face that uses the directed edge a->b
        def uses_directed(tri, x, y):
            return any(
                (tri[i], tri[(i + 1) % 3]) == (x, y) for i in range(3)
            )
        if uses_directed(tri2, a, b):
            f1, f2 = f2, f1
            tri1, tri2 = tri2, tri1
            c, d = d, c
        # tri1 contains a->b with apex c; tri2 contains b->a with apex d
        new1 = (a, d, c)
        new2 = (d, b, c)
        old_n = self._face_normal(tri1) + self._face_normal(tri2)
        for tri in (new1, new2):
            n = self._face_normal(tri)
            if np.linalg.norm(n) / 2.0 <= self.min_area:
                return False
            if float(np.dot(old_n, n)) <= 0.0:
                return False
        self._remove_face(f1)
        self._remove_face(f2)
        self._add_face(new1)
        self._add_face(new2)
        return True

    def valence(self, v: int) -> int:
        return len(self._neighbors(v))

    # -- output ------------------------------------------------------------------

    def finish(self) -> HalfEdgeMesh:
        """Compact tombstoned tables into a fresh HalfEdgeMesh (drops unused verts)."""
        live_faces = [
            self.faces[fi] for fi in range(len(self.faces)) if fi not in self.dead_faces
        ]
        used = sorted({v for tri in live_faces for v in tri})
        remap = {old: new for new, old in enumerate(used)}
        verts = np.array([self.positions[v] for v in used], dtype=np.float64).reshape(-1, 3)
        faces = np.array(
            [[remap[v] for v in tri] for tri in live_faces], dtype=np.int64
        ).reshape(-1, 3)
        channels = {}
        for name in self.channel_names:
            vals = [self.channel_vals[name][v] for v in used]
            channels[name] = np.array(vals, dtype=np.float64)
        return HalfEdgeMesh(verts, faces, channels)
