"""Independent brute-force oracles used by module and acceptance tests.

Everything here is deliberately written as plain loops over faces, edges,
and vertices, sharing no code with the library implementations.
"""

import math

import numpy as np


def oracle_mesh_quality(verts, faces, theta_lo_deg=15.0, theta_hi_deg=150.0, area_eps=None):
    verts = np.asarray(verts, dtype=float)
    faces = [tuple(int(v) for v in f) for f in faces]
    if not faces:
        return None
    if area_eps is None:
        diag = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0)))
        area_eps = 1e-12 * diag * diag

    def area_of(f):
        a, b, c = verts[f[0]], verts[f[1]], verts[f[2]]
        return 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))

    def angles_of(f):
        out = []
        for k in range(3):
            a = verts[f[k]]
            b = verts[f[(k + 1) % 3]]
            c = verts[f[(k + 2) % 3]]
            u, w = b - a, c - a
            cosv = float(u @ w) / max(np.linalg.norm(u) * np.linalg.norm(w), 1e-300)
            out.append(math.acos(max(-1.0, min(1.0, cosv))))
        return out

    # AR over non-degenerate faces
    ars = []
    n_degen = 0
    n_bad_angle = 0
    for f in faces:
        A = area_of(f)
        if A <= area_eps:
            n_degen += 1
        ang = angles_of(f)
        if min(ang) < math.radians(theta_lo_deg) or max(ang) > math.radians(theta_hi_deg):
            n_bad_angle += 1
        if A > area_eps:
            es = [
                np.linalg.norm(verts[f[0]] - verts[f[1]]),
                np.linalg.norm(verts[f[1]] - verts[f[2]]),
                np.linalg.norm(verts[f[2]] - verts[f[0]]),
            ]
            s = sum(es) / 2.0
            r = A / s
            ars.append(max(es) / (2 * r))
    AR = float(np.mean(ars)) if ars else 0.0
    ANG = n_bad_angle / len(faces)
    DTR = n_degen / len(faces)

    # edges
    edge_count = {}
    for f in faces:
        for k in range(3):
            e = tuple(sorted((f[k], f[(k + 1) % 3])))
            edge_count[e] = edge_count.get(e, 0) + 1
    NME = sum(1 for c in edge_count.values() if c > 2) / len(edge_count)

    # vertex fans via a rotation walk
    vfaces = {}
    for fi, f in enumerate(faces):
        for v in f:
            vfaces.setdefault(v, []).append(fi)

    def vertex_nonmanifold(v):
        fs = vfaces[v]
        local_edges = {}
        for fi in fs:
            for u in faces[fi]:
                if u != v:
                    local_edges.setdefault(u, []).append(fi)
        ones = [u for u, fl in local_edges.items() if len(fl) == 1]
        if any(len(fl) > 2 for fl in local_edges.values()):
            return True
        if len(ones) not in (0, 2):
            return True
        # walk the fan
        start = local_edges[ones[0]][0] if ones else fs[0]
        visited = {start}
        frontier = [start]
        while frontier:
            cur = frontier.pop()
            for u, fl in local_edges.items():
                if cur in fl:
                    for other in fl:
                        if other not in visited:
                            visited.add(other)
                            frontier.append(other)
        return len(visited) != len(fs)

    referenced = sorted(vfaces)
    NMV = sum(1 for v in referenced if vertex_nonmanifold(v)) / len(referenced)

    neighbors = {}
    for (a, b) in edge_count:
        neighbors.setdefault(a, set()).add(b)
        neighbors.setdefault(b, set()).add(a)
    VVD = float(np.mean([abs(len(neighbors.get(v, ())) - 6) for v in referenced]))

    # connected components via BFS over vertices
    seen = set()
    comps = []
    for v in referenced:
        if v in seen:
            continue
        comp = {v}
        stack = [v]
        while stack:
            cur = stack.pop()
            for nb in neighbors.get(cur, ()):
                if nb not in comp:
                    comp.add(nb)
                    stack.append(nb)
        seen |= comp
        comps.append(comp)
    CC = len(comps)

    # IBL on the component with most faces
    def comp_face_count(comp):
        return sum(1 for f in faces if f[0] in comp)

    comps.sort(key=lambda c: (-comp_face_count(c), -len(c), min(c)))
    main = comps[0]
    boundary = [e for e, c in edge_count.items() if c == 1 and e[0] in main]
    loops = 0
    if boundary:
        bseen = set()
        badj = {}
        for a, b in boundary:
            badj.setdefault(a, set()).add(b)
            badj.setdefault(b, set()).add(a)
        for a, b in boundary:
            if (a, b) in bseen:
                continue
            comp_edges = set()
            stack = [(a, b)]
            vs = {a, b}
            while stack:
                e = stack.pop()
                if e in comp_edges:
                    continue
                comp_edges.add(e)
                for v in e:
                    for u in badj[v]:
                        ee = tuple(sorted((v, u)))
                        if ee in [tuple(sorted(x)) for x in boundary] and ee not in comp_edges:
                            stack.append(ee)
                            vs.add(u)
            bseen |= comp_edges
            loops += 1
    IBL = max(loops - 1, 0)
    return {
        "AR": AR, "ANG": ANG, "DTR": DTR, "NME": NME,
        "NMV": NMV, "VVD": VVD, "CC": CC, "IBL": IBL,
    }
