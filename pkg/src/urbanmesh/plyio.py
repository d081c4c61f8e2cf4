"""Binary little-endian PLY for triangle meshes and point clouds.

Vertices are float32 x/y/z; faces are uchar-count + int32 vertex-index lists.
This is the single interchange format for meshes and point clouds; payload
round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import MalformedHeaderError, TruncatedPayloadError


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    if faces is None:
        faces = np.zeros((0, 3), dtype="<i4")
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {len(faces)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    face_block = np.empty(
        len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))]
    )
    face_block["n"] = 3
    face_block["idx"] = faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(vertices).tobytes())
        fh.write(face_block.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a binary little-endian PLY written by :func:`write_ply`.

    Returns (float64 (V,3) vertices, int64 (F,3) faces).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    end_tag = b"end_header\n"
    end = blob.find(end_tag)
    if not blob.startswith(b"ply\n") or end < 0:
        raise MalformedHeaderError(f"{path}: not a PLY file")
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    n_vert = n_face = None
    fmt_ok = False
    element = None
    vertex_props = []
    for line in header_lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
            else:
                raise MalformedHeaderError(f"{path}: unsupported element {element!r}")
        elif parts[0] == "property" and element == "vertex":
            vertex_props.append(parts[-1])
    if not fmt_ok:
        raise MalformedHeaderError(f"{path}: only binary little-endian PLY supported")
    if n_vert is None:
        raise MalformedHeaderError(f"{path}: missing vertex element")
    if vertex_props[:3] != ["x", "y", "z"] or len(vertex_props) != 3:
        raise MalformedHeaderError(f"{path}: vertex properties must be exactly x,y,z")
    n_face = n_face or 0

    body = blob[end + len(end_tag):]
    vert_bytes = n_vert * 12
    if len(body) < vert_bytes:
        raise TruncatedPayloadError(f"{path}: vertex payload truncated")
    vertices = np.frombuffer(body[:vert_bytes], dtype="<f4").reshape(n_vert, 3)

    faces = np.zeros((n_face, 3), dtype=np.int64)
    offset = vert_bytes
    face_bytes = n_face * (1 + 12)
    if len(body) < offset + face_bytes:
        raise TruncatedPayloadError(f"{path}: face payload truncated")
    if n_face:
        raw = np.frombuffer(
            body[offset:offset + face_bytes],
            dtype=[("n", "u1"), ("idx", "<i4", (3,))],
        )
        if np.any(raw["n"] != 3):
            raise MalformedHeaderError(f"{path}: only triangle faces supported")
        faces = raw["idx"].astype(np.int64)
        if faces.size and (faces.min() < 0 or faces.max() >= n_vert):
            raise MalformedHeaderError(f"{path}: face index out of range")
    if len(body) != offset + face_bytes:
        raise TruncatedPayloadError(f"{path}: trailing bytes after face payload")
    return vertices.astype(np.float64), faces
