"""Float32 raster payloads with text sidecar headers.

A raster is stored as two files: ``<path>`` holds the row-major little-endian
float32 payload, ``<path>.hdr`` a ``key: value`` text header with width,
height, channels, and a semantic kind tag (depth | normal | silhouette |
descriptor). Payload length must equal width * height * channels * 4 bytes.
"""

from __future__ import annotations

import os

import numpy as np

from .exceptions import MalformedHeaderError, TruncatedPayloadError

KINDS = ("depth", "normal", "silhouette", "descriptor")


def write_raster(path, data: np.ndarray, kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown raster kind {kind!r}")
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        h, w = data.shape
        c = 1
    elif data.ndim == 3:
        h, w, c = data.shape
    else:
        raise ValueError("raster must be HxW or HxWxC")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(data).tobytes())
    with open(str(path) + ".hdr", "w") as fh:
        fh.write(f"width: {w}\nheight: {h}\nchannels: {c}\nkind: {kind}\n")


def read_raster(path) -> tuple[np.ndarray, str]:
    """Read payload + header; returns (HxW or HxWxC float32 array, kind).

    Raises
    ------
    MalformedHeaderError
        Missing/garbled header or unknown kind.
    TruncatedPayloadError
        Payload shorter or longer than the header promises.
    """
    hdr_path = str(path) + ".hdr"
    if not os.path.exists(hdr_path):
        raise MalformedHeaderError(f"{path}: missing sidecar header")
    fields = {}
    with open(hdr_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise MalformedHeaderError(f"{hdr_path}: bad line {line!r}")
            k, v = line.split(":", 1)
            fields[k.strip()] = v.strip()
    try:
        w = int(fields["width"])
        h = int(fields["height"])
        c = int(fields["channels"])
        kind = fields["kind"]
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"{hdr_path}: {exc}") from exc
    if kind not in KINDS:
        raise MalformedHeaderError(f"{hdr_path}: unknown kind {kind!r}")
    if w <= 0 or h <= 0 or c <= 0:
        raise MalformedHeaderError(f"{hdr_path}: non-positive dimensions")
    expected = w * h * c * 4
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if c == 1:
        arr = arr[:, :, 0]
    return arr.copy(), kind
