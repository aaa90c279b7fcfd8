"""Labeled point clouds as PLY files.

Vertices carry ``x y z red green blue``. The color encodes the instance id
through a fixed 64-entry colormap (id mod 64); unlabeled points are gray.
ASCII output writes coordinates with 17 significant digits so a round trip
reproduces them exactly.
"""

import colorsys
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, IoError

UNLABELED_COLOR = (128, 128, 128)


def _build_colormap(n: int = 64) -> np.ndarray:
    cmap = []
    for i in range(n):
        hue = (i * 0.618033988749895) % 1.0
        sat = 0.95 - 0.3 * ((i // 16) % 2)
        val = 0.95 - 0.25 * ((i // 32) % 2) - 0.1 * ((i // 8) % 2)
        rgb = tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, sat, val))
        cmap.append(rgb)
    cmap = np.array(cmap, dtype=np.uint8)
    assert len({tuple(c) for c in cmap}) == n and tuple(UNLABELED_COLOR) not in {tuple(c) for c in cmap}
    return cmap


COLORMAP = _build_colormap()
_COLOR_TO_ID = {tuple(int(v) for v in c): i for i, c in enumerate(COLORMAP)}


@dataclass
class LabeledCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self):
        return len(self.points)


def label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty((len(labels), 3), dtype=np.uint8)
    lab = labels >= 0
    out[lab] = COLORMAP[labels[lab] % len(COLORMAP)]
    out[~lab] = UNLABELED_COLOR
    return out


def colors_to_labels(colors) -> np.ndarray:
    colors = np.asarray(colors, dtype=np.int64).reshape(-1, 3)
    return np.array([_COLOR_TO_ID.get(tuple(c), -1) for c in colors.tolist()], dtype=np.int64)


def _atomic_bytes(path, data: bytes):
    path = os.fspath(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def export_labeled_ply(cloud: LabeledCloud, path, binary: bool = False):
    if len(cloud) == 0:
        raise EmptyInput("cannot export an empty cloud")
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    coord_type = "double"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
              f"property {coord_type} x\nproperty {coord_type} y\nproperty {coord_type} z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    rgb = label_colors(cloud.labels)
    if binary:
        rec = np.empty(n, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                 ("r", "u1"), ("g", "u1"), ("b", "u1")])
        rec["x"], rec["y"], rec["z"] = cloud.points.T
        rec["r"], rec["g"], rec["b"] = rgb.T
        body = rec.tobytes()
    else:
        lines = [f"{x!r} {y!r} {z!r} {r} {g} {b}"
                 for (x, y, z), (r, g, b) in zip(cloud.points.tolist(), rgb.tolist())]
        body = ("\n".join(lines) + "\n").encode()
    _atomic_bytes(path, header.encode() + body)


def read_labeled_ply(path) -> LabeledCloud:
    """Read a PLY written by :func:`export_labeled_ply` (ASCII or binary)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode().splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt, n = None, None
    props = []
    for line in header:
        parts = line.split()
        if parts[:1] == ["format"]:
            fmt = parts[1]
        elif parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            props.append((parts[1], parts[2]))
    if [p[1] for p in props] != ["x", "y", "z", "red", "green", "blue"] or n is None:
        raise ValueError(f"{path}: unexpected vertex layout")
    if fmt == "ascii":
        if not body.endswith(b"\n"):
            raise ValueError(f"{path}: ASCII body must end with a newline (truncated?)")
        rows = body.decode().split("\n")[:-1]
        if len(rows) != n:
            raise ValueError(f"{path}: header declares {n} vertices, found {len(rows)}")
        arr = np.array([r.split() for r in rows], dtype=float).reshape(n, 6)
        pts, rgb = arr[:, :3], arr[:, 3:].astype(np.int64)
    elif fmt == "binary_little_endian":
        ctype = {"double": "<f8", "float": "<f4"}[props[0][0]]
        dt = np.dtype([("x", ctype), ("y", ctype), ("z", ctype), ("r", "u1"), ("g", "u1"), ("b", "u1")])
        if len(body) != n * dt.itemsize:
            raise ValueError(f"{path}: truncated binary body")
        rec = np.frombuffer(body, dtype=dt)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
        rgb = np.stack([rec["r"], rec["g"], rec["b"]], axis=1).astype(np.int64)
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    return LabeledCloud(pts, colors_to_labels(rgb))
