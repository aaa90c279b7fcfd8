"""On-disk RGB-D sequence format.

Layout of a dataset root::

    intrinsics.txt          one line "fx fy cx cy width height\\n"
    rgb/000000.png          8-bit RGB
    depth/000000.png        16-bit grayscale, z-depth in units of 1/depth_scale m, 0 = missing
    pose/000000.txt         4 lines of 4 numbers, camera-to-world, row-major
    annotation/000000.png   optional 16-bit plane ids, 0 = non-plane (S mode)
    gt_cloud.ply            optional labeled ground-truth cloud

Frame files are numbered 000000, 000001, ... without gaps. Text files must end
with a newline, which makes every truncation detectable.
"""

import io
import logging
import os
import re
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DatasetFormatError, IoError, ModeDataMissing
from .geometry import Intrinsics, Pose
from .ply import LabeledCloud, read_labeled_ply

log = logging.getLogger(__name__)

STREAMS = ("rgb", "depth", "pose")
_EXT = {"rgb": ".png", "depth": ".png", "pose": ".txt", "annotation": ".png"}
_STEM = re.compile(r"^(\d{6})$")


def frame_name(i: int, stream: str) -> str:
    return os.path.join(stream, f"{i:06d}{_EXT[stream]}")


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def png_bytes(arr: np.ndarray) -> bytes:
    """Encode a uint8 (H, W, 3) or uint16 (H, W) array as PNG."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint16:
        img = Image.fromarray(arr.astype("<u2"))  # mode I;16
    elif arr.dtype == np.uint8:
        img = Image.fromarray(arr)
    else:
        raise TypeError(f"unsupported PNG dtype {arr.dtype}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_intrinsics(path, intr: Intrinsics):
    text = f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {int(intr.width)} {int(intr.height)}\n"
    atomic_write_bytes(path, text.encode())


def format_pose(pose: Pose) -> str:
    return "".join(" ".join(repr(float(x)) for x in row) + "\n" for row in pose.matrix)


def write_dataset_frame(root, i: int, rgb: np.ndarray, depth_units: np.ndarray, pose: Pose,
                        annotation: np.ndarray | None = None):
    for stream in ("rgb", "depth", "pose") + (("annotation",) if annotation is not None else ()):
        os.makedirs(os.path.join(root, stream), exist_ok=True)
    atomic_write_bytes(os.path.join(root, frame_name(i, "rgb")), png_bytes(rgb.astype(np.uint8)))
    atomic_write_bytes(os.path.join(root, frame_name(i, "depth")), png_bytes(depth_units.astype(np.uint16)))
    atomic_write_bytes(os.path.join(root, frame_name(i, "pose")), format_pose(pose).encode())
    if annotation is not None:
        atomic_write_bytes(os.path.join(root, frame_name(i, "annotation")),
                           png_bytes(annotation.astype(np.uint16)))


def _read_text(path) -> str:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DatasetFormatError(f"cannot read: {e}", path) from e
    if not raw.endswith(b"\n"):
        raise DatasetFormatError("text file must end with a newline (truncated?)", path)
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise DatasetFormatError("not ASCII text", path) from e


def read_intrinsics(path) -> Intrinsics:
    parts = _read_text(path).split()
    if len(parts) != 6:
        raise DatasetFormatError(f"expected 6 fields, found {len(parts)}", path)
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = int(parts[4]), int(parts[5])
        return Intrinsics(fx, fy, cx, cy, w, h)
    except ValueError as e:
        raise DatasetFormatError(f"bad intrinsics: {e}", path) from e


def read_pose(path) -> Pose:
    lines = _read_text(path).splitlines()
    try:
        rows = [[float(x) for x in line.split()] for line in lines]
        if len(rows) != 4 or any(len(r) != 4 for r in rows):
            raise ValueError("expected 4 rows of 4 numbers")
        T = np.array(rows)
        if not np.allclose(T[3], [0, 0, 0, 1]):
            raise ValueError("last row must be 0 0 0 1")
        return Pose.from_matrix(T)
    except ValueError as e:
        raise DatasetFormatError(f"bad pose: {e}", path) from e


def read_png(path, expect: str, size=None) -> np.ndarray:
    """Decode a PNG fully; ``expect`` is 'rgb' or 'u16'."""
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise DatasetFormatError(f"not a PNG ({img.format})", path)
            img.load()
            mode = img.mode
            arr = np.array(img)
    except DatasetFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as e:
        raise DatasetFormatError(f"unreadable PNG: {e}", path) from e
    if expect == "rgb":
        if mode != "RGB":
            raise DatasetFormatError(f"expected an RGB image, got mode {mode}", path)
    elif mode not in ("I;16", "I;16B", "I;16L", "I"):
        raise DatasetFormatError(f"expected a 16-bit image, got mode {mode}", path)
    if size is not None and (arr.shape[1], arr.shape[0]) != tuple(size):
        raise DatasetFormatError(f"image is {arr.shape[1]}x{arr.shape[0]}, intrinsics say "
                                 f"{size[0]}x{size[1]}", path)
    if expect == "u16":
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
            raise DatasetFormatError("values outside 16-bit range", path)
        arr = arr.astype(np.uint16)
    return arr


_PNG_END = b"\x00\x00\x00\x00IEND\xaeB`\x82"


def _verify_png(path):
    """Cheap integrity check: chunk CRCs and the end marker, no decode."""
    try:
        with open(path, "rb") as f:
            f.seek(max(os.path.getsize(path) - len(_PNG_END), 0))
            if f.read() != _PNG_END:
                raise DatasetFormatError("PNG lacks its end marker (truncated?)", path)
        with Image.open(path) as img:
            img.verify()
    except (OSError, SyntaxError, ValueError) as e:
        raise DatasetFormatError(f"corrupt PNG: {e}", path) from e


def _frame_ids(root, stream):
    d = os.path.join(root, stream)
    if not os.path.isdir(d):
        return None
    ids = []
    for name in sorted(os.listdir(d)):
        stem, ext = os.path.splitext(name)
        if name.startswith(".") or ext != _EXT[stream]:
            continue
        m = _STEM.match(stem)
        if not m:
            raise DatasetFormatError("frame files must be named NNNNNN" + _EXT[stream],
                                     os.path.join(d, name))
        ids.append(int(m.group(1)))
    return ids


@dataclass
class Frame:
    index: int
    rgb: np.ndarray     # (H, W, 3) float in [0, 1]
    depth: np.ndarray   # (H, W) z-depth in meters, 0 = missing
    pose: Pose


class Dataset:
    """Validated handle on a dataset root; frames are decoded on demand."""

    def __init__(self, root, mode: str = "ss", depth_scale: float = 1000.0):
        self.root = os.fspath(root)
        self.mode = mode.lower()
        if self.mode not in ("s", "ss"):
            raise ValueError(f"mode must be 's' or 'ss', got {mode!r}")
        if not depth_scale > 0:
            raise ValueError("depth_scale must be positive")
        self.depth_scale = float(depth_scale)
        self.annotation_reads = 0
        self._validate()

    def _validate(self):
        if not os.path.isdir(self.root):
            raise DatasetFormatError("dataset root is not a directory", self.root)
        self.intrinsics = read_intrinsics(os.path.join(self.root, "intrinsics.txt"))
        size = (self.intrinsics.width, self.intrinsics.height)
        ids = {}
        for stream in STREAMS:
            found = _frame_ids(self.root, stream)
            if found is None:
                raise DatasetFormatError(f"missing {stream}/ directory", os.path.join(self.root, stream))
            ids[stream] = found
        n = max(len(v) for v in ids.values())
        expected = list(range(n))
        for stream in STREAMS:
            missing = sorted(set(expected) - set(ids[stream]))
            if missing:
                raise DatasetFormatError(f"missing {stream} file for frame {missing[0]}",
                                         os.path.join(self.root, frame_name(missing[0], stream)))
            extra = sorted(set(ids[stream]) - set(expected))
            if extra:
                raise DatasetFormatError("frame numbering has a gap",
                                         os.path.join(self.root, frame_name(extra[0], stream)))
        self.n_frames = n
        ann = _frame_ids(self.root, "annotation")
        self.has_annotations = ann is not None and n > 0 and ann == expected
        if ann is not None and ann != expected and (ann or self.mode == "s"):
            first = sorted(set(expected) ^ set(ann))[0]
            raise DatasetFormatError(f"annotation file for frame {first} missing or unexpected",
                                     os.path.join(self.root, frame_name(first, "annotation")))
        if self.mode == "s" and not self.has_annotations:
            raise ModeDataMissing("S mode needs annotation/NNNNNN.png for every frame")
        self.poses = [read_pose(os.path.join(self.root, frame_name(i, "pose"))) for i in range(n)]
        for i in range(n):
            for stream in ("rgb", "depth"):
                p = os.path.join(self.root, frame_name(i, stream))
                _verify_png(p)
                self._check_header(p, "rgb" if stream == "rgb" else "u16", size)
            if self.mode == "s":
                p = os.path.join(self.root, frame_name(i, "annotation"))
                _verify_png(p)
                self._check_header(p, "u16", size)
        gt = os.path.join(self.root, "gt_cloud.ply")
        self.gt_path = gt if os.path.exists(gt) else None
        if self.gt_path:
            try:
                read_labeled_ply(gt)
            except (ValueError, IoError) as e:
                raise DatasetFormatError(f"bad ground-truth cloud: {e}", gt) from e

    @staticmethod
    def _check_header(path, expect, size):
        try:
            with Image.open(path) as img:
                mode, got = img.mode, img.size
        except (OSError, SyntaxError, ValueError) as e:
            raise DatasetFormatError(f"unreadable PNG: {e}", path) from e
        ok_modes = ("RGB",) if expect == "rgb" else ("I;16", "I;16B", "I;16L", "I")
        if mode not in ok_modes:
            raise DatasetFormatError(f"unexpected image mode {mode}", path)
        if got != tuple(size):
            raise DatasetFormatError(f"image is {got[0]}x{got[1]}, intrinsics say {size[0]}x{size[1]}", path)

    def __len__(self):
        return self.n_frames

    def frame(self, i: int) -> Frame:
        if not 0 <= i < self.n_frames:
            raise IndexError(f"frame {i} out of range [0, {self.n_frames})")
        size = (self.intrinsics.width, self.intrinsics.height)
        rgb = read_png(os.path.join(self.root, frame_name(i, "rgb")), "rgb", size)
        depth = read_png(os.path.join(self.root, frame_name(i, "depth")), "u16", size)
        return Frame(i, rgb.astype(float) / 255.0, depth.astype(float) / self.depth_scale, self.poses[i])

    def annotation(self, i: int) -> np.ndarray:
        """Plane-id image of frame ``i`` (counted, so label-source rules can be audited)."""
        if not self.has_annotations:
            raise ModeDataMissing("dataset has no annotation images")
        self.annotation_reads += 1
        size = (self.intrinsics.width, self.intrinsics.height)
        return read_png(os.path.join(self.root, frame_name(i, "annotation")), "u16", size).astype(np.int64)

    def gt_cloud(self) -> LabeledCloud | None:
        return read_labeled_ply(self.gt_path) if self.gt_path else None


def load_dataset(root, mode: str = "ss", depth_scale: float = 1000.0) -> Dataset:
    ds = Dataset(root, mode, depth_scale)
    log.info("loaded %s: %d frames, %dx%d", root, len(ds), ds.intrinsics.width, ds.intrinsics.height)
    return ds
