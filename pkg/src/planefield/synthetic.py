"""Ray-cast synthetic planar scenes into RGB-D datasets with exact labels."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import write_dataset_frame, write_intrinsics
from .errors import SpecError
from .geometry import Intrinsics, Pose, canonicalize_plane
from .ply import LabeledCloud, export_labeled_ply


@dataclass
class ScenePlane:
    """Rectangle centred at ``center`` spanned by unit axes ``u`` and ``v``."""

    id: int
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.u = self.u / np.linalg.norm(self.u)
        self.v = self.v / np.linalg.norm(self.v)
        if abs(self.u @ self.v) > 1e-9 or self.half_u <= 0 or self.half_v <= 0 or self.id < 1:
            raise SpecError(f"plane {self.id}: axes must be orthogonal, extents positive, id >= 1")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def params(self) -> np.ndarray:
        n = self.normal
        return canonicalize_plane(np.append(n, n @ self.center))


@dataclass
class SyntheticScene:
    planes: list
    poses: list
    intrinsics: Intrinsics
    depth_noise: float = 0.0
    texture_seed: int = 0
    color_noise: float = 0.03
    gt_every: int = 10
    gt_stride: int = 2
    meta: dict = field(default_factory=dict)


def orbit_poses(n_frames: int, center=(0.0, 0.0, 1.5), radius: float = 0.8, loops: float = 1.25,
                pitch_amp: float = 0.6, pitch_cycles: float = 7.0, yaw_offset: float = np.pi):
    """Cameras on a horizontal circle looking across it, nodding up and down."""
    center = np.asarray(center, dtype=float)
    poses = []
    for i in range(n_frames):
        frac = i / max(n_frames, 1)
        theta = 2 * np.pi * loops * frac
        yaw = theta + yaw_offset
        pitch = pitch_amp * np.sin(2 * np.pi * pitch_cycles * frac)
        pos = center + radius * np.array([np.cos(theta), np.sin(theta), 0.0])
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        poses.append(Pose(np.stack([right, down, fwd], axis=1), pos))
    return poses


def room_planes(size=(4.0, 4.0, 3.0)):
    """Axis-aligned box room: floor, ceiling and four walls, ids 1..6."""
    sx, sy, sz = (s / 2 for s in size)
    zc = sz
    ex, ey, ez = np.eye(3)
    return [
        ScenePlane(1, [0, 0, 0], ex, ey, sx, sy, (0.55, 0.45, 0.35)),
        ScenePlane(2, [0, 0, 2 * sz], ex, ey, sx, sy, (0.9, 0.9, 0.85)),
        ScenePlane(3, [sx, 0, zc], ey, ez, sy, sz, (0.8, 0.3, 0.3)),
        ScenePlane(4, [-sx, 0, zc], ey, ez, sy, sz, (0.3, 0.7, 0.35)),
        ScenePlane(5, [0, sy, zc], ex, ez, sx, sz, (0.3, 0.4, 0.85)),
        ScenePlane(6, [0, -sy, zc], ex, ez, sx, sz, (0.85, 0.75, 0.3)),
    ]


def room_scene(n_frames: int = 200, width: int = 80, height: int = 60, depth_noise: float = 0.002,
               texture_seed: int = 0) -> SyntheticScene:
    """The documented 4 x 4 x 3 m room with a 200-frame orbit."""
    intr = Intrinsics(60.0, 60.0, width / 2 - 0.5, height / 2 - 0.5, width, height)
    return SyntheticScene(room_planes(), orbit_poses(n_frames), intr, depth_noise, texture_seed,
                          meta={"preset": "room", "n_frames": n_frames})


def wall_scene(n_frames: int = 3, width: int = 40, height: int = 30) -> SyntheticScene:
    """A single large wall viewed head-on from a small sideways track."""
    intr = Intrinsics(30.0, 30.0, width / 2 - 0.5, height / 2 - 0.5, width, height)
    wall = ScenePlane(1, [0, 0, 2.0], [1, 0, 0], [0, 1, 0], 5.0, 5.0, (0.7, 0.4, 0.2))
    poses = [Pose(np.eye(3), [0.1 * i, 0.0, 0.0]) for i in range(n_frames)]
    return SyntheticScene([wall], poses, intr, 0.0, 0, meta={"preset": "wall"})


def scene_from_dict(d: dict) -> SyntheticScene:
    intr = Intrinsics(**d["intrinsics"])
    planes = [ScenePlane(p["id"], p["center"], p["u"], p["v"], p["half_u"], p["half_v"],
                         tuple(p.get("color", (0.5, 0.5, 0.5)))) for p in d["planes"]]
    traj = d["trajectory"]
    if "poses" in traj:
        poses = [Pose.from_matrix(np.asarray(m, dtype=float).reshape(4, 4)) for m in traj["poses"]]
    else:
        kw = {k: v for k, v in traj.items() if k != "type"}
        poses = orbit_poses(**kw)
    return SyntheticScene(planes, poses, intr, d.get("depth_noise", 0.0), d.get("texture_seed", 0),
                          d.get("color_noise", 0.03), d.get("gt_every", 10), d.get("gt_stride", 2),
                          meta=d)


def load_scene_spec(spec) -> SyntheticScene:
    """A preset name (``room``, ``wall``) or a path to a JSON scene description."""
    if spec == "room":
        return room_scene()
    if spec == "wall":
        return wall_scene()
    try:
        with open(spec) as f:
            return scene_from_dict(json.load(f))
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise SpecError(f"cannot read scene spec {spec}: {e}") from e


def raycast(scene: SyntheticScene, pose: Pose, u=None, v=None):
    """Exact z-depth and plane id per pixel (0 = background).

    ``u``/``v`` default to the full pixel grid. Returns (z_depth, ids, points).
    """
    intr = scene.intrinsics
    if u is None:
        v, u = np.mgrid[0:intr.height, 0:intr.width].astype(float)
    d_cam = intr.camera_rays(u, v)
    dirs = d_cam @ pose.rotation.T
    o = pose.origin
    best_t = np.full(u.shape, np.inf)
    ids = np.zeros(u.shape, dtype=np.int64)
    for pl in scene.planes:
        n = pl.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((pl.center - o) @ n) / denom
        hit = o + t[..., None] * dirs
        rel = hit - pl.center
        inside = (np.abs(rel @ pl.u) <= pl.half_u) & (np.abs(rel @ pl.v) <= pl.half_v)
        ok = np.isfinite(t) & (t > 1e-6) & inside & (t < best_t)
        best_t[ok] = t[ok]
        ids[ok] = pl.id
    z = np.where(ids > 0, best_t, 0.0)  # d_cam has unit z, so t is the z-depth
    points = o + z[..., None] * dirs
    return z, ids, points


def generate_synthetic(scene: SyntheticScene, out_root, depth_scale: float = 1000.0) -> LabeledCloud:
    """Write the scene as a dataset under ``out_root``; returns the ground-truth cloud.

    Depth is 16-bit PNG in units of 1/depth_scale m, RGB is the plane's flat
    color plus seeded noise, annotations hold plane ids (0 = none). The
    ground-truth cloud (exact, noise-free) samples every ``gt_every``-th frame
    at a ``gt_stride`` pixel stride and is saved as ``gt_cloud.ply``.
    """
    os.makedirs(out_root, exist_ok=True)
    intr = scene.intrinsics
    rng = np.random.default_rng(scene.texture_seed)
    colors = {pl.id: np.asarray(pl.color, dtype=float) for pl in scene.planes}
    gt_pts, gt_ids = [], []
    write_intrinsics(os.path.join(out_root, "intrinsics.txt"), intr)
    for i, pose in enumerate(scene.poses):
        z, ids, points = raycast(scene, pose)
        if not np.any(ids > 0):
            raise SpecError(f"frame {i} sees no scene plane")
        noisy = z + rng.normal(0.0, scene.depth_noise, z.shape) if scene.depth_noise > 0 else z
        depth_units = np.where(ids > 0, np.clip(np.round(noisy * depth_scale), 1, 65535), 0)
        rgb = np.zeros(z.shape + (3,))
        for pid, c in colors.items():
            rgb[ids == pid] = c
        rgb = np.clip(rgb + rng.normal(0.0, scene.color_noise, rgb.shape), 0.0, 1.0)
        rgb[ids == 0] = 0.0
        write_dataset_frame(out_root, i, (rgb * 255 + 0.5).astype(np.uint8),
                            depth_units.astype(np.uint16), pose, ids.astype(np.uint16))
        if i % scene.gt_every == 0:
            sel = (ids > 0)[:: scene.gt_stride, :: scene.gt_stride]
            gt_pts.append(points[:: scene.gt_stride, :: scene.gt_stride][sel])
            gt_ids.append(ids[:: scene.gt_stride, :: scene.gt_stride][sel])
    cloud = LabeledCloud(np.concatenate(gt_pts), np.concatenate(gt_ids))
    export_labeled_ply(cloud, os.path.join(out_root, "gt_cloud.ply"))
    return cloud
