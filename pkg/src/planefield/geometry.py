"""Camera and plane geometry.

Conventions used throughout the package:

* camera frame is x right, y down, z forward (pinhole, no distortion)
* poses map camera coordinates to world coordinates
* pixel (u, v) = (cx, cy) lies on the optical axis (pixel-center convention)
* a plane is the 4-vector [n_x, n_y, n_z, d] with n . x - d = 0
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePlane, InvalidDepth, OutOfBounds

_UNIT_TOL = 1e-15


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def camera_rays(self, u, v) -> np.ndarray:
        """Unnormalized camera-frame directions with z = 1, shape (..., 3)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def origin(self) -> np.ndarray:
        return self.translation

    def apply(self, points_cam) -> np.ndarray:
        return np.asarray(points_cam, dtype=float) @ self.rotation.T + self.translation

    def inverse_apply(self, points_world) -> np.ndarray:
        return (np.asarray(points_world, dtype=float) - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("need 0 <= t_near < t_far")

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.origin + t[..., None] * self.direction


def _check_pixels(u, v, intr: Intrinsics):
    if not np.all(intr.contains(u, v)):
        raise OutOfBounds(f"pixel outside {intr.width}x{intr.height} image")


def unproject(pixel, depth, intr: Intrinsics, pose: Pose | None = None) -> np.ndarray:
    """World-frame point seen at ``pixel`` with z-depth ``depth`` (meters).

    Works on a single pixel or on arrays: ``pixel`` may be (..., 2) with
    ``depth`` of shape (...).
    """
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    u, v = pixel[..., 0], pixel[..., 1]
    if np.any(~(depth > 0)):
        raise InvalidDepth("depth must be positive")
    _check_pixels(u, v, intr)
    p_cam = intr.camera_rays(u, v) * depth[..., None]
    return p_cam if pose is None else pose.apply(p_cam)


def project(point_world, intr: Intrinsics, pose: Pose | None = None) -> np.ndarray:
    p = np.asarray(point_world, dtype=float)
    if pose is not None:
        p = pose.inverse_apply(p)
    return intr.project(p)


def ray_through_pixel(pixel, intr: Intrinsics, pose: Pose | None = None,
                      t_near: float = 0.0, t_far: float = np.inf) -> Ray:
    u, v = float(pixel[0]), float(pixel[1])
    _check_pixels(u, v, intr)
    pose = pose or Pose()
    d = pose.rotation @ intr.camera_rays(u, v)
    return Ray(pose.origin.copy(), d / np.linalg.norm(d), t_near, t_far)


def pixel_rays(u, v, intr: Intrinsics, pose: Pose):
    """Batched rays: world origins (N, 3), unit directions (N, 3) and the
    factor converting z-depth into distance along the unit ray."""
    _check_pixels(u, v, intr)
    d_cam = intr.camera_rays(u, v)
    scale = np.linalg.norm(d_cam, axis=-1)
    dirs = (d_cam / scale[..., None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.origin, dirs.shape).copy()
    return origins, dirs, scale


def _normal_norm(raw) -> float:
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != 4:
        raise ValueError("plane must be a 4-vector [nx, ny, nz, d]")
    norm = np.linalg.norm(raw[..., :3], axis=-1)
    if np.any(~(norm > 0)):
        raise DegeneratePlane("plane normal is zero")
    return norm


def point_plane_distance(plane, x) -> np.ndarray | float:
    """Unsigned distance |n.x - d| / |n| for one point or an (N, 3) array."""
    plane = np.asarray(plane, dtype=float)
    norm = _normal_norm(plane)
    x = np.asarray(x, dtype=float)
    out = np.abs(x @ plane[:3] - plane[3]) / norm
    return float(out) if out.ndim == 0 else out


def canonicalize_plane(raw) -> np.ndarray:
    """Unit normal and non-negative offset.

    Ties at d == 0 are resolved so that the first nonzero normal component
    (x, then y, then z) is positive. Already-canonical input is returned
    bit-identical.
    """
    p = np.array(raw, dtype=float).reshape(4)
    norm = _normal_norm(p)
    if abs(norm - 1.0) > _UNIT_TOL:
        p = p / norm
    if p[3] < 0:
        p = -p
    elif p[3] == 0:
        p[3] = 0.0  # drop a negative zero
        nz = p[:3][p[:3] != 0]
        if nz[0] < 0:
            p[:3] = -p[:3]
    return p


def is_canonical(plane, tol: float = 1e-9) -> bool:
    p = np.asarray(plane, dtype=float)
    return p.shape == (4,) and p[3] >= 0 and abs(np.linalg.norm(p[:3]) - 1.0) <= tol
