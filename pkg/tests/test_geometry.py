import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planefield.errors import DegeneratePlane, InvalidDepth, OutOfBounds
from planefield.geometry import (Intrinsics, Pose, Ray, canonicalize_plane, is_canonical,
                                 pixel_rays, point_plane_distance, project, ray_through_pixel,
                                 unproject)

INTR = Intrinsics(500.0, 480.0, 319.5, 239.5, 640, 480)
WIDE = Intrinsics(100.0, 100.0, 319.5, 239.5, 640, 480)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)
nonzero_normal = st.tuples(finite, finite, finite).filter(lambda n: np.linalg.norm(n) > 1e-3)


def random_pose(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose(q, rng.uniform(-3, 3, 3))


def test_unproject_principal_point():
    assert np.allclose(unproject((INTR.cx, INTR.cy), 2.0, INTR), [0, 0, 2.0])


def test_unproject_translation():
    pose = Pose(np.eye(3), [1.0, 0.0, 0.0])
    assert np.allclose(unproject((INTR.cx, INTR.cy), 1.0, INTR, pose), [1, 0, 1])


def test_unproject_one_focal_length_right():
    assert np.allclose(unproject((WIDE.cx + WIDE.fx, WIDE.cy), 1.0, WIDE), [1, 0, 1])


def test_unproject_errors():
    with pytest.raises(InvalidDepth):
        unproject((10, 10), 0.0, INTR)
    with pytest.raises(InvalidDepth):
        unproject((10, 10), np.nan, INTR)
    with pytest.raises(OutOfBounds):
        unproject((640, 10), 1.0, INTR)
    with pytest.raises(OutOfBounds):
        unproject((-0.5, 10), 1.0, INTR)


def test_point_plane_distance_examples():
    assert point_plane_distance([0, 0, 1, 0], (1, 2, 3)) == 3.0
    assert point_plane_distance([0, 0, 2, 0], (0, 0, 3)) == 3.0
    # unit normal (1,1,1)/sqrt(3) at offset sqrt(3) passes through (1,1,1)
    p = canonicalize_plane([1, 1, 1, 3])
    assert p[3] == pytest.approx(np.sqrt(3))
    assert point_plane_distance(p, (1, 1, 1)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegeneratePlane):
        point_plane_distance([0, 0, 0, 1], (0, 0, 0))


def test_canonicalize_examples():
    assert np.array_equal(canonicalize_plane([0, 0, 1, -2]), [0, 0, -1, 2])
    assert np.array_equal(canonicalize_plane([0, 0, 2, 4]), [0, 0, 1, 2])
    assert np.array_equal(canonicalize_plane([0, 1, 0, 0.5]), [0, 1, 0, 0.5])
    with pytest.raises(DegeneratePlane):
        canonicalize_plane([0, 0, 0, 1])


def test_canonicalize_zero_offset_tie():
    assert np.array_equal(canonicalize_plane([0, -1, 0, 0]), [0, 1, 0, 0])
    assert np.array_equal(canonicalize_plane([-1, 1, 0, -0.0]), canonicalize_plane([1, -1, 0, 0]))


def test_ray_through_pixel():
    r = ray_through_pixel((INTR.cx, INTR.cy), INTR)
    assert np.allclose(r.origin, 0) and np.allclose(r.direction, [0, 0, 1])
    r = ray_through_pixel((WIDE.cx + WIDE.fx, WIDE.cy), WIDE)
    assert np.allclose(r.direction, np.array([1, 0, 1]) / np.sqrt(2))
    with pytest.raises(OutOfBounds):
        ray_through_pixel((0, 480), INTR)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 1.0]), 2.0, 1.0)


def test_intrinsics_and_pose_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4, 1, 4, 4)
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose.from_matrix(np.eye(3))


@settings(max_examples=200, deadline=None)
@given(nonzero_normal, finite)
def test_canonicalize_idempotent(n, d):
    c = canonicalize_plane([*n, d])
    assert is_canonical(c)
    assert np.array_equal(canonicalize_plane(c), c)


@settings(max_examples=200, deadline=None)
@given(nonzero_normal, finite, st.floats(0.01, 100), vec3)
def test_distance_invariant_to_scaling_and_negation(n, d, k, x):
    raw = np.array([*n, d])
    ref = point_plane_distance(raw, x)
    assert point_plane_distance(k * raw, x) == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert point_plane_distance(-raw, x) == pytest.approx(ref, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(nonzero_normal, st.floats(0, 10), st.floats(-5, 5), st.floats(-5, 5))
def test_point_built_on_plane_has_zero_distance(n, d, a, b):
    p = canonicalize_plane([*n, d])
    n = p[:3]
    t1 = np.cross(n, [1, 0, 0] if abs(n[0]) < 0.9 else [0, 1, 0])
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    x = p[3] * n + a * t1 + b * t2
    assert point_plane_distance(p, x) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 639.99), st.floats(0, 479.99), st.floats(0.1, 20))
def test_unproject_project_roundtrip(seed, u, v, z):
    pose = random_pose(seed)
    x = unproject((u, v), z, INTR, pose)
    uv = project(x, INTR, pose)
    assert np.allclose(uv, [u, v], atol=1e-6)


def test_pixel_rays_unit_and_consistent():
    pose = random_pose(3)
    u = np.array([0.0, 100.0, 639.0])
    v = np.array([0.0, 50.0, 479.0])
    o, d, scale = pixel_rays(u, v, INTR, pose)
    assert np.allclose(np.linalg.norm(d, axis=1), 1, atol=1e-12)
    # distance along the unit ray is z-depth times the scale factor
    pts = unproject(np.stack([u, v], 1), np.full(3, 2.0), INTR, pose)
    assert np.allclose(o + d * (2.0 * scale)[:, None], pts)
