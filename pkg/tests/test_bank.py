import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planefield.bank import (MemoryBank, ema_update, match_and_label, plane_param_distance,
                             points_to_plane_distance, raw_param_distance)
from planefield.errors import BankOverflow, EmptyPointSet, NotCanonical
from planefield.geometry import canonicalize_plane, is_canonical


def plane_points(plane, n, rng, noise=0.0, extent=1.0):
    nrm, d = np.asarray(plane[:3], float), plane[3]
    t1 = np.cross(nrm, [1, 0, 0] if abs(nrm[0]) < 0.9 else [0, 1, 0])
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(nrm, t1)
    ab = rng.uniform(-extent, extent, (n, 2))
    off = rng.normal(0, noise, (n, 1)) if noise else np.zeros((n, 1))
    return d * nrm + ab[:, :1] * t1 + ab[:, 1:] * t2 + off * nrm


def test_param_distance_examples():
    assert plane_param_distance([0, 0, 1, 1], [0, 0, 1, 1]) == 0
    assert plane_param_distance([0, 0, 1, 1], [1, 0, 0, 1]) == pytest.approx(1.0)
    assert plane_param_distance([0, 0, 1, 0], [0, 0, 1, 0.5]) == pytest.approx(0.5)
    with pytest.raises(NotCanonical):
        plane_param_distance([0, 0, 1, -1], [0, 0, 1, 1])


def test_points_to_plane_examples():
    pts = np.array([[0, 0, 1.0], [1, 1, 2.0], [3, -1, 3.0]])
    assert points_to_plane_distance([0, 0, 1, 0], pts) == pytest.approx(2.0)
    assert points_to_plane_distance([0, 0, 2, 0], pts) == pytest.approx(2.0)
    assert points_to_plane_distance([0, 0, 1, 0], pts * [1, 1, 0]) == 0
    with pytest.raises(EmptyPointSet):
        points_to_plane_distance([0, 0, 1, 0], np.zeros((0, 3)))


def test_ema_examples():
    p = np.array([0.6, 0.8, 0.0, 1.5])
    assert np.allclose(ema_update(p, p, 0.999), p)
    assert np.allclose(ema_update([0, 0, 1, 0], p, 1.0), p)
    assert np.allclose(ema_update([0, 0, 1, 0], [0, 0, 1, 1], 0.5), [0, 0, 1, 0.5])
    # mixed normals: the blend is renormalized
    out = ema_update([1, 0, 0, 1], [0, 1, 0, 1], 0.5)
    assert is_canonical(out) and np.allclose(out, [np.sqrt(0.5), np.sqrt(0.5), 0, np.sqrt(2)])
    with pytest.raises(NotCanonical):
        ema_update([0, 0, 1, -1], p, 0.5)


def test_first_frame_inserts_in_order():
    rng = np.random.default_rng(0)
    planes = [np.array([0, 0, 1, 0.0]), np.array([1, 0, 0, 2.0]), np.array([0, 1, 0, 1.0])]
    y, bank = match_and_label(MemoryBank(8), [(p, plane_points(p, 20, rng)) for p in planes])
    assert list(y.argmax(1)) == [0, 1, 2] and len(bank) == 3
    assert y.shape == (3, 8) and np.all(y.sum(1) == 1)
    assert np.array_equal(bank.B[3:], np.zeros((5, 4)))


def test_reobserved_plane_keeps_id_and_row():
    rng = np.random.default_rng(1)
    p = np.array([0, 0, 1, 1.0])
    bank = MemoryBank(4)
    bank.match([(p, plane_points(p, 30, rng))])
    before = bank.planes
    ids = bank.match([(p, plane_points(p, 30, rng))])
    assert ids[0] == 0 and np.array_equal(bank.planes, before)


def test_offset_plane_gets_new_id():
    rng = np.random.default_rng(2)
    bank = MemoryBank(4, tau_dist=0.1)
    p = np.array([0, 0, 1, 1.0])
    q = np.array([0, 0, 1, 1.2])
    bank.match([(p, plane_points(p, 30, rng))])
    assert bank.match([(q, plane_points(q, 30, rng))])[0] == 1
    # just inside the gate matches
    r = np.array([0, 0, 1, 1.09])
    assert bank.match([(r, plane_points(r, 30, rng))])[0] in (0, 1)
    assert len(bank) == 2


def test_overflow_is_an_error():
    rng = np.random.default_rng(3)
    bank = MemoryBank(2)
    planes = [np.array([0, 0, 1, float(k)]) for k in range(3)]
    with pytest.raises(BankOverflow):
        bank.match([(p, plane_points(p, 5, rng)) for p in planes])
    bank = MemoryBank(2)
    bank.match([(p, plane_points(p, 5, rng)) for p in planes[:2]])
    with pytest.raises(BankOverflow):
        bank.match([(planes[2] + [0, 0, 0, 5], plane_points(planes[2] + [0, 0, 0, 5], 5, rng))])


def test_snapshot_roundtrip():
    bank = MemoryBank(8)
    bank.match([(canonicalize_plane([1, 2, 3, 4]), np.zeros((1, 3))),
                (np.array([0, 0, 1, 0.25]), np.zeros((1, 3)))])
    text = bank.snapshot()
    assert text.endswith("\n") and "\r" not in text
    assert text.splitlines()[1] == "1 0 0 1 0.25"
    again = MemoryBank.from_snapshot(text, capacity=8)
    assert np.allclose(again.planes, bank.planes, rtol=1e-8)


def test_scaling_invariance_mechanism():
    rng = np.random.default_rng(4)
    p = canonicalize_plane([0.3, -0.4, 0.8, 1.3])
    pts = plane_points(p, 50, rng, noise=0.01)
    base = points_to_plane_distance(p, pts)
    assert points_to_plane_distance(3.7 * p, pts) == pytest.approx(base, abs=1e-12)
    assert points_to_plane_distance(-p, pts) == pytest.approx(base, abs=1e-12)
    assert raw_param_distance(p, 3.7 * p) > 0.1


class _Replay:
    """Small state machine: planes observed in random order, possibly several per frame."""

    def __init__(self, seed, n_planes=6):
        self.rng = np.random.default_rng(seed)
        normals = [[0, 0, 1], [0, 0, 1], [1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]]
        offsets = [0.0, 3.0, 2.0, 0.5, 2.0, 0.7]
        self.planes = [np.array([*n, d], float) for n, d in zip(normals, offsets)][:n_planes]
        self.bank = MemoryBank(64, tau_dist=0.1, psi=0.999)
        self.ids = {}

    def observe(self, k):
        true = self.planes[k]
        pts = plane_points(true, 40, self.rng, noise=0.1 / 4 / 3)
        n = true[:3] + self.rng.normal(0, 0.01, 3)
        est = canonicalize_plane(np.append(n, np.mean(pts @ n)))
        return est, pts

    def frame(self):
        ks = self.rng.permutation(len(self.planes))[: self.rng.integers(1, 4)]
        got = self.bank.match([self.observe(k) for k in ks])
        for k, g in zip(ks, got):
            assert self.ids.setdefault(int(k), int(g)) == g
        for row in self.bank.planes:
            assert is_canonical(row)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_index_stability_property(seed):
    sm = _Replay(seed)
    g_prev = 0
    for _ in range(40):
        sm.frame()
        assert len(sm.bank) >= g_prev
        g_prev = len(sm.bank)
    assert len(sm.bank) == len(sm.ids)
