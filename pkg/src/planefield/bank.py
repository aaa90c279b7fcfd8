"""Global memory bank of plane parameters with stable instance ids.

Each training batch produces plane instances with arbitrary local indices.
The bank turns them into global ids: an instance whose member points lie
close to a stored plane reuses that plane's row (and refreshes it with an
exponential moving average), anything else is appended as a new row.
"""

import numpy as np

from .errors import BankOverflow, EmptyPointSet, NotCanonical
from .geometry import canonicalize_plane, point_plane_distance


def _require_canonical(*planes):
    for p in planes:
        p = np.asarray(p, dtype=float)
        if p.shape != (4,) or p[3] < 0:
            raise NotCanonical(f"plane {p.tolist()} has a negative offset")


def plane_param_distance(p1, p2) -> float:
    """Orientation-insensitive parameter distance 1 - |cos(n1, n2)| + |d1 - d2|."""
    _require_canonical(p1, p2)
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    cos = p1[:3] @ p2[:3] / (np.linalg.norm(p1[:3]) * np.linalg.norm(p2[:3]))
    return float(1.0 - abs(cos) + abs(p1[3] - p2[3]))


def raw_param_distance(p1, p2) -> float:
    """Plain Euclidean distance between raw 4-vectors (for comparison only)."""
    return float(np.linalg.norm(np.asarray(p1, dtype=float) - np.asarray(p2, dtype=float)))


def points_to_plane_distance(plane, points) -> float:
    """Mean orthogonal distance of ``points`` to ``plane``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyPointSet("no member points")
    return float(np.mean(point_plane_distance(plane, points)))


def ema_update(bank_row, p_new, psi: float) -> np.ndarray:
    """psi * p_new + (1 - psi) * bank_row, re-canonicalized."""
    _require_canonical(bank_row, p_new)
    raw = psi * np.asarray(p_new, dtype=float) + (1.0 - psi) * np.asarray(bank_row, dtype=float)
    return canonicalize_plane(raw)


def one_hot(ids, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    y = np.zeros((len(ids), n_classes))
    y[np.arange(len(ids)), ids] = 1.0
    return y


class MemoryBank:
    """Z x 4 store of canonical planes; rows [0, g) are live.

    ``similarity`` selects the matching score: ``"points"`` (mean distance of
    the new instance's member points to the stored plane, the default) or
    ``"params"`` (the corrected parameter distance).
    """

    def __init__(self, capacity: int = 64, tau_dist: float = 0.1, psi: float = 0.999,
                 similarity: str = "points"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0 < psi <= 1:
            raise ValueError("psi must be in (0, 1]")
        if not tau_dist > 0:
            raise ValueError("tau_dist must be positive")
        if similarity not in ("points", "params"):
            raise ValueError("similarity must be 'points' or 'params'")
        self.capacity = capacity
        self.tau_dist = tau_dist
        self.psi = psi
        self.similarity = similarity
        self.B = np.zeros((capacity, 4))
        self.g = 0
        self.n_updates = 0

    def __len__(self):
        return self.g

    @property
    def planes(self) -> np.ndarray:
        return self.B[: self.g].copy()

    def _append(self, plane) -> int:
        if self.g >= self.capacity:
            raise BankOverflow(
                f"memory bank full ({self.capacity} planes); tau_dist={self.tau_dist} is "
                "probably too small or the fitter is producing spurious planes")
        self.B[self.g] = plane
        self.g += 1
        return self.g - 1

    def distances(self, plane, members) -> np.ndarray:
        """Similarity score of one new instance against every live row."""
        live = self.B[: self.g]
        if self.similarity == "points":
            if len(members) == 0:
                raise EmptyPointSet("no member points")
            norms = np.linalg.norm(live[:, :3], axis=1)
            return np.mean(np.abs(members @ live[:, :3].T - live[:, 3]), axis=0) / norms
        return np.array([plane_param_distance(row, plane) for row in live])

    def match(self, instances) -> np.ndarray:
        """Assign a global id to each (plane, member_points) pair, in order.

        The very first batch (empty bank) is inserted verbatim. Later
        instances go to the live row with the smallest distance if it is below
        ``tau_dist`` (that row is EMA-updated), otherwise to a new row.
        """
        instances = [(np.asarray(p, dtype=float), np.asarray(m, dtype=float).reshape(-1, 3))
                     for p, m in instances]
        for p, _ in instances:
            _require_canonical(p)
        ids = np.empty(len(instances), dtype=np.int64)
        if self.g == 0:
            if len(instances) > self.capacity:
                raise BankOverflow(f"{len(instances)} planes exceed bank capacity {self.capacity}")
            for k, (p, _) in enumerate(instances):
                ids[k] = self._append(p)
        else:
            for k, (p, members) in enumerate(instances):
                scores = self.distances(p, members)
                j = int(np.argmin(scores))
                if scores[j] < self.tau_dist:
                    self.B[j] = ema_update(self.B[j], p, self.psi)
                    self.n_updates += 1
                    ids[k] = j
                else:
                    ids[k] = self._append(p)
        return ids

    def snapshot(self) -> str:
        """One line per live plane: ``id n_x n_y n_z d`` with 9 significant digits."""
        lines = [f"{i} " + " ".join(f"{v:.9g}" for v in self.B[i]) for i in range(self.g)]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_snapshot(cls, text: str, **kwargs) -> "MemoryBank":
        bank = cls(**kwargs)
        for line in text.splitlines():
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 5 or int(fields[0]) != bank.g:
                raise ValueError(f"malformed bank snapshot line: {line!r}")
            bank._append([float(v) for v in fields[1:]])
        return bank


def match_and_label(bank: MemoryBank, instances):
    """Label each instance with a global id; returns (one-hot labels, bank)."""
    ids = bank.match(instances)
    return one_hot(ids, bank.capacity), bank
