"""Lightweight RANSAC plane extraction from sparse point sets.

The fitter maps a set of (possibly noisy, outlier-contaminated) 3D points to a
list of plane instances, each holding canonical plane parameters and the
indices of its member points. It follows the Efficient RANSAC recipe reduced
to planes:

1. per-point normals from a k-nearest-neighbour PCA
2. minimal 3-point hypotheses; inliers are points within ``eps`` whose
   normal agrees with the hypothesis (|cos| >= ``tau_n``) and the score is
   the size of the largest connected component of the inliers
3. a round ends once the best hypothesis is found with confidence, i.e. the
   probability of having missed a larger plane drops to ``p_hat``
4. the winner's inliers are split into connected components; each component
   with at least ``n_min`` points that is itself large enough to pass the
   confidence rule becomes an instance and leaves the pool
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateFit, InvalidParams, TooFewPoints
from .geometry import canonicalize_plane

_MIN_AREA = 1e-6
_BATCH = 128


@dataclass(frozen=True)
class FitParams:
    n_min: int = 1
    eps: float = 0.02
    eps_cluster: float = 1.0
    tau_n: float = 0.7
    p_hat: float = 0.3
    k_normals: int = 8
    max_iterations: int = 2048
    link_factor: float = 10.0

    def validate(self) -> "FitParams":
        problems = []
        if not self.n_min >= 1:
            problems.append("n_min >= 1")
        if not self.eps > 0:
            problems.append("eps > 0")
        if not self.eps_cluster > 0:
            problems.append("eps_cluster > 0")
        if not 0 < self.tau_n <= 1:
            problems.append("0 < tau_n <= 1")
        if not 0 < self.p_hat < 1:
            problems.append("0 < p_hat < 1")
        if not self.k_normals >= 2:
            problems.append("k_normals >= 2")
        if not self.max_iterations >= 1:
            problems.append("max_iterations >= 1")
        if not self.link_factor > 0:
            problems.append("link_factor > 0")
        if problems:
            raise InvalidParams("invalid fit parameters, need " + ", ".join(problems))
        return self

    @property
    def link_radius(self) -> float:
        return self.eps_cluster * self.eps * self.link_factor


@dataclass
class PlaneInstance:
    params: np.ndarray
    members: np.ndarray
    inlier_rms: float = 0.0


@dataclass
class FitResult:
    instances: list = field(default_factory=list)
    unassigned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def labels(self, n: int) -> np.ndarray:
        """Per-point instance index, -1 for unassigned points."""
        out = np.full(n, -1, dtype=np.int64)
        for i, inst in enumerate(self.instances):
            out[inst.members] = i
        return out


def _orient(normals, points, origins):
    if origins is not None:
        view = np.broadcast_to(np.asarray(origins, dtype=float), points.shape) - points
        flip = np.einsum("ij,ij->i", normals, view) < 0
    else:
        nx, ny, nz = normals.T
        flip = (nz < 0) | ((nz == 0) & ((ny < 0) | ((ny == 0) & (nx < 0))))
    normals[flip] *= -1
    return normals


def estimate_normals(points, k: int = 8, origins=None) -> np.ndarray:
    """Unit normals from the covariance of each point's k nearest neighbours.

    Normals point toward ``origins`` (a camera centre, or one per point) when
    given, otherwise into the +z hemisphere.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    if len(points) < 3:
        raise TooFewPoints(f"need at least 3 points for normals, got {len(points)}")
    if k < 2:
        raise ValueError("k must be >= 2")
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    nbrs = points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = np.ascontiguousarray(vecs[:, :, 0])
    return _orient(normals, points, origins)


def refit_plane(points) -> np.ndarray:
    """Total-least-squares plane through ``points``, canonicalized."""
    points = np.asarray(points, dtype=float)
    if len(points) < 3:
        raise DegenerateFit("need at least 3 points")
    centroid = points.mean(axis=0)
    centered = points - centroid
    vals, vecs = np.linalg.eigh(centered.T @ centered)
    scale = max(vals[2], 1e-300)
    if vals[1] <= 1e-12 * scale or vals[2] <= 0:
        raise DegenerateFit("points are collinear or coincident")
    n = vecs[:, 0]
    return canonicalize_plane(np.append(n, n @ centroid))


def cluster_members(member_points, eps: float, eps_cluster: float,
                    link_factor: float = 10.0) -> list:
    """Single-linkage components under the link radius eps_cluster*eps*link_factor.

    Clusters come back largest first; equal sizes are ordered by their
    smallest member index.
    """
    pts = np.asarray(member_points, dtype=float)
    n = len(pts)
    if n == 0:
        return []
    radius = eps_cluster * eps * link_factor
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    clusters = [np.flatnonzero(comp == c) for c in range(comp.max() + 1)]
    clusters.sort(key=lambda c: (-len(c), c[0]))
    return clusters


def _inlier_mask(plane, points, normals, params: FitParams):
    dist = np.abs(points @ plane[:3] - plane[3])
    cos = np.abs(normals @ plane[:3])
    return (dist <= params.eps) & (cos >= params.tau_n)


def _link_pairs(points, params: FitParams) -> np.ndarray:
    return cKDTree(points).query_pairs(params.link_radius, output_type="ndarray")


def _largest_component(mask, pairs) -> int:
    """Size of the largest connected component among the ``mask`` points,
    given all link ``pairs`` of the full point set."""
    if not mask.any():
        return 0
    e = pairs[mask[pairs[:, 0]] & mask[pairs[:, 1]]]
    n = len(mask)
    graph = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return int(np.bincount(comp[mask]).max())


def _samples_needed(score, M, p_hat) -> float:
    """Draws after which a structure of ``score`` points is found with confidence."""
    w = min(score / M, 1.0)
    if w <= 0:
        return np.inf
    if w >= 1.0:
        return 1
    return np.ceil(np.log(p_hat) / np.log1p(-w ** 3))


def _best_hypothesis(points, normals, params: FitParams, rng):
    """Sample 3-point hypotheses until the confidence rule fires.

    A hypothesis scores the size of the largest connected component of its
    inliers. Sampling stops at the first draw s with (1 - (m/M)^3)^s <= p_hat,
    m being the best score so far. Returns (plane, score, n_drawn), or None if
    ``max_iterations`` draws never reach confidence.
    """
    M = len(points)
    pairs = _link_pairs(points, params)
    best_plane, best_score = None, 0
    need = np.inf
    drawn = 0
    while drawn < params.max_iterations:
        b = min(_BATCH, params.max_iterations - drawn)
        tri = rng.integers(0, M, size=(b, 3))
        p0, p1, p2 = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        area2 = np.linalg.norm(cross, axis=1)
        ok = area2 >= 2 * _MIN_AREA
        n = np.zeros_like(cross)
        n[ok] = cross[ok] / area2[ok, None]
        # every sample point must itself agree with the hypothesis normal
        for j in range(3):
            ok &= np.abs(np.einsum("ij,ij->i", normals[tri[:, j]], n)) >= params.tau_n
        d = np.einsum("ij,ij->i", n, p0)
        masks = np.zeros((M, b), dtype=bool)
        if ok.any():
            dist = np.abs(points @ n[ok].T - d[ok])
            cos = np.abs(normals @ n[ok].T)
            masks[:, ok] = (dist <= params.eps) & (cos >= params.tau_n)
        counts = masks.sum(axis=0)
        for i in range(b):
            s = drawn + i + 1
            if counts[i] > best_score:
                score = _largest_component(masks[:, i], pairs)
                if score > best_score:
                    best_score = score
                    best_plane = np.append(n[i], d[i])
                    need = _samples_needed(best_score, M, params.p_hat)
            if s >= need:
                return best_plane, best_score, s
        drawn += b
    return None


def _confident(size, M, drawn, p_hat) -> bool:
    """True once ``drawn`` samples make missing a structure of ``size`` points
    (out of ``M``) no more likely than ``p_hat``."""
    w = min(size / M, 1.0)
    if w >= 1.0:
        return True
    return drawn * np.log1p(-w ** 3) <= np.log(p_hat)


def fit_planes(points, params: FitParams | None = None, seed=0, normals=None,
               origins=None) -> FitResult:
    """Greedy extraction of plane instances from ``points`` (N, 3).

    ``seed`` may be an int or a ``numpy.random.Generator``. Precomputed
    ``normals`` skip the PCA step; ``origins`` orient estimated normals.
    """
    params = (params or FitParams()).validate()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n_total = len(points)
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    all_idx = np.arange(n_total)
    if n_total < max(3, params.n_min):
        return FitResult([], all_idx)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if normals is None:
        normals = estimate_normals(points, params.k_normals, origins)
    normals = np.asarray(normals, dtype=float)

    remaining = all_idx
    instances = []
    while len(remaining) >= 3:
        pts, nrm = points[remaining], normals[remaining]
        hyp = _best_hypothesis(pts, nrm, params, rng)
        if hyp is None:
            break
        plane, count, drawn = hyp
        if count < params.n_min:
            break
        mask = _inlier_mask(plane, pts, nrm, params)
        if mask.sum() >= 3:
            try:
                refined = refit_plane(pts[mask])
                remask = _inlier_mask(refined, pts, nrm, params)
                if remask.sum() >= mask.sum():
                    plane, mask = refined, remask
            except DegenerateFit:
                pass
        inliers = np.flatnonzero(mask)
        taken = []
        for comp in cluster_members(pts[inliers], params.eps, params.eps_cluster, params.link_factor):
            local = inliers[comp]
            # components too small to have been found with confidence stay in the pool
            if len(local) < params.n_min or not _confident(len(local), len(remaining), drawn, params.p_hat):
                continue
            inst_plane = canonicalize_plane(plane)
            if len(local) >= 3:
                try:
                    inst_plane = refit_plane(pts[local])
                except DegenerateFit:
                    pass
                keep = _inlier_mask(inst_plane, pts[local], nrm[local], params)
                if keep.sum() < params.n_min:
                    inst_plane, keep = canonicalize_plane(plane), np.ones(len(local), bool)
                local = local[keep]
            resid = pts[local] @ inst_plane[:3] - inst_plane[3]
            instances.append(PlaneInstance(inst_plane, remaining[local],
                                           float(np.sqrt(np.mean(resid ** 2)))))
            taken.append(local)
        if not taken:
            break
        keep_mask = np.ones(len(remaining), bool)
        keep_mask[np.concatenate(taken)] = False
        remaining = remaining[keep_mask]
    return FitResult(instances, remaining)
