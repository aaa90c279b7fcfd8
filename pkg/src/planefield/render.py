"""SDF-weighted volume rendering and the training losses.

Along a ray with samples t_1 < ... < t_M and predicted SDF values s_i, every
rendered quantity is the same weighted mean

    Q(R) = sum_i w_i q_i / sum_i w_i,    w_i = sigmoid(s_i / tr) * sigmoid(-s_i / tr)

applied to colors (q = c_i), depths (q = t_i) or plane probability vectors.
Batched helpers work on arrays shaped (R, M, ...) for R rays of M samples.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRay, LabelOutOfRange

MIN_WEIGHT_SUM = 1e-10
PROB_FLOOR = 1e-12


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sdf_weights(s, tr: float) -> np.ndarray:
    """Bell-shaped weights peaking at 0.25 where the SDF crosses zero."""
    if not tr > 0:
        raise ValueError("truncation must be positive")
    a = np.asarray(s, dtype=float) / tr
    return _sigmoid(a) * _sigmoid(-a)


def weighted_mean(w, q):
    """Batched weighted mean over the sample axis.

    ``w`` is (..., M); ``q`` is (..., M) or (..., M, K). Returns the means and
    a mask of rays whose weight sum is large enough to render.
    """
    w = np.asarray(w, dtype=float)
    q = np.asarray(q, dtype=float)
    W = w.sum(axis=-1)
    valid = W >= MIN_WEIGHT_SUM
    safe = np.where(valid, W, 1.0)
    if q.ndim == w.ndim:
        out = (w * q).sum(axis=-1) / safe
    else:
        out = np.einsum("...m,...mk->...k", w, q) / safe[..., None]
    return out, valid


def _render_single(s, q, tr):
    w = sdf_weights(np.asarray(s, dtype=float).reshape(-1), tr)
    q = np.asarray(q, dtype=float)
    out, valid = weighted_mean(w, q)
    if not valid:
        raise DegenerateRay(f"weight sum {w.sum():.3g} below {MIN_WEIGHT_SUM}")
    return out


def render_color(sdf, colors, tr: float) -> np.ndarray:
    """Rendered RGB for one ray: ``sdf`` (M,), ``colors`` (M, 3)."""
    return _render_single(sdf, colors, tr)


def render_depth(sdf, t, tr: float) -> float:
    """Rendered distance along one ray: ``sdf`` (M,), sample distances ``t`` (M,)."""
    return float(_render_single(sdf, t, tr))


def render_plane(sdf, probs, tr: float) -> np.ndarray:
    """Rendered plane probability vector for one ray: ``probs`` (M, C)."""
    return _render_single(sdf, probs, tr)


def render_rays(sdf, t, tr: float, color=None, probs=None) -> dict:
    """Render a batch of rays. ``sdf`` and ``t`` are (R, M)."""
    w = sdf_weights(sdf, tr)
    depth, valid = weighted_mean(w, t)
    out = {"weights": w, "depth": depth, "valid": valid}
    if color is not None:
        out["color"] = weighted_mean(w, color)[0]
    if probs is not None:
        out["plane"] = weighted_mean(w, probs)[0]
    return out


def plane_loss(pred, labels) -> float:
    """Mean cross-entropy of rendered plane vectors (Q, C) at fixed label indices (Q,)."""
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return 0.0
    if labels.min() < 0 or labels.max() >= pred.shape[1]:
        raise LabelOutOfRange(f"label outside [0, {pred.shape[1]})")
    picked = np.maximum(pred[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


@dataclass
class LossWeights:
    color: float = 1.0
    depth: float = 0.1
    sdf: float = 10.0
    freespace: float = 1.0
    plane: float = 1.0


@dataclass
class LossBreakdown:
    l_color: float = 0.0
    l_depth: float = 0.0
    l_sdf: float = 0.0
    l_freespace: float = 0.0
    l_plane: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    n_rays: int = 0
    n_degenerate: int = 0
    n_plane_rays: int = 0

    @property
    def total(self) -> float:
        w = self.weights
        out = (w.color * self.l_color + w.depth * self.l_depth + w.sdf * self.l_sdf
               + w.freespace * self.l_freespace)
        if self.l_plane is not None:
            out += w.plane * self.l_plane
        return out

    def as_record(self) -> dict:
        return {"l_color": self.l_color, "l_depth": self.l_depth, "l_sdf": self.l_sdf,
                "l_fs": self.l_freespace, "l_plane": self.l_plane}


def photometric_depth_sdf_losses(sdf, t, tr, color=None, obs_rgb=None, obs_depth=None):
    """Geometry and color terms for a batch of rays (no gradients).

    ``obs_depth`` is the observed distance along each ray; non-positive or
    non-finite values mark rays excluded from the depth and SDF terms.
    Returns a dict with l_color, l_depth, l_sdf, l_freespace.
    """
    bd, _ = ray_losses(sdf, t, tr, color=color, obs_rgb=obs_rgb, obs_depth=obs_depth,
                       need_grad=False)
    return {"l_color": bd.l_color, "l_depth": bd.l_depth, "l_sdf": bd.l_sdf,
            "l_freespace": bd.l_freespace}


def ray_losses(sdf, t, tr, color=None, obs_rgb=None, obs_depth=None, probs=None, labels=None,
               weights: LossWeights | None = None, need_grad: bool = True):
    """Loss breakdown and upstream gradients for a batch of R rays x M samples.

    Inputs: ``sdf`` (R, M), ``t`` (R, M), ``color`` (R, M, 3), ``probs``
    (R, M, C), observations ``obs_rgb`` (R, 3), ``obs_depth`` (R,) and plane
    ``labels`` (R,) with -1 for unlabeled rays. The plane term is only
    computed when ``labels`` is given.

    Gradients (d_sdf, d_color, d_probs) are of the weighted total loss. The
    plane term contributes to d_probs only: its dependence on the SDF through
    the rendering weights is treated as constant.
    """
    weights = weights or LossWeights()
    sdf = np.asarray(sdf, dtype=float)
    t = np.asarray(t, dtype=float)
    R, M = sdf.shape
    a = sdf / tr
    sig = _sigmoid(a)
    w = sig * (1.0 - sig)
    W = w.sum(axis=1)
    valid = W >= MIN_WEIGHT_SUM
    Ws = np.where(valid, W, 1.0)
    bd = LossBreakdown(weights=weights, n_rays=R, n_degenerate=int((~valid).sum()))

    d_sdf = np.zeros((R, M))
    d_w = np.zeros((R, M))
    d_color = None
    d_probs = None

    if color is not None and obs_rgb is not None:
        color = np.asarray(color, dtype=float)
        C = np.einsum("rm,rmk->rk", w, color) / Ws[:, None]
        n = 3 * int(valid.sum())
        if n:
            diff = np.where(valid[:, None], C - obs_rgb, 0.0)
            bd.l_color = float(np.sum(diff * diff) / n)
            dC = weights.color * 2.0 * diff / n
            d_color = (w / Ws[:, None])[:, :, None] * dC[:, None, :]
            d_w += np.einsum("rmk,rk->rm", color - C[:, None, :], dC) / Ws[:, None]

    if obs_depth is not None:
        obs_depth = np.asarray(obs_depth, dtype=float)
        has_depth = np.isfinite(obs_depth) & (obs_depth > 0)
        D_obs = np.where(has_depth, obs_depth, 0.0)
        D = (w * t).sum(axis=1) / Ws
        use = has_depth & valid
        n = int(use.sum())
        if n:
            diff = np.where(use, D - D_obs, 0.0)
            bd.l_depth = float(np.sum(diff * diff) / n)
            dD = weights.depth * 2.0 * diff / n
            d_w += (t - D[:, None]) * (dD / Ws)[:, None]

        gap = D_obs[:, None] - t
        band = has_depth[:, None] & (np.abs(gap) <= tr)
        n = int(band.sum())
        if n:
            r = np.where(band, sdf - gap, 0.0)
            bd.l_sdf = float(np.sum(r * r) / (n * tr * tr))
            d_sdf += weights.sdf * 2.0 * r / (n * tr * tr)
        free = has_depth[:, None] & (t < D_obs[:, None] - tr)
        n = int(free.sum())
        if n:
            r = np.where(free, sdf - tr, 0.0)
            bd.l_freespace = float(np.sum(r * r) / (n * tr * tr))
            d_sdf += weights.freespace * 2.0 * r / (n * tr * tr)

    if labels is not None:
        bd.l_plane = 0.0
        probs = np.asarray(probs, dtype=float)
        n_cls = probs.shape[2]
        labels = np.asarray(labels, dtype=np.int64)
        if labels.max(initial=-1) >= n_cls:
            raise LabelOutOfRange(f"label {labels.max()} outside [0, {n_cls})")
        d_probs = np.zeros_like(probs)
        use = (labels >= 0) & valid
        Q = int(use.sum())
        bd.n_plane_rays = Q
        if Q:
            rows = np.flatnonzero(use)
            ww = w[rows] / Ws[rows, None]
            picked = np.einsum("rm,rm->r", ww, probs[rows, :, labels[rows]])
            bd.l_plane = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))
            dP = np.where(picked > PROB_FLOOR, -weights.plane / (Q * np.maximum(picked, PROB_FLOOR)), 0.0)
            d_probs[rows, :, labels[rows]] = ww * dP[:, None]

    if not need_grad:
        return bd, None
    d_sdf += d_w * w * (1.0 - 2.0 * sig) / tr
    return bd, (d_sdf, d_color, d_probs)
