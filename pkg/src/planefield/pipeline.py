"""Online training loop.

Each incoming frame gets ``steps_per_frame_local`` local steps (its own
pixels, color/depth/SDF losses only) followed by ``steps_per_frame_global``
global steps on pixels pooled from the keyframe store. Global steps add the
plane loss, with labels either produced from depth by plane fitting plus the
memory bank (SS mode) or read from annotation images (S mode).
"""

import json
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .bank import MemoryBank, match_and_label
from .config import TrainConfig, format_config
from .dataio import Dataset, atomic_write_bytes, png_bytes
from .errors import (BankOverflow, EmptyDataset, IoError, LabelOutOfRange, PlaneFieldError,
                     RunError, SkippedFrame)
from .field import (Adam, FieldConfig, NeuralField, OneBlobConfig, field_sdf, save_checkpoint)
from .fitting import fit_planes
from .geometry import Intrinsics, Pose, pixel_rays
from .metrics import evaluate_clouds
from .ply import LabeledCloud, export_labeled_ply, label_colors
from .render import LossBreakdown, MIN_WEIGHT_SUM, ray_losses, sdf_weights

log = logging.getLogger(__name__)

BACKGROUND_ID = 65535  # value of background pixels in saved segmentation images


@dataclass
class FrameSampleBatch:
    frame: np.ndarray      # (K,) frame index of every pixel
    pixels: np.ndarray     # (K, 2) u, v
    rgb: np.ndarray        # (K, 3)
    depth: np.ndarray      # (K,) observed z-depth
    origins: np.ndarray    # (K, 3)
    dirs: np.ndarray       # (K, 3) unit
    ray_depth: np.ndarray  # (K,) observed distance along the ray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.depth)

    @property
    def points(self) -> np.ndarray:
        return self.origins + self.dirs * self.ray_depth[:, None]


def _batch_from_pixels(frame_idx, u, v, rgb, depth, pose: Pose, intr: Intrinsics, labels=None):
    origins, dirs, scale = pixel_rays(u, v, intr, pose)
    return FrameSampleBatch(np.full(len(u), frame_idx), np.stack([u, v], axis=1), rgb, depth,
                            origins, dirs, depth * scale, labels)


class KeyframeStore:
    """Subsampled pixels of retained frames, pooled for global steps."""

    def __init__(self, max_frames: int, pixels_per_frame: int):
        self.max_frames = max_frames
        self.pixels_per_frame = pixels_per_frame
        self.frames = []

    def __len__(self):
        return len(self.frames)

    def add(self, batch: FrameSampleBatch, rng):
        if len(self.frames) >= self.max_frames:
            self.frames.pop(int(rng.integers(len(self.frames))))
        self.frames.append(batch)

    def sample(self, n: int, rng, n_frames: int | None = None) -> FrameSampleBatch:
        """``n`` pixels drawn from ``n_frames`` randomly chosen keyframes (all if None)."""
        if not self.frames:
            raise ValueError("keyframe store is empty")
        if n_frames is None or n_frames >= len(self.frames):
            chosen = self.frames
        else:
            pick = np.sort(rng.choice(len(self.frames), size=n_frames, replace=False))
            chosen = [self.frames[i] for i in pick]
        names = ("frame", "pixels", "rgb", "depth", "origins", "dirs", "ray_depth")
        pool = {f: np.concatenate([getattr(b, f) for b in chosen]) for f in names}
        has_labels = all(b.labels is not None for b in chosen)
        pool["labels"] = np.concatenate([b.labels for b in chosen]) if has_labels else None
        total = len(pool["depth"])
        idx = rng.choice(total, size=n, replace=total < n)
        return FrameSampleBatch(**{k: (None if v is None else v[idx]) for k, v in pool.items()})


def sample_along_rays(ray_depth, cfg: TrainConfig, rng) -> np.ndarray:
    """Sorted sample distances (K, n_stratified + n_surface).

    Stratified samples cover [t_near, min(t_far, D + tr)] for observed
    distance D; surface samples are uniform in [D - tr, D + tr].
    """
    K = len(ray_depth)
    far = np.minimum(cfg.t_far, ray_depth + cfg.tr)
    near = np.minimum(cfg.t_near, 0.5 * far)
    n = cfg.n_stratified
    frac = (np.arange(n) + rng.random((K, n))) / n
    t = near[:, None] + (far - near)[:, None] * frac
    if cfg.n_surface:
        band = ray_depth[:, None] + cfg.tr * (2.0 * rng.random((K, cfg.n_surface)) - 1.0)
        t = np.concatenate([t, np.maximum(band, 1e-6)], axis=1)
    return np.sort(t, axis=1)


@dataclass
class Instrumentation:
    """Counts of plane machinery and label-source accesses, split by phase."""

    counts: Counter = field(default_factory=Counter)

    def hit(self, phase: str, what: str, n: int = 1):
        self.counts[f"{phase}.{what}"] += n

    def get(self, phase: str, what: str) -> int:
        return self.counts.get(f"{phase}.{what}", 0)

    def as_dict(self) -> dict:
        return dict(sorted(self.counts.items()))


@dataclass
class RunArtifacts:
    out_dir: str
    checkpoint: str
    bank: str
    log: str
    cloud: str
    segmentation: list
    metrics: dict | None
    report: str


def auto_domain(dataset: Dataset, margin: float, stride: int = 8):
    """Bounding box of the observed depth (every frame, every ``stride`` pixel) plus a margin."""
    intr = dataset.intrinsics
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for i in range(len(dataset)):
        fr = dataset.frame(i)
        d = fr.depth[::stride, ::stride]
        v, u = np.nonzero(d > 0)
        if len(u) == 0:
            continue
        u, v = u * stride, v * stride
        pts = fr.pose.apply(intr.camera_rays(u, v) * fr.depth[v, u][:, None])
        pts = np.vstack([pts, fr.pose.origin])
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise EmptyDataset("no frame has valid depth")
    return tuple(lo - margin), tuple(hi + margin)


class Trainer:
    """Holds the field, optimizer, bank and keyframes for one run."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig):
        cfg.validate()
        if len(dataset) == 0:
            raise EmptyDataset(f"{dataset.root} has no frames")
        if cfg.mode == "s" and not dataset.has_annotations:
            raise ValueError("S mode needs a dataset loaded with annotations")
        self.ds = dataset
        self.cfg = cfg
        self.intr = dataset.intrinsics
        if cfg.domain_min is None:
            lo, hi = auto_domain(dataset, cfg.domain_margin)
        else:
            lo, hi = cfg.domain_min, cfg.domain_max
        fcfg = FieldConfig(OneBlobConfig(cfg.bins_per_axis, cfg.sigma_bins, lo, hi),
                           cfg.hidden, cfg.feature_dim, cfg.bank_capacity)
        self.field = NeuralField(fcfg, seed=cfg.seed)
        self.opt = Adam(lr=cfg.lr_mlp)
        # exponential moving average of the weights, used for export
        self.avg_params = {k: v.copy() for k, v in self.field.params.items()}
        self.avg_count = 0
        self.bank = MemoryBank(cfg.bank_capacity, cfg.tau_dist, cfg.psi, cfg.similarity)
        self.keyframes = KeyframeStore(cfg.max_keyframes, cfg.keyframe_pixels)
        self.rng = np.random.default_rng(cfg.seed)
        self.fit_rng = np.random.default_rng([cfg.seed, 1])
        self.weights = cfg.loss_weights
        self.instr = Instrumentation()
        self.step_count = 0
        self.records = []
        self.timings = Counter()

    # ------------------------------------------------------------ sampling
    def frame_batch(self, frame, n: int) -> FrameSampleBatch:
        valid = np.flatnonzero(frame.depth.ravel() > 0)
        if len(valid) == 0:
            raise SkippedFrame(f"frame {frame.index} has no valid depth")
        pick = valid[self.rng.choice(len(valid), size=n, replace=len(valid) < n)]
        v, u = np.divmod(pick, self.intr.width)
        return _batch_from_pixels(frame.index, u.astype(float), v.astype(float),
                                  frame.rgb[v, u], frame.depth[v, u], frame.pose, self.intr)

    def add_keyframe(self, frame):
        batch = self.frame_batch(frame, self.cfg.keyframe_pixels)
        if self.cfg.mode == "s":
            ann = self.ds.annotation(frame.index)
            self.instr.hit("keyframe", "annotation_reads")
            ids = ann[batch.pixels[:, 1].astype(int), batch.pixels[:, 0].astype(int)]
            if ids.max(initial=0) >= self.cfg.bank_capacity:
                raise LabelOutOfRange(f"annotation id {ids.max()} >= {self.cfg.bank_capacity}")
            batch.labels = np.where(ids > 0, ids, -1)
        self.keyframes.add(batch, self.rng)

    # ------------------------------------------------------------ one step
    def _optimize(self, batch: FrameSampleBatch, labels, with_plane: bool) -> LossBreakdown:
        t = sample_along_rays(batch.ray_depth, self.cfg, self.rng)
        K, M = t.shape
        x = batch.origins[:, None, :] + batch.dirs[:, None, :] * t[:, :, None]
        out, cache = self.field.forward(x.reshape(-1, 3), with_plane=with_plane)
        probs = out.plane_probs.reshape(K, M, -1) if with_plane else None
        bd, (d_sdf, d_color, d_probs) = ray_losses(
            out.sdf.reshape(K, M), t, self.cfg.tr, color=out.color.reshape(K, M, 3),
            obs_rgb=batch.rgb, obs_depth=batch.ray_depth, probs=probs, labels=labels,
            weights=self.weights)
        grads = self.field.backward(cache, d_sdf.ravel(),
                                    None if d_color is None else d_color.reshape(-1, 3),
                                    None if d_probs is None else d_probs.reshape(K * M, -1))
        if not with_plane:
            grads = {k: g for k, g in grads.items() if not k.startswith("plane.")}
        self.opt.step(self.field.params, grads)
        self.field.mark_updated()
        # plain running mean until it weighs less than the EMA rate
        self.avg_count += 1
        a = max(1.0 - self.cfg.average_decay, 1.0 / self.avg_count)
        for k, p in self.field.params.items():
            self.avg_params[k] += a * (p - self.avg_params[k])
        return bd

    def _record(self, frame, phase, bd: LossBreakdown):
        self.step_count += 1
        rec = {"frame": int(frame), "step": self.step_count, "phase": phase}
        rec.update(bd.as_record())
        rec["bank_size"] = len(self.bank)
        self.records.append(rec)
        return rec

    def step_local(self, frame) -> LossBreakdown:
        """Color/depth/SDF step on pixels of the current frame; no plane loss."""
        batch = self.frame_batch(frame, self.cfg.n_local_samples)
        bd = self._optimize(batch, None, with_plane=False)
        self._record(frame.index, "local", bd)
        return bd

    def ss_labels(self, batch: FrameSampleBatch, phase: str = "global"):
        """Fit planes to the batch's depth points and label them through the bank.

        Returns per-ray labels (-1 where no instance covers the point), or
        None when fitting fails.
        """
        pts = batch.points
        self.instr.hit(phase, "fit_calls")
        try:
            res = fit_planes(pts, self.cfg.fit_params, seed=self.fit_rng, origins=batch.origins)
        except (PlaneFieldError, ValueError) as e:
            log.warning("plane fitting failed, skipping plane loss: %s", e)
            return None
        labels = np.full(len(batch), -1, dtype=np.int64)
        # small fragments carry unreliable parameters; keep them away from the bank
        kept = [inst for inst in res.instances if len(inst.members) >= self.cfg.min_label_points]
        if not kept:
            return labels
        instances = [(inst.params, pts[inst.members]) for inst in kept]
        self.instr.hit(phase, "bank_calls")
        onehot, _ = match_and_label(self.bank, instances)
        for inst, row in zip(kept, onehot):
            labels[inst.members] = int(np.argmax(row))
        return labels

    def step_global_ss(self, frame_idx: int = -1) -> LossBreakdown:
        batch = self.keyframes.sample(self.cfg.n_global_samples, self.rng, self.cfg.global_keyframes)
        t0 = time.perf_counter()
        labels = self.ss_labels(batch)
        self.timings["fit_and_bank"] += time.perf_counter() - t0
        bd = self._optimize(batch, labels, with_plane=True)
        if labels is None:
            bd.l_plane = None
        self._record(frame_idx, "global", bd)
        return bd

    def step_global_s(self, frame_idx: int = -1) -> LossBreakdown:
        batch = self.keyframes.sample(self.cfg.n_global_samples, self.rng, self.cfg.global_keyframes)
        if batch.labels is None:
            raise ValueError("keyframes carry no annotation labels")
        bd = self._optimize(batch, batch.labels, with_plane=True)
        self._record(frame_idx, "global", bd)
        return bd

    def process_frame(self, i: int):
        frame = self.ds.frame(i)
        if not np.any(frame.depth > 0):
            raise SkippedFrame(f"frame {i} has no valid depth")
        t0 = time.perf_counter()
        for _ in range(self.cfg.steps_per_frame_local):
            self.step_local(frame)
        t1 = time.perf_counter()
        if i % self.cfg.keyframe_every == 0 or len(self.keyframes) == 0:
            self.add_keyframe(frame)
        for _ in range(self.cfg.steps_per_frame_global):
            if self.cfg.mode == "ss":
                self.step_global_ss(i)
            else:
                self.step_global_s(i)
        self.timings["local"] += t1 - t0
        self.timings["global"] += time.perf_counter() - t1

    def export_field(self) -> NeuralField:
        """The field used for checkpoints and exports: the weight average when
        ``average_decay`` > 0, otherwise the live weights."""
        if self.cfg.average_decay == 0:
            return self.field
        return NeuralField(self.field.cfg, params={k: v.copy() for k, v in self.avg_params.items()})

    # ------------------------------------------------------------ audit
    def bank_mutations(self) -> int:
        return len(self.bank) + self.bank.n_updates


def render_pixels(fld: NeuralField, pose: Pose, intr: Intrinsics, u, v, tr: float = 0.1,
                  t_near: float = 0.1, t_far: float = 6.0, step: float = 0.05, n_band: int = 16,
                  chunk: int = 512):
    """Surface points and rendered plane vectors for a set of pixels.

    Each ray is marched at ``step`` spacing for the first + to - SDF crossing;
    the plane vector is rendered from ``n_band`` samples spanning +-tr around
    it. Rays without a crossing are rendered from the marching samples
    instead. Returns (points (K, 3) with NaN where no surface, probs (K, C),
    valid mask of non-degenerate rays).
    """
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    origins, dirs, _ = pixel_rays(u, v, intr, pose)
    K = len(u)
    C = fld.cfg.n_classes
    t_grid = np.arange(t_near, t_far + 0.5 * step, step)
    points = np.full((K, 3), np.nan)
    probs = np.zeros((K, C))
    valid = np.zeros(K, dtype=bool)
    offsets = tr * np.linspace(-1.0, 1.0, n_band)
    for s in range(0, K, chunk):
        sl = slice(s, min(K, s + chunk))
        o, d = origins[sl], dirs[sl]
        n = len(o)
        x = o[:, None, :] + d[:, None, :] * t_grid[None, :, None]
        sdf = field_sdf(x.reshape(-1, 3), fld.params, fld.cfg).reshape(n, -1)
        cross = (sdf[:, :-1] > 0) & (sdf[:, 1:] <= 0)
        has = cross.any(axis=1)
        first = np.argmax(cross, axis=1)
        rows = np.arange(n)
        s0, s1 = sdf[rows, first], sdf[rows, first + 1]
        t0 = t_grid[first] + step * s0 / np.where(has, s0 - s1, 1.0)
        t_s = np.where(has[:, None], np.maximum(t0[:, None] + offsets, 1e-6), 0.0)
        pts = np.where(has[:, None], o + d * t0[:, None], np.nan)
        points[sl] = pts
        # rendered plane vectors
        band_x = o[:, None, :] + d[:, None, :] * t_s[:, :, None]
        out_rows = []
        for mask, tt, xx in ((has, t_s, band_x), (~has, None, x)):
            idx = np.flatnonzero(mask)
            if len(idx) == 0:
                continue
            xs = xx[idx]
            out, _ = fld.forward(xs.reshape(-1, 3))
            m = xs.shape[1]
            w = sdf_weights(out.sdf.reshape(len(idx), m), tr)
            W = w.sum(axis=1)
            ok = W >= MIN_WEIGHT_SUM
            p = np.einsum("km,kmc->kc", w, out.plane_probs.reshape(len(idx), m, C))
            p /= np.where(ok, W, 1.0)[:, None]
            out_rows.append((idx, p, ok))
        for idx, p, ok in out_rows:
            probs[sl][idx] = p
            valid[sl][idx] = ok
    return points, probs, valid


def label_from_probs(probs, valid) -> np.ndarray:
    """Argmax class per ray (ties go to the lowest index), -1 for degenerate rays."""
    return np.where(valid, np.argmax(probs, axis=1), -1)


def render_segmentation_image(fld: NeuralField, pose: Pose, intr: Intrinsics, stride: int = 1,
                              **render_kw):
    """Per-pixel instance ids (-1 = background) on a ``stride`` grid and an RGB visualization.

    Output shape is (ceil(H / stride), ceil(W / stride)).
    """
    vs = np.arange(0, intr.height, stride)
    us = np.arange(0, intr.width, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    _, probs, valid = render_pixels(fld, pose, intr, uu.ravel(), vv.ravel(), **render_kw)
    ids = label_from_probs(probs, valid).reshape(vv.shape)
    color = label_colors(ids.ravel()).reshape(vv.shape + (3,))
    return ids, color


def save_segmentation(ids: np.ndarray, color: np.ndarray, stem: str):
    """``stem.png`` holds ids as 16-bit (background 65535); ``stem_color.png`` the visualization."""
    atomic_write_bytes(stem + ".png", png_bytes(np.where(ids < 0, BACKGROUND_ID, ids).astype(np.uint16)))
    atomic_write_bytes(stem + "_color.png", png_bytes(color.astype(np.uint8)))


def export_prediction(fld: NeuralField, dataset: Dataset, cfg: TrainConfig, frames=None) -> LabeledCloud:
    """Labeled surface points seen from the export frames at the export stride."""
    frames = range(0, len(dataset), cfg.export_every) if frames is None else frames
    intr = dataset.intrinsics
    vs = np.arange(0, intr.height, cfg.export_stride)
    us = np.arange(0, intr.width, cfg.export_stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    pts_all, lab_all = [], []
    for i in frames:
        pts, probs, valid = render_pixels(fld, dataset.poses[i], intr, uu.ravel(), vv.ravel(),
                                          **_render_kw(cfg))
        keep = np.all(np.isfinite(pts), axis=1) & valid
        pts_all.append(pts[keep])
        lab_all.append(label_from_probs(probs, valid)[keep])
    return LabeledCloud(np.concatenate(pts_all), np.concatenate(lab_all))


def _render_kw(cfg: TrainConfig) -> dict:
    return {"tr": cfg.tr, "t_near": cfg.t_near, "t_far": cfg.t_far, "step": cfg.render_step,
            "n_band": cfg.n_band_render}


def _write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def write_checkpoint(trainer: Trainer, out_dir: str):
    save_checkpoint(os.path.join(out_dir, "field.pnrf"), trainer.export_field(),
                    {"train_config": trainer.cfg.to_dict(), "steps": trainer.step_count,
                     "dataset": os.path.abspath(trainer.ds.root)})
    _write_text(os.path.join(out_dir, "bank.txt"), trainer.bank.snapshot())


def run_sequence(dataset: Dataset, cfg: TrainConfig, out_dir, progress=None) -> RunArtifacts:
    """Train on every frame in order and write the run artifacts to ``out_dir``."""
    out_dir = os.fspath(out_dir)
    if len(dataset) == 0:
        raise EmptyDataset(f"{dataset.root} has no frames")
    try:
        os.makedirs(os.path.join(out_dir, "seg"), exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from e
    trainer = Trainer(dataset, cfg)
    log_path = os.path.join(out_dir, "log.jsonl")
    skipped = []
    phase = "setup"
    i = -1
    t_start = time.perf_counter()
    try:
        for i in range(len(dataset)):
            phase = "train"
            try:
                trainer.process_frame(i)
            except SkippedFrame as e:
                log.warning("%s", e)
                skipped.append(i)
            if cfg.checkpoint_every and (i + 1) % cfg.checkpoint_every == 0:
                phase = "checkpoint"
                write_checkpoint(trainer, out_dir)
            if progress is not None:
                progress(i, trainer)
        phase = "export"
        write_checkpoint(trainer, out_dir)
        _write_text(log_path, "".join(json.dumps(r) + "\n" for r in trainer.records))
        fld = trainer.export_field()
        cloud = export_prediction(fld, dataset, cfg)
        cloud_path = os.path.join(out_dir, "pred.ply")
        export_labeled_ply(cloud, cloud_path)
        seg_paths = []
        for f in range(0, len(dataset), cfg.export_every):
            ids, color = render_segmentation_image(fld, dataset.poses[f], dataset.intrinsics,
                                                   cfg.export_stride, **_render_kw(cfg))
            stem = os.path.join(out_dir, "seg", f"{f:06d}")
            save_segmentation(ids, color, stem)
            seg_paths.append(stem + ".png")
        metrics = None
        gt = dataset.gt_cloud()
        if gt is not None:
            metrics = evaluate_clouds(cloud.points, cloud.labels, gt.points, gt.labels)
            _write_text(os.path.join(out_dir, "metrics.json"), json.dumps(metrics, indent=2) + "\n")
    except (PlaneFieldError, OSError, BankOverflow) as e:
        if isinstance(e, RunError):
            raise
        raise RunError(i, trainer.step_count, phase, e) from e
    _write_text(os.path.join(out_dir, "config.txt"), format_config(cfg))
    report = {
        "mode": cfg.mode, "frames": len(dataset), "steps": trainer.step_count,
        "skipped_frames": skipped, "bank_size": len(trainer.bank),
        "bank_mutations": trainer.bank_mutations(),
        "annotation_reads": dataset.annotation_reads,
        "instrumentation": trainer.instr.as_dict(),
        "domain": [list(trainer.field.cfg.oneblob.domain_min), list(trainer.field.cfg.oneblob.domain_max)],
        "metrics": metrics,
    }
    report_path = os.path.join(out_dir, "run.json")
    _write_text(report_path, json.dumps(report, indent=2) + "\n")
    timings = dict(trainer.timings, total=time.perf_counter() - t_start)
    _write_text(os.path.join(out_dir, "timings.json"), json.dumps(timings, indent=2) + "\n")
    return RunArtifacts(out_dir, os.path.join(out_dir, "field.pnrf"), os.path.join(out_dir, "bank.txt"),
                        log_path, cloud_path, seg_paths, metrics, report_path)
