"""Segmentation (RI, VOI, SC) and point-cloud geometry metrics."""

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, TooFewPoints

UNLABELED = -1


def _prepare(a, b, include_unlabeled: bool = False):
    a = np.array(a, dtype=np.int64).ravel()
    b = np.array(b, dtype=np.int64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in length: {a.size} vs {b.size}")
    if include_unlabeled:
        # every unlabeled point becomes its own singleton segment
        for arr in (a, b):
            bad = arr < 0
            arr[bad] = arr.max(initial=0) + 1 + np.arange(bad.sum())
        return a, b
    keep = (a >= 0) & (b >= 0)
    return a[keep], b[keep]


def contingency_table(a, b) -> np.ndarray:
    """Integer counts n_ij of points with label i in ``a`` and j in ``b``
    (rows/columns follow the sorted unique labels)."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _pairs(x) -> int:
    x = np.asarray(x, dtype=object)
    return int(np.sum(x * (x - 1) // 2))


def rand_index(a, b, include_unlabeled: bool = False) -> float:
    """Fraction of point pairs on which both labelings agree."""
    a, b = _prepare(a, b, include_unlabeled)
    n = a.size
    if n < 2:
        raise TooFewPoints("rand index needs at least 2 labeled points")
    table = contingency_table(a, b)
    total = n * (n - 1) // 2
    same_both = _pairs(table.ravel())
    same_a = _pairs(table.sum(axis=1))
    same_b = _pairs(table.sum(axis=0))
    agree = total - same_a - same_b + 2 * same_both
    return agree / total


def _entropy(counts, n) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def variation_of_information(a, b, include_unlabeled: bool = False) -> float:
    """H(A|B) + H(B|A) in nats."""
    a, b = _prepare(a, b, include_unlabeled)
    n = a.size
    if n == 0:
        raise EmptyInput("no labeled points")
    table = contingency_table(a, b)
    h_ab = _entropy(table.ravel(), n)
    h_a = _entropy(table.sum(axis=1), n)
    h_b = _entropy(table.sum(axis=0), n)
    return max(0.0, 2.0 * h_ab - h_a - h_b)


def segmentation_covering(gt, pred, include_unlabeled: bool = False) -> float:
    """Size-weighted best IoU of each ground-truth segment against the prediction."""
    gt, pred = _prepare(gt, pred, include_unlabeled)
    n = gt.size
    if n == 0:
        raise EmptyInput("no labeled points")
    table = contingency_table(gt, pred)
    size_gt = table.sum(axis=1)
    size_pred = table.sum(axis=0)
    union = size_gt[:, None] + size_pred[None, :] - table
    best = (table / union).max(axis=1)
    return float(np.sum(size_gt * best) / n)


@dataclass
class GeometryReport:
    accuracy: float
    completeness: float
    precision: float
    recall: float
    f_score: float
    threshold: float


def f_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def geometry_metrics(pred, gt, threshold: float = 0.05) -> GeometryReport:
    """Nearest-neighbour accuracy/completeness and thresholded precision/recall."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyInput("both point clouds must be nonempty")
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    return GeometryReport(float(np.mean(d_pred)), float(np.mean(d_gt)), precision, recall,
                          f_score(precision, recall), threshold)


def transfer_labels(src_points, src_labels, dst_points) -> np.ndarray:
    """Label of the nearest source point for every destination point."""
    _, idx = cKDTree(np.asarray(src_points, dtype=float)).query(np.asarray(dst_points, dtype=float))
    return np.asarray(src_labels)[idx]


def evaluate_clouds(pred_points, pred_labels, gt_points, gt_labels, threshold: float = 0.05,
                    include_unlabeled: bool = False) -> dict:
    """Full metric report. Segmentation metrics are computed on the ground-truth
    points, each carrying the label of its nearest predicted point."""
    geo = geometry_metrics(pred_points, gt_points, threshold)
    transferred = transfer_labels(pred_points, pred_labels, gt_points)
    report = {
        "ri": rand_index(gt_labels, transferred, include_unlabeled),
        "voi": variation_of_information(gt_labels, transferred, include_unlabeled),
        "sc": segmentation_covering(gt_labels, transferred, include_unlabeled),
    }
    geo = asdict(geo)
    report.update(geo)
    report["n_pred"] = int(len(pred_points))
    report["n_gt"] = int(len(gt_points))
    return report


def report_json(report: dict) -> str:
    keys = ["ri", "voi", "sc", "accuracy", "completeness", "precision", "recall", "f_score",
            "threshold", "n_pred", "n_gt"]
    return json.dumps({k: report[k] for k in keys}, indent=2) + "\n"
