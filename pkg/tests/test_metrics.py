import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from planefield.errors import EmptyInput, TooFewPoints
from planefield.metrics import (contingency_table, evaluate_clouds, geometry_metrics, rand_index,
                                report_json, segmentation_covering, transfer_labels,
                                variation_of_information)

labelings = st.integers(2, 60).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 5), min_size=n, max_size=n),
                        st.lists(st.integers(0, 5), min_size=n, max_size=n)))


def test_rand_index_examples():
    assert rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert rand_index([0, 0], [0, 1]) == 0.0
    with pytest.raises(TooFewPoints):
        rand_index([1], [1])


def test_voi_examples():
    assert variation_of_information([0, 1, 1], [0, 1, 1]) == 0
    assert variation_of_information([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(math.log(2))
    with pytest.raises(EmptyInput):
        variation_of_information([], [])


def test_sc_examples():
    assert segmentation_covering([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert segmentation_covering([0, 0, 1, 1], [5, 5, 5, 5]) == pytest.approx(0.5)
    assert segmentation_covering([0, 0, 1, 2], [7, 7, 3, 9]) == 1.0
    with pytest.raises(EmptyInput):
        segmentation_covering([-1], [0])


def test_unlabeled_handling():
    gt = [0, 0, 1, -1]
    pred = [3, 3, 4, 4]
    assert rand_index(gt, pred) == 1.0
    # as a singleton the unlabeled point still agrees on every pair
    assert rand_index(gt, pred, include_unlabeled=True) == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        rand_index([0, 1], [0])


@settings(max_examples=150, deadline=None)
@given(labelings)
def test_segmentation_metrics_match_brute_force(ab):
    a, b = ab
    agree, total = oracles.rand_index_pairs(a, b)
    assert rand_index(a, b) == agree / total
    assert variation_of_information(a, b) == pytest.approx(oracles.voi_direct(a, b), abs=1e-9)
    assert segmentation_covering(a, b) == pytest.approx(oracles.covering_sets(a, b)[0], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(labelings, st.permutations(range(6)))
def test_permutation_invariance_and_symmetry(ab, perm):
    a, b = ab
    pb = [perm[x] for x in b]
    assert rand_index(a, pb) == rand_index(a, b)
    assert variation_of_information(a, pb) == pytest.approx(variation_of_information(a, b), abs=1e-12)
    assert segmentation_covering(a, pb) == pytest.approx(segmentation_covering(a, b), abs=1e-12)
    assert variation_of_information(a, b) == pytest.approx(variation_of_information(b, a), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_voi_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.integers(0, 4, (3, 40))
    ab = variation_of_information(a, b)
    bc = variation_of_information(b, c)
    assert variation_of_information(a, c) <= ab + bc + 1e-12


def test_contingency_counts():
    t = contingency_table(np.array([0, 0, 2, 2, 2]), np.array([1, 3, 3, 3, 1]))
    assert np.array_equal(t, [[1, 1], [1, 2]])


def test_geometry_examples():
    rng = np.random.default_rng(0)
    gt = rng.uniform(-1, 1, (300, 3))
    rep = geometry_metrics(gt, gt)
    assert (rep.accuracy, rep.completeness, rep.precision, rep.recall, rep.f_score) == (0, 0, 1, 1, 1)
    grid = np.stack(np.meshgrid(*[np.arange(5.0)] * 3), -1).reshape(-1, 3)
    rep = geometry_metrics(grid + [0.1, 0, 0], grid, 0.05)
    assert rep.accuracy == pytest.approx(0.1) and rep.completeness == pytest.approx(0.1)
    assert rep.precision == rep.recall == rep.f_score == 0
    with pytest.raises(EmptyInput):
        geometry_metrics(np.zeros((0, 3)), gt)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_geometry_matches_brute_force_and_swaps(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(-1, 1, (rng.integers(1, 200), 3))
    gt = rng.uniform(-1, 1, (rng.integers(1, 200), 3))
    rep = geometry_metrics(pred, gt, 0.2)
    acc, comp, p, r, f = oracles.geometry_brute(pred, gt, 0.2)
    assert rep.accuracy == pytest.approx(acc, abs=1e-9)
    assert rep.completeness == pytest.approx(comp, abs=1e-9)
    assert (rep.precision, rep.recall) == (p, r) and rep.f_score == pytest.approx(f, abs=1e-12)
    sw = geometry_metrics(gt, pred, 0.2)
    assert (sw.accuracy, sw.completeness, sw.precision, sw.recall) == \
        (rep.completeness, rep.accuracy, rep.recall, rep.precision)


def test_evaluate_clouds_report():
    rng = np.random.default_rng(1)
    gt = rng.uniform(-1, 1, (100, 3))
    labels = (gt[:, 0] > 0).astype(int)
    rep = evaluate_clouds(gt + 0.001, labels + 4, gt, labels)
    assert rep["ri"] == 1.0 and rep["voi"] == 0 and rep["sc"] == 1.0 and rep["f_score"] == 1.0
    assert np.array_equal(transfer_labels(gt, labels, gt), labels)
    keys = list(json.loads(report_json(rep)))
    assert keys == ["ri", "voi", "sc", "accuracy", "completeness", "precision", "recall",
                    "f_score", "threshold", "n_pred", "n_gt"]
