import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lact.errors import ShapeError
from lact.metrics import (CaseMetrics, aggregate, connected_components_27, dice, lesion_metrics,
                          report_document)

from oracles import bfs_components, lesion_metrics_bruteforce, partition_of


def test_single_voxel_is_one_component():
    m = np.zeros((5, 5, 5), dtype=np.uint8)
    m[2, 2, 2] = 1
    assert connected_components_27(m).count == 1


def test_corner_neighbours_are_connected():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components_27(m).count == 1
    m[1, 1, 1] = False
    m[2, 2, 2] = True
    assert connected_components_27(m).count == 2


def test_labelling_matches_bfs(rng):
    for _ in range(100):
        m = rng.random((8, 8, 8)) < 0.2
        cc = connected_components_27(m)
        comps = bfs_components(m)
        assert cc.count == len(comps)
        assert partition_of(cc.labels) == set(comps)


def test_non_3d_mask_rejected():
    with pytest.raises(ShapeError):
        connected_components_27(np.zeros((3, 3)))


def test_dice_examples():
    a = np.zeros((4, 4, 4), dtype=bool)
    a[0, :2] = True
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 2, axis=1)) == 0.0
    half = a.copy()
    half[0, 1] = False
    assert dice(half, a) == pytest.approx(2 / 3)
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_two_lesion_example():
    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    gt[5:7, 5:7, 5:7] = 1
    pred = np.zeros(gt.shape)
    pred[1, 1, 1] = 0.9        # hits lesion A
    pred[5:7, 5:7, 5:7] = 0.8  # covers lesion B
    pred[0, 7, 7] = 0.6        # isolated false positive
    m = lesion_metrics(pred, gt, case_id="x")
    assert (m.ltpr, m.lfpr, m.fp_count) == (1.0, pytest.approx(1 / 3), 1)

    pred[1, 1, 1] = 0.0
    m = lesion_metrics(pred, gt)
    assert (m.ltpr, m.lfpr, m.fp_count) == (0.5, 0.5, 1)


def test_perfect_prediction():
    gt = np.zeros((10, 10, 10), dtype=np.uint8)
    gt[0:2, 0:2, 0:2] = 1
    gt[4:6, 4:6, 4:6] = 1
    gt[8:10, 0:2, 8:10] = 1
    m = lesion_metrics(gt.astype(float), gt)
    assert (m.dice, m.ltpr, m.lfpr, m.fp_count) == (1.0, 1.0, 0.0, 0)


def test_empty_conventions():
    z = np.zeros((4, 4, 4))
    m = lesion_metrics(z, z)
    assert (m.dice, m.ltpr, m.lfpr, m.fp_count) == (1.0, 1.0, 0.0, 0)
    gt = z.copy()
    gt[1, 1, 1] = 1
    m = lesion_metrics(z, gt)
    assert (m.dice, m.ltpr, m.lfpr, m.fp_count) == (0.0, 0.0, 0.0, 0)


def test_threshold_is_inclusive():
    gt = np.zeros((3, 3, 3))
    gt[1, 1, 1] = 1
    assert lesion_metrics(gt * 0.5, gt).ltpr == 1.0
    with pytest.raises(ValueError):
        lesion_metrics(gt, gt, threshold=1.0)


def test_metrics_match_bruteforce(rng):
    for _ in range(200):
        pred_bin = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.25)
        gt = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.25)
        m = lesion_metrics(pred_bin.astype(float), gt)
        d, ltpr, lfpr, fps = lesion_metrics_bruteforce(pred_bin, gt)
        assert (m.dice, m.ltpr, m.lfpr, m.fp_count) == (d, ltpr, lfpr, fps)


def test_aggregate_examples():
    reports = [CaseMetrics("a", 1.0, 1.0, 0.0, 0), CaseMetrics("b", 0.5, 0.5, 0.5, 2)]
    agg = aggregate(reports)
    assert agg == {"dice": 0.75, "ltpr": 0.75, "lfpr": 0.25, "fp_count": 1.0, "n_cases": 2}
    assert aggregate(reports[:1])["dice"] == 1.0
    with pytest.raises(ValueError):
        aggregate([])


def test_report_document_is_canonical():
    reports = [CaseMetrics("a", 1.0, 1.0, 0.0, 0)]
    text = report_document(reports)
    doc = json.loads(text)
    assert doc["aggregate"]["n_cases"] == 1
    assert text == json.dumps(doc, sort_keys=True, indent=2) + "\n"


rngs = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=40, deadline=None)
@given(rngs, st.permutations([0, 1, 2]))
def test_metrics_invariant_to_axis_permutation(r, perm):
    prob = r.random((6, 7, 5)) * (r.random((6, 7, 5)) < 0.3)
    gt = r.random((6, 7, 5)) < 0.15
    a = lesion_metrics(prob, gt)
    b = lesion_metrics(prob.transpose(perm), gt.transpose(perm))
    assert (a.dice, a.ltpr, a.lfpr, a.fp_count) == (b.dice, b.ltpr, b.lfpr, b.fp_count)


@settings(max_examples=40, deadline=None)
@given(rngs, st.floats(0.05, 0.5), st.floats(0.5, 0.95))
def test_raising_threshold_never_detects_more(r, lo, hi):
    prob = r.random((6, 6, 6))
    gt = r.random((6, 6, 6)) < 0.15
    assert lesion_metrics(prob, gt, threshold=hi).ltpr <= lesion_metrics(prob, gt, threshold=lo).ltpr


def test_single_voxel_overlap_counts_as_detection():
    gt = np.zeros((8, 8, 8), dtype=np.uint8)
    gt[2:5, 2:5, 2:5] = 1
    pred = np.zeros(gt.shape)
    pred[4:7, 4:7, 4:7] = 0.9  # shares only voxel (4, 4, 4)
    pred[0, 7, 0] = 0.9
    m = lesion_metrics(pred, gt)
    assert (m.ltpr, m.lfpr, m.fp_count) == (1.0, 0.5, 1)
