import json

import numpy as np
import pytest

from semocc import labels as L
from semocc.core_map import GlobalMap, MapConfig, VoxelCell
from semocc.evaluation import ClassScore, EvalMode, evaluate, score_labels
from semocc.synth import GroundTruthVolume


def toy_gt():
    lab = np.zeros((3, 3, 3), np.uint8)
    lab[0, 0, :] = L.CHAIR
    lab[2, 2, 2] = L.TABLE
    return lab


class TestScoreLabels:
    def test_identical_is_perfect(self):
        gt = toy_gt()
        r = score_labels(gt, gt)
        assert r.mean_iou == 1.0
        assert r.present_classes() == [L.CHAIR, L.TABLE]

    def test_empty_prediction(self):
        r = score_labels(np.zeros(27, np.uint8), toy_gt())
        chair = r.classes[L.CHAIR]
        assert chair.iou == 0.0 and chair.precision is None and chair.recall == 0.0

    def test_toy_counts(self):
        gt = toy_gt()
        pred = np.zeros_like(gt)
        pred[0, 0, 0] = L.CHAIR
        pred[0, 1, 0] = L.CHAIR  # false positive
        pred[0, 0, 1] = L.TABLE  # chair predicted as table
        pred[0, 0, 2] = L.CHAIR
        r = score_labels(pred, gt)
        # chair: tp 2, fp 1, fn 1 -> 2 / 4; table: tp 0, fp 1, fn 1
        assert r.classes[L.CHAIR].iou == pytest.approx(0.5)
        assert r.classes[L.TABLE].iou == 0.0
        assert r.mean_iou == pytest.approx(0.25)

    def test_one_of_three(self):
        gt = toy_gt()
        pred = np.zeros_like(gt)
        pred[0, 0, 0] = L.CHAIR
        r = score_labels(pred, gt)
        assert r.classes[L.CHAIR].iou == pytest.approx(1 / 3)
        assert r.classes[L.CHAIR].precision == 1.0

    def test_swap_symmetry(self, rng):
        a = rng.integers(0, 12, 500)
        b = rng.integers(0, 12, 500)
        ab, ba = score_labels(a, b), score_labels(b, a)
        for k in L.SEMANTIC_LABELS:
            assert ab.classes[k].iou == ba.classes[k].iou
            assert ab.classes[k].precision == ba.classes[k].recall

    def test_mean_skips_undefined(self):
        r = score_labels(np.array([L.BED]), np.array([L.BED]))
        assert r.mean_iou == 1.0 and r.classes[L.SOFA].iou is None

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            score_labels(np.zeros(3), np.zeros(4))

    def test_class_score_nones(self):
        s = ClassScore(0, 0, 0)
        assert s.iou is None and s.precision is None and s.recall is None


def map_and_gt():
    gt = GroundTruthVolume(np.zeros(3), 0.05, toy_gt())
    gmap = GlobalMap(MapConfig())
    for idx in np.argwhere(gt.labels != 0):
        gmap.get_or_allocate(tuple(idx)).assign(VoxelCell(logodds=1.0, label=int(gt.labels[tuple(idx)]),
                                                          label_weight=1.0, sensor_observed=True))
    return gmap, gt


class TestEvaluate:
    def test_perfect_map(self):
        gmap, gt = map_and_gt()
        r = evaluate(gmap, gt)
        assert r.mean_iou == 1.0 and r.evaluated_voxels == 27

    def test_non_occupied_predicts_empty(self):
        gmap, gt = map_and_gt()
        gmap.get_or_allocate((2, 2, 2)).logodds = -1.0
        r = evaluate(gmap, gt)
        assert r.classes[L.TABLE].iou == 0.0

    def test_ignore_carved(self):
        gmap, gt = map_and_gt()
        gmap.get_or_allocate((2, 2, 2)).logodds = -1.0
        r = evaluate(gmap, gt, ignore_carved=True)
        assert r.ignored_voxels == 1 and r.classes[L.TABLE].iou is None
        assert r.mean_iou == 1.0

    def test_surface_subset_of_full(self):
        gmap, gt = map_and_gt()
        gmap.get_or_allocate((1, 1, 1)).assign(VoxelCell(logodds=1.0, label=L.SOFA,
                                                         prediction_fused=True))
        surf = evaluate(gmap, gt, EvalMode.SURFACE)
        full = evaluate(gmap, gt, "full")
        assert surf.evaluated_voxels < full.evaluated_voxels
        for k in L.SEMANTIC_LABELS:
            s, f = surf.classes[k], full.classes[k]
            assert s.tp <= f.tp and s.fp <= f.fp and s.fn <= f.fn
        assert full.classes[L.SOFA].fp == 1 and surf.classes[L.SOFA].fp == 0

    def test_voxel_size_mismatch(self):
        gmap, _ = map_and_gt()
        gt = GroundTruthVolume(np.zeros(3), 0.1, toy_gt())
        with pytest.raises(ValueError):
            evaluate(gmap, gt)

    def test_misaligned_origin(self):
        gmap, _ = map_and_gt()
        gt = GroundTruthVolume(np.full(3, 0.01), 0.05, toy_gt())
        with pytest.raises(ValueError, match="misalignment"):
            evaluate(gmap, gt)

    def test_report_serialization(self):
        gmap, gt = map_and_gt()
        r = evaluate(gmap, gt)
        d = json.loads(r.to_json())
        assert d["classes"]["chair"]["iou"] == 1.0 and d["classes"]["bed"]["iou"] is None
        rows = r.to_csv().splitlines()
        assert rows[0].startswith("label,id,tp") and len(rows) == 12
