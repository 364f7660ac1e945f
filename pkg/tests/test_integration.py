import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semocc import labels as L
from semocc.completion import CompletionResult
from semocc.core_map import GlobalMap, VoxelCell, VoxelState
from semocc.integration import (FusionPolicyConfig, FusionStats, fuse_cell, fuse_label,
                                fuse_labels, fuse_submap)
from semocc.submap import SubMapAnchor

A0 = SubMapAnchor((0, 0, 0))
SHAPE = (64, 64, 64)
L_FUSE = math.log(0.51 / 0.49)


def prediction(entries, anchor=A0):
    lab = np.zeros(SHAPE, np.uint8)
    conf = np.zeros(SHAPE, np.float32)
    for (i, j, k), (label, c) in entries.items():
        lab[i, j, k] = label
        conf[i, j, k] = c
    return CompletionResult(anchor, lab, conf)


def put(gmap, index, **kw):
    gmap.get_or_allocate(index).assign(VoxelCell(**kw))


class TestFuseLabel:
    def test_disagreement_sequence(self):
        # chair 0.7, then table 0.2, then table 0.1
        lab, w = fuse_label(0, 0.0, L.CHAIR, 0.7)
        lab, w = fuse_label(lab, w, L.TABLE, 0.2)
        assert lab == L.CHAIR and w == pytest.approx(0.5)
        lab, w = fuse_label(lab, w, L.TABLE, 0.1)
        assert lab == L.CHAIR and w == pytest.approx(0.4)

    def test_overtake(self):
        assert fuse_label(L.CHAIR, 0.2, L.TABLE, 0.5) == (L.TABLE, pytest.approx(0.3))

    def test_tie_keeps_stored_label(self):
        assert fuse_label(L.CHAIR, 0.4, L.TABLE, 0.4) == (L.CHAIR, 0.0)

    def test_agreement_saturates(self):
        assert fuse_label(L.SOFA, 4.8, L.SOFA, 0.9, weight_max=5.0) == (L.SOFA, 5.0)

    @given(st.integers(0, 11), st.floats(0, 5), st.integers(1, 11), st.floats(0, 1))
    def test_weight_bounds_and_vectorised_agreement(self, lab, w, new, nw):
        out_l, out_w = fuse_label(lab, w, new, nw)
        assert 0.0 <= out_w <= 5.0
        assert out_l in (lab, new)
        vl, vw = fuse_labels(np.array([lab], np.uint8), np.array([w]),
                             np.array([new], np.uint8), np.array([nw]))
        assert (int(vl[0]), float(vw[0])) == (out_l, out_w)

    def test_fuse_cell_keeps_occupancy(self):
        cell = VoxelCell(logodds=1.5, label=L.BED, label_weight=1.0, sensor_observed=True)
        out = fuse_cell(cell, L.BED, 0.5)
        assert out.logodds == 1.5 and out.label_weight == pytest.approx(1.5)


class TestPolicyConfig:
    def test_default_logodds(self):
        assert FusionPolicyConfig().logodds == pytest.approx(0.0400053, abs=1e-6)

    @pytest.mark.parametrize("p", [0.5, 1.0, 0.3])
    def test_rejects_p_fuse(self, p):
        with pytest.raises(ValueError):
            FusionPolicyConfig(p_fuse=p)


class TestFuseSubmap:
    def test_unknown_cell_becomes_weakly_occupied(self):
        gmap = GlobalMap()
        gmap.frame_counter = 7
        stats = fuse_submap(gmap, prediction({(1, 2, 3): (L.CHAIR, 1.0)}))
        cell = gmap.cell((1, 2, 3))
        assert cell.logodds == pytest.approx(L_FUSE)
        assert (cell.label, cell.label_weight, cell.timestamp) == (L.CHAIR, 1.0, 7)
        assert cell.prediction_fused and not cell.sensor_observed
        assert gmap.find((1, 2, 3)).state is VoxelState.OCCUPIED
        assert (stats.labels_fused, stats.occupancy_fused) == (1, 1)

    def test_empty_cell_discards_prediction(self):
        gmap = GlobalMap()
        put(gmap, (4, 4, 4), logodds=-2.0, sensor_observed=True)
        before = gmap.cell((4, 4, 4))
        stats = fuse_submap(gmap, prediction({(4, 4, 4): (L.TABLE, 0.9)}))
        assert gmap.cell((4, 4, 4)) == before
        assert stats.discarded_empty_state == 1 and stats.labels_fused == 0

    def test_sensor_logodds_untouched(self):
        gmap = GlobalMap()
        put(gmap, (4, 4, 4), logodds=2.0, label=L.TABLE, label_weight=0.5, sensor_observed=True)
        fuse_submap(gmap, prediction({(4, 4, 4): (L.TABLE, 0.9)}))
        cell = gmap.cell((4, 4, 4))
        assert cell.logodds == 2.0 and not cell.prediction_fused
        assert cell.label_weight == pytest.approx(1.4)

    def test_repeated_fusion_adds_occupancy_once(self):
        gmap = GlobalMap()
        res = prediction({(0, 0, 0): (L.WALL, 0.5)})
        fuse_submap(gmap, res)
        fuse_submap(gmap, res)
        cell = gmap.cell((0, 0, 0))
        # the second pass sees an Occupied cell and only fuses the label
        assert cell.logodds == pytest.approx(L_FUSE)
        assert cell.label_weight == pytest.approx(1.0)

    def test_empty_predictions_ignored(self):
        gmap = GlobalMap()
        stats = fuse_submap(gmap, prediction({}))
        assert gmap.n_blocks == 0
        assert stats.discarded_empty_prediction == 64 ** 3

    def test_translated_anchor(self):
        gmap = GlobalMap()
        anchor = SubMapAnchor((-1, 0, 2))
        fuse_submap(gmap, prediction({(0, 1, 0): (L.SOFA, 0.3)}, anchor))
        assert gmap.cell((-64, 1, 128)).label == L.SOFA

    def test_misaligned_anchor_rejected(self):
        gmap = GlobalMap()
        res = prediction({(0, 0, 0): (L.SOFA, 0.3)}, SubMapAnchor((0, 0, 0), voxel_size=0.1))
        with pytest.raises(ValueError):
            fuse_submap(gmap, res)

    def test_stats_accumulate(self):
        total = FusionStats()
        total += FusionStats(labels_fused=2, submaps=1)
        total += FusionStats(labels_fused=3, submaps=1)
        assert total.to_dict()["labels_fused"] == 5 and total.submaps == 2

