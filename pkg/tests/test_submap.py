import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from semocc.core_map import PREDICTION_FUSED, GlobalMap, MapConfig, VoxelCell
from semocc.sensor import CameraIntrinsics, Pose
from semocc.submap import (_FACES, Frustum, StalenessConfig, SubMapAnchor, SubMapGrid,
                           compute_frustum, cover_frustum, extract_submap, filter_stale,
                           recently_fused_fraction)

INTR = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


class TestAnchor:
    @pytest.mark.parametrize("lattice, origin, expected", [
        ((0, 0, 0), (0, 0, 0), (0.0, 0.0, 0.0)),
        ((1, -1, 2), (0, 0, 0), (3.2, -3.2, 6.4)),
        ((1, 0, 0), (0.1, 0, 0), (3.3, 0.0, 0.0)),
    ])
    def test_world_origin(self, lattice, origin, expected):
        a = SubMapAnchor(lattice, origin=origin)
        np.testing.assert_allclose(a.world_origin, expected, atol=1e-12)

    def test_hashable(self):
        assert len({SubMapAnchor((0, 0, 0)), SubMapAnchor([0, 0, 0])}) == 1


class TestComputeFrustum:
    def test_far_corner(self):
        fr = compute_frustum(Pose(), INTR, 0.01, 5.0)
        np.testing.assert_allclose(fr.corners[4], (-2.5, -2.5, 5.0))

    def test_near_corners_are_scaled_far_corners(self):
        fr = compute_frustum(Pose(), INTR, 0.01, 5.0)
        np.testing.assert_allclose(fr.corners[:4], fr.corners[4:] * 0.002, atol=1e-15)

    def test_translation_shifts_corners(self):
        t = np.array([1.0, -2.0, 0.5])
        a = compute_frustum(Pose(), INTR)
        b = compute_frustum(Pose(np.eye(3), t), INTR)
        np.testing.assert_array_equal(b.corners, a.corners + t)

    def test_rejects_inverted_range(self):
        with pytest.raises(ValueError):
            compute_frustum(Pose(), INTR, 2.0, 1.0)

    def test_contains(self):
        fr = compute_frustum(Pose(), INTR)
        assert fr.contains([[0, 0, 1], [2.4, 0, 5]]).all()
        assert not fr.contains([[0, 0, -0.1], [3, 0, 5], [0, 0, 5.1]]).any()


class TestCoverFrustum:
    def test_small_frustum_single_anchor(self):
        pose = Pose(np.eye(3), [1.6, 1.6, 0.5])
        fr = compute_frustum(pose, INTR, 0.01, 1.0)
        assert [a.lattice for a in cover_frustum(fr)] == [(0, 0, 0)]

    def test_degenerate_frustum_is_empty(self):
        fr = Frustum(np.zeros((8, 3)))
        assert cover_frustum(fr) == []

    def test_axis_aligned_span_up_to_eight(self):
        # a frustum whose bounding box spans 0..6.4 m along every axis
        k = CameraIntrinsics(50.0, 50.0, 50.0, 50.0, 100, 100)
        pose = Pose(np.eye(3), [3.2, 3.2, 0.0])
        fr = compute_frustum(pose, k, 0.01, 3.2)
        anchors = cover_frustum(fr, MapConfig())
        assert 1 <= len(anchors) <= 8
        covered = {a.lattice for a in anchors}
        vs = 0.05
        idx = np.stack(np.meshgrid(*[np.arange(0, 128)] * 3, indexing="ij"), -1).reshape(-1, 3)
        hit = idx[fr.contains((idx + 0.5) * vs)]
        assert {tuple(v) for v in (hit // 64).tolist()} <= covered

    def test_order_starts_at_min_x_min_z(self):
        pose = Pose(np.eye(3), [0.1, 0.1, 0.1])
        anchors = cover_frustum(compute_frustum(pose, INTR))
        first = anchors[0].lattice
        assert first[0] == min(a.lattice[0] for a in anchors)
        assert first[2] == min(a.lattice[2] for a in anchors if a.lattice[0] == first[0])

    def test_minimal(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            pose = Pose.from_quaternion(rng.uniform(0, 3, 3), rng.normal(size=4))
            fr = compute_frustum(pose, INTR, 0.01, 3.0)
            for a in cover_frustum(fr):
                # each selected box shares a positive-volume region with the frustum
                assert _overlap_margin(fr, *a.box()) > 1e-9


def _overlap_margin(fr, lo, hi):
    """Largest margin of a point inside both the frustum and the box (LP)."""
    c = fr.corners
    centre = c.mean(axis=0)
    rows, rhs = [], []
    for f in _FACES:
        n = np.cross(c[f[1]] - c[f[0]], c[f[3]] - c[f[0]])
        n /= np.linalg.norm(n)
        if np.dot(centre - c[f[0]], n) > 0:
            n = -n
        rows.append([*n, 1.0])
        rhs.append(n @ c[f[0]])
    for i in range(3):
        e = np.eye(3)[i]
        rows += [[*e, 1.0], [*-e, 1.0]]
        rhs += [hi[i], -lo[i]]
    res = linprog([0, 0, 0, -1], A_ub=rows, b_ub=rhs, bounds=[(None, None)] * 3 + [(None, 10)])
    return res.x[3] if res.status == 0 else -np.inf


class TestStaleness:
    @staticmethod
    def _fuse_fraction(g, frac, stamp):
        n = int(round(frac * 64 ** 3))
        cells = g.read_box((0, 0, 0), (64, 64, 64))
        changed = np.zeros(64 ** 3, bool)
        changed[:n] = True
        changed = changed.reshape(64, 64, 64)
        cells.flags[changed] = PREDICTION_FUSED
        cells.logodds[changed] = 0.04
        cells.stamp[changed] = stamp
        g.write_box((0, 0, 0), cells, changed)

    def test_never_completed_retained(self):
        a = SubMapAnchor((0, 0, 0))
        assert filter_stale(GlobalMap(), [a], StalenessConfig(), now=5) == [a]

    def test_fully_fused_discarded(self):
        g = GlobalMap()
        self._fuse_fraction(g, 1.0, 10)
        assert filter_stale(g, [SubMapAnchor((0, 0, 0))], StalenessConfig(), now=10) == []

    def test_forty_percent_ten_frames_ago(self):
        g = GlobalMap()
        self._fuse_fraction(g, 0.4, 10)
        a = SubMapAnchor((0, 0, 0))
        assert recently_fused_fraction(g, a, 20, 30) == pytest.approx(0.4, abs=1e-5)
        assert filter_stale(g, [a], StalenessConfig(0.3, 30), now=20) == []

    def test_old_fusions_expire(self):
        g = GlobalMap()
        self._fuse_fraction(g, 0.4, 10)
        a = SubMapAnchor((0, 0, 0))
        assert filter_stale(g, [a], StalenessConfig(0.3, 30), now=41) == [a]

    @pytest.mark.parametrize("frac", [0.1, 0.35])
    def test_monotone_in_tau_s(self, frac):
        g = GlobalMap()
        self._fuse_fraction(g, frac, 1)
        a = [SubMapAnchor((0, 0, 0))]
        sizes = [len(filter_stale(g, a, StalenessConfig(t, 30), 1)) for t in (0.0, 0.2, 0.4, 1.0)]
        assert sizes == sorted(sizes)

    def test_unaligned_stride_uses_box_path(self):
        g = GlobalMap()
        g.get_or_allocate((1, 1, 1)).assign(VoxelCell(0.04, 5, 1.0, 3, False, True))
        a = SubMapAnchor((0, 0, 0), stride=4)
        assert recently_fused_fraction(g, a, 3, 30) == pytest.approx(1 / 64)


class TestExtractSubmap:
    def test_unallocated_space(self):
        grid = extract_submap(GlobalMap(), SubMapAnchor((2, 0, -1)))
        assert (grid.occupancy == 0.5).all() and (grid.unknown_mask == 1).all()

    @pytest.mark.parametrize("l, expected", [(5.0, 0.9933071), (-5.0, 0.0066929)])
    def test_logistic_of_clamp_bounds(self, l, expected):
        g = GlobalMap()
        g.get_or_allocate((3, 4, 5)).assign(VoxelCell(logodds=l, sensor_observed=True))
        grid = extract_submap(g, SubMapAnchor((0, 0, 0)))
        assert grid.occupancy[3, 4, 5] == pytest.approx(expected, abs=1e-6)
        assert grid.unknown_mask[3, 4, 5] == 0

    def test_snapshot_isolation(self):
        g = GlobalMap()
        g.apply_logodds([[1, 1, 1]], [2.0], now=1)
        grid = extract_submap(g, SubMapAnchor((0, 0, 0)))
        before = grid.occupancy.copy()
        g.apply_logodds([[1, 1, 1], [2, 2, 2]], [-4.0, 1.0], now=2)
        np.testing.assert_array_equal(grid.occupancy, before)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 63), st.integers(0, 63),
                              st.floats(-5, 5)), max_size=30))
    def test_mask_implies_half(self, writes):
        g = GlobalMap()
        for i, j, k, l in writes:
            g.apply_logodds([[i, j, k]], [l], now=1)
        grid = extract_submap(g, SubMapAnchor((0, 0, 0)))
        assert (grid.occupancy[grid.unknown_mask == 1] == 0.5).all()
        assert int((grid.unknown_mask == 0).sum()) == len({w[:3] for w in writes})

    def test_dump_is_x_fastest(self):
        occ = np.zeros((64, 64, 64), np.float32)
        occ[1, 0, 0] = 0.25
        mask = np.zeros((64, 64, 64), np.uint8)
        mask[0, 1, 0] = 1
        data = SubMapGrid(SubMapAnchor((0, 0, 0)), occ, mask).to_bytes()
        assert np.frombuffer(data, "<f4", 2)[1] == 0.25
        assert data[4 * 64 ** 3 + 64] == 1
        back = SubMapGrid.from_bytes(data, SubMapAnchor((0, 0, 0)))
        np.testing.assert_array_equal(back.occupancy, occ)
        np.testing.assert_array_equal(back.unknown_mask, mask)
