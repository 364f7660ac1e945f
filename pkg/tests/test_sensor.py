import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semocc import labels as L
from semocc.core_map import GlobalMap, MapConfig, VoxelState
from semocc.sensor import (CameraIntrinsics, Pose, SensorNoiseModel, integrate_depth,
                           inverse_sensor_logodds, occupancy_probability, project_voxel)
from semocc.synth import ScenePrimitive, SyntheticScene, render_depth

INTR = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


class TestIntrinsicsAndPose:
    def test_rejects_bad_principal_point(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(100, 100, 120, 50, 100, 100)

    def test_json_roundtrip(self, tmp_path):
        INTR.save(tmp_path / "k.json")
        assert CameraIntrinsics.load(tmp_path / "k.json") == INTR

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
        lambda q: np.linalg.norm(q) > 0.1))
    def test_quaternion_roundtrip(self, q):
        p = Pose.from_quaternion([1, 2, 3], q)
        back = Pose.from_quaternion(p.translation, p.quaternion())
        np.testing.assert_allclose(back.rotation, p.rotation, atol=1e-12)


class TestProjection:
    @pytest.mark.parametrize("point, expected", [
        ((0, 0, 2), (50.0, 50.0)),
        ((1, 0, 2), (100.0, 50.0)),
    ])
    def test_identity_pose(self, point, expected):
        assert project_voxel(point, Pose(), INTR) == expected

    def test_behind_camera(self):
        assert project_voxel((0, 0, -1), Pose(), INTR) is None

    def test_outside_image(self):
        assert project_voxel((3, 0, 2), Pose(), INTR) is None

    def test_translated_pose(self):
        pose = Pose(np.eye(3), [1.0, 0.0, 0.0])
        assert project_voxel((1, 0, 2), pose, INTR) == (50.0, 50.0)


class TestInverseModel:
    m = SensorNoiseModel()

    def test_surface_is_neutral(self):
        assert inverse_sensor_logodds(2.0, 2.0, self.m) == 0.0

    def test_free_space(self):
        # sigma = 0.1 at 2 m, so 1.8 m sits at s = -2
        assert inverse_sensor_logodds(2.0, 1.8, self.m) == pytest.approx(math.log(0.03 / 0.97))
        assert math.log(0.03 / 0.97) == pytest.approx(-3.476, abs=1e-3)

    def test_beyond_band_is_no_update(self):
        assert inverse_sensor_logodds(2.0, 2.4, self.m) is None

    def test_sigma_floor(self):
        assert self.m.sigma(0.1) == 0.02
        assert self.m.sigma(2.0) == pytest.approx(0.1)

    def test_ramp_peak_and_decay(self):
        p = lambda s: occupancy_probability(s, 0.03, 3.0)  # noqa: E731
        assert p(1.0) == pytest.approx(0.97)
        assert p(2.0) == pytest.approx(0.735)
        assert p(-1.0) == 0.03

    @pytest.mark.parametrize("d, v", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_rejects_non_positive(self, d, v):
        with pytest.raises(ValueError):
            inverse_sensor_logodds(d, v, self.m)

    @given(st.floats(-1, 1))
    def test_odd_symmetry(self, s):
        total = occupancy_probability(s, 0.03, 3.0) + occupancy_probability(-s, 0.03, 3.0)
        assert abs(total - 1.0) <= 1e-12

    @given(st.floats(-0.999, 0.999), st.floats(0, 0.5))
    def test_monotone(self, s, ds):
        t = min(s + ds, 0.999)
        assert occupancy_probability(t, 0.03, 3.0) >= occupancy_probability(s, 0.03, 3.0)

    @pytest.mark.parametrize("kw", [{"p_free": 0.5}, {"sigma_min": 0.0}, {"back_band": 0.5}])
    def test_model_validation(self, kw):
        with pytest.raises(ValueError):
            SensorNoiseModel(**kw)


class TestFusionArithmetic:
    def test_two_observations_of_0_7(self):
        g = GlobalMap(MapConfig(logodds_min=-math.inf, logodds_max=math.inf))
        d = math.log(0.7 / 0.3)
        g.apply_logodds([[0, 0, 0], [0, 0, 0]], [d, d], now=1)
        l = g.cell((0, 0, 0)).logodds
        assert 1.0 / (1.0 + math.exp(-l)) == pytest.approx(0.49 / 0.58, abs=1e-12)

    def test_neutral_observation(self):
        g = GlobalMap()
        g.apply_logodds([[0, 0, 0]], [0.0], now=1)
        assert g.cell((0, 0, 0)).logodds == 0.0

    @settings(max_examples=50)
    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10))
    def test_log_odds_sum_equals_bayes(self, probs):
        g = GlobalMap(MapConfig(logodds_min=-math.inf, logodds_max=math.inf))
        g.apply_logodds([[0, 0, 0]] * len(probs), [math.log(p / (1 - p)) for p in probs], now=1)
        num = np.prod(probs)
        den = num + np.prod([1 - p for p in probs])
        assert 1.0 / (1.0 + math.exp(-g.cell((0, 0, 0)).logodds)) == pytest.approx(
            num / den, abs=1e-12)


def _wall(z=2.0):
    return SyntheticScene([ScenePrimitive((-5, -5, z), (5, 5, z + 0.1), L.WALL)],
                          ((-5, -5, 0), (5, 5, z + 0.1)))


class TestIntegrateDepth:
    def test_all_invalid_image(self):
        g = GlobalMap()
        st_ = integrate_depth(g, np.zeros((100, 100)), Pose(), INTR)
        assert st_.updates == 0 and g.n_blocks == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            integrate_depth(GlobalMap(), np.zeros((10, 10)), Pose(), INTR)

    def test_wall_observation(self):
        g = GlobalMap()
        g.frame_counter = 3
        depth = render_depth(_wall(), Pose(), INTR)
        st_ = integrate_depth(g, depth, Pose(), INTR)
        assert st_.rays == 100 * 100
        assert g.cell((0, 0, 40)).logodds > 0  # first voxel behind the surface
        free = g.cell((0, 0, 20))
        assert free.logodds < 0 and free.sensor_observed and free.timestamp == 3
        assert g.cell((0, 0, 60)).sensor_observed is False  # beyond the band

    def test_clamp_never_exceeded(self):
        g = GlobalMap()
        depth = render_depth(_wall(), Pose(), INTR)
        for _ in range(5):
            integrate_depth(g, depth, Pose(), INTR)
        _, cells = g.allocated_cells()
        assert cells.logodds.min() >= -5.0 and cells.logodds.max() <= 5.0

    def test_frame_permutation_invariance_without_clamp(self):
        rng = np.random.default_rng(0)
        poses = [Pose(np.eye(3), [*rng.uniform(-0.2, 0.2, 2), 0.0]) for _ in range(4)]
        frames = [(render_depth(_wall(), p, INTR), p) for p in poses]
        cfg = MapConfig(logodds_min=-math.inf, logodds_max=math.inf)
        maps = []
        for order in ([0, 1, 2, 3], [3, 1, 0, 2]):
            g = GlobalMap(cfg)
            for i in order:
                integrate_depth(g, *frames[i], INTR)
            maps.append(g.allocated_cells())
        np.testing.assert_array_equal(maps[0][0], maps[1][0])
        np.testing.assert_allclose(maps[0][1].logodds, maps[1][1].logodds, atol=1e-9, rtol=0)

    def test_trace_records_offsets_below_band(self):
        g = GlobalMap()
        st_ = integrate_depth(g, render_depth(_wall(), Pose(), INTR), Pose(), INTR, trace=True)
        assert st_.trace.size == st_.updates
        assert st_.trace.max() < 3.0
        assert g.state_counts()[VoxelState.OCCUPIED] > 0
