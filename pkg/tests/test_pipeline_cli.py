import json
import subprocess
import sys

import numpy as np
import pytest

from semocc.cli import main
from semocc.dataset import fuse_frames
from semocc.evaluation import evaluate
from semocc.fileio import load_map
from semocc.pipeline import STAGES, PipelineConfig, compare_runs, run_frames


@pytest.fixture(scope="module")
def frames(request):
    scene0_frames = request.getfixturevalue("scene0_frames")
    return scene0_frames[::3]  # 10 frames


class TestConfig:
    def test_dict_roundtrip(self):
        cfg = PipelineConfig(backend="heuristic", mode="concurrent", crf_interval=3)
        assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            PipelineConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("kw", [{"backend": "magic"}, {"mode": "async"},
                                    {"backend": "external"}, {"completion_interval": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            PipelineConfig(**kw)

    def test_updated_ignores_none(self):
        cfg = PipelineConfig(backend="heuristic").updated(backend=None, mode="concurrent")
        assert (cfg.backend, cfg.mode) == ("heuristic", "concurrent")


class TestRun:
    def test_null_equals_plain_fusion(self, frames, small_intrinsics):
        res = run_frames(PipelineConfig(), frames, small_intrinsics)
        assert res.map.equals(fuse_frames(frames, small_intrinsics))
        assert res.fusion.labels_fused == 0

    def test_sync_deterministic(self, frames, small_intrinsics):
        cfg = PipelineConfig(backend="heuristic")
        a = run_frames(cfg, frames, small_intrinsics)
        b = run_frames(cfg, frames, small_intrinsics)
        assert a.map.equals(b.map)
        assert a.summary() == b.summary()

    def test_oracle_not_worse_than_null(self, frames, small_intrinsics, scene0):
        _, gt = scene0
        null = run_frames(PipelineConfig(), frames, small_intrinsics)
        oracle = run_frames(PipelineConfig(backend="oracle"), frames, small_intrinsics, gt=gt)
        assert evaluate(oracle.map, gt, "full").mean_iou > (evaluate(null.map, gt, "full").mean_iou or 0)

    def test_concurrent_keeps_sensor_evidence(self, frames, small_intrinsics):
        sync = run_frames(PipelineConfig(backend="heuristic"), frames, small_intrinsics)
        conc = run_frames(PipelineConfig(backend="heuristic", mode="concurrent"), frames,
                          small_intrinsics)
        cmp = compare_runs(sync.map, conc.map)
        assert cmp["observed_sets_equal"] and cmp["observed_logodds_identical"]
        assert conc.counters["frames"] == len(frames)
        assert conc.counters["completion_calls"] + conc.counters["requests_replaced"] \
            == conc.counters["anchors_retained"]

    def test_telemetry(self, frames, small_intrinsics):
        res = run_frames(PipelineConfig(backend="heuristic"), frames, small_intrinsics)
        t = res.timing
        assert set(t.stages) == set(STAGES)
        assert t.stages["input"].count == t.stages["mapping"].count == len(frames)
        assert t.stages["completion"].count == res.counters["completion_calls"]
        assert t.per_frame_ms > 0 and "Average per-frame" in t.table()
        assert json.loads(json.dumps(t.to_dict()))["frames"] == len(frames)

    def test_rejects_wrong_frame_shape(self, small_intrinsics, frames):
        depth, pose = frames[0]
        with pytest.raises(ValueError, match="shape"):
            run_frames(PipelineConfig(), [(depth[:-1], pose)], small_intrinsics)

    def test_empty_sequence(self, small_intrinsics):
        with pytest.raises(ValueError):
            run_frames(PipelineConfig(), [], small_intrinsics)

    def test_oracle_needs_ground_truth(self, frames, small_intrinsics):
        with pytest.raises(ValueError):
            run_frames(PipelineConfig(backend="oracle"), frames, small_intrinsics)


SYNTH = ["synth", "--seed", "1", "--frames", "4", "--width", "80", "--height", "60"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    assert main(SYNTH + ["--out", str(out)]) == 0
    return out


class TestCli:
    def test_synth_layout(self, dataset):
        names = {p.name for p in dataset.iterdir()}
        assert names == {"depth", "trajectory.txt", "intrinsics.json", "gt.bin", "scene.json"}
        assert len(list((dataset / "depth").glob("*.png"))) == 4

    def test_synth_reproducible(self, tmp_path, dataset):
        assert main(SYNTH + ["--out", str(tmp_path)]) == 0
        for p in dataset.rglob("*"):
            if p.is_file():
                assert (tmp_path / p.relative_to(dataset)).read_bytes() == p.read_bytes()

    def test_fuse_run_eval(self, tmp_path, dataset, capsys):
        assert main(["fuse", "--data", str(dataset), "--out", str(tmp_path / "f.bin")]) == 0
        assert main(["run", "--data", str(dataset), "--out", str(tmp_path / "r.bin"),
                     "--timing", str(tmp_path / "t.json"), "--stats", str(tmp_path / "s.json"),
                     "--ply", str(tmp_path / "r.ply")]) == 0
        assert load_map(tmp_path / "f.bin").equals(load_map(tmp_path / "r.bin"))
        assert "Average per-frame" in capsys.readouterr().out
        assert main(["eval", "--map", str(tmp_path / "r.bin"), "--data", str(dataset),
                     "--json", str(tmp_path / "e.json"), "--csv", str(tmp_path / "e.csv")]) == 0
        report = json.loads((tmp_path / "e.json").read_text())
        assert report["mode"] == "full" and report["mean_iou"] is not None
        assert (tmp_path / "r.ply").read_text().startswith("ply")

    def test_config_override(self, tmp_path, dataset):
        (tmp_path / "c.json").write_text(json.dumps({"crf": {"iterations": 0}, "backend": "heuristic"}))
        assert main(["run", "--data", str(dataset), "--config", str(tmp_path / "c.json"),
                     "--stats", str(tmp_path / "s.json"), "--out", str(tmp_path / "m.bin")]) == 0
        stats = json.loads((tmp_path / "s.json").read_text())
        assert stats["crf"]["iterations"] == 0 and stats["counters"]["completion_calls"] > 0

    def test_export_dataset_and_ply(self, tmp_path, dataset):
        assert main(["export-dataset", "--data", str(dataset), "--skip", "2",
                     "--out", str(tmp_path / "pairs")]) == 0
        assert (tmp_path / "pairs" / "manifest.json").is_file()
        assert main(["fuse", "--data", str(dataset), "--out", str(tmp_path / "m.bin")]) == 0
        assert main(["export-ply", "--map", str(tmp_path / "m.bin"),
                     "--out", str(tmp_path / "m.ply")]) == 0

    def test_missing_trajectory_exit_1(self, tmp_path, dataset, capsys):
        missing = tmp_path / "nope.txt"
        code = main(["run", "--data", str(dataset), "--trajectory", str(missing),
                     "--out", str(tmp_path / "m.bin")])
        assert code == 1
        assert str(missing) in capsys.readouterr().err

    def test_usage_errors_exit_2(self, tmp_path, capsys):
        assert main(["fuse", "--out", str(tmp_path / "m.bin")]) == 2
        with pytest.raises(SystemExit) as e:
            main(["run", "--backend", "nonsense", "--out", "x"])
        assert e.value.code == 2
        assert main(["eval", "--map", str(tmp_path / "m.bin")]) == 2

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "semocc", "--help"], capture_output=True,
                             text=True, check=True).stdout
        assert "export-dataset" in out
