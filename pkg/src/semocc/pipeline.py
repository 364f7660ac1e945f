"""Front-end fusion plus back-end completion and regularisation.

Per frame the front end integrates depth, then selects the sub-maps covering
the view frustum that were not completed recently. Each selected sub-map is
extracted, completed by the backend, fused back and, periodically, the fused
region is regularised with the CRF.

``sync`` mode runs everything inline and is bit-for-bit deterministic.
``concurrent`` mode hands selected anchors to a back-end thread (one pending
request per anchor, newest frame wins) while the front end keeps
integrating; extraction and fusion take the map lock briefly.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .completion import (CompletionError, ExternalBackend, HeuristicBackend, NullBackend,
                         OracleBackend, OutsideGroundTruth)
from .core_map import SENSOR_OBSERVED, GlobalMap, MapConfig
from .crf import CrfConfig, CrfStats, regularize
from .fileio import list_depth_frames, load_depth_png, load_gt, load_trajectory
from .integration import FusionPolicyConfig, FusionStats, fuse_submap
from .sensor import CameraIntrinsics, SensorNoiseModel, integrate_depth
from .submap import (StalenessConfig, compute_frustum, cover_frustum, extract_submap,
                     filter_stale)

log = logging.getLogger(__name__)

STAGES = ("input", "mapping", "extraction", "completion", "fusion", "crf")
STAGE_TITLES = {
    "input": "Input Processing",
    "mapping": "Mapping",
    "extraction": "Sub-Map Extraction",
    "completion": "Semantic Completion",
    "fusion": "Sub-Map Fusion",
    "crf": "CRF Regularization",
}
BACKENDS = ("null", "heuristic", "oracle", "external")
MODES = ("sync", "concurrent")


@dataclass(frozen=True)
class PipelineConfig:
    map: MapConfig = field(default_factory=MapConfig)
    sensor: SensorNoiseModel = field(default_factory=SensorNoiseModel)
    staleness: StalenessConfig = field(default_factory=StalenessConfig)
    fusion: FusionPolicyConfig = field(default_factory=FusionPolicyConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    backend: str = "null"
    mode: str = "sync"
    gt_path: str | None = None
    external_command: tuple = ()
    external_timeout: float = 1.0
    completion_interval: int = 1  # frames between sub-map selections
    crf_interval: int = 1  # frames (sync) or fused sub-maps (concurrent) between CRF runs

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend == "external" and not self.external_command:
            raise ValueError("external backend needs a command")
        if self.completion_interval < 1 or self.crf_interval < 1:
            raise ValueError("intervals must be >= 1")
        object.__setattr__(self, "external_command", tuple(self.external_command))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["external_command"] = list(self.external_command)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sub = {"map": MapConfig, "sensor": SensorNoiseModel, "staleness": StalenessConfig,
               "fusion": FusionPolicyConfig, "crf": CrfConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = sub[k](**v) if k in sub else v
        return cls(**kw)

    def updated(self, **changes) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


class TimingRecorder:
    def __init__(self):
        self.samples = {s: [] for s in STAGES}
        self._lock = threading.Lock()

    def add(self, stage: str, seconds: float) -> None:
        with self._lock:
            self.samples[stage].append(seconds * 1000.0)

    def timed(self, stage: str):
        rec = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                rec.add(stage, time.perf_counter() - self.t0)

        return _T()


@dataclass
class StageTiming:
    count: int
    mean_ms: float
    std_ms: float
    total_ms: float


@dataclass
class TimingReport:
    frames: int
    stages: dict  # stage -> StageTiming
    per_frame_ms: float  # sum of every stage's total time / frames
    front_end_per_frame_ms: float  # input + mapping (+ extraction/fusion in sync mode)

    @classmethod
    def from_recorder(cls, rec: TimingRecorder, frames: int, mode: str) -> "TimingReport":
        stages = {}
        for s in STAGES:
            x = np.asarray(rec.samples[s], np.float64)
            stages[s] = StageTiming(int(x.size), float(x.mean()) if x.size else 0.0,
                                    float(x.std()) if x.size else 0.0, float(x.sum()))
        total = sum(st.total_ms for st in stages.values())
        front = ("input", "mapping") if mode == "concurrent" else STAGES
        fe = sum(stages[s].total_ms for s in front)
        n = max(frames, 1)
        return cls(frames, stages, total / n, fe / n)

    def table(self) -> str:
        """Run-time table: per-invocation mean and std plus per-frame share."""
        n = max(self.frames, 1)
        rows = [f"{'Stage':<22}{'calls':>7}{'mean ms':>11}{'std ms':>10}{'ms/frame':>11}"]
        for s in STAGES:
            st = self.stages[s]
            rows.append(f"{STAGE_TITLES[s]:<22}{st.count:>7}{st.mean_ms:>11.3f}"
                        f"{st.std_ms:>10.3f}{st.total_ms / n:>11.3f}")
        rows.append(f"{'Average per-frame':<22}{self.frames:>7}{'':>11}{'':>10}"
                    f"{self.per_frame_ms:>11.3f}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "per_frame_ms": self.per_frame_ms,
            "front_end_per_frame_ms": self.front_end_per_frame_ms,
            "stages": {s: {"title": STAGE_TITLES[s], **asdict(t)} for s, t in self.stages.items()},
        }


@dataclass
class RunResult:
    map: GlobalMap
    timing: TimingReport
    fusion: FusionStats
    crf: CrfStats
    counters: dict

    def summary(self) -> dict:
        return {"fusion": self.fusion.to_dict(), "crf": asdict(self.crf), "counters": self.counters}


def make_backend(config: PipelineConfig, gt=None):
    if config.backend == "null":
        return NullBackend()
    if config.backend == "heuristic":
        return HeuristicBackend()
    if config.backend == "oracle":
        if gt is None:
            if not config.gt_path:
                raise ValueError("oracle backend requires ground truth (gt_path)")
            gt = load_gt(config.gt_path)
        return OracleBackend(gt)
    return ExternalBackend(config.external_command, config.external_timeout)


class _Runner:
    def __init__(self, config: PipelineConfig, intr: CameraIntrinsics, backend):
        self.cfg = config
        self.intr = intr
        self.backend = backend
        self.map = GlobalMap(config.map)
        self.rec = TimingRecorder()
        self.fusion = FusionStats()
        self.crf = CrfStats(iterations=config.crf.iterations)
        self.counters = {"frames": 0, "rays": 0, "updates": 0, "anchors_covered": 0,
                         "anchors_retained": 0, "completion_calls": 0, "completion_failures": 0,
                         "crf_calls": 0, "requests_replaced": 0}
        self._count_lock = threading.Lock()

    def bump(self, key, n=1):
        with self._count_lock:
            self.counters[key] += n

    def integrate(self, depth, pose):
        with self.rec.timed("mapping"):
            with self.map.lock:
                self.map.frame_counter += 1
                st = integrate_depth(self.map, depth, pose, self.intr, self.cfg.sensor)
        self.bump("frames")
        self.bump("rays", st.rays)
        self.bump("updates", st.updates)

    def select(self, pose):
        s = self.cfg.sensor
        fr = compute_frustum(pose, self.intr, s.near_clip, s.far_clip)
        anchors = cover_frustum(fr, self.cfg.map)
        kept = filter_stale(self.map, anchors, self.cfg.staleness, self.map.frame_counter)
        self.bump("anchors_covered", len(anchors))
        self.bump("anchors_retained", len(kept))
        return kept

    def complete_and_fuse(self, grid):
        """Returns True when the result was fused."""
        self.bump("completion_calls")
        t0 = time.perf_counter()
        try:
            result = self.backend.complete(grid)
        except CompletionError as e:
            self.rec.add("completion", time.perf_counter() - t0)
            self.bump("completion_failures")
            level = logging.DEBUG if isinstance(e, OutsideGroundTruth) else logging.WARNING
            log.log(level, "sub-map %s skipped: %s", grid.anchor.lattice, e)
            return False
        self.rec.add("completion", time.perf_counter() - t0)
        with self.rec.timed("fusion"):
            st = fuse_submap(self.map, result, self.map.frame_counter, self.cfg.fusion)
        self.fusion += st
        return st.labels_fused > 0

    def regularize(self, anchors):
        if not anchors:
            return
        with self.rec.timed("crf"):
            st = regularize(self.map, sorted(anchors, key=lambda a: a.lattice), self.cfg.crf)
        self.bump("crf_calls")
        self.crf.voxels += st.voxels
        self.crf.relabeled += st.relabeled

    # -- modes -------------------------------------------------------------

    def run_sync(self, frames):
        dirty = set()
        for i, (depth, pose) in enumerate(self._timed_input(frames)):
            self.integrate(depth, pose)
            if i % self.cfg.completion_interval == 0:
                t0 = time.perf_counter()
                anchors = self.select(pose)
                grids = [extract_submap(self.map, a) for a in anchors]
                self.rec.add("extraction", time.perf_counter() - t0)
                for g in grids:
                    if self.complete_and_fuse(g):
                        dirty.add(g.anchor)
            if (i + 1) % self.cfg.crf_interval == 0:
                self.regularize(dirty)
                dirty = set()
        self.regularize(dirty)

    def run_concurrent(self, frames):
        pending = OrderedDict()  # anchor -> frame number; newest wins
        cond = threading.Condition()
        done = False
        error = []

        def back_end():
            dirty = set()
            fused = 0
            while True:
                with cond:
                    while not pending and not done:
                        cond.wait()
                    if not pending:
                        break
                    anchor, _ = pending.popitem(last=False)
                try:
                    with self.rec.timed("extraction"):
                        grid = extract_submap(self.map, anchor)
                    if self.complete_and_fuse(grid):
                        dirty.add(anchor)
                        fused += 1
                        if fused % self.cfg.crf_interval == 0:
                            self.regularize(dirty)
                            dirty = set()
                except Exception as e:  # surfaced on the front end after join
                    error.append(e)
                    return
            self.regularize(dirty)

        worker = threading.Thread(target=back_end, name="semocc-backend", daemon=True)
        worker.start()
        try:
            for i, (depth, pose) in enumerate(self._timed_input(frames)):
                self.integrate(depth, pose)
                if error:
                    break
                if i % self.cfg.completion_interval == 0:
                    anchors = self.select(pose)
                    with cond:
                        for a in anchors:
                            if a in pending:
                                self.bump("requests_replaced")
                                del pending[a]
                            pending[a] = self.map.frame_counter
                        cond.notify()
        finally:
            with cond:
                done = True
                cond.notify()
            worker.join()
        if error:
            raise error[0]

    def _timed_input(self, frames):
        it = iter(frames)
        while True:
            t0 = time.perf_counter()
            try:
                depth, pose = next(it)
            except StopIteration:
                return
            depth = np.asarray(depth, np.float64)
            if depth.shape != (self.intr.height, self.intr.width):
                raise ValueError(f"depth frame has shape {depth.shape}, expected "
                                 f"{(self.intr.height, self.intr.width)}")
            self.rec.add("input", time.perf_counter() - t0)
            yield depth, pose


def run_frames(config: PipelineConfig, frames, intr: CameraIntrinsics, gt=None,
               backend=None) -> RunResult:
    """Run the pipeline over an iterable of (depth meters, pose) pairs."""
    own = backend is None
    backend = backend if backend is not None else make_backend(config, gt)
    runner = _Runner(config, intr, backend)
    try:
        if config.mode == "sync":
            runner.run_sync(frames)
        else:
            runner.run_concurrent(frames)
    finally:
        if own and hasattr(backend, "close"):
            backend.close()
    if runner.counters["frames"] < 1:
        raise ValueError("sequence contains no frames")
    timing = TimingReport.from_recorder(runner.rec, runner.counters["frames"], config.mode)
    return RunResult(runner.map, timing, runner.fusion, runner.crf, dict(runner.counters))


def iter_sequence(depth_dir, trajectory):
    """Lazily decoded (depth, pose) pairs from a PNG directory and trajectory file."""
    files = list_depth_frames(depth_dir)
    _, poses = load_trajectory(trajectory)
    if len(files) != len(poses):
        raise ValueError(f"{len(files)} depth frames but {len(poses)} trajectory poses")
    for f, pose in zip(files, poses):
        yield load_depth_png(f), pose


def run_sequence(config: PipelineConfig, depth_dir, trajectory, intrinsics, gt=None) -> RunResult:
    """Run on files: depth PNG directory, trajectory text and intrinsics JSON."""
    for p in (trajectory, intrinsics):
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")
    intr = intrinsics if isinstance(intrinsics, CameraIntrinsics) else CameraIntrinsics.load(intrinsics)
    frames = iter_sequence(depth_dir, trajectory)
    return run_frames(config, frames, intr, gt)


def compare_runs(a: GlobalMap, b: GlobalMap) -> dict:
    """Occupancy and label agreement between two maps of the same input.

    Sensor-observed log-odds must agree bit for bit; label differences are
    reported separately for sensor-observed and prediction-only voxels.
    """
    ia, ca = a.allocated_cells()
    ib, cb = b.allocated_cells()
    obs_a = (ca.flags & SENSOR_OBSERVED) != 0
    obs_b = (cb.flags & SENSOR_OBSERVED) != 0
    ka = {tuple(k): n for n, k in enumerate(ia[obs_a])}
    kb = {tuple(k): n for n, k in enumerate(ib[obs_b])}
    same_set = ka.keys() == kb.keys()
    keys = sorted(ka.keys() & kb.keys())
    la = ca.logodds[obs_a][[ka[k] for k in keys]]
    lb = cb.logodds[obs_b][[kb[k] for k in keys]]
    lab_a = ca.label[obs_a][[ka[k] for k in keys]]
    lab_b = cb.label[obs_b][[kb[k] for k in keys]]
    return {
        "observed_sets_equal": bool(same_set),
        "observed_voxels": len(keys),
        "observed_logodds_identical": bool(same_set and np.array_equal(la, lb)),
        "observed_label_differences": int(np.count_nonzero(lab_a != lab_b)),
    }


__all__ = ["PipelineConfig", "TimingReport", "StageTiming", "RunResult", "run_frames",
           "run_sequence", "iter_sequence", "make_backend", "compare_runs", "STAGES"]

