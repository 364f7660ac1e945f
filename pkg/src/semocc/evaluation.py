"""Per-class IoU, precision and recall of a fused map against ground truth.

The predicted label of a voxel is its stored label when the voxel is
Occupied and empty otherwise. ``full`` mode scores every voxel of the
ground-truth extent; ``surface`` mode scores only sensor-observed voxels
inside that extent.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import labels as L
from .core_map import SENSOR_OBSERVED, GlobalMap, VoxelState, classify_states


class EvalMode(str, enum.Enum):
    SURFACE = "surface"
    FULL = "full"


@dataclass
class ClassScore:
    tp: int
    fp: int
    fn: int

    @property
    def iou(self):
        d = self.tp + self.fp + self.fn
        return self.tp / d if d else None

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else None


def _mean(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class EvalReport:
    mode: EvalMode
    classes: dict = field(default_factory=dict)  # label id -> ClassScore
    evaluated_voxels: int = 0
    ignored_voxels: int = 0

    @property
    def mean_iou(self):
        return _mean(c.iou for c in self.classes.values())

    @property
    def mean_precision(self):
        return _mean(c.precision for c in self.classes.values())

    @property
    def mean_recall(self):
        return _mean(c.recall for c in self.classes.values())

    def present_classes(self) -> list[int]:
        return [k for k, c in self.classes.items() if c.iou is not None]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "evaluated_voxels": self.evaluated_voxels,
            "ignored_voxels": self.ignored_voxels,
            "mean_iou": self.mean_iou,
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "classes": {
                L.label_name(k): {"id": k, "tp": c.tp, "fp": c.fp, "fn": c.fn, "iou": c.iou,
                                  "precision": c.precision, "recall": c.recall}
                for k, c in self.classes.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "id", "tp", "fp", "fn", "iou", "precision", "recall"])
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        for k, c in self.classes.items():
            w.writerow([L.label_name(k), k, c.tp, c.fp, c.fn, fmt(c.iou),
                        fmt(c.precision), fmt(c.recall)])
        return buf.getvalue()


def score_labels(pred: np.ndarray, gt: np.ndarray, mode=EvalMode.FULL) -> EvalReport:
    """Confusion counts for semantic labels 1..11 over paired label arrays."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    n = L.NUM_CLASSES
    conf = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    report = EvalReport(EvalMode(mode), evaluated_voxels=int(pred.size))
    for k in L.SEMANTIC_LABELS:
        tp = int(conf[k, k])
        report.classes[k] = ClassScore(tp, int(conf[:, k].sum()) - tp, int(conf[k, :].sum()) - tp)
    return report


def predicted_labels(gmap: GlobalMap, lo, shape):
    """(labels, states, flags) of the map over a dense box."""
    with gmap.lock:
        cells = gmap.read_box(lo, shape)
    states = classify_states(cells.logodds, cells.flags)
    pred = np.where(states == VoxelState.OCCUPIED, cells.label, 0).astype(np.uint8)
    return pred, states, cells.flags


def evaluate(gmap: GlobalMap, gt, mode=EvalMode.FULL, ignore_carved: bool = False) -> EvalReport:
    """Score the map over the ground-truth extent.

    With ``ignore_carved`` the ground-truth occupied voxels that the sensor
    observed as Empty are left out; their count is reported as
    ``ignored_voxels``.
    """
    mode = EvalMode(mode)
    if not np.isclose(gmap.config.voxel_size, gt.voxel_size, rtol=0, atol=1e-12):
        raise ValueError("map and ground truth voxel sizes differ")
    try:
        lo = gt.voxel_lo
    except ValueError as e:
        raise ValueError(f"grid misalignment: {e}") from None
    pred, states, flags = predicted_labels(gmap, lo, gt.dims)
    domain = np.ones(gt.dims, bool)
    if mode is EvalMode.SURFACE:
        domain &= (flags & SENSOR_OBSERVED) != 0
    ignored = 0
    if ignore_carved:
        carved = (gt.labels != 0) & (states == VoxelState.EMPTY) & ((flags & SENSOR_OBSERVED) != 0)
        ignored = int(np.count_nonzero(carved & domain))
        domain &= ~carved
    report = score_labels(pred[domain], gt.labels[domain], mode)
    report.ignored_voxels = ignored
    return report


__all__ = ["EvalMode", "ClassScore", "EvalReport", "score_labels", "predicted_labels", "evaluate"]
