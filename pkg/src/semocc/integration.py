"""Fusion of completion results into the global map.

Predictions only touch cells that are Unknown or Occupied. Unknown cells
additionally receive a weak occupancy observation ``logit(p_fuse)`` and are
marked prediction-fused; the log-odds of sensor-observed cells never change.

Labels fuse with a single scalar confidence W per cell:

* same label: W <- W + w
* different label, W >= w: keep the label, W <- W - w
* different label, W < w: take the new label, W <- w - W

with W clamped to [0, W_max]. A cell without a label adopts the prediction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .completion import CompletionResult
from .core_map import PREDICTION_FUSED, GlobalMap, VoxelCell, VoxelState, classify_states


@dataclass(frozen=True)
class FusionPolicyConfig:
    p_fuse: float = 0.51
    label_weight_max: float | None = None  # None: take the map's W_max

    def __post_init__(self):
        if not 0.5 < self.p_fuse < 1:
            raise ValueError("p_fuse must lie in (0.5, 1)")
        if self.label_weight_max is not None and not self.label_weight_max > 0:
            raise ValueError("label_weight_max must be positive")

    @property
    def logodds(self) -> float:
        return math.log(self.p_fuse / (1.0 - self.p_fuse))


@dataclass
class FusionStats:
    labels_fused: int = 0
    occupancy_fused: int = 0
    discarded_empty_prediction: int = 0
    discarded_empty_state: int = 0
    submaps: int = 0

    def __iadd__(self, other: "FusionStats") -> "FusionStats":
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def fuse_label(label: int, weight: float, new_label: int, new_weight: float,
               weight_max: float = 5.0) -> tuple[int, float]:
    """Fuse one prediction into a (label, weight) pair."""
    if label == 0:
        label, weight = new_label, new_weight
    elif label == new_label:
        weight = weight + new_weight
    elif weight >= new_weight:
        weight = weight - new_weight
    else:
        label, weight = new_label, new_weight - weight
    return label, min(max(weight, 0.0), weight_max)


def fuse_labels(label: np.ndarray, weight: np.ndarray, new_label: np.ndarray,
                new_weight: np.ndarray, weight_max: float = 5.0):
    """Vectorised ``fuse_label``; bit-identical to the scalar version."""
    label = np.asarray(label)
    weight = np.asarray(weight, np.float64)
    new_label = np.asarray(new_label)
    new_weight = np.asarray(new_weight, np.float64)
    fresh = label == 0
    agree = label == new_label
    keep = ~fresh & ~agree & (weight >= new_weight)
    out_w = np.where(fresh, new_weight,
                     np.where(agree, weight + new_weight,
                              np.where(keep, weight - new_weight, new_weight - weight)))
    out_l = np.where(fresh | (~agree & ~keep), new_label, label).astype(label.dtype)
    return out_l, np.clip(out_w, 0.0, weight_max)


def fuse_cell(cell: VoxelCell, new_label: int, new_weight: float,
              weight_max: float = 5.0) -> VoxelCell:
    """Label fusion on a standalone cell (occupancy untouched)."""
    lab, w = fuse_label(cell.label, cell.label_weight, new_label, new_weight, weight_max)
    return VoxelCell(cell.logodds, lab, w, cell.timestamp,
                     cell.sensor_observed, cell.prediction_fused)


def fuse_submap(gmap: GlobalMap, result: CompletionResult, now: int | None = None,
                cfg: FusionPolicyConfig = FusionPolicyConfig()) -> FusionStats:
    """Fuse one completion result under the state-aware policy."""
    a = result.anchor
    mc = gmap.config
    if not np.isclose(a.voxel_size, mc.voxel_size):
        raise ValueError("anchor voxel size differs from the map")
    shift = np.asarray(a.origin) / mc.voxel_size
    if np.abs(shift - np.round(shift)).max() > 1e-9:
        raise ValueError("anchor is not aligned with the voxel lattice")
    now = gmap.frame_counter if now is None else now
    w_max = cfg.label_weight_max or mc.label_weight_max
    pred = result.labels != 0
    stats = FusionStats(submaps=1)
    stats.discarded_empty_prediction = int(result.labels.size - np.count_nonzero(pred))
    if not pred.any():
        return stats
    lo = a.voxel_lo
    with gmap.lock:
        cells = gmap.read_box(lo, a.shape)
        state = classify_states(cells.logodds, cells.flags)
        empty = pred & (state == VoxelState.EMPTY)
        stats.discarded_empty_state = int(np.count_nonzero(empty))
        take = pred & ~empty
        if not take.any():
            return stats
        lab, w = fuse_labels(cells.label[take], cells.weight[take], result.labels[take],
                             result.confidence[take].astype(np.float64), w_max)
        cells.label[take] = lab
        cells.weight[take] = w
        unknown = take & (state == VoxelState.UNKNOWN)
        l_new = cells.logodds[unknown] + cfg.logodds
        cells.logodds[unknown] = np.clip(l_new, mc.logodds_min, mc.logodds_max)
        cells.flags[unknown] |= PREDICTION_FUSED
        cells.stamp[unknown] = now
        gmap.write_box(lo, cells, take)
    stats.labels_fused = int(np.count_nonzero(take))
    stats.occupancy_fused = int(np.count_nonzero(unknown))
    return stats


__all__ = ["FusionPolicyConfig", "FusionStats", "fuse_label", "fuse_labels", "fuse_cell",
           "fuse_submap"]
