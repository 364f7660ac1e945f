"""Export of (partial sub-map, ground-truth labels) training pairs.

Each kept pair is one file: the sub-map grid dump (float32 occupancy then
uint8 unknown mask, x fastest) followed by the ground-truth label cube
(uint8, x fastest). A ``manifest.json`` lists the kept pairs and the
filter settings.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from .core_map import GlobalMap, MapConfig
from .sensor import SensorNoiseModel, integrate_depth
from .submap import SUBMAP_SIDE, SubMapAnchor, extract_submap


def pair_kept(gt_crop: np.ndarray, max_empty: float = 0.95, min_labels: int = 2) -> bool:
    """A pair is dropped if it is mostly empty or shows fewer than ``min_labels`` labels."""
    empty = float(np.count_nonzero(gt_crop == 0)) / gt_crop.size
    n_labels = np.unique(gt_crop[gt_crop != 0]).size
    return not (empty > max_empty or n_labels < min_labels)


def fuse_frames(frames, intr, config: MapConfig | None = None,
                sensor: SensorNoiseModel | None = None) -> GlobalMap:
    gmap = GlobalMap(config or MapConfig())
    for depth, pose in frames:
        gmap.frame_counter += 1
        integrate_depth(gmap, depth, pose, intr, sensor or SensorNoiseModel())
    return gmap


def lattice_over(gt, stride: int = SUBMAP_SIDE) -> list[tuple]:
    lo = gt.voxel_lo
    hi = lo + np.asarray(gt.dims) - 1
    return list(itertools.product(*(range(a // stride, b // stride + 1)
                                     for a, b in zip(lo, hi))))


def export_training_pairs(out_dir, gt, gmap: GlobalMap | None = None, frames=None, intr=None,
                          skip: int = 200, max_empty: float = 0.95, min_labels: int = 2,
                          config: MapConfig | None = None, stride: int = SUBMAP_SIDE) -> dict:
    """Write training pairs for every lattice sub-map over the ground truth.

    With ``skip`` > 1 (or no map given) the map is rebuilt from every
    ``skip``-th frame, which requires ``frames`` and ``intr``.
    """
    if skip < 1:
        raise ValueError("skip must be >= 1")
    if gmap is None or skip > 1:
        if frames is None or intr is None:
            raise ValueError("rebuilding the map needs frames and intrinsics")
        gmap = fuse_frames(list(frames)[::skip], intr, config or (gmap.config if gmap else None))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kept, dropped = [], 0
    for lattice in lattice_over(gt, stride):
        anchor = SubMapAnchor(lattice, stride, gmap.config.voxel_size)
        crop = gt.crop(anchor.voxel_lo, anchor.shape)
        if not pair_kept(crop, max_empty, min_labels):
            dropped += 1
            continue
        grid = extract_submap(gmap, anchor)
        name = "pair_{:+04d}_{:+04d}_{:+04d}.bin".format(*lattice)
        (out / name).write_bytes(grid.to_bytes() + crop.tobytes(order="F"))
        labels = np.unique(crop[crop != 0]).tolist()
        kept.append({"file": name, "lattice": list(lattice),
                     "empty_fraction": float(np.count_nonzero(crop == 0)) / crop.size,
                     "labels": labels})
    manifest = {"stride": stride, "voxel_size": gmap.config.voxel_size, "skip": skip,
                "max_empty": max_empty, "min_labels": min_labels,
                "kept": kept, "dropped": dropped}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_pair(path, stride: int = SUBMAP_SIDE):
    """(occupancy, mask, gt labels) arrays of one pair file."""
    data = Path(path).read_bytes()
    n = stride ** 3
    if len(data) != 6 * n:
        raise ValueError(f"pair file must be {6 * n} bytes")
    shape = (stride,) * 3
    occ = np.frombuffer(data, "<f4", n).reshape(shape, order="F")
    mask = np.frombuffer(data, np.uint8, n, 4 * n).reshape(shape, order="F")
    lab = np.frombuffer(data, np.uint8, n, 5 * n).reshape(shape, order="F")
    return occ.copy(), mask.copy(), lab.copy()


__all__ = ["pair_kept", "fuse_frames", "lattice_over", "export_training_pairs", "load_pair"]
