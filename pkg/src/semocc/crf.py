"""Mean-field label regularisation over voxel positions.

The unary term of a labeled voxel puts probability max(W / W_max, p_min) on
its stored label and spreads the rest uniformly over the other semantic
labels. Pairwise terms are Potts with a Gaussian positional kernel

    k(i, j) = w_pair * exp(-|v_i - v_j|^2 / (2 theta^2))

truncated to a cube of half-width ``neighborhood_radius`` voxels. The cube
truncation makes the kernel separable, so messages are three 1-D
correlations over a dense box around the participating voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import labels as L
from .core_map import GlobalMap, VoxelState, classify_states

N_SEM = L.NUM_CLASSES - 1  # semantic labels 1..11


@dataclass(frozen=True)
class CrfConfig:
    p_min: float = 0.1
    pairwise_weight: float = 0.015
    theta_pos: float = 3.0
    iterations: int = 5
    neighborhood_radius: int = 9

    def __post_init__(self):
        if not 0 < self.p_min < 1:
            raise ValueError("p_min must lie in (0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not self.theta_pos > 0:
            raise ValueError("theta_pos must be positive")
        if self.pairwise_weight < 0:
            raise ValueError("pairwise_weight must be non-negative")
        if self.neighborhood_radius < 0:
            raise ValueError("neighborhood_radius must be non-negative")


@dataclass
class CrfStats:
    voxels: int = 0
    relabeled: int = 0
    iterations: int = 0


def unary_distribution(labels, weights, weight_max: float, p_min: float) -> np.ndarray:
    """Per-voxel distributions over labels 1..11 (column k is label k + 1)."""
    labels = np.asarray(labels, np.int64).reshape(-1)
    weights = np.asarray(weights, np.float64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() > N_SEM):
        raise ValueError("unary terms need semantic labels in 1..11")
    p_self = np.minimum(np.maximum(weights / weight_max, p_min), 1.0)
    out = np.repeat(((1.0 - p_self) / (N_SEM - 1))[:, None], N_SEM, axis=1)
    out[np.arange(labels.size), labels - 1] = p_self
    return out


def _kernel_1d(cfg: CrfConfig) -> np.ndarray:
    d = np.arange(-cfg.neighborhood_radius, cfg.neighborhood_radius + 1, dtype=np.float64)
    return np.exp(-d * d / (2.0 * cfg.theta_pos ** 2))


def mean_field(positions, labels, weights, cfg: CrfConfig = CrfConfig(),
               weight_max: float = 5.0, on_iteration=None) -> np.ndarray:
    """Mean-field marginals (N, 11) for labeled voxels at integer ``positions``.

    Labels that no voxel stores share identical unary values everywhere and
    therefore identical marginals, so they are carried as one channel.
    ``on_iteration(i, q)`` is called with the full (N, 11) marginals.
    """
    pos = np.asarray(positions, np.int64).reshape(-1, 3)
    labels = np.asarray(labels, np.int64).reshape(-1)
    n = pos.shape[0]
    unary = unary_distribution(labels, weights, weight_max, cfg.p_min)
    if n == 0 or cfg.iterations == 0:
        return unary

    present = np.unique(labels) - 1
    absent = np.setdiff1d(np.arange(N_SEM), present)
    cols = np.concatenate([present, absent[:1]])
    mult = np.ones(cols.size)
    if absent.size:
        mult[-1] = absent.size

    lo = pos.min(axis=0)
    shape = tuple(pos.max(axis=0) - lo + 1)
    rel = tuple((pos - lo).T)
    with np.errstate(divide="ignore"):
        logp = np.log(unary[:, cols])
    q = unary[:, cols].copy()
    k1 = _kernel_1d(cfg)
    w = cfg.pairwise_weight
    grid = np.zeros((cols.size,) + shape)

    def expand(qc):
        full = np.empty((n, N_SEM))
        full[:, present] = qc[:, : present.size]
        if absent.size:
            full[:, absent] = qc[:, -1:]
        return full

    for it in range(cfg.iterations):
        grid[...] = 0.0
        grid[(slice(None),) + rel] = q.T
        msg = grid
        for axis in (1, 2, 3):
            msg = ndimage.correlate1d(msg, k1, axis=axis, mode="constant", cval=0.0)
        m = w * (msg[(slice(None),) + rel].T - q)  # drop the self term
        lq = logp + m
        lq -= lq.max(axis=1, keepdims=True)
        e = np.exp(lq)
        q = e / (e @ mult)[:, None]
        if on_iteration is not None:
            on_iteration(it, expand(q))
    return expand(q)


def regularize(gmap: GlobalMap, region, cfg: CrfConfig = CrfConfig()) -> CrfStats:
    """Relabel Occupied labeled voxels inside the region's sub-map boxes.

    Voxels within ``neighborhood_radius`` outside the boxes take part in
    inference as context but are not written. Only labels and label weights
    change.
    """
    anchors = list(region)
    stats = CrfStats(iterations=cfg.iterations)
    if not anchors or cfg.iterations == 0:
        return stats
    r = cfg.neighborhood_radius
    los = np.array([a.voxel_lo for a in anchors])
    his = np.array([a.voxel_lo + a.stride for a in anchors])
    lo = los.min(axis=0) - r
    shape = his.max(axis=0) + r - lo
    with gmap.lock:
        cells = gmap.read_box(lo, shape)
    part = (classify_states(cells.logodds, cells.flags) == VoxelState.OCCUPIED) & (cells.label != 0)
    core = np.zeros(part.shape, bool)
    near = np.zeros(part.shape, bool)  # context farther than r from the core cannot matter
    for a_lo, a_hi in zip(los - lo, his - lo):
        core[a_lo[0]:a_hi[0], a_lo[1]:a_hi[1], a_lo[2]:a_hi[2]] = True
        near[a_lo[0] - r:a_hi[0] + r, a_lo[1] - r:a_hi[1] + r, a_lo[2] - r:a_hi[2] + r] = True
    part &= near
    idx = np.argwhere(part)
    write = core[part]
    if not write.any():
        return stats
    lab = cells.label[part].astype(np.int64)
    w_max = gmap.config.label_weight_max
    q = mean_field(idx, lab, cells.weight[part], cfg, w_max)
    q_max = q.max(axis=1)
    stored = q[np.arange(q.shape[0]), lab - 1]
    new_lab = np.where(stored >= q_max, lab, np.argmax(q, axis=1) + 1)
    new_w = np.clip(q_max * w_max, 0.0, w_max)
    sel = np.flatnonzero(write)
    with gmap.lock:
        gmap.set_labels(idx[sel] + lo, new_lab[sel], new_w[sel])
    stats.voxels = int(sel.size)
    stats.relabeled = int(np.count_nonzero(new_lab[sel] != lab[sel]))
    return stats


def _kernel_value(d2: np.ndarray, cfg: CrfConfig) -> np.ndarray:
    return cfg.pairwise_weight * np.exp(-d2 / (2.0 * cfg.theta_pos ** 2))


def mean_field_dense_reference(positions, labels, weights, cfg: CrfConfig = CrfConfig(),
                               weight_max: float = 5.0) -> np.ndarray:
    """Untruncated all-pairs mean field; O(N^2), for checking small cases."""
    pos = np.asarray(positions, np.float64).reshape(-1, 3)
    unary = unary_distribution(labels, weights, weight_max, cfg.p_min)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    k = _kernel_value(d2, cfg)
    np.fill_diagonal(k, 0.0)
    q = unary.copy()
    with np.errstate(divide="ignore"):
        logp = np.log(unary)
    for _ in range(cfg.iterations):
        lq = logp + k @ q
        lq -= lq.max(axis=1, keepdims=True)
        e = np.exp(lq)
        q = e / e.sum(axis=1, keepdims=True)
    return q


__all__ = ["CrfConfig", "CrfStats", "unary_distribution", "mean_field", "regularize",
           "mean_field_dense_reference"]
