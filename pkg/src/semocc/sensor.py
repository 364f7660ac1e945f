"""Depth integration: projection, inverse sensor model and log-odds fusion.

Camera frame convention is x right, y down, z forward. Poses are
camera-to-world: ``p_world = R @ p_cam + t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _blockhash as bh
from .core_map import GlobalMap


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, np.float64).reshape(3, 3)
        t = np.asarray(self.translation, np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> "Pose":
        from scipy.spatial.transform import Rotation

        q = np.asarray(quat_xyzw, np.float64)
        R = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
        return cls(R, translation)

    def quaternion(self) -> np.ndarray:
        from scipy.spatial.transform import Rotation

        return Rotation.from_matrix(self.rotation).as_quat()

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points, np.float64) @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, np.float64) - self.translation) @ self.rotation

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class SensorNoiseModel:
    """Inverse sensor model parameters plus the ray clipping range."""

    k_sigma: float = 0.05
    sigma_min: float = 0.02
    p_free: float = 0.03
    back_band: float = 3.0
    near_clip: float = 0.01
    far_clip: float = 5.0

    def __post_init__(self):
        if not 0 < self.p_free < 0.5:
            raise ValueError("p_free must lie in (0, 0.5)")
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be positive")
        if self.back_band < 1:
            raise ValueError("back_band must be >= 1")
        if not 0 < self.near_clip < self.far_clip:
            raise ValueError("need 0 < near_clip < far_clip")

    def sigma(self, measured_depth: float) -> float:
        return max(self.sigma_min, self.k_sigma * measured_depth)


def project_voxel(point, pose: Pose, intr: CameraIntrinsics):
    """Pixel coordinate (u, v) of a world point, or None when out of view.

    The image spans the closed rectangle [0, width] x [0, height], matching
    the frustum built from the four image corners.
    """
    pc = pose.to_camera(np.asarray(point, np.float64).reshape(1, 3))[0]
    if pc[2] <= 0:
        return None
    u = intr.fx * pc[0] / pc[2] + intr.cx
    v = intr.fy * pc[1] / pc[2] + intr.cy
    if not (0 <= u <= intr.width and 0 <= v <= intr.height):
        return None
    return float(u), float(v)


@njit(cache=True)
def occupancy_probability(s, p_free, back_band):
    """Per-measurement occupancy probability at normalised offset ``s``.

    Free below s = -1, a C1 piecewise-quadratic ramp through 0.5 on (-1, 1),
    then a linear decay back to 0.5 at ``back_band``. Callers must skip
    s >= back_band.
    """
    if s <= -1.0:
        return p_free
    if s < 1.0:
        g = s * (2.0 - abs(s))
        return 0.5 + (0.5 - p_free) * g
    return 0.5 + (0.5 - p_free) * (back_band - s) / (back_band - 1.0)


@njit(cache=True, inline="always")
def _logit(p):
    return math.log(p / (1.0 - p))


def inverse_sensor_logodds(measured_depth: float, voxel_depth: float,
                           model: SensorNoiseModel = SensorNoiseModel()):
    """Log-odds update for a voxel at ``voxel_depth`` given a measurement.

    Returns None when the voxel lies beyond the truncation band.
    """
    if measured_depth <= 0 or voxel_depth <= 0:
        raise ValueError("depths must be positive")
    s = (voxel_depth - measured_depth) / model.sigma(measured_depth)
    if s >= model.back_band:
        return None
    return _logit(occupancy_probability(s, model.p_free, model.back_band))


@njit(cache=True, inline="always")
def _dda_axis(origin, direction, near, far, vs, inv_vs):
    """Start voxel, step, first crossing and crossing spacing along one axis."""
    v = int(math.floor((origin + near * direction) * inv_vs))
    v_end = int(math.floor((origin + far * direction) * inv_vs))
    if direction > 0:
        return v, 1, ((v + 1) * vs - origin) / direction, vs / direction, v_end
    if direction < 0:
        return v, -1, (v * vs - origin) / direction, -vs / direction, v_end
    return v, 0, np.inf, np.inf, v_end


@njit(cache=True)
def _integrate_kernel(depth, R, t, fx, fy, cx, cy, vs, near, far, k_sigma, sigma_min,
                      p_free, back_band, keys, slots, coords, count, B,
                      logodds, stamp, flags, lmin, lmax, now, start_ray,
                      scratch_off, scratch_dl, seg_start, seg_block, trace_s, n_trace, stats):
    """Cast one ray per valid pixel and fuse log-odds along it.

    Each ray is first traversed into scratch (cell offsets grouped in runs
    of equal block), then its blocks are allocated, then updates are
    applied, so a ray is either applied whole or not at all. Returns the
    flat pixel index to resume from (== H*W when finished).
    """
    H, W = depth.shape
    l_free = math.log(p_free / (1.0 - p_free))
    inv_vs = 1.0 / vs
    nscratch = scratch_dl.shape[0]
    r20, r21, r22 = R[0, 2], R[1, 2], R[2, 2]
    t0, t1, t2 = t[0], t[1], t[2]
    # camera z of a voxel centre = cz0 + vs * (vox . r2)
    cz0 = (0.5 * vs - t0) * r20 + (0.5 * vs - t1) * r21 + (0.5 * vs - t2) * r22
    for ray in range(start_ray, H * W):
        row = ray // W
        col = ray - row * W
        d = depth[row, col]
        if not (d > 0.0 and d <= far):
            continue
        sigma = max(sigma_min, k_sigma * d)
        lam_end = d + back_band * sigma
        dc0 = (col - cx) / fx
        dc1 = (row - cy) / fy
        d0 = R[0, 0] * dc0 + R[0, 1] * dc1 + r20
        d1 = R[1, 0] * dc0 + R[1, 1] * dc1 + r21
        d2 = R[2, 0] * dc0 + R[2, 1] * dc1 + r22
        vx, sx, mx, dx, ex = _dda_axis(t0, d0, near, lam_end, vs, inv_vs)
        vy, sy, my, dy, ey = _dda_axis(t1, d1, near, lam_end, vs, inv_vs)
        vz, sz, mz, dz, ez = _dda_axis(t2, d2, near, lam_end, vs, inv_vs)
        bx = vx // B
        by = vy // B
        bz = vz // B
        ox = vx - bx * B
        oy = vy - by * B
        oz = vz - bz * B
        n = 0
        nseg = 0
        new_block = True
        while n < nscratch:
            cz = cz0 + vs * (vx * r20 + vy * r21 + vz * r22)
            s = (cz - d) / sigma
            if s < back_band:
                if s <= -1.0:
                    dl = l_free
                else:
                    dl = _logit(occupancy_probability(s, p_free, back_band))
                if new_block:
                    seg_start[nseg] = n
                    seg_block[nseg, 0] = bx
                    seg_block[nseg, 1] = by
                    seg_block[nseg, 2] = bz
                    nseg += 1
                    new_block = False
                scratch_off[n] = (ox * B + oy) * B + oz
                scratch_dl[n] = dl
                n += 1
            if vx == ex and vy == ey and vz == ez:
                break
            if mx <= my and mx <= mz:
                if mx > lam_end:
                    break
                vx += sx
                mx += dx
                ox += sx
                if ox == B:
                    ox = 0
                    bx += 1
                    new_block = True
                elif ox < 0:
                    ox = B - 1
                    bx -= 1
                    new_block = True
            elif my <= mz:
                if my > lam_end:
                    break
                vy += sy
                my += dy
                oy += sy
                if oy == B:
                    oy = 0
                    by += 1
                    new_block = True
                elif oy < 0:
                    oy = B - 1
                    by -= 1
                    new_block = True
            else:
                if mz > lam_end:
                    break
                vz += sz
                mz += dz
                oz += sz
                if oz == B:
                    oz = 0
                    bz += 1
                    new_block = True
                elif oz < 0:
                    oz = B - 1
                    bz -= 1
                    new_block = True
        seg_start[nseg] = n
        # allocate every block first so the ray is all-or-nothing
        for g in range(nseg):
            slot = bh.get_or_alloc(keys, slots, coords, count,
                                   seg_block[g, 0], seg_block[g, 1], seg_block[g, 2])
            if slot < 0:
                return ray
            seg_block[g, 3] = slot
        for g in range(nseg):
            slot = seg_block[g, 3]
            for m in range(seg_start[g], seg_start[g + 1]):
                off = scratch_off[m]
                if flags[slot, off] & bh.SENSOR_OBSERVED:
                    v = logodds[slot, off] + scratch_dl[m]
                else:
                    v = scratch_dl[m]  # first observation supersedes any prediction
                if v < lmin:
                    v = lmin
                elif v > lmax:
                    v = lmax
                logodds[slot, off] = v
                stamp[slot, off] = now
                flags[slot, off] |= bh.SENSOR_OBSERVED
        if trace_s.shape[0] > 0:
            for g in range(nseg):
                for m in range(seg_start[g], seg_start[g + 1]):
                    if n_trace[0] >= trace_s.shape[0]:
                        n_trace[1] = 1
                        break
                    off = scratch_off[m]
                    lz = off % B
                    ly = (off // B) % B
                    lx = off // (B * B)
                    cz = cz0 + vs * ((seg_block[g, 0] * B + lx) * r20
                                     + (seg_block[g, 1] * B + ly) * r21
                                     + (seg_block[g, 2] * B + lz) * r22)
                    trace_s[n_trace[0]] = (cz - d) / sigma
                    n_trace[0] += 1
        stats[0] += 1
        stats[1] += n
    return H * W


@dataclass
class IntegrationStats:
    rays: int = 0
    updates: int = 0
    blocks_allocated: int = 0
    trace: np.ndarray | None = None  # normalised offsets s of every write, if traced


def integrate_depth(gmap: GlobalMap, depth: np.ndarray, pose: Pose, intr: CameraIntrinsics,
                    model: SensorNoiseModel = SensorNoiseModel(), trace: bool = False,
                    trace_capacity: int = 50_000_000) -> IntegrationStats:
    """Fuse one depth image (meters, 0 = invalid) into the map.

    Cells are stamped with ``gmap.frame_counter``; advancing it is the
    caller's job. With ``trace`` the normalised offset of every applied
    update is recorded.
    """
    depth = np.ascontiguousarray(depth, np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth image is {depth.shape[::-1]} (w, h), "
                         f"intrinsics expect {(intr.width, intr.height)}")
    cfg = gmap.config
    vs = cfg.voxel_size
    corner = np.array([max(intr.cx, intr.width - intr.cx) / intr.fx,
                       max(intr.cy, intr.height - intr.cy) / intr.fy, 1.0])
    far_sigma = max(model.sigma_min, model.k_sigma * model.far_clip)
    reach = (model.far_clip + model.back_band * far_sigma) * np.linalg.norm(corner)
    scratch_n = int(3 * reach / vs) + 16
    scratch_off = np.empty(scratch_n, np.int64)
    scratch_dl = np.empty(scratch_n, np.float64)
    seg_start = np.empty(scratch_n + 1, np.int64)
    seg_block = np.empty((scratch_n, 4), np.int64)
    trace_s = np.empty(trace_capacity if trace else 0, np.float64)
    n_trace = np.zeros(2, np.int64)
    stats = np.zeros(2, np.int64)
    blocks_before = gmap.n_blocks
    start = 0
    total = depth.size
    while True:
        start = _integrate_kernel(
            depth, pose.rotation, pose.translation, intr.fx, intr.fy, intr.cx, intr.cy, vs,
            model.near_clip, model.far_clip, model.k_sigma, model.sigma_min, model.p_free,
            model.back_band, gmap._keys, gmap._slots, gmap._coords, gmap._count,
            cfg.block_side, gmap._logodds, gmap._stamp, gmap._flags,
            cfg.logodds_min, cfg.logodds_max, gmap.frame_counter, start,
            scratch_off, scratch_dl, seg_start, seg_block, trace_s, n_trace, stats)
        if start >= total:
            break
        gmap._grow_for_retry()
    if trace and n_trace[1]:
        raise RuntimeError("trace buffer overflowed; raise trace_capacity")
    return IntegrationStats(
        rays=int(stats[0]), updates=int(stats[1]),
        blocks_allocated=gmap.n_blocks - blocks_before,
        trace=trace_s[: n_trace[0]].copy() if trace else None)
