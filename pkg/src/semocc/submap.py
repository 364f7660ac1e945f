"""View-frustum sub-map selection and dense sub-map extraction.

Sub-maps are cubes of ``stride`` voxels on a fixed world lattice. A frustum
is covered by every lattice cube that overlaps it with positive volume
(separating-axis test), visited breadth-first from the cube with the
smallest (x, z) lattice coordinates.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core_map import PREDICTION_FUSED, GlobalMap, MapConfig, VoxelState, classify_states
from .sensor import CameraIntrinsics, Pose

SUBMAP_SIDE = 64

# Quad faces as indices into Frustum.corners (near 0..3, far 4..7).
_FACES = ((0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7))
_EDGES = ((0, 1), (1, 2), (0, 4), (1, 5), (2, 6), (3, 7))


@dataclass(frozen=True, eq=False)
class Frustum:
    """Eight world-space corners: near plane 0..3, then far plane 4..7.

    Corner order follows the image corners (0,0), (W,0), (W,H), (0,H).
    """

    corners: np.ndarray
    near: float = 0.01
    far: float = 5.0

    def __post_init__(self):
        c = np.asarray(self.corners, np.float64).reshape(8, 3)
        object.__setattr__(self, "corners", c)
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")

    def volume(self) -> float:
        """Enclosed volume; zero (or NaN-free zero) for degenerate frusta."""
        c = self.corners
        if not np.isfinite(c).all():
            return 0.0
        centre = c.mean(axis=0)
        vol = 0.0
        for face in _FACES:
            a = c[face[0]] - centre
            for i in (1, 2):
                b = c[face[i]] - centre
                d = c[face[i + 1]] - centre
                vol += abs(np.dot(a, np.cross(b, d))) / 6.0
        return float(vol)

    def separating_axes(self) -> np.ndarray:
        """Unit candidate axes for box-versus-frustum separation tests."""
        c = self.corners
        axes = [np.eye(3)]
        normals = [np.cross(c[f[1]] - c[f[0]], c[f[3]] - c[f[0]]) for f in _FACES]
        axes.append(np.array(normals))
        edges = np.array([c[j] - c[i] for i, j in _EDGES])
        axes.append(np.cross(np.eye(3)[:, None, :], edges[None, :, :]).reshape(-1, 3))
        ax = np.concatenate(axes)
        n = np.linalg.norm(ax, axis=1)
        keep = n > 1e-12 * max(1.0, float(np.abs(c).max()))
        return ax[keep] / n[keep, None]

    def contains(self, points, eps: float = 0.0) -> np.ndarray:
        """Point-in-frustum test (inclusive of the boundary, up to ``eps``)."""
        p = np.atleast_2d(np.asarray(points, np.float64))
        inside = np.ones(p.shape[0], bool)
        centre = self.corners.mean(axis=0)
        for f in _FACES:
            c = self.corners
            n = np.cross(c[f[1]] - c[f[0]], c[f[3]] - c[f[0]])
            n = n / np.linalg.norm(n)
            if np.dot(centre - c[f[0]], n) > 0:
                n = -n  # outward
            inside &= (p - c[f[0]]) @ n <= eps
        return inside


@dataclass(frozen=True)
class SubMapAnchor:
    """Lattice cell of a sub-map; world origin = lattice * stride * voxel_size + origin."""

    lattice: tuple
    stride: int = SUBMAP_SIDE
    voxel_size: float = 0.05
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "lattice", tuple(int(v) for v in self.lattice))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def world_origin(self) -> np.ndarray:
        return (np.asarray(self.lattice, np.float64) * self.stride * self.voxel_size
                + np.asarray(self.origin))

    @property
    def voxel_lo(self) -> np.ndarray:
        """Global voxel index of the cube's first voxel."""
        shift = np.round(np.asarray(self.origin) / self.voxel_size).astype(np.int64)
        return np.asarray(self.lattice, np.int64) * self.stride + shift

    @property
    def shape(self) -> tuple:
        return (self.stride,) * 3

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.world_origin
        return lo, lo + self.stride * self.voxel_size


@dataclass(frozen=True)
class StalenessConfig:
    tau_s: float = 0.3
    tau_t: int = 30

    def __post_init__(self):
        if not 0 <= self.tau_s <= 1:
            raise ValueError("tau_s must lie in [0, 1]")
        if self.tau_t < 0:
            raise ValueError("tau_t must be non-negative")


@dataclass(eq=False)
class SubMapGrid:
    """Dense snapshot of one sub-map; arrays are indexed [x, y, z]."""

    anchor: SubMapAnchor
    occupancy: np.ndarray  # float32 probabilities
    unknown_mask: np.ndarray = field(default=None)  # uint8, 1 = Unknown

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, np.float32)
        if self.unknown_mask is None:
            self.unknown_mask = np.zeros(self.occupancy.shape, np.uint8)
        self.unknown_mask = np.asarray(self.unknown_mask, np.uint8)
        if self.occupancy.shape != self.anchor.shape or self.unknown_mask.shape != self.anchor.shape:
            raise ValueError(f"grid arrays must have shape {self.anchor.shape}")

    def to_bytes(self) -> bytes:
        """Little-endian dump: float32 occupancy then uint8 mask, x fastest."""
        return (self.occupancy.astype("<f4").tobytes(order="F")
                + self.unknown_mask.astype(np.uint8).tobytes(order="F"))

    @classmethod
    def from_bytes(cls, data: bytes, anchor: SubMapAnchor) -> "SubMapGrid":
        n = anchor.stride ** 3
        if len(data) != 5 * n:
            raise ValueError(f"grid dump must be {5 * n} bytes, got {len(data)}")
        occ = np.frombuffer(data, "<f4", n).reshape(anchor.shape, order="F")
        mask = np.frombuffer(data, np.uint8, n, offset=4 * n).reshape(anchor.shape, order="F")
        return cls(anchor, occ.astype(np.float32), mask.copy())


def compute_frustum(pose: Pose, intr: CameraIntrinsics, near: float = 0.01,
                    far: float = 5.0) -> Frustum:
    """Back-project the four image corners at ``near`` and ``far``."""
    if not near < far:
        raise ValueError("near must be smaller than far")
    px = np.array([[0, 0], [intr.width, 0], [intr.width, intr.height], [0, intr.height]],
                  np.float64)
    rays = np.column_stack([(px[:, 0] - intr.cx) / intr.fx, (px[:, 1] - intr.cy) / intr.fy,
                            np.ones(4)])
    cam = np.concatenate([rays * near, rays * far])
    return Frustum(pose.to_world(cam), near, far)


def _boxes_overlap(frustum: Frustum, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Positive-volume overlap of each box [lo, hi] with the frustum."""
    axes = frustum.separating_axes()
    proj = frustum.corners @ axes.T  # (8, A)
    f_min, f_max = proj.min(axis=0), proj.max(axis=0)
    centre = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    c = centre @ axes.T
    r = half @ np.abs(axes).T
    tol = 1e-12 * max(1.0, float(np.abs(frustum.corners).max()))
    separated = (c + r <= f_min + tol) | (c - r >= f_max - tol)
    return ~separated.any(axis=1)


def cover_frustum(frustum: Frustum, config: MapConfig | None = None,
                  stride: int = SUBMAP_SIDE, origin=(0.0, 0.0, 0.0)) -> list[SubMapAnchor]:
    """Lattice anchors whose cubes overlap the frustum, in adjacency order."""
    config = config or MapConfig()
    if frustum.volume() <= 0.0:
        return []
    side = stride * config.voxel_size
    org = np.asarray(origin, np.float64)
    c = frustum.corners - org
    lmin = np.floor(c.min(axis=0) / side).astype(np.int64)
    lmax = np.floor(c.max(axis=0) / side).astype(np.int64)
    cand = np.array(list(itertools.product(*(range(a, b + 1) for a, b in zip(lmin, lmax)))),
                    np.int64)
    lo = cand * side + org
    hit = cand[_boxes_overlap(frustum, lo, lo + side)]
    remaining = {tuple(int(v) for v in h) for h in hit}
    order = []
    steps = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    while remaining:
        start = min(remaining, key=lambda t: (t[0], t[2], t[1]))
        remaining.discard(start)
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            order.append(cur)
            for d in steps:
                nb = (cur[0] + d[0], cur[1] + d[1], cur[2] + d[2])
                if nb in remaining:
                    remaining.discard(nb)
                    queue.append(nb)
    return [SubMapAnchor(t, stride, config.voxel_size, tuple(org)) for t in order]


def recently_fused_fraction(gmap: GlobalMap, anchor: SubMapAnchor, now: int, tau_t: int) -> float:
    """Fraction of the anchor's cells that were completion-fused within tau_t frames."""
    B = gmap.config.block_side
    lo = anchor.voxel_lo
    with gmap.lock:
        if anchor.stride % B == 0 and np.all(lo % B == 0):
            # sub-map is a union of whole blocks: scan the pool directly
            n = gmap.n_blocks
            bc = gmap._coords[:n]
            blo = lo // B
            inside = np.all((bc >= blo) & (bc < blo + anchor.stride // B), axis=1)
            flags = gmap._flags[:n][inside]
            stamp = gmap._stamp[:n][inside]
        else:
            cells = gmap.read_box(lo, anchor.shape)
            flags, stamp = cells.flags, cells.stamp
        recent = ((flags & PREDICTION_FUSED) != 0) & (now - stamp <= tau_t)
        return float(np.count_nonzero(recent)) / float(anchor.stride ** 3)


def filter_stale(gmap: GlobalMap, anchors, cfg: StalenessConfig, now: int) -> list[SubMapAnchor]:
    """Keep anchors whose recently-completed fraction is below tau_s."""
    return [a for a in anchors
            if recently_fused_fraction(gmap, a, now, cfg.tau_t) < cfg.tau_s]


def extract_submap(gmap: GlobalMap, anchor: SubMapAnchor) -> SubMapGrid:
    """Snapshot occupancy probabilities and the Unknown mask of one sub-map."""
    with gmap.lock:
        cells = gmap.read_box(anchor.voxel_lo, anchor.shape)
    unknown = classify_states(cells.logodds, cells.flags) == VoxelState.UNKNOWN
    occ = np.where(unknown, 0.5, expit(cells.logodds)).astype(np.float32)
    return SubMapGrid(anchor, occ, unknown.astype(np.uint8))


__all__ = [
    "SUBMAP_SIDE", "Frustum", "SubMapAnchor", "StalenessConfig", "SubMapGrid",
    "compute_frustum", "cover_frustum", "filter_stale", "extract_submap",
    "recently_fused_fraction",
]
