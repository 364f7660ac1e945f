"""Procedural box-world rooms, ground-truth voxelisation, depth rendering and
camera trajectories.

World y is elevation. A room's interior spans [t, t + size] on each axis
with t = 0.1 m, so the floor, wall and ceiling slabs (0.1 m thick) sit at
non-negative coordinates and the ground-truth volume can start at the
world origin.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import labels as L
from .sensor import CameraIntrinsics, Pose

SLAB = 0.1
GRID = 0.05  # primitive coordinates are snapped to this spacing


@dataclass(frozen=True)
class ScenePrimitive:
    """Axis-aligned box [lo, hi] carrying a semantic label."""

    lo: tuple
    hi: tuple
    label: int
    kind: str = "box"  # "box" or "slab"; both are boxes geometrically

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"primitive extents must be positive: {lo} {hi}")
        if not 1 <= self.label < L.NUM_CLASSES:
            raise ValueError(f"primitive label must be in 1..11, got {self.label}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))


@dataclass(frozen=True)
class RoomSpec:
    """Room parameters; ``None`` sizes are drawn from the seed."""

    width: float | None = None  # x
    depth: float | None = None  # z
    height: float | None = None  # y
    min_objects: int = 3
    max_objects: int = 8
    walls: bool = True
    ceiling: bool = True
    windows: int = 1

    def __post_init__(self):
        for name in ("width", "depth", "height"):
            v = getattr(self, name)
            if v is not None and not 2.0 <= v <= 8.0:
                raise ValueError(f"room {name} must lie in [2, 8] m, got {v}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.windows < 0:
            raise ValueError("windows must be non-negative")

    @classmethod
    def floor_only(cls, width=4.0, depth=4.0, height=2.5) -> "RoomSpec":
        return cls(width, depth, height, 0, 0, walls=False, ceiling=False, windows=0)

    @classmethod
    def from_dict(cls, d: dict) -> "RoomSpec":
        d = dict(d)
        dims = d.pop("room", None)
        if dims is not None:
            d["width"], d["height"], d["depth"] = dims
        rng_ = d.pop("objects", None)
        if rng_ is not None:
            d["min_objects"], d["max_objects"] = rng_
        d.pop("seed", None)
        return cls(**d)


@dataclass(eq=False)
class GroundTruthVolume:
    """Dense label grid; voxel (i, j, k) has center origin + (ijk + 0.5) * voxel_size."""

    origin: np.ndarray
    voxel_size: float
    labels: np.ndarray  # uint8 [x, y, z]

    def __post_init__(self):
        self.origin = np.asarray(self.origin, np.float64).reshape(3)
        self.labels = np.asarray(self.labels, np.uint8)

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    @property
    def voxel_lo(self) -> np.ndarray:
        lo = self.origin / self.voxel_size
        if np.abs(lo - np.round(lo)).max() > 1e-6:
            raise ValueError("ground-truth origin is not on the voxel lattice")
        return np.round(lo).astype(np.int64)

    def crop(self, lo, shape) -> np.ndarray:
        """Labels of the global-index box [lo, lo + shape); zero outside the volume."""
        lo = np.asarray(lo, np.int64) - self.voxel_lo
        shape = np.asarray(shape, np.int64)
        a = np.maximum(lo, 0)
        b = np.minimum(lo + shape, self.dims)
        if np.any(b <= a):
            raise ValueError("requested box does not overlap the ground-truth extent")
        out = np.zeros(tuple(shape), np.uint8)
        out[tuple(slice(x - l, y - l) for x, y, l in zip(a, b, lo))] = \
            self.labels[tuple(slice(x, y) for x, y in zip(a, b))]
        return out

    def equals(self, other: "GroundTruthVolume") -> bool:
        return (np.array_equal(self.origin, other.origin) and self.voxel_size == other.voxel_size
                and np.array_equal(self.labels, other.labels))


@dataclass(eq=False)
class SyntheticScene:
    primitives: list
    bounds: tuple  # (lo, hi) world AABB
    seed: int = 0
    room: tuple = (0.0, 0.0, 0.0)  # interior size (x, y, z)
    furniture: list = field(default_factory=list)  # (kind, first, last) primitive ranges

    @property
    def floor_level(self) -> float:
        return SLAB

    def content_centroid(self) -> np.ndarray:
        """Mean center of furniture primitives, or the room center."""
        idx = [i for _, a, b in self.furniture for i in range(a, b)]
        if not idx:
            return SLAB + 0.5 * np.asarray(self.room)
        return np.mean([self.primitives[i].center for i in idx], axis=0)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "room": list(self.room),
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "primitives": [{"lo": list(p.lo), "hi": list(p.hi), "label": p.label,
                            "kind": p.kind} for p in self.primitives],
            "furniture": [list(f) for f in self.furniture],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        prims = [ScenePrimitive(p["lo"], p["hi"], p["label"], p.get("kind", "box"))
                 for p in d["primitives"]]
        return cls(prims, (tuple(d["bounds"][0]), tuple(d["bounds"][1])), d["seed"],
                   tuple(d["room"]), [tuple(f) for f in d.get("furniture", [])])


class InfeasibleSceneError(ValueError):
    pass


def _snap(v):
    return np.round(np.round(np.asarray(v, np.float64) / GRID) * GRID, 9)


def _box(x0, y0, z0, x1, y1, z1, label, kind="box"):
    lo = _snap((x0, y0, z0))
    hi = _snap((x1, y1, z1))
    return ScenePrimitive(tuple(lo), tuple(hi), label, kind)


def _legs(x0, z0, x1, z1, h, t, label):
    return [_box(x, SLAB, z, x + t, SLAB + h, z + t, label)
            for x in (x0, x1 - t) for z in (z0, z1 - t)]


def _furniture(kind, rng, x0, z0, sx, sz):
    """Primitives of one furniture compound inside footprint [x0, x0+sx] x [z0, z0+sz]."""
    x1, z1, f = x0 + sx, z0 + sz, SLAB
    if kind == "table":
        h = 0.75
        return [_box(x0, f + h - 0.05, z0, x1, f + h, z1, L.TABLE)] + \
            _legs(x0, z0, x1, z1, h - 0.05, 0.1, L.TABLE)
    if kind == "chair":
        seat = 0.45
        return ([_box(x0, f + seat - 0.05, z0, x1, f + seat, z1, L.CHAIR)]
                + _legs(x0, z0, x1, z1, seat - 0.05, 0.05, L.CHAIR)
                + [_box(x0, f + seat, z1 - 0.1, x1, f + 0.9, z1, L.CHAIR)])
    if kind == "sofa":
        return [_box(x0, f, z0, x1, f + 0.45, z1, L.SOFA),
                _box(x0, f + 0.45, z1 - 0.2, x1, f + 0.85, z1, L.SOFA),
                _box(x0, f + 0.45, z0, x0 + 0.2, f + 0.65, z1 - 0.2, L.SOFA),
                _box(x1 - 0.2, f + 0.45, z0, x1, f + 0.65, z1 - 0.2, L.SOFA)]
    if kind == "bed":
        return [_box(x0, f, z0, x1, f + 0.5, z1, L.BED),
                _box(x0, f + 0.5, z1 - 0.1, x1, f + 1.0, z1, L.BED)]
    if kind == "tv":
        return [_box(x0, f, z0, x1, f + 0.5, z1, L.FURNITURE),
                _box(x0 + 0.05, f + 0.5, z0 + 0.1, x1 - 0.05, f + 1.1, z0 + 0.2, L.TV)]
    if kind == "cabinet":
        h = float(_snap(rng.uniform(0.8, 1.2)))
        return [_box(x0, f, z0, x1, f + h, z1, L.FURNITURE)]
    return [_box(x0, f, z0, x1, f + float(_snap(rng.uniform(0.2, 0.4))), z1, L.OBJECT)]


_SIZES = {
    "table": ((0.8, 1.4), (0.6, 0.9)),
    "chair": ((0.45, 0.5), (0.45, 0.5)),
    "sofa": ((1.6, 2.0), (0.8, 0.9)),
    "bed": ((1.4, 1.8), (1.9, 2.1)),
    "tv": ((1.0, 1.2), (0.4, 0.5)),
    "cabinet": ((0.6, 1.0), (0.4, 0.5)),
    "object": ((0.2, 0.4), (0.2, 0.4)),
}
_KINDS = tuple(_SIZES)


def _place(rng, kind, placed, t, xi, zi, margin=0.3, gap=0.2, tries=200):
    """Random footprint (x0, z0, sx, sz) clear of ``placed``, or None."""
    (a0, a1), (b0, b1) = _SIZES[kind]
    sx, sz = float(_snap(rng.uniform(a0, a1))), float(_snap(rng.uniform(b0, b1)))
    if rng.random() < 0.5:
        sx, sz = sz, sx
    lo_x, hi_x = t + margin, xi - margin - sx
    lo_z, hi_z = t + margin, zi - margin - sz
    if hi_x < lo_x or hi_z < lo_z:
        return None
    for _ in range(tries):
        x0 = float(_snap(rng.uniform(lo_x, hi_x)))
        z0 = float(_snap(rng.uniform(lo_z, hi_z)))
        if all(x0 + sx + gap <= px or px + psx + gap <= x0 or
               z0 + sz + gap <= pz or pz + psz + gap <= z0
               for px, pz, psx, psz in placed):
            return x0, z0, sx, sz
    return None


def build_scene(seed: int = 0, spec: RoomSpec | None = None,
                voxel_size: float = 0.05) -> tuple[SyntheticScene, GroundTruthVolume]:
    """Deterministic room with furniture, plus its ground-truth volume."""
    spec = spec or RoomSpec()
    rng = np.random.default_rng(seed)
    W = spec.width if spec.width is not None else float(_snap(rng.uniform(3.0, 4.5)))
    D = spec.depth if spec.depth is not None else float(_snap(rng.uniform(3.0, 4.5)))
    H = spec.height if spec.height is not None else float(_snap(rng.uniform(2.4, 2.8)))
    t = SLAB
    xi, zi = t + W, t + D
    prims = [_box(0, 0, 0, xi + t, t, zi + t, L.FLOOR, "slab")]
    if spec.ceiling:
        prims.append(_box(0, t + H, 0, xi + t, 2 * t + H, zi + t, L.CEILING, "slab"))
    if spec.walls:
        top = 2 * t + H
        prims += [_box(0, 0, 0, t, top, zi + t, L.WALL, "slab"),
                  _box(xi, 0, 0, xi + t, top, zi + t, L.WALL, "slab"),
                  _box(0, 0, 0, xi + t, top, t, L.WALL, "slab"),
                  _box(0, 0, zi, xi + t, top, zi + t, L.WALL, "slab")]
        for _ in range(spec.windows):
            side = int(rng.integers(4))
            along = W if side >= 2 else D
            w = min(1.0, along - 0.6)
            a = float(_snap(rng.uniform(t + 0.3, t + along - 0.3 - w)))
            sill = t + 0.9
            if side == 0:
                prims.append(_box(0, sill, a, t, sill + 1.0, a + w, L.WINDOW))
            elif side == 1:
                prims.append(_box(xi, sill, a, xi + t, sill + 1.0, a + w, L.WINDOW))
            elif side == 2:
                prims.append(_box(a, sill, 0, a + w, sill + 1.0, t, L.WINDOW))
            else:
                prims.append(_box(a, sill, zi, a + w, sill + 1.0, zi + t, L.WINDOW))

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    kinds = [("table", "chair")[i] if i < 2 else _KINDS[int(rng.integers(len(_KINDS)))]
             for i in range(n_obj)]
    placed = []
    furniture = []
    for i, kind in enumerate(kinds):
        # randomly drawn pieces fall back to smaller kinds when the room is full
        options = [kind] if i < 2 else [kind] + [k for k in ("chair", "object") if k != kind]
        for kind in options:
            spot = _place(rng, kind, placed, t, xi, zi)
            if spot is not None:
                break
        if spot is None:
            raise InfeasibleSceneError(f"could not place {kind} in a {W} x {D} m room")
        placed.append(spot)
        first = len(prims)
        prims += _furniture(kind, rng, *spot)
        furniture.append((kind, first, len(prims)))

    hi = (xi + t, 2 * t + H, zi + t)
    scene = SyntheticScene(prims, ((0.0, 0.0, 0.0), hi), seed, (W, H, D), furniture)
    return scene, voxelize(scene, voxel_size)


def voxelize(scene: SyntheticScene, voxel_size: float = 0.05) -> GroundTruthVolume:
    """Label every voxel whose center lies in a primitive; later primitives win."""
    lo = np.asarray(scene.bounds[0], np.float64)
    origin = np.floor(lo / voxel_size + 1e-9) * voxel_size
    hi = np.asarray(scene.bounds[1], np.float64)
    dims = np.ceil((hi - origin) / voxel_size - 1e-9).astype(np.int64)
    labels = np.zeros(tuple(dims), np.uint8)
    for p in scene.primitives:
        a = np.ceil(np.round((np.asarray(p.lo) - origin) / voxel_size - 0.5, 9)).astype(np.int64)
        b = np.floor(np.round((np.asarray(p.hi) - origin) / voxel_size - 0.5, 9)).astype(np.int64)
        a = np.maximum(a, 0)
        b = np.minimum(b, dims - 1)
        if np.any(b < a):
            continue
        labels[a[0]:b[0] + 1, a[1]:b[1] + 1, a[2]:b[2] + 1] = p.label
    return GroundTruthVolume(origin, voxel_size, labels)


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray per pixel (H, W, 3) with unit z component."""
    col, row = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                           np.arange(intr.height, dtype=np.float64))
    return np.stack([(col - intr.cx) / intr.fx, (row - intr.cy) / intr.fy,
                     np.ones_like(col)], -1)


def _ray_hits(prims, origin, dirs):
    """Nearest positive entry parameter and primitive index per ray (inf / -1 if none)."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1, np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for k, p in enumerate(prims):
            t1 = (np.asarray(p.lo) - origin) * inv
            t2 = (np.asarray(p.hi) - origin) * inv
            tmin = np.minimum(t1, t2)
            tmax = np.maximum(t1, t2)
            par = dirs == 0.0
            inside = (origin > np.asarray(p.lo)) & (origin < np.asarray(p.hi))
            tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
            t_in = tmin.max(axis=1)
            t_out = tmax.min(axis=1)
            hit = (t_in <= t_out) & (t_in > 0) & (t_in < best)
            best[hit] = t_in[hit]
            which[hit] = k
    return best, which


def render_depth(scene: SyntheticScene, pose: Pose, intr: CameraIntrinsics,
                 noise: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """z-depth image in meters (0 where the ray hits nothing).

    With ``noise`` a Gaussian perturbation of standard deviation 0.05 * z is
    added to valid pixels.
    """
    rays = pixel_rays(intr).reshape(-1, 3)
    dirs = rays @ pose.rotation.T
    t, _ = _ray_hits(scene.primitives, pose.translation, dirs)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(intr.height, intr.width)
    if noise:
        rng = rng or np.random.default_rng(0)
        valid = depth > 0
        depth[valid] += rng.normal(0.0, 0.05 * depth[valid])
        depth[depth < 0] = 0.0
    return depth


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``position`` looking at ``target`` with world ``up``."""
    p = np.asarray(position, np.float64)
    z = np.asarray(target, np.float64) - p
    z /= np.linalg.norm(z)
    u = np.asarray(up, np.float64)
    y = -(u - np.dot(u, z) * z)
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        raise ValueError("view direction is parallel to up")
    y /= ny
    x = np.cross(y, z)
    return Pose(np.column_stack([x, y, z]), p)


def yaw(angle: float) -> np.ndarray:
    """Rotation about the world elevation (y) axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def generate_trajectory(scene: SyntheticScene, n_frames: int, pattern: str = "orbit",
                        elevation: float = 1.5, radius: float | None = None) -> list[Pose]:
    """Camera poses at ``elevation`` above the floor.

    ``orbit`` circles the content centroid, looking at it, starting at angle
    0 on the -z side. ``lawnmower`` sweeps rows along x looking along +z,
    tilted 30 degrees down.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    y = scene.floor_level + elevation
    lo = np.full(3, SLAB)
    hi = lo + np.asarray(scene.room)
    if pattern == "orbit":
        c = scene.content_centroid()
        cx = float(np.clip(c[0], lo[0] + 0.8, hi[0] - 0.8))
        cz = float(np.clip(c[2], lo[2] + 0.8, hi[2] - 0.8))
        target = np.array([cx, min(c[1], y - 0.5), cz])
        if radius is None:
            radius = max(0.5, min(cx - lo[0], hi[0] - cx, cz - lo[2], hi[2] - cz) - 0.3)
        base = np.array([0.0, 0.0, -radius])
        poses = []
        for i in range(n_frames):
            R = yaw(2.0 * math.pi * i / n_frames)
            p = np.array([cx, y, cz]) + R @ base
            poses.append(look_at(p, target))
        return poses
    if pattern == "lawnmower":
        rows = 1 if n_frames < 4 else 2
        per = [n_frames // rows + (1 if r < n_frames % rows else 0) for r in range(rows)]
        zs = np.linspace(lo[2] + 0.4, lo[2] + 0.4 + 0.35 * (hi[2] - lo[2]), rows)
        tilt = math.radians(30.0)
        fwd = np.array([0.0, -math.sin(tilt), math.cos(tilt)])
        poses = []
        for r, cnt in enumerate(per):
            xs = np.linspace(lo[0] + 0.4, hi[0] - 0.4, cnt) if cnt > 1 else [0.5 * (lo[0] + hi[0])]
            if r % 2:
                xs = xs[::-1]
            for x in xs:
                p = np.array([x, y, zs[r]])
                poses.append(look_at(p, p + fwd))
        return poses
    raise ValueError(f"unknown trajectory pattern {pattern!r}")


def visible_voxels(scene: SyntheticScene, gt: GroundTruthVolume, poses, intr) -> np.ndarray:
    """Global voxel indices (unique, sorted) of first ray hits from any pose."""
    rays = pixel_rays(intr).reshape(-1, 3)
    found = []
    for pose in poses:
        dirs = rays @ pose.rotation.T
        t, which = _ray_hits(scene.primitives, pose.translation, dirs)
        ok = np.isfinite(t)
        pts = pose.translation + t[ok, None] * dirs[ok]
        # step a hair into the surface along the ray
        pts += 1e-6 * dirs[ok] / np.linalg.norm(dirs[ok], axis=1, keepdims=True)
        found.append(np.floor(pts / gt.voxel_size).astype(np.int64))
    if not found:
        return np.zeros((0, 3), np.int64)
    return np.unique(np.concatenate(found), axis=0)


def occluded_voxels(scene, gt: GroundTruthVolume, poses, intr) -> np.ndarray:
    """GT-occupied voxels (global indices) that no pose sees directly."""
    vis = visible_voxels(scene, gt, poses, intr)
    occ = np.argwhere(gt.labels != 0) + gt.voxel_lo
    seen = np.zeros(gt.dims, bool)
    rel = vis - gt.voxel_lo
    inb = np.all((rel >= 0) & (rel < gt.dims), axis=1)
    seen[tuple(rel[inb].T)] = True
    return occ[~seen[tuple((occ - gt.voxel_lo).T)]]


def save_scene_spec(path, seed: int, spec: RoomSpec) -> None:
    with open(path, "w") as f:
        json.dump({"seed": seed, **asdict(spec)}, f, indent=2, sort_keys=True)


__all__ = [
    "ScenePrimitive", "RoomSpec", "SyntheticScene", "GroundTruthVolume", "InfeasibleSceneError",
    "build_scene", "voxelize", "render_depth", "pixel_rays", "look_at", "yaw",
    "generate_trajectory", "visible_voxels", "occluded_voxels", "save_scene_spec",
]
