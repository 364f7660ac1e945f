"""On-disk formats.

Map snapshot (little-endian throughout)::

    8s   magic "SEMOMAP1"
    u32  format version (1)
    f64  voxel_size
    u32  block_side
    f64  logodds_min, logodds_max, label_weight_max
    u64  max_blocks
    i64  frame_counter
    u64  n_blocks
    i64  block coordinates [n_blocks, 3], sorted lexicographically
    f64  logodds [n_blocks, block_side^3]
    u8   label   [n_blocks, block_side^3]
    f64  weight  [n_blocks, block_side^3]
    i64  stamp   [n_blocks, block_side^3]
    u8   flags   [n_blocks, block_side^3]

Cells inside a block are ordered with local z fastest, then y, then x.

Ground-truth volume::

    8s   magic "SEMOGT01"
    f64  origin x, y, z
    f64  voxel_size
    u32  dims x, y, z
    u8   labels, C order over [x, y, z] (z fastest)

Depth images are 16-bit PNGs in millimeters (0 = invalid). Trajectories
are text lines ``timestamp tx ty tz qx qy qz qw`` (camera-to-world).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from . import labels as L
from . import _blockhash as bh
from .core_map import GlobalMap, MapConfig, extract_surface
from .sensor import Pose
from .synth import GroundTruthVolume

MAP_MAGIC = b"SEMOMAP1"
MAP_VERSION = 1
GT_MAGIC = b"SEMOGT01"
_MAP_HEAD = struct.Struct("<8sIdIdddQqQ")
_GT_HEAD = struct.Struct("<8sddddIII")


def map_to_bytes(gmap: GlobalMap) -> bytes:
    c = gmap.config
    n = gmap.n_blocks
    coords = gmap._coords[:n]
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0])) if n else np.arange(0)
    parts = [_MAP_HEAD.pack(MAP_MAGIC, MAP_VERSION, c.voxel_size, c.block_side, c.logodds_min,
                            c.logodds_max, c.label_weight_max, c.max_blocks,
                            gmap.frame_counter, n)]
    parts.append(coords[order].astype("<i8").tobytes())
    for name, dt in (("_logodds", "<f8"), ("_label", "u1"), ("_weight", "<f8"),
                     ("_stamp", "<i8"), ("_flags", "u1")):
        parts.append(getattr(gmap, name)[:n][order].astype(dt).tobytes())
    return b"".join(parts)


def map_from_bytes(data: bytes) -> GlobalMap:
    if len(data) < _MAP_HEAD.size:
        raise ValueError("truncated map snapshot")
    (magic, version, vs, bs, lmin, lmax, wmax, max_blocks, frame,
     n) = _MAP_HEAD.unpack_from(data)
    if magic != MAP_MAGIC:
        raise ValueError("not a map snapshot")
    if version != MAP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    cfg = MapConfig(vs, bs, lmin, lmax, wmax, max_blocks)
    bv = bs ** 3
    expected = _MAP_HEAD.size + n * (24 + bv * (8 + 1 + 8 + 8 + 1))
    if len(data) != expected:
        raise ValueError(f"snapshot size {len(data)} does not match header ({expected})")
    gmap = GlobalMap(cfg, initial_blocks=max(1, n))
    off = _MAP_HEAD.size

    def take(dt, shape):
        nonlocal off
        arr = np.frombuffer(data, dt, int(np.prod(shape)), off).reshape(shape)
        off += arr.nbytes
        return arr

    gmap._coords[:n] = take("<i8", (n, 3))
    gmap._logodds[:n] = take("<f8", (n, bv))
    gmap._label[:n] = take("u1", (n, bv))
    gmap._weight[:n] = take("<f8", (n, bv))
    gmap._stamp[:n] = take("<i8", (n, bv))
    gmap._flags[:n] = take("u1", (n, bv))
    gmap._count[0] = n
    bh.rehash(gmap._keys, gmap._slots, gmap._coords, gmap._count)
    gmap.frame_counter = int(frame)
    return gmap


def save_map(gmap: GlobalMap, path) -> None:
    Path(path).write_bytes(map_to_bytes(gmap))


def load_map(path) -> GlobalMap:
    return map_from_bytes(Path(path).read_bytes())


def ply_text(points: np.ndarray, labels: np.ndarray) -> str:
    """ASCII PLY with xyz, palette color and integer label per vertex."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             "property int label", "end_header"]
    pal = np.asarray(L.PALETTE)
    for p, lab in zip(points, labels):
        r, g, b = pal[int(lab)]
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {r} {g} {b} {int(lab)}")
    return "\n".join(lines) + "\n"


def export_ply(gmap: GlobalMap, path) -> int:
    """Write Occupied voxel centers with labels; returns the vertex count."""
    pts, lab = extract_surface(gmap)
    Path(path).write_text(ply_text(pts, lab))
    return len(pts)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    start = text.index("end_header") + 1
    rows = [line.split() for line in text[start:] if line.strip()]
    if not rows:
        return np.zeros((0, 3)), np.zeros(0, np.int64)
    arr = np.array(rows, np.float64)
    return arr[:, :3], arr[:, 6].astype(np.int64)


def save_depth_png(depth_m: np.ndarray, path) -> None:
    mm = np.round(np.asarray(depth_m, np.float64) * 1000.0)
    mm[(mm < 0) | (mm > 65535) | ~np.isfinite(mm)] = 0
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single-channel")
    return arr.astype(np.float64) / 1000.0


def list_depth_frames(depth_dir) -> list[Path]:
    d = Path(depth_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"depth directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise FileNotFoundError(f"no PNG frames in {d}")
    return files


def save_trajectory(poses, path, timestamps=None) -> None:
    lines = []
    for i, pose in enumerate(poses):
        ts = float(i if timestamps is None else timestamps[i])
        t = pose.translation
        q = pose.quaternion()
        lines.append(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                     f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> tuple[list[float], list[Pose]]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"trajectory file not found: {p}")
    stamps, poses = [], []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"{p}:{n}: expected 8 values, got {len(vals)}")
        v = [float(x) for x in vals]
        stamps.append(v[0])
        poses.append(Pose.from_quaternion(v[1:4], v[4:8]))
    return stamps, poses


def gt_to_bytes(gt: GroundTruthVolume) -> bytes:
    return (_GT_HEAD.pack(GT_MAGIC, *gt.origin, gt.voxel_size, *gt.dims)
            + np.ascontiguousarray(gt.labels, np.uint8).tobytes())


def gt_from_bytes(data: bytes) -> GroundTruthVolume:
    magic, ox, oy, oz, vs, nx, ny, nz = _GT_HEAD.unpack_from(data)
    if magic != GT_MAGIC:
        raise ValueError("not a ground-truth volume")
    n = nx * ny * nz
    if len(data) != _GT_HEAD.size + n:
        raise ValueError("ground-truth volume size does not match header")
    labels = np.frombuffer(data, np.uint8, n, _GT_HEAD.size).reshape(nx, ny, nz).copy()
    return GroundTruthVolume(np.array([ox, oy, oz]), vs, labels)


def save_gt(gt: GroundTruthVolume, path) -> None:
    Path(path).write_bytes(gt_to_bytes(gt))


def load_gt(path) -> GroundTruthVolume:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"ground-truth file not found: {p}")
    return gt_from_bytes(p.read_bytes())


__all__ = [
    "map_to_bytes", "map_from_bytes", "save_map", "load_map", "ply_text", "export_ply",
    "read_ply", "save_depth_png", "load_depth_png", "list_depth_frames", "save_trajectory",
    "load_trajectory", "gt_to_bytes", "gt_from_bytes", "save_gt", "load_gt",
]
