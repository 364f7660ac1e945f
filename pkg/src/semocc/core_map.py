"""Sparse hashed voxel map holding fused occupancy, labels and bookkeeping.

Cells live in fixed-size blocks (``block_side``^3 voxels) allocated on
demand and indexed by integer block coordinates through an open-addressing
hash table. Per-cell fields are stored structure-of-arrays in a block pool:

    logodds   float64   occupancy log-odds, clamped to the config bounds
    label     uint8     semantic label id (0 = none/empty)
    weight    float64   label confidence W, in [0, W_max]
    stamp     int64     frame counter of the last write
    flags     uint8     bit 0 sensor_observed, bit 1 prediction_fused
"""

from __future__ import annotations

import enum
import hashlib
import threading
from dataclasses import dataclass

import numpy as np

from . import _blockhash as bh

SENSOR_OBSERVED = bh.SENSOR_OBSERVED
PREDICTION_FUSED = bh.PREDICTION_FUSED


class MapCapacityError(MemoryError):
    """Raised when the block pool would exceed ``MapConfig.max_blocks``."""


@dataclass(frozen=True)
class MapConfig:
    voxel_size: float = 0.05
    block_side: int = 8
    logodds_min: float = -5.0
    logodds_max: float = 5.0
    label_weight_max: float = 5.0
    max_blocks: int = 1 << 16

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.block_side < 1:
            raise ValueError(f"block_side must be >= 1, got {self.block_side}")
        if not self.logodds_min < 0 < self.logodds_max:
            raise ValueError("log-odds bounds must straddle zero")
        if not self.label_weight_max > 0:
            raise ValueError("label_weight_max must be positive")


class VoxelState(enum.IntEnum):
    UNKNOWN = 0
    EMPTY = 1
    OCCUPIED = 2


@dataclass
class VoxelCell:
    logodds: float = 0.0
    label: int = 0
    label_weight: float = 0.0
    timestamp: int = 0
    sensor_observed: bool = False
    prediction_fused: bool = False

    @property
    def flags(self) -> int:
        return (SENSOR_OBSERVED if self.sensor_observed else 0) | (
            PREDICTION_FUSED if self.prediction_fused else 0)


def classify_state(cell: VoxelCell) -> VoxelState:
    if not cell.sensor_observed and not cell.prediction_fused:
        return VoxelState.UNKNOWN
    return VoxelState.OCCUPIED if cell.logodds > 0 else VoxelState.EMPTY


def classify_states(logodds: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Vectorised ``classify_state`` returning VoxelState codes as uint8."""
    out = np.where(logodds > 0, np.uint8(VoxelState.OCCUPIED), np.uint8(VoxelState.EMPTY))
    out[flags == 0] = VoxelState.UNKNOWN
    return out


@dataclass
class CellArrays:
    """Dense copy of cell fields for a box or an index list."""

    logodds: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    stamp: np.ndarray
    flags: np.ndarray
    allocated: np.ndarray

    @classmethod
    def empty(cls, shape) -> "CellArrays":
        return cls(
            logodds=np.zeros(shape, np.float64),
            label=np.zeros(shape, np.uint8),
            weight=np.zeros(shape, np.float64),
            stamp=np.zeros(shape, np.int64),
            flags=np.zeros(shape, np.uint8),
            allocated=np.zeros(shape, bool),
        )

    def states(self) -> np.ndarray:
        return classify_states(self.logodds, self.flags)

    def copy(self) -> "CellArrays":
        return CellArrays(*(a.copy() for a in (
            self.logodds, self.label, self.weight, self.stamp, self.flags, self.allocated)))


class CellRef:
    """Read/write handle on one allocated cell."""

    __slots__ = ("_map", "slot", "offset")

    def __init__(self, gmap: "GlobalMap", slot: int, offset: int):
        self._map = gmap
        self.slot = slot
        self.offset = offset

    def _get(self, name):
        return getattr(self._map, "_" + name)[self.slot, self.offset]

    def _set(self, name, value):
        getattr(self._map, "_" + name)[self.slot, self.offset] = value

    logodds = property(lambda s: float(s._get("logodds")), lambda s, v: s._set("logodds", v))
    label = property(lambda s: int(s._get("label")), lambda s, v: s._set("label", v))
    label_weight = property(lambda s: float(s._get("weight")), lambda s, v: s._set("weight", v))
    timestamp = property(lambda s: int(s._get("stamp")), lambda s, v: s._set("stamp", v))
    flags = property(lambda s: int(s._get("flags")), lambda s, v: s._set("flags", v))

    @property
    def sensor_observed(self) -> bool:
        return bool(self.flags & SENSOR_OBSERVED)

    @property
    def prediction_fused(self) -> bool:
        return bool(self.flags & PREDICTION_FUSED)

    def snapshot(self) -> VoxelCell:
        f = self.flags
        return VoxelCell(self.logodds, self.label, self.label_weight, self.timestamp,
                         bool(f & SENSOR_OBSERVED), bool(f & PREDICTION_FUSED))

    def assign(self, cell: VoxelCell) -> None:
        self.logodds = cell.logodds
        self.label = cell.label
        self.label_weight = cell.label_weight
        self.timestamp = cell.timestamp
        self.flags = cell.flags

    @property
    def state(self) -> VoxelState:
        return classify_state(self.snapshot())


def _next_pow2(n: int) -> int:
    return 1 << max(4, int(n - 1).bit_length())


class GlobalMap:
    """Voxel-hashed global map.

    Writers must hold ``lock``; everything here also works single-threaded
    without touching it. The lock is a plain mutex, which satisfies the
    single-writer/multi-reader contract by serialising readers too.
    """

    def __init__(self, config: MapConfig | None = None, initial_blocks: int = 256):
        self.config = config or MapConfig()
        self.frame_counter = 0
        self.lock = threading.RLock()
        self._count = np.zeros(1, np.int64)
        self._allocate_pool(max(1, min(initial_blocks, self.config.max_blocks)))

    # -- storage -----------------------------------------------------------

    @property
    def block_volume(self) -> int:
        return self.config.block_side ** 3

    @property
    def n_blocks(self) -> int:
        return int(self._count[0])

    @property
    def capacity(self) -> int:
        return self._coords.shape[0]

    def _allocate_pool(self, cap: int) -> None:
        n = self.n_blocks
        bv = self.block_volume
        old = getattr(self, "_coords", None)

        def grow(name, dtype, shape):
            arr = np.zeros(shape, dtype)
            if old is not None:
                arr[:n] = getattr(self, name)[:n]
            setattr(self, name, arr)

        grow("_coords", np.int64, (cap, 3))
        grow("_logodds", np.float64, (cap, bv))
        grow("_label", np.uint8, (cap, bv))
        grow("_weight", np.float64, (cap, bv))
        grow("_stamp", np.int64, (cap, bv))
        grow("_flags", np.uint8, (cap, bv))
        self._keys = np.full(_next_pow2(2 * cap + 2), bh.EMPTY_KEY, np.int64)
        self._slots = np.full(self._keys.shape[0], -1, np.int64)
        bh.rehash(self._keys, self._slots, self._coords, self._count)

    def ensure_free(self, n: int) -> None:
        """Make room for at least ``n`` more blocks."""
        need = self.n_blocks + n
        if need <= self.capacity:
            return
        if need > self.config.max_blocks:
            raise MapCapacityError(
                f"map needs {need} blocks, limit is {self.config.max_blocks}")
        self._allocate_pool(min(max(need, 2 * self.capacity), self.config.max_blocks))

    def _grow_for_retry(self) -> None:
        if self.capacity >= self.config.max_blocks:
            raise MapCapacityError(f"block pool exhausted at {self.config.max_blocks} blocks")
        self._allocate_pool(min(2 * self.capacity, self.config.max_blocks))

    def _kernel_args(self):
        return (self._keys, self._slots, self._coords, self._count, self.config.block_side)

    # -- indexing ----------------------------------------------------------

    def voxel_index(self, points) -> np.ndarray:
        return np.floor(np.asarray(points, np.float64) / self.config.voxel_size).astype(np.int64)

    def voxel_center(self, index) -> np.ndarray:
        return (np.asarray(index, np.float64) + 0.5) * self.config.voxel_size

    def _split(self, index):
        B = self.config.block_side
        i, j, k = (int(v) for v in index)
        bx, by, bz = i // B, j // B, k // B
        for b in (bx, by, bz):
            if abs(b) >= bh.KEY_LIMIT:
                raise IndexError(f"voxel index {index} outside addressable range")
        return (bx, by, bz), ((i - bx * B) * B + (j - by * B)) * B + (k - bz * B)

    def find(self, index) -> CellRef | None:
        (bx, by, bz), off = self._split(index)
        slot = bh.table_find(self._keys, self._slots, bh.pack_key(bx, by, bz))
        return None if slot < 0 else CellRef(self, int(slot), off)

    def get_or_allocate(self, index) -> CellRef:
        (bx, by, bz), off = self._split(index)
        while True:
            slot = bh.get_or_alloc(self._keys, self._slots, self._coords, self._count, bx, by, bz)
            if slot >= 0:
                return CellRef(self, int(slot), off)
            self._grow_for_retry()

    def cell(self, index) -> VoxelCell:
        ref = self.find(index)
        return VoxelCell() if ref is None else ref.snapshot()

    # -- bulk access -------------------------------------------------------

    def read_box(self, lo, shape) -> CellArrays:
        """Copy of the cells in the box [lo, lo + shape)."""
        shape = tuple(int(s) for s in shape)
        out = CellArrays.empty(shape)
        bh.read_box(self._keys, self._slots, self.config.block_side,
                    self._logodds, self._label, self._weight, self._stamp, self._flags,
                    np.asarray(lo, np.int64), np.asarray(shape, np.int64),
                    out.logodds, out.label, out.weight, out.stamp, out.flags, out.allocated)
        return out

    def write_box(self, lo, cells: CellArrays, changed: np.ndarray) -> int:
        """Write back the cells flagged in ``changed``, allocating as needed."""
        B = self.config.block_side
        blocks_spanned = int(np.prod([(s + B - 1) // B + 1 for s in changed.shape]))
        self.ensure_free(min(blocks_spanned, int(changed.sum())))
        written = bh.write_box(*self._kernel_args(),
                               self._logodds, self._label, self._weight, self._stamp, self._flags,
                               np.asarray(lo, np.int64), cells.logodds, cells.label, cells.weight,
                               cells.stamp, cells.flags, np.ascontiguousarray(changed))
        if written < 0:  # pragma: no cover - ensure_free sized the pool
            raise MapCapacityError("block pool exhausted during write_box")
        return int(written)

    def gather(self, indices) -> CellArrays:
        idx = np.ascontiguousarray(np.asarray(indices, np.int64).reshape(-1, 3))
        out = CellArrays.empty(idx.shape[0])
        bh.gather(self._keys, self._slots, self.config.block_side,
                  self._logodds, self._label, self._weight, self._stamp, self._flags, idx,
                  out.logodds, out.label, out.weight, out.stamp, out.flags, out.allocated)
        return out

    def set_labels(self, indices, labels, weights) -> None:
        """Overwrite label and weight of allocated cells (no allocation)."""
        idx = np.ascontiguousarray(np.asarray(indices, np.int64).reshape(-1, 3))
        missed = bh.scatter_labels(self._keys, self._slots, self.config.block_side,
                                   self._label, self._weight, idx,
                                   np.ascontiguousarray(labels, np.uint8),
                                   np.ascontiguousarray(weights, np.float64))
        if missed:
            raise KeyError(f"{missed} cells are not allocated")

    def apply_logodds(self, indices, deltas, now: int | None = None) -> None:
        """Sequential clamped sensor updates; marks cells sensor-observed."""
        idx = np.ascontiguousarray(np.asarray(indices, np.int64).reshape(-1, 3))
        delta = np.ascontiguousarray(deltas, np.float64).reshape(-1)
        now = self.frame_counter if now is None else now
        start = 0
        while True:
            start = bh.apply_logodds(*self._kernel_args(), self._logodds, self._stamp, self._flags,
                                     idx, delta, self.config.logodds_min,
                                     self.config.logodds_max, now, start)
            if start >= idx.shape[0]:
                return
            self._grow_for_retry()

    def block_coords(self) -> np.ndarray:
        return self._coords[: self.n_blocks].copy()

    def allocated_cells(self, sort: bool = True) -> tuple[np.ndarray, CellArrays]:
        """Voxel indices and field copies of every allocated cell.

        With ``sort`` the blocks are ordered lexicographically by block
        coordinate, which makes the output independent of allocation order.
        """
        n = self.n_blocks
        B = self.config.block_side
        order = np.arange(n)
        if sort and n:
            c = self._coords[:n]
            order = np.lexsort((c[:, 2], c[:, 1], c[:, 0]))
        local = np.stack(np.meshgrid(np.arange(B), np.arange(B), np.arange(B), indexing="ij"),
                         -1).reshape(-1, 3)
        idx = (self._coords[order][:, None, :] * B + local[None]).reshape(-1, 3)
        cells = CellArrays(
            logodds=self._logodds[order].reshape(-1),
            label=self._label[order].reshape(-1),
            weight=self._weight[order].reshape(-1),
            stamp=self._stamp[order].reshape(-1),
            flags=self._flags[order].reshape(-1),
            allocated=np.ones(n * self.block_volume, bool),
        )
        return idx, cells

    def state_counts(self) -> dict[VoxelState, int]:
        n = self.n_blocks
        states = classify_states(self._logodds[:n], self._flags[:n])
        counts = np.bincount(states.reshape(-1), minlength=3)
        return {s: int(counts[s]) for s in VoxelState}

    def logodds_checksum(self) -> str:
        idx, cells = self.allocated_cells(sort=True)
        h = hashlib.sha256()
        h.update(idx.tobytes())
        h.update(cells.logodds.tobytes())
        return h.hexdigest()

    def copy(self) -> "GlobalMap":
        other = GlobalMap(self.config, initial_blocks=self.capacity)
        n = self.n_blocks
        for name in ("_coords", "_logodds", "_label", "_weight", "_stamp", "_flags"):
            getattr(other, name)[:n] = getattr(self, name)[:n]
        other._count[0] = n
        bh.rehash(other._keys, other._slots, other._coords, other._count)
        other.frame_counter = self.frame_counter
        return other

    def equals(self, other: "GlobalMap") -> bool:
        """Bit-exact content equality, independent of allocation order."""
        if self.config != other.config or self.frame_counter != other.frame_counter:
            return False
        ia, a = self.allocated_cells()
        ib, b = other.allocated_cells()
        if ia.shape != ib.shape or not np.array_equal(ia, ib):
            return False
        return all(np.array_equal(getattr(a, f), getattr(b, f))
                   for f in ("logodds", "label", "weight", "stamp", "flags"))


def extract_surface(gmap: GlobalMap, interface_only: bool = False):
    """Centers and labels of Occupied cells, sorted by voxel index.

    With ``interface_only`` only Occupied cells with at least one
    face-adjacent Empty cell are returned, i.e. the occupied side of the
    observed free-space boundary.
    """
    idx, cells = gmap.allocated_cells(sort=True)
    occ = cells.states() == VoxelState.OCCUPIED
    if interface_only and occ.any():
        keep = np.zeros(int(occ.sum()), bool)
        occ_idx = idx[occ]
        for axis in range(3):
            for step in (-1, 1):
                nb = occ_idx.copy()
                nb[:, axis] += step
                g = gmap.gather(nb)
                keep |= g.states() == VoxelState.EMPTY
        sel = np.flatnonzero(occ)[keep]
    else:
        sel = np.flatnonzero(occ)
    return gmap.voxel_center(idx[sel]), cells.label[sel].copy()


__all__ = [
    "MapConfig", "VoxelCell", "VoxelState", "GlobalMap", "CellArrays", "CellRef",
    "MapCapacityError", "classify_state", "classify_states", "extract_surface",
    "SENSOR_OBSERVED", "PREDICTION_FUSED",
]
