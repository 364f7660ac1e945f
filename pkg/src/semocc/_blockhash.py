"""Open-addressing hash table of voxel blocks, as numba kernels.

Block coordinates are packed into a single non-negative int64 key (21 bits
per axis, offset so negative coordinates work). The table maps keys to slots
in a pool of fixed-size blocks; the pool arrays live on the owning map.
"""

import numpy as np
from numba import njit

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_LIMIT = KEY_OFFSET  # |block coord| must stay below this
EMPTY_KEY = -1

SENSOR_OBSERVED = 1
PREDICTION_FUSED = 2


@njit(cache=True, inline="always")
def pack_key(bx, by, bz):
    return ((bx + KEY_OFFSET) << 42) | ((by + KEY_OFFSET) << 21) | (bz + KEY_OFFSET)


@njit(cache=True, inline="always")
def _mix(key):
    h = np.uint64(key)
    h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return h ^ (h >> np.uint64(31))


@njit(cache=True)
def table_find(keys, slots, key):
    mask = np.uint64(keys.shape[0] - 1)
    i = _mix(key) & mask
    while True:
        k = keys[i]
        if k == key:
            return slots[i]
        if k == EMPTY_KEY:
            return -1
        i = (i + np.uint64(1)) & mask


@njit(cache=True)
def table_insert(keys, slots, key, slot):
    mask = np.uint64(keys.shape[0] - 1)
    i = _mix(key) & mask
    while keys[i] != EMPTY_KEY:
        i = (i + np.uint64(1)) & mask
    keys[i] = key
    slots[i] = slot


@njit(cache=True)
def get_or_alloc(keys, slots, coords, count, bx, by, bz):
    """Slot of block (bx, by, bz), allocating it if absent.

    Returns -1 when the pool or table is full; the caller grows and retries.
    """
    key = pack_key(bx, by, bz)
    s = table_find(keys, slots, key)
    if s >= 0:
        return s
    n = count[0]
    if n >= coords.shape[0] or 2 * (n + 1) > keys.shape[0]:
        return -1
    coords[n, 0] = bx
    coords[n, 1] = by
    coords[n, 2] = bz
    table_insert(keys, slots, key, n)
    count[0] = n + 1
    return n


@njit(cache=True)
def rehash(keys, slots, coords, count):
    for n in range(count[0]):
        table_insert(keys, slots, pack_key(coords[n, 0], coords[n, 1], coords[n, 2]), n)


@njit(cache=True)
def lookup_many(keys, slots, bcoords):
    out = np.empty(bcoords.shape[0], np.int64)
    for n in range(bcoords.shape[0]):
        out[n] = table_find(keys, slots, pack_key(bcoords[n, 0], bcoords[n, 1], bcoords[n, 2]))
    return out


@njit(cache=True)
def read_box(keys, slots, B, logodds, label, weight, stamp, flags,
             lo, shape, o_logodds, o_label, o_weight, o_stamp, o_flags, o_alloc):
    """Copy a dense box of cells starting at voxel ``lo`` into the o_* arrays.

    Unallocated cells are left at whatever the outputs were initialised to;
    ``o_alloc`` marks the allocated ones.
    """
    last_key = np.int64(EMPTY_KEY)
    slot = -1
    for x in range(shape[0]):
        vx = lo[0] + x
        bx = vx // B
        lx = vx - bx * B
        for y in range(shape[1]):
            vy = lo[1] + y
            by = vy // B
            ly = vy - by * B
            for z in range(shape[2]):
                vz = lo[2] + z
                bz = vz // B
                lz = vz - bz * B
                key = pack_key(bx, by, bz)
                if key != last_key:
                    slot = table_find(keys, slots, key)
                    last_key = key
                if slot < 0:
                    continue
                off = (lx * B + ly) * B + lz
                o_logodds[x, y, z] = logodds[slot, off]
                o_label[x, y, z] = label[slot, off]
                o_weight[x, y, z] = weight[slot, off]
                o_stamp[x, y, z] = stamp[slot, off]
                o_flags[x, y, z] = flags[slot, off]
                o_alloc[x, y, z] = True


@njit(cache=True)
def write_box(keys, slots, coords, count, B, logodds, label, weight, stamp, flags,
              lo, i_logodds, i_label, i_weight, i_stamp, i_flags, changed):
    """Write cells of a dense box back where ``changed`` is set.

    Returns the number of cells written, or -1 if the pool ran out (the
    caller must grow capacity beforehand; see GlobalMap.write_box).
    """
    written = 0
    last_key = np.int64(EMPTY_KEY)
    slot = -1
    sx, sy, sz = changed.shape
    for x in range(sx):
        vx = lo[0] + x
        bx = vx // B
        lx = vx - bx * B
        for y in range(sy):
            vy = lo[1] + y
            by = vy // B
            ly = vy - by * B
            for z in range(sz):
                if not changed[x, y, z]:
                    continue
                vz = lo[2] + z
                bz = vz // B
                lz = vz - bz * B
                key = pack_key(bx, by, bz)
                if key != last_key:
                    slot = get_or_alloc(keys, slots, coords, count, bx, by, bz)
                    last_key = key
                if slot < 0:
                    return -1
                off = (lx * B + ly) * B + lz
                logodds[slot, off] = i_logodds[x, y, z]
                label[slot, off] = i_label[x, y, z]
                weight[slot, off] = i_weight[x, y, z]
                stamp[slot, off] = i_stamp[x, y, z]
                flags[slot, off] = i_flags[x, y, z]
                written += 1
    return written


@njit(cache=True)
def gather(keys, slots, B, logodds, label, weight, stamp, flags, idx,
           o_logodds, o_label, o_weight, o_stamp, o_flags, o_alloc):
    for n in range(idx.shape[0]):
        bx = idx[n, 0] // B
        by = idx[n, 1] // B
        bz = idx[n, 2] // B
        slot = table_find(keys, slots, pack_key(bx, by, bz))
        if slot < 0:
            continue
        off = ((idx[n, 0] - bx * B) * B + (idx[n, 1] - by * B)) * B + (idx[n, 2] - bz * B)
        o_logodds[n] = logodds[slot, off]
        o_label[n] = label[slot, off]
        o_weight[n] = weight[slot, off]
        o_stamp[n] = stamp[slot, off]
        o_flags[n] = flags[slot, off]
        o_alloc[n] = True


@njit(cache=True)
def scatter_labels(keys, slots, B, label, weight, idx, i_label, i_weight):
    """Overwrite label/weight of already-allocated cells; returns misses."""
    missed = 0
    for n in range(idx.shape[0]):
        bx = idx[n, 0] // B
        by = idx[n, 1] // B
        bz = idx[n, 2] // B
        slot = table_find(keys, slots, pack_key(bx, by, bz))
        if slot < 0:
            missed += 1
            continue
        off = ((idx[n, 0] - bx * B) * B + (idx[n, 1] - by * B)) * B + (idx[n, 2] - bz * B)
        label[slot, off] = i_label[n]
        weight[slot, off] = i_weight[n]
    return missed


@njit(cache=True)
def apply_logodds(keys, slots, coords, count, B, logodds, stamp, flags,
                  idx, delta, lmin, lmax, now, start):
    """Sequential clamped log-odds updates l <- clamp(l + delta).

    A cell's first sensor update starts from l = 0, discarding any
    log-odds injected by completion, so observed cells never depend on it.

    Processes entries from ``start``; returns the index of the first entry
    that could not be allocated, or ``idx.shape[0]`` when done.
    """
    for n in range(start, idx.shape[0]):
        bx = idx[n, 0] // B
        by = idx[n, 1] // B
        bz = idx[n, 2] // B
        slot = get_or_alloc(keys, slots, coords, count, bx, by, bz)
        if slot < 0:
            return n
        off = ((idx[n, 0] - bx * B) * B + (idx[n, 1] - by * B)) * B + (idx[n, 2] - bz * B)
        if flags[slot, off] & SENSOR_OBSERVED:
            v = logodds[slot, off] + delta[n]
        else:
            v = delta[n]  # first observation supersedes any prediction
        if v < lmin:
            v = lmin
        elif v > lmax:
            v = lmax
        logodds[slot, off] = v
        stamp[slot, off] = now
        flags[slot, off] |= SENSOR_OBSERVED
    return idx.shape[0]
