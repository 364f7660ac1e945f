"""Semantic completion backends: occupancy + unknown mask in, labels + confidence out.

Every backend exposes ``name`` and ``complete(grid) -> CompletionResult``.
The reference backends are pure functions of their inputs. The external
backend talks to a persistent child process over its standard streams using
a small framed binary protocol (see ``encode_frame``).
"""

from __future__ import annotations

import logging
import os
import select
import struct
import subprocess
import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import labels as L
from .submap import SubMapAnchor, SubMapGrid

log = logging.getLogger(__name__)

MAGIC = b"SCFUSE01"
_HEADER = struct.Struct("<8sI")


class CompletionError(RuntimeError):
    """A backend failed for one sub-map; callers skip that sub-map."""


class CompletionTimeout(CompletionError):
    pass


class ProtocolError(CompletionError):
    pass


class OutsideGroundTruth(CompletionError):
    """The oracle was asked about a sub-map the ground truth does not cover."""


@dataclass(eq=False)
class CompletionResult:
    anchor: SubMapAnchor
    labels: np.ndarray  # uint8, 0 = empty
    confidence: np.ndarray  # float32 in [0, 1]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, np.uint8)
        self.confidence = np.asarray(self.confidence, np.float32)
        shape = self.anchor.shape
        if self.labels.shape != shape or self.confidence.shape != shape:
            raise ValueError(f"result arrays must have shape {shape}")
        validate_result_arrays(self.labels, self.confidence)

    @classmethod
    def empty(cls, anchor: SubMapAnchor) -> "CompletionResult":
        return cls(anchor, np.zeros(anchor.shape, np.uint8), np.zeros(anchor.shape, np.float32))

    def to_bytes(self) -> bytes:
        """Labels (uint8) then confidences (float32 LE), x fastest."""
        return self.labels.tobytes(order="F") + self.confidence.astype("<f4").tobytes(order="F")

    @classmethod
    def from_bytes(cls, data: bytes, anchor: SubMapAnchor) -> "CompletionResult":
        n = anchor.stride ** 3
        if len(data) != 5 * n:
            raise ProtocolError(f"result payload must be {5 * n} bytes, got {len(data)}")
        lab = np.frombuffer(data, np.uint8, n).reshape(anchor.shape, order="F")
        conf = np.frombuffer(data, "<f4", n, offset=n).reshape(anchor.shape, order="F")
        try:
            validate_result_arrays(lab, conf)
        except ValueError as e:
            raise ProtocolError(str(e)) from None
        return cls(anchor, lab.copy(), conf.astype(np.float32))

    def equals(self, other: "CompletionResult") -> bool:
        return (self.anchor == other.anchor and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.confidence, other.confidence))


def validate_result_arrays(labels: np.ndarray, confidence: np.ndarray) -> None:
    if labels.size and int(labels.max()) >= L.NUM_CLASSES:
        raise ValueError(f"label {int(labels.max())} outside [0, {L.NUM_CLASSES - 1}]")
    conf = np.asarray(confidence)
    if not np.all(np.isfinite(conf)) or (conf.size and (conf.min() < 0 or conf.max() > 1)):
        raise ValueError("confidence outside [0, 1]")


class NullBackend:
    """Predicts nothing; a pipeline using it reduces to pure reconstruction."""

    name = "null"

    def complete(self, grid: SubMapGrid) -> CompletionResult:
        return CompletionResult.empty(grid.anchor)


class HeuristicBackend:
    """Rule-based completion for box-and-slab indoor scenes.

    Rules only fill masked (Unknown) voxels; y is the elevation axis.

    * Occupied voxels (occupancy > 0.5) vote by elevation band relative to the
      occupied extent: bottom 10% floor, top 10% ceiling, else object. Middle
      columns whose occupied voxels span most of the middle band are walls.
    * Floor fill: the busiest bottom-band layer is extended over masked
      voxels inside its horizontal bounding box.
    * Downward extrusion: masked runs directly below a labeled occupied voxel
      (excluding ceiling) and above floor level take that voxel's label.
    * Wall extension: masked voxels with at least two lateral wall
      neighbours become wall.

    Precedence on masked voxels is floor > wall > extrusion.
    """

    name = "heuristic"

    band_fraction = 0.1
    wall_span = 0.6
    conf_floor = 0.6
    conf_wall = 0.5
    conf_extrude = 0.4
    conf_observed = 0.3

    def complete(self, grid: SubMapGrid) -> CompletionResult:
        occ = grid.occupancy > 0.5
        mask = grid.unknown_mask.astype(bool)
        labels = np.zeros(occ.shape, np.uint8)
        conf = np.zeros(occ.shape, np.float32)
        if not occ.any():
            return CompletionResult(grid.anchor, labels, conf)

        ys = np.flatnonzero(occ.any(axis=(0, 2)))
        y_lo, y_hi = int(ys[0]), int(ys[-1])
        band = max(1, int(np.ceil(self.band_fraction * (y_hi - y_lo + 1))))
        y = np.arange(occ.shape[1])
        is_floor_y = y < y_lo + band
        is_ceil_y = (y > y_hi - band) & ~is_floor_y
        middle = ~is_floor_y & ~is_ceil_y

        observed = np.full(occ.shape, L.OBJECT, np.uint8)
        observed[:, is_floor_y, :] = L.FLOOR
        observed[:, is_ceil_y, :] = L.CEILING
        n_mid = int(middle.sum())
        if n_mid:
            span = occ[:, middle, :].sum(axis=1)
            wall_cols = span >= self.wall_span * n_mid
            wall = wall_cols[:, None, :] & middle[None, :, None]
            observed[wall] = L.WALL
        observed[~occ] = 0
        labels[occ] = observed[occ]
        conf[occ] = self.conf_observed

        fill = np.zeros(occ.shape, np.uint8)
        fill_conf = np.zeros(occ.shape, np.float32)

        # floor level: busiest bottom-band layer
        floor_layers = np.flatnonzero(is_floor_y)
        counts = occ[:, floor_layers, :].sum(axis=(0, 2))
        floor_y = int(floor_layers[int(np.argmax(counts))])

        # downward extrusion
        src = (observed != 0) & (observed != L.CEILING)
        carry = np.zeros((occ.shape[0], occ.shape[2]), np.uint8)
        for yy in range(occ.shape[1] - 1, floor_y, -1):
            layer_mask = mask[:, yy, :]
            take = (carry != 0) & layer_mask
            fill[:, yy, :][take] = carry[take]
            fill_conf[:, yy, :][take] = self.conf_extrude
            carry = np.where(src[:, yy, :], observed[:, yy, :],
                             np.where(layer_mask, carry, 0)).astype(np.uint8)

        # wall extension
        wall_occ = (observed == L.WALL).astype(np.int32)
        k = np.zeros((3, 1, 3), np.int32)
        k[0, 0, 1] = k[2, 0, 1] = k[1, 0, 0] = k[1, 0, 2] = 1
        wall_nb = ndimage.correlate(wall_occ, k, mode="constant", cval=0)
        grow = mask & (wall_nb >= 2)
        fill[grow] = L.WALL
        fill_conf[grow] = self.conf_wall

        # floor fill
        if counts.max() > 0:
            layer = occ[:, floor_y, :]
            xs = np.flatnonzero(layer.any(axis=1))
            zs = np.flatnonzero(layer.any(axis=0))
            box = np.zeros(layer.shape, bool)
            box[xs[0]:xs[-1] + 1, zs[0]:zs[-1] + 1] = True
            floor_fill = box & mask[:, floor_y, :]
            fill[:, floor_y, :][floor_fill] = L.FLOOR
            fill_conf[:, floor_y, :][floor_fill] = self.conf_floor

        labels[mask] = fill[mask]
        conf[mask] = fill_conf[mask]
        return CompletionResult(grid.anchor, labels, conf)


class OracleBackend:
    """Returns ground-truth labels cropped at the anchor, confidence 1."""

    name = "oracle"

    def __init__(self, gt):
        self.gt = gt

    def complete(self, grid: SubMapGrid) -> CompletionResult:
        a = grid.anchor
        if not np.isclose(a.voxel_size, self.gt.voxel_size):
            raise ValueError("ground truth and sub-map voxel sizes differ")
        try:
            lab = self.gt.crop(a.voxel_lo, a.shape)
        except ValueError as e:
            raise OutsideGroundTruth(str(e)) from None
        return CompletionResult(a, lab, (lab != 0).astype(np.float32))


def encode_frame(payload: bytes) -> bytes:
    return _HEADER.pack(MAGIC, len(payload)) + payload


def _read_exact(fd: int, n: int, deadline: float | None) -> bytes:
    chunks = []
    while n > 0:
        if deadline is not None:
            left = deadline - time.monotonic()
            if left <= 0 or not select.select([fd], [], [], left)[0]:
                raise CompletionTimeout("external backend timed out")
        chunk = os.read(fd, min(n, 1 << 20))
        if not chunk:
            raise ProtocolError("external backend closed its output")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _write_all(fd: int, data: bytes, deadline: float) -> None:
    view = memoryview(data)
    while view:
        left = deadline - time.monotonic()
        if left <= 0 or not select.select([], [fd], [], left)[1]:
            raise CompletionTimeout("external backend timed out")
        try:
            n = os.write(fd, view[: 1 << 16])
        except BlockingIOError:
            continue
        except BrokenPipeError:
            raise ProtocolError("external backend closed its input") from None
        view = view[n:]


def read_frame(fd: int, deadline: float | None = None) -> bytes:
    """Read one framed message; returns b'' on clean EOF before a header."""
    head = b""
    while len(head) < _HEADER.size:
        if deadline is not None:
            left = deadline - time.monotonic()
            if left <= 0 or not select.select([fd], [], [], left)[0]:
                raise CompletionTimeout("external backend timed out")
        chunk = os.read(fd, _HEADER.size - len(head))
        if not chunk:
            if head:
                raise ProtocolError("truncated frame header")
            return b""
        head += chunk
    magic, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    return _read_exact(fd, length, deadline)


class ExternalBackend:
    """Completion delegated to a persistent child process.

    The child reads framed grid dumps on stdin and answers each with a framed
    labels+confidence payload on stdout. A request that exceeds ``timeout``
    seconds or yields a malformed reply raises a CompletionError; the child
    is then killed and restarted on the next request.
    """

    def __init__(self, command, timeout: float = 1.0, name: str = "external"):
        self.command = list(command)
        self.timeout = timeout
        self.name = name
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, bufsize=0)
            os.set_blocking(self._proc.stdin.fileno(), False)
        return self._proc

    def complete(self, grid: SubMapGrid) -> CompletionResult:
        proc = self._ensure()
        deadline = time.monotonic() + self.timeout
        try:
            _write_all(proc.stdin.fileno(), encode_frame(grid.to_bytes()), deadline)
            payload = read_frame(proc.stdout.fileno(), deadline)
            if not payload:
                raise ProtocolError("external backend closed its output")
            return CompletionResult.from_bytes(payload, grid.anchor)
        except CompletionError:
            self.close()
            raise

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        if proc.poll() is None:
            proc.kill()
        proc.wait()
        for f in (proc.stdin, proc.stdout):
            try:
                f.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def null_backend(grid: SubMapGrid) -> CompletionResult:
    return NullBackend().complete(grid)


def heuristic_backend(grid: SubMapGrid) -> CompletionResult:
    return HeuristicBackend().complete(grid)


def oracle_backend(gt):
    return OracleBackend(gt).complete


def external_backend(command, timeout: float = 1.0):
    return ExternalBackend(command, timeout).complete


__all__ = [
    "MAGIC", "CompletionResult", "CompletionError", "CompletionTimeout", "ProtocolError",
    "OutsideGroundTruth",
    "NullBackend", "HeuristicBackend", "OracleBackend", "ExternalBackend",
    "null_backend", "heuristic_backend", "oracle_backend", "external_backend",
    "encode_frame", "read_frame", "validate_result_arrays",
]
