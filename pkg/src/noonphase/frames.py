"""Detector geometry, bit-packed binary frame stacks and the QFRS file format.

QFRS layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"QFRS"
    4       2     format version (uint16)
    6       2     width W (uint16)
    8       2     height Z (uint16)
    10      8     frame count N (uint64)
    18      4     metadata length L (uint32)
    22      L     UTF-8 JSON metadata
    22+L    ...   N frames, ceil(W*Z/8) bytes each

Pixels are stored row-major (index ``y*W + x``); bit 0 of the first byte of a
frame is pixel (0, 0) and bits fill each byte LSB-first.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError

MAGIC = b"QFRS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHQI")

DEFAULT_EXPOSURE_NS = 10.0
DEFAULT_FRAME_RATE_HZ = 96_000.0


@dataclass(frozen=True)
class DetectorGeometry:
    """Sensor layout: the left half sees the D projection, the right half A.

    Parameters
    ----------
    width, height : int
        Sensor size W x Z in pixels. ``width`` must be even.
    pixel_pitch : float
        Micrometres per pixel, used to convert source widths and shear.
    """

    width: int
    height: int
    pixel_pitch: float = 150.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"sensor size must be positive, got {self.width}x{self.height}")
        if self.width % 2:
            raise DataError(f"sensor width must be even, got {self.width}")
        if self.width * self.height < 4:
            raise DataError("sensor must have at least 4 pixels")
        if self.pixel_pitch <= 0:
            raise DataError("pixel_pitch must be positive")

    @property
    def half_split(self) -> int:
        return self.width // 2

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def half_shape(self) -> tuple[int, int]:
        """(rows, cols) of one sensor half."""
        return self.height, self.half_split

    @property
    def frame_bytes(self) -> int:
        return (self.n_pixels + 7) // 8

    def half_pixels(self, side: str) -> np.ndarray:
        """Row-major pixel indices of the ``"left"`` or ``"right"`` half."""
        if side not in ("left", "right"):
            raise ValueError(f"unknown sensor half {side!r}")
        ys, xs = np.mgrid[0 : self.height, 0 : self.half_split]
        if side == "right":
            xs = xs + self.half_split
        return (ys * self.width + xs).ravel()

    def coords(self, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) of row-major pixel indices."""
        index = np.asarray(index)
        return index % self.width, index // self.width


@dataclass
class FrameStack:
    """N binary frames of a W x Z sensor, stored bit-packed.

    ``bits`` has shape ``(N, geometry.frame_bytes)`` and dtype uint8.
    """

    geometry: DetectorGeometry
    bits: np.ndarray
    metadata: dict = field(default_factory=dict)
    _gram: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2 or self.bits.shape[1] != self.geometry.frame_bytes:
            raise DataError(
                f"bit array shape {self.bits.shape} does not match "
                f"{self.geometry.frame_bytes} bytes per frame"
            )
        if self.bits.shape[0] < 1:
            raise DataError("a frame stack needs at least one frame")

    @property
    def n_frames(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def from_dense(cls, frames, geometry: DetectorGeometry | None = None, metadata=None):
        """Pack an ``(N, Z, W)`` or ``(N, W*Z)`` array of 0/1 values."""
        frames = np.asarray(frames)
        if geometry is None:
            if frames.ndim != 3:
                raise DataError("geometry is required for flattened frames")
            geometry = DetectorGeometry(width=frames.shape[2], height=frames.shape[1])
        flat = frames.reshape(frames.shape[0], -1).astype(bool)
        if flat.shape[1] != geometry.n_pixels:
            raise DataError("frame size does not match geometry")
        bits = np.packbits(flat, axis=1, bitorder="little")
        return cls(geometry, bits, dict(metadata or {}))

    @classmethod
    def from_events(cls, frame_idx, pixel_idx, n_frames, geometry, metadata=None):
        """Build a stack from (frame, pixel) detection events; duplicates saturate."""
        dense = np.zeros((n_frames, geometry.n_pixels), dtype=bool)
        dense[np.asarray(frame_idx, dtype=np.int64), np.asarray(pixel_idx, dtype=np.int64)] = True
        bits = np.packbits(dense, axis=1, bitorder="little")
        return cls(geometry, bits, dict(metadata or {}))

    def dense(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Unpacked frames ``[start, stop)`` as an ``(n, W*Z)`` uint8 array."""
        chunk = self.bits[start:stop]
        return np.unpackbits(chunk, axis=1, count=self.geometry.n_pixels, bitorder="little")

    def images(self) -> np.ndarray:
        """All frames as an ``(N, Z, W)`` array (small stacks only)."""
        return self.dense().reshape(self.n_frames, self.geometry.height, self.geometry.width)

    def iter_sparse(self, chunk_frames: int = 65536):
        """Yield ``(start, csr_matrix)`` blocks of at most ``chunk_frames`` frames."""
        for start in range(0, self.n_frames, chunk_frames):
            block = self.dense(start, start + chunk_frames)
            yield start, sp.csr_matrix(block, dtype=np.int64)

    def concat(self, other: "FrameStack") -> "FrameStack":
        if other.geometry != self.geometry:
            raise DataError("cannot concatenate stacks with different geometry")
        return FrameStack(self.geometry, np.concatenate([self.bits, other.bits]), dict(self.metadata))


def _canonical_json(metadata: dict) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(stack: FrameStack) -> bytes:
    geo = stack.geometry
    meta = dict(stack.metadata)
    meta["pixel_pitch"] = geo.pixel_pitch
    meta_bytes = _canonical_json(meta)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, geo.width, geo.height, stack.n_frames, len(meta_bytes))
    return header + meta_bytes + stack.bits.tobytes()


def from_bytes(data: bytes) -> FrameStack:
    if len(data) < _HEADER.size:
        raise DataError("truncated QFRS header")
    magic, version, width, height, n_frames, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataError(f"not a QFRS file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported QFRS version {version}")
    offset = _HEADER.size
    try:
        metadata = json.loads(data[offset : offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad QFRS metadata: {exc}") from exc
    offset += meta_len
    geometry = DetectorGeometry(width, height, float(metadata.get("pixel_pitch", 150.0)))
    payload = np.frombuffer(data, dtype=np.uint8, offset=offset)
    expected = n_frames * geometry.frame_bytes
    if payload.size != expected:
        raise DataError(f"QFRS payload has {payload.size} bytes, expected {expected}")
    bits = payload.reshape(n_frames, geometry.frame_bytes).copy()
    return FrameStack(geometry, bits, metadata)


def write_qfrs(stack: FrameStack, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(stack))
    return path


def read_qfrs(path) -> FrameStack:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing frame stack {path}")
    return from_bytes(path.read_bytes())
