"""Binary frame stream: one record per upsampling step.

Little-endian layout per frame:

    magic   4 bytes  "GKF1"
    index   u32      frame index (first emitted frame is 1)
    time    f64      simulated time, seconds
    lr_n    u32      solver particle count
    hr_n    u32      upsampled particle count
    lr_pos  lr_n * 3 * f32
    hr_pos  hr_n * 3 * f32
    lr_ms   f32      solver wall time spent on this frame
    hr_ms   f32      upsampling wall time spent on this frame

Counts stay constant across the frames of one run. Writes are flushed per
frame so a crashed run leaves whole frames behind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FrameFormatError

MAGIC = b"GKF1"
_HEAD = struct.Struct("<4sIdII")
_TAIL = struct.Struct("<ff")


@dataclass
class FrameRecord:
    index: int
    sim_time: float
    lr_positions: np.ndarray  # (n, 3) float32
    hr_positions: np.ndarray  # (m, 3) float32
    lr_ms: float
    hr_ms: float

    @classmethod
    def capture(cls, index, sim_time, lr_positions, hr_positions, lr_ms, hr_ms):
        return cls(
            index=int(index),
            sim_time=float(sim_time),
            lr_positions=np.ascontiguousarray(lr_positions, dtype="<f4").reshape(-1, 3),
            hr_positions=np.ascontiguousarray(hr_positions, dtype="<f4").reshape(-1, 3),
            lr_ms=float(lr_ms),
            hr_ms=float(hr_ms),
        )


def frame_size(lr_count: int, hr_count: int) -> int:
    return _HEAD.size + 12 * (lr_count + hr_count) + _TAIL.size


def encode_frame(record: FrameRecord) -> bytes:
    lr = np.ascontiguousarray(record.lr_positions, dtype="<f4")
    hr = np.ascontiguousarray(record.hr_positions, dtype="<f4")
    return b"".join([
        _HEAD.pack(MAGIC, record.index, record.sim_time, lr.shape[0], hr.shape[0]),
        lr.tobytes(),
        hr.tobytes(),
        _TAIL.pack(record.lr_ms, record.hr_ms),
    ])


def decode_frame(buf: bytes, base_offset: int = 0) -> FrameRecord:
    """Decode one frame from a complete buffer; raises on any truncation."""
    if len(buf) < _HEAD.size:
        raise FrameFormatError(f"truncated frame header at byte {base_offset}")
    magic, index, sim_time, lr_n, hr_n = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FrameFormatError(f"bad frame magic {magic!r} at byte {base_offset}")
    need = frame_size(lr_n, hr_n)
    if len(buf) < need:
        raise FrameFormatError(
            f"truncated frame payload at byte {base_offset + len(buf)} "
            f"(expected {need} bytes from offset {base_offset})"
        )
    off = _HEAD.size
    lr = np.frombuffer(buf, dtype="<f4", count=lr_n * 3, offset=off).reshape(lr_n, 3)
    off += lr_n * 12
    hr = np.frombuffer(buf, dtype="<f4", count=hr_n * 3, offset=off).reshape(hr_n, 3)
    off += hr_n * 12
    lr_ms, hr_ms = _TAIL.unpack_from(buf, off)
    return FrameRecord(index=index, sim_time=sim_time,
                       lr_positions=lr.copy(), hr_positions=hr.copy(),
                       lr_ms=lr_ms, hr_ms=hr_ms)


def write_frame(record: FrameRecord, sink) -> None:
    """Append one frame to an open binary sink and flush it."""
    sink.write(encode_frame(record))
    sink.flush()


def read_frame(fh) -> FrameRecord | None:
    """Read the next frame from an open binary stream; None at clean EOF."""
    offset = fh.tell()
    head = fh.read(_HEAD.size)
    if not head:
        return None
    if len(head) < _HEAD.size:
        raise FrameFormatError(f"truncated frame header at byte {offset + len(head)}")
    magic, index, sim_time, lr_n, hr_n = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FrameFormatError(f"bad frame magic {magic!r} at byte {offset}")
    body = fh.read(frame_size(lr_n, hr_n) - _HEAD.size)
    return decode_frame(head + body, base_offset=offset)


def read_frames(path) -> list[FrameRecord]:
    frames = []
    with open(path, "rb") as fh:
        while True:
            rec = read_frame(fh)
            if rec is None:
                return frames
            frames.append(rec)


def write_ply(path, positions) -> None:
    """ASCII point-cloud PLY export (interchange escape hatch)."""
    pos = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pos)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for p in pos:
            fh.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n")
