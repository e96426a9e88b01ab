"""Binary wire protocol of the live session (all little-endian).

Server -> client messages, first byte is the tag:

  0x01 frame     tag + the frame-stream layout from `frames` (the upsampled
                 section may be decimated to every k-th particle; the solver
                 section is always complete)
  0x02 manifest  tag, u32 lr_count, u32 hr_count, f32 r_lr, f32 r_hr,
                 u32 decimate, u32 n_bodies, then per body:
                 u32 body_id, u8 kind (0 dynamic, 1 kinematic)

Client -> server:

  0x10 input     tag, u8 command (0 set-target, 1 nudge, 2 pause, 3 resume,
                 4 reset), u32 body_id, f64 timestamp,
                 3*f32 translation, 3*f32 rotation (axis-angle)
                 -- 38 bytes total; translation/rotation are ignored for
                 pause/resume/reset

Nudge translations are clamped to 5 * r_lr per frame on both ends of the
wire so user input cannot outrun the solver's step-size limits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import FrameFormatError
from .frames import FrameRecord, decode_frame, encode_frame

TAG_FRAME = 0x01
TAG_MANIFEST = 0x02
TAG_INPUT = 0x10

CMD_SET_TARGET = 0
CMD_NUDGE = 1
CMD_PAUSE = 2
CMD_RESUME = 3
CMD_RESET = 4

NUDGE_LIMIT_RADII = 5.0

_MANIFEST_HEAD = struct.Struct("<BIIffII")
_MANIFEST_BODY = struct.Struct("<IB")
_INPUT = struct.Struct("<BBId3f3f")


@dataclass
class Manifest:
    lr_count: int
    hr_count: int
    r_lr: float
    r_hr: float
    decimate: int
    bodies: list[tuple[int, int]]  # (body_id, kind)


@dataclass
class InputCommand:
    command: int
    body_id: int
    timestamp: float
    translation: np.ndarray
    rotation: np.ndarray  # axis-angle

    @classmethod
    def nudge(cls, body_id, translation, rotation=(0.0, 0.0, 0.0), timestamp=0.0):
        return cls(CMD_NUDGE, body_id, timestamp,
                   np.asarray(translation, dtype=np.float64),
                   np.asarray(rotation, dtype=np.float64))

    @classmethod
    def simple(cls, command, timestamp=0.0):
        return cls(command, 0, timestamp, np.zeros(3), np.zeros(3))


def decimated_positions(positions: np.ndarray, stride: int) -> np.ndarray:
    """Every stride-th row (stable stride starting at index 0)."""
    if stride <= 1:
        return positions
    return positions[::stride]


def encode_frame_message(record: FrameRecord, decimate: int = 1) -> bytes:
    if decimate > 1:
        record = FrameRecord(
            index=record.index, sim_time=record.sim_time,
            lr_positions=record.lr_positions,
            hr_positions=decimated_positions(record.hr_positions, decimate),
            lr_ms=record.lr_ms, hr_ms=record.hr_ms,
        )
    return bytes([TAG_FRAME]) + encode_frame(record)


def decode_frame_message(data: bytes) -> FrameRecord:
    if not data or data[0] != TAG_FRAME:
        raise FrameFormatError("not a frame message")
    return decode_frame(data[1:], base_offset=1)


def encode_manifest(manifest: Manifest) -> bytes:
    head = _MANIFEST_HEAD.pack(
        TAG_MANIFEST, manifest.lr_count, manifest.hr_count,
        manifest.r_lr, manifest.r_hr, manifest.decimate, len(manifest.bodies),
    )
    return head + b"".join(
        _MANIFEST_BODY.pack(body_id, kind) for body_id, kind in manifest.bodies
    )


def decode_manifest(data: bytes) -> Manifest:
    if len(data) < _MANIFEST_HEAD.size or data[0] != TAG_MANIFEST:
        raise FrameFormatError("not a manifest message")
    tag, lr_n, hr_n, r_lr, r_hr, decimate, n_bodies = _MANIFEST_HEAD.unpack_from(data)
    bodies = []
    off = _MANIFEST_HEAD.size
    for _ in range(n_bodies):
        body_id, kind = _MANIFEST_BODY.unpack_from(data, off)
        bodies.append((body_id, kind))
        off += _MANIFEST_BODY.size
    return Manifest(lr_n, hr_n, r_lr, r_hr, decimate, bodies)


def encode_input(cmd: InputCommand) -> bytes:
    t = np.asarray(cmd.translation, dtype=np.float64).reshape(3)
    r = np.asarray(cmd.rotation, dtype=np.float64).reshape(3)
    return _INPUT.pack(TAG_INPUT, cmd.command, cmd.body_id, cmd.timestamp,
                       t[0], t[1], t[2], r[0], r[1], r[2])


def decode_input(data: bytes) -> InputCommand:
    if len(data) != _INPUT.size or data[0] != TAG_INPUT:
        raise FrameFormatError(f"malformed input command ({len(data)} bytes)")
    (_, command, body_id, timestamp, tx, ty, tz, rx, ry, rz) = _INPUT.unpack(data)
    return InputCommand(command, body_id, timestamp,
                        np.array([tx, ty, tz]), np.array([rx, ry, rz]))


def clamp_nudge(translation: np.ndarray, r_lr: float) -> np.ndarray:
    """Limit a nudge translation to the per-frame step budget."""
    limit = NUDGE_LIMIT_RADII * r_lr
    norm = float(np.linalg.norm(translation))
    if norm <= limit or norm == 0.0:
        return translation
    return translation * (limit / norm)
