"""Wire-protocol tests; also (re)generates the golden fixtures the viewer
tests decode, and checks the committed fixtures never drift."""

import numpy as np
import pytest

from grainsim import FrameFormatError
from grainsim.frames import FrameRecord
from grainsim.protocol import (
    CMD_NUDGE,
    CMD_PAUSE,
    CMD_SET_TARGET,
    Manifest,
    InputCommand,
    clamp_nudge,
    decode_frame_message,
    decode_input,
    decode_manifest,
    encode_frame_message,
    encode_input,
    encode_manifest,
)


def golden_record():
    lr = np.array([[0.0, 0.125, -1.0], [1.5, 2.5, 3.5]], dtype=np.float32)
    hr = np.arange(30, dtype=np.float32).reshape(10, 3) / 8.0
    return FrameRecord.capture(3, 3 * 0.0167, lr, hr, lr_ms=2.0, hr_ms=1.0)


def golden_manifest():
    return Manifest(lr_count=2, hr_count=10, r_lr=0.03, r_hr=0.01,
                    decimate=1, bodies=[(0, 1), (1, 0)])


def golden_commands():
    return [
        InputCommand.nudge(0, [0.1, 0.0, 0.0], timestamp=12.5),
        InputCommand(CMD_SET_TARGET, 1, 0.25, np.array([0.5, 0.25, -0.5]),
                     np.array([0.0, 1.5707964, 0.0])),
        InputCommand.simple(CMD_PAUSE, timestamp=99.0),
    ]


class TestFrameMessage:
    def test_full_wraps_frame_bytes(self):
        rec = golden_record()
        msg = encode_frame_message(rec)
        assert msg[0] == 0x01
        out = decode_frame_message(msg)
        assert out.index == rec.index
        assert np.array_equal(out.hr_positions, rec.hr_positions)
        assert np.array_equal(out.lr_positions, rec.lr_positions)

    def test_decimated_stride(self):
        rec = golden_record()
        out = decode_frame_message(encode_frame_message(rec, decimate=4))
        assert np.array_equal(out.hr_positions, rec.hr_positions[::4])
        assert np.array_equal(out.lr_positions, rec.lr_positions)  # always full

    def test_decimate_one_is_identity(self):
        rec = golden_record()
        assert encode_frame_message(rec, 1) == encode_frame_message(rec)

    def test_reject_non_frame(self):
        with pytest.raises(FrameFormatError):
            decode_frame_message(b"\x02junk")


class TestManifest:
    def test_round_trip(self):
        m = golden_manifest()
        out = decode_manifest(encode_manifest(m))
        assert out.lr_count == 2 and out.hr_count == 10
        assert out.r_lr == np.float32(0.03) and out.r_hr == np.float32(0.01)
        assert out.bodies == [(0, 1), (1, 0)]


class TestInputCommands:
    def test_fixed_length(self):
        for cmd in golden_commands():
            assert len(encode_input(cmd)) == 38

    def test_round_trip(self):
        for cmd in golden_commands():
            out = decode_input(encode_input(cmd))
            assert out.command == cmd.command
            assert out.body_id == cmd.body_id
            assert out.timestamp == cmd.timestamp
            assert np.allclose(out.translation, cmd.translation, atol=1e-7)
            assert np.allclose(out.rotation, cmd.rotation, atol=1e-7)

    def test_malformed_rejected(self):
        with pytest.raises(FrameFormatError):
            decode_input(b"\x10short")

    def test_nudge_clamp(self):
        r_lr = 0.03
        small = clamp_nudge(np.array([0.05, 0, 0]), r_lr)
        assert np.allclose(small, [0.05, 0, 0])  # under 5 r
        big = clamp_nudge(np.array([3.0, 4.0, 0.0]), r_lr)
        assert np.linalg.norm(big) == pytest.approx(5 * r_lr)
        assert np.allclose(big / np.linalg.norm(big), [0.6, 0.8, 0.0])


class TestGoldenFixtures:
    """Byte'd fixtures shared with the viewer's decoder tests."""

    def test_fixtures_stable(self, golden_dir):
        blobs = {
            "frame_full.bin": encode_frame_message(golden_record()),
            "frame_decimated4.bin": encode_frame_message(golden_record(), 4),
            "manifest.bin": encode_manifest(golden_manifest()),
            "command_nudge.bin": encode_input(golden_commands()[0]),
            "command_set_target.bin": encode_input(golden_commands()[1]),
            "command_pause.bin": encode_input(golden_commands()[2]),
        }
        for name, blob in blobs.items():
            path = golden_dir / name
            if path.exists():
                assert path.read_bytes() == blob, f"golden fixture drifted: {name}"
            else:
                path.write_bytes(blob)
