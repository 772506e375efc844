import numpy as np
import pytest

from modvid.clip_io import (
    ClipManifest,
    read_float_clip,
    read_int_clip,
    read_manifest,
    read_pfm,
    read_pgm16,
    validate_manifest,
    write_float_clip,
    write_int_clip,
    write_manifest,
    write_pfm,
    write_pgm16,
)
from modvid.errors import FormatError, InvalidData, ValidationError
from modvid.modulo_core import IntClip


class TestPfm:
    def test_gray_round_trip(self):
        rng = np.random.default_rng(0)
        frame = rng.normal(size=(5, 7)).astype(np.float32)
        assert np.array_equal(read_pfm(write_pfm(frame)), frame)

    def test_color_round_trip(self):
        rng = np.random.default_rng(1)
        frame = rng.normal(size=(4, 6, 3)).astype(np.float32)
        assert np.array_equal(read_pfm(write_pfm(frame)), frame)

    def test_header_bytes(self):
        frame = np.zeros((3, 4), dtype=np.float32)  # 4 wide, 3 tall
        data = write_pfm(frame)
        assert data.startswith(b"Pf\n4 3\n-1.0\n")

    def test_rows_bottom_to_top(self):
        frame = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        data = write_pfm(frame)
        payload = data[len(b"Pf\n2 2\n-1.0\n") :]
        first_row = np.frombuffer(payload[:8], dtype="<f4")
        assert first_row.tolist() == [3.0, 4.0]  # bottom row first

    def test_channel_mismatch(self):
        color = write_pfm(np.zeros((2, 2, 3), dtype=np.float32))
        with pytest.raises(FormatError):
            read_pfm(color, expect_channels=1)

    def test_truncated_payload_reports_offset(self):
        data = write_pfm(np.ones((4, 4), dtype=np.float32))
        with pytest.raises(FormatError) as err:
            read_pfm(data[:-8])
        assert err.value.offset == len(data) - 8

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            read_pfm(b"XX\n2 2\n-1.0\n" + b"\0" * 32)

    def test_big_endian_scale_honored(self):
        frame = np.array([[1.5, -2.5]], dtype=np.float32)
        data = b"Pf\n2 1\n1.0\n" + frame.astype(">f4").tobytes()
        assert np.array_equal(read_pfm(data), frame)


class TestPgm16:
    def test_round_trip_random_12bit(self):
        rng = np.random.default_rng(2)
        frame = rng.integers(0, 4096, size=(9, 5))
        assert np.array_equal(read_pgm16(write_pgm16(frame)), frame)

    def test_maxval_line_fixed(self):
        data = write_pgm16(np.zeros((2, 3), dtype=np.int64))
        assert data.startswith(b"P5\n3 2\n65535\n")

    def test_mask_values_round_trip(self):
        mask = np.array([[0, 1], [1, 0]], dtype=np.int64)
        assert np.array_equal(read_pgm16(write_pgm16(mask)), mask)

    def test_value_over_maxval_rejected(self):
        with pytest.raises(InvalidData):
            write_pgm16(np.array([[70000]], dtype=np.int64))

    def test_negative_rejected(self):
        with pytest.raises(InvalidData):
            write_pgm16(np.array([[-1]], dtype=np.int64))

    def test_truncated_payload(self):
        data = write_pgm16(np.ones((4, 4), dtype=np.int64))
        with pytest.raises(FormatError):
            read_pgm16(data[:-2])


class TestManifest:
    def make(self):
        return ClipManifest(
            fmt="pgm16",
            width=4,
            height=3,
            channels=1,
            frame_count=2,
            files=["f_0000.pgm", "f_0001.pgm"],
            bit_depth=12,
            bits_a=8,
            bits_b=12,
            extra={"seed": "77", "note": "hello world"},
        )

    def test_round_trip(self):
        m = self.make()
        back = read_manifest(write_manifest(m))
        assert back == m

    def test_unknown_keys_preserved(self):
        text = write_manifest(self.make())
        text = text.replace("frames:", "custom_key: kept\nframes:")
        back = read_manifest(text)
        assert back.extra["custom_key"] == "kept"
        assert "custom_key: kept" in write_manifest(back)

    def test_missing_required_key(self):
        text = write_manifest(self.make()).replace("width: 4\n", "")
        with pytest.raises(ValidationError):
            read_manifest(text)

    def test_bits_a_not_below_bits_b_rejected(self):
        text = write_manifest(self.make()).replace("bits_a: 8", "bits_a: 12")
        with pytest.raises(ValidationError):
            read_manifest(text)

    def test_missing_file_named_in_error(self, tmp_path):
        m = self.make()
        (tmp_path / "f_0000.pgm").write_bytes(write_pgm16(np.zeros((3, 4), dtype=np.int64)))
        with pytest.raises(ValidationError, match="f_0001.pgm"):
            validate_manifest(m, tmp_path)

    def test_dimension_mismatch_detected(self, tmp_path):
        m = self.make()
        good = write_pgm16(np.zeros((3, 4), dtype=np.int64))
        bad = write_pgm16(np.zeros((4, 4), dtype=np.int64))
        (tmp_path / "f_0000.pgm").write_bytes(good)
        (tmp_path / "f_0001.pgm").write_bytes(bad)
        with pytest.raises(ValidationError, match="f_0001.pgm"):
            validate_manifest(m, tmp_path)


class TestClipHelpers:
    def test_int_clip_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        clip = IntClip(rng.integers(0, 4096, size=(3, 6, 5, 1)), 12)
        manifest = write_int_clip(tmp_path, "gt", clip, bits_a=8, bits_b=12)
        back = read_int_clip(manifest)
        assert np.array_equal(back.frames, clip.frames)
        assert back.bit_depth == 12

    def test_multichannel_int_clip(self, tmp_path):
        rng = np.random.default_rng(4)
        clip = IntClip(rng.integers(0, 256, size=(2, 4, 4, 3)), 8)
        manifest = write_int_clip(tmp_path, "rgb", clip)
        back = read_int_clip(manifest)
        assert np.array_equal(back.frames, clip.frames)

    def test_float_clip_round_trip_at_f32(self, tmp_path):
        rng = np.random.default_rng(5)
        frames = rng.uniform(0, 1e4, size=(3, 5, 4, 1)).astype(np.float32)
        manifest = write_float_clip(tmp_path, "hdr", frames.astype(np.float64))
        back = read_float_clip(manifest)
        assert np.array_equal(back.astype(np.float32), frames)
