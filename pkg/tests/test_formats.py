"""Byte layouts of .flo and DMPW files, images and report validation."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmp.errors import ConfigurationError, FormatError
from dmp.formats import (
    flo_bytes,
    parse_flo,
    parse_weights,
    read_image,
    validate_report,
    weights_bytes,
    write_image,
)

# hand-assembled 2x1 field holding (1.5, -2.0) and (0, 0)
FLO_28 = (b"PIEH" + b"\x02\x00\x00\x00" + b"\x01\x00\x00\x00"
          + b"\x00\x00\xc0\x3f" + b"\x00\x00\x00\xc0" + b"\x00\x00\x00\x00" * 2)


class TestFlo:
    def test_hand_assembled_example(self):
        uv = np.zeros((2, 1, 2), np.float32)
        uv[:, 0, 0] = (1.5, -2.0)
        assert len(FLO_28) == 28
        assert flo_bytes(uv) == FLO_28
        np.testing.assert_array_equal(parse_flo(FLO_28).uv, uv)

    def test_tag_float_is_pieh(self):
        assert struct.pack("<f", 202021.25) == b"PIEH"

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 9), st.integers(0, 9))
    def test_round_trip_bitwise(self, seed, h, w):
        uv = (np.random.default_rng(seed).standard_normal((2, h, w)) * 50).astype(np.float32)
        data = flo_bytes(uv)
        assert len(data) == 12 + 8 * h * w
        back = parse_flo(data).uv
        assert back.tobytes() == uv.tobytes()
        assert flo_bytes(back) == data

    def test_bad_magic_offset_zero(self):
        with pytest.raises(FormatError) as err:
            parse_flo(b"XIEH" + FLO_28[4:])
        assert err.value.offset == 0

    def test_truncated(self):
        with pytest.raises(FormatError):
            parse_flo(FLO_28[:-1])
        with pytest.raises(FormatError):
            parse_flo(FLO_28[:10])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            parse_flo(FLO_28 + b"\x00")

    def test_negative_extent(self):
        with pytest.raises(FormatError) as err:
            parse_flo(b"PIEH" + struct.pack("<ii", -1, 1))
        assert err.value.offset == 4

    def test_bad_shape(self):
        with pytest.raises(ConfigurationError):
            flo_bytes(np.zeros((3, 2, 2)))


def random_params(seed):
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(rng.integers(0, 5)):
        shape = tuple(rng.integers(1, 5, size=rng.integers(0, 4)))
        out[f"layer.{i}.w"] = rng.standard_normal(shape).astype(np.float32)
    return out


class TestWeights:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 2**64 - 1))
    def test_round_trip_bitwise(self, seed, chash):
        params = random_params(seed)
        data = weights_bytes(params, chash)
        back, h = parse_weights(data, chash)
        assert h == chash and list(back) == list(params)
        for k in params:
            assert back[k].shape == params[k].shape
            assert back[k].tobytes() == params[k].tobytes()
        assert weights_bytes(back, h) == data

    def test_size_accounting(self):
        params = {"ab": np.zeros((2, 3), np.float32), "c": np.zeros((), np.float32)}
        data = weights_bytes(params, 7)
        header = 4 + 4 + 8 + 4
        first = 4 + 2 + 2 * 4 + 6 * 4
        second = 4 + 1 + 0 + 1 * 4
        assert len(data) == header + first + second
        assert data[:4] == b"DMPW" and struct.unpack_from("<IQI", data, 4) == (1, 7, 2)

    def test_version_refused(self):
        data = bytearray(weights_bytes({}, 0))
        data[4] = 2
        with pytest.raises(FormatError, match="version"):
            parse_weights(bytes(data))

    def test_hash_refused(self):
        with pytest.raises(ConfigurationError, match="config hash"):
            parse_weights(weights_bytes({}, 1), expected_hash=2)

    def test_bad_magic_and_truncation(self):
        data = weights_bytes({"w": np.ones(3, np.float32)}, 0)
        with pytest.raises(FormatError) as err:
            parse_weights(b"XXXX" + data[4:])
        assert err.value.offset == 0
        with pytest.raises(FormatError, match="truncated"):
            parse_weights(data[:-1])


class TestImages:
    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.float32)
        write_image(tmp_path / "a.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)

    def test_gray_replicated(self, tmp_path):
        from PIL import Image

        Image.fromarray(np.full((3, 4), 9, np.uint8)).save(tmp_path / "g.png")
        out = read_image(tmp_path / "g.png")
        assert out.shape == (3, 4, 3) and (out == 9).all()


class TestReport:
    def test_valid(self):
        validate_report({"aee": 1.0, "pck": {"5px": 50.0}, "valid_pixel_count": 3, "config": {}})

    def test_invalid(self):
        with pytest.raises(FormatError):
            validate_report({"aee": -1.0, "pck": {}, "valid_pixel_count": 3, "config": {}})
        with pytest.raises(FormatError):
            validate_report({"aee": 1.0, "pck": {}, "valid_pixel_count": 3, "config": {}, "extra": 1})
