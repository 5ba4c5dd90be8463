"""Byte-exact file formats: Middlebury .flo, DMPW weight files, images and JSON reports."""

from __future__ import annotations

import json
import os
import struct
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .matcher import FlowField

FLO_TAG = 202021.25
FLO_MAGIC = b"PIEH"

WEIGHTS_MAGIC = b"DMPW"
WEIGHTS_VERSION = 1
# magic, u32 version, u64 config hash, u32 parameter count
_WEIGHTS_HEADER = struct.Struct("<4sIQI")


# ---------------------------------------------------------------- .flo


def flo_bytes(flow) -> bytes:
    """Serialise a (2, H, W) flow as a little-endian Middlebury .flo payload."""
    uv = np.asarray(getattr(flow, "uv", flow), dtype=np.float32)
    if uv.ndim != 3 or uv.shape[0] != 2:
        raise ConfigurationError(f"flow must have shape (2, H, W), got {uv.shape}")
    h, w = uv.shape[1:]
    if h >= 2**31 or w >= 2**31:
        raise ConfigurationError("flow is too large for the .flo format")
    head = struct.pack("<fii", FLO_TAG, w, h)
    return head + uv.transpose(1, 2, 0).astype("<f4").tobytes()


def parse_flo(data: bytes) -> FlowField:
    if len(data) < 4:
        raise FormatError("truncated .flo tag", len(data))
    if data[:4] != FLO_MAGIC:
        raise FormatError(f"bad .flo tag {data[:4]!r}, expected {FLO_MAGIC!r}", 0)
    if len(data) < 12:
        raise FormatError("truncated .flo header", len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    if w < 0:
        raise FormatError(f"negative width {w}", 4)
    if h < 0:
        raise FormatError(f"negative height {h}", 8)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FormatError(f"truncated .flo payload: need {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise FormatError(f"{len(data) - need} trailing bytes after .flo payload", need)
    uv = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(uv.transpose(2, 0, 1).astype(np.float32))


def write_flo(path, flow) -> None:
    Path(path).write_bytes(flo_bytes(flow))


def read_flo(path) -> FlowField:
    return parse_flo(Path(path).read_bytes())


# ---------------------------------------------------------------- weights


def weights_bytes(params: dict, config_hash: int, version: int = WEIGHTS_VERSION) -> bytes:
    """DMPW container: header, then per parameter name, rank, extents and float32 data."""
    parts = [_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, version, int(config_hash) & (2**64 - 1), len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype=np.float32)
        raw = name.encode("utf-8")
        if len(raw) >= 2**16 or arr.ndim >= 2**16:
            raise ConfigurationError(f"parameter '{name}' cannot be encoded")
        parts.append(struct.pack("<HH", len(raw), arr.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    return b"".join(parts)


def parse_weights(data: bytes, expected_hash: int | None = None) -> tuple[dict, int]:
    """Parse a DMPW file into ``({name: array}, config_hash)``.

    Refuses other format versions and, when ``expected_hash`` is given, files
    written for a different configuration.
    """
    if len(data) < 4 or data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad weight-file magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}", 0)
    if len(data) < _WEIGHTS_HEADER.size:
        raise FormatError("truncated weight-file header", len(data))
    _, version, chash, count = _WEIGHTS_HEADER.unpack_from(data, 0)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight-file version {version} (this build reads {WEIGHTS_VERSION})", 4)
    if expected_hash is not None and chash != (int(expected_hash) & (2**64 - 1)):
        raise ConfigurationError(
            f"weight file was written for config hash {chash:016x}, current config is {int(expected_hash):016x}")
    pos = _WEIGHTS_HEADER.size
    out = {}
    for _ in range(count):
        if pos + 4 > len(data):
            raise FormatError("truncated parameter header", pos)
        nlen, rank = struct.unpack_from("<HH", data, pos)
        pos += 4
        if pos + nlen + 4 * rank > len(data):
            raise FormatError("truncated parameter name or extents", pos)
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8", pos) from exc
        pos += nlen
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * n > len(data):
            raise FormatError(f"truncated payload of parameter '{name}'", pos)
        out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last parameter", pos)
    return out, chash


def write_weights(path, params: dict, config_hash: int) -> None:
    Path(path).write_bytes(weights_bytes(params, config_hash))


def read_weights(path, expected_hash: int | None = None) -> tuple[dict, int]:
    return parse_weights(Path(path).read_bytes(), expected_hash)


# ---------------------------------------------------------------- images


def read_image(path) -> np.ndarray:
    """PNG or binary PPM as a float32 (H, W, 3) array in [0, 255]; gray is replicated."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I", "I;16", "F"):
                arr = np.asarray(im.convert("F"), dtype=np.float32)
                if im.mode != "L":
                    arr = arr * (255.0 / max(float(arr.max()), 1.0))
                return np.repeat(arr[:, :, None], 3, axis=2)
            return np.asarray(im.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot read image {os.fspath(path)!r}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Boolean mask from an image: nonzero pixels are valid."""
    return read_image(path).max(axis=2) > 0


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------- reports


def report_schema() -> dict:
    return json.loads(resources.files("dmp").joinpath("schemas/report.schema.json").read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(report, report_schema())
    except jsonschema.ValidationError as exc:
        raise FormatError(f"report does not match schema: {exc.message}") from exc


def write_json(path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
