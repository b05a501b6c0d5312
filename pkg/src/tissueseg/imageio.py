"""Binary PPM (P6) images and PGM (P5) label maps, 8 bits per sample."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _parse_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, offset of first pixel byte)."""
    if data[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()} at offset 0, found {data[:2]!r}")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"malformed header: expected an integer at offset {start}")
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"malformed header: expected whitespace at offset {pos}")
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval} (header ends at offset {pos})")
    return width, height, maxval, pos + 1


def quantize(image: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to uint8 by rounding."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM writer expects a 3 x H x W image, got {image.shape}")
    pixels = image if image.dtype == np.uint8 else quantize(image)
    _, h, w = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, _, off = _parse_header(data, b"P6")
    need = w * h * 3
    if len(data) - off < need:
        raise FormatError(f"truncated pixel data: need {need} bytes from offset {off}, have {len(data) - off}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=off)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_pgm(label: np.ndarray) -> bytes:
    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"PGM writer expects an H x W label map, got {label.shape}")
    if label.size and (label.min() < 0 or label.max() > 255):
        raise ValueError("label values must fit in 8 bits")
    h, w = label.shape
    return f"P5\n{w} {h}\n255\n".encode() + label.astype(np.uint8).tobytes()


def decode_pgm(data: bytes, num_classes: int | None = None) -> np.ndarray:
    w, h, _, off = _parse_header(data, b"P5")
    if len(data) - off < w * h:
        raise FormatError(f"truncated pixel data: need {w * h} bytes from offset {off}, have {len(data) - off}")
    label = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).astype(np.int64)
    if num_classes is not None and label.size and label.max() >= num_classes:
        raise FormatError(f"label value {label.max()} is not a valid class index for K={num_classes}")
    return label


def write_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_image(path: str | Path) -> np.ndarray:
    """Read a P6 file as a 3 x H x W float array in [0, 1]."""
    return decode_ppm(Path(path).read_bytes())


def write_label(path: str | Path, label: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(label))


def read_label(path: str | Path, num_classes: int | None = None) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes(), num_classes)
