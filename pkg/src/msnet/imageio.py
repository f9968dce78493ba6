"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255.

Images are held as float arrays in [0, 1]: colour images as 3 x H x W,
grayscale maps and masks as 1 x H x W.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte offset {pos}")
    return buf[start:pos], pos


def parse_pnm(buf: bytes, expect: bytes | None = None) -> np.ndarray:
    """Decode a P5/P6 byte string into a uint8 array (H x W or H x W x 3)."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic at byte offset 0: {buf[:2]!r} (expected P5 or P6)")
    magic = buf[:2]
    if expect is not None and magic != expect:
        raise ImageFormatError(f"expected {expect.decode()} file, found {magic.decode()} at byte offset 0")
    pos = 2
    values = []
    for field in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"invalid {field} {tok!r} near byte offset {start}")
        values.append(int(tok))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"non-positive image size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes from byte offset {pos}, "
                               f"got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    tmp.replace(path)


def _read(path, expect: bytes) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return parse_pnm(buf, expect)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """3 x H x W float image in [0, 1]."""
    return _read(path, b"P6").transpose(2, 0, 1).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    _atomic_write(path, encode_pnm(to_uint8(np.asarray(image).transpose(1, 2, 0))))


def read_gray(path) -> np.ndarray:
    """1 x H x W float map in [0, 1]."""
    return (_read(path, b"P5").astype(np.float64) / 255.0)[None]


def write_gray(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    _atomic_write(path, encode_pnm(to_uint8(values.reshape(values.shape[-2:]))))


def read_mask(path) -> np.ndarray:
    """1 x H x W binary mask; stored values >= 128 count as foreground."""
    return (_read(path, b"P5") >= 128).astype(np.float64)[None]


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    _atomic_write(path, encode_pnm(np.where(mask.reshape(mask.shape[-2:]) > 0, 255, 0)))
