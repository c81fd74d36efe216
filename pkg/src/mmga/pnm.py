"""Binary PGM (P5) and PPM (P6) readers and writers.

Label maps travel as P5 with values 0-19; images as P6; masks and attention
heatmaps are exported as P5 scaled to 0-255.  Only maxval 255 is supported.
"""

from __future__ import annotations

import os

import numpy as np


class PnmError(ValueError):
    pass


def _read_header_tokens(raw: bytes, count: int) -> tuple[list[int], int]:
    """Parse `count` whitespace/comment-separated integers after the magic."""
    tokens: list[int] = []
    i = 2  # past the 2-byte magic
    while len(tokens) < count:
        if i >= len(raw):
            raise PnmError("truncated header")
        ch = raw[i : i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif ch.isdigit():
            j = i
            while j < len(raw) and raw[j : j + 1].isdigit():
                j += 1
            tokens.append(int(raw[i:j]))
            i = j
        else:
            raise PnmError(f"unexpected byte {ch!r} in header")
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise PnmError("missing whitespace after maxval")
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    """Load P5 as (H, W) uint8 or P6 as (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}, need binary P5 or P6")
    (width, height, maxval), offset = _read_header_tokens(raw, 3)
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = raw[offset : offset + expected]
    if len(payload) != expected:
        raise PnmError(f"payload holds {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(np.uint8).tobytes())
    os.replace(tmp, path)


def write_pgm(path, arr: np.ndarray) -> None:
    if arr.ndim != 2:
        raise PnmError(f"PGM wants a 2-d array, got shape {arr.shape}")
    _write(path, b"P5", arr)


def write_ppm(path, arr: np.ndarray) -> None:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PnmError(f"PPM wants an (H, W, 3) array, got shape {arr.shape}")
    _write(path, b"P6", arr)
