"""Binary PPM (P6) and PGM (P5) readers/writers, maxval 255."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_token(fh) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise DataError("truncated PNM header")
        if ch.isspace():
            if tok:
                return tok
            continue
        if ch == b"#":
            while fh.read(1) not in (b"\n", b""):
                pass
            continue
        tok += ch


def read_ppm(path) -> np.ndarray:
    """Load a P6 file as HxWx3 float32 in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic != b"P6":
            raise DataError(f"{path}: not a binary PPM (P6) file")
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
        raw = fh.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DataError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    """Write HxWx3 float in [0, 1] (or uint8) as P6."""
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise DataError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an HxW float map as P5, min-max normalized to [0, 255]."""
    lo, hi = float(gray.min()), float(gray.max())
    scale = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)
    img = np.round(scale * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
