"""Binary PGM (P5) and PPM (P6) readers and writers, 8-bit, maxval 255.

Report images go through these: saliency maps and perturbations as PGM
(min-max normalized for display first), RGB images as PPM. Values are floats
in [0, 1] on the Python side.
"""

from __future__ import annotations

import numpy as np

from .tensorops import Array


def _quantize(arr: Array) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, gray: Array) -> None:
    """Write an HxW map in [0, 1] as binary PGM."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs an HxW map, got shape {tuple(gray.shape)}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(gray).tobytes())


def write_ppm(path, rgb: Array) -> None:
    """Write a 3xHxW image in [0, 1] as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"PPM needs a 3xHxW image, got shape {tuple(rgb.shape)}")
    h, w = rgb.shape[1], rgb.shape[2]
    interleaved = np.moveaxis(_quantize(rgb), 0, 2)  # HxWx3
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(interleaved.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ValueError(f"expected {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PNM header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    return w, h


def read_pgm(path) -> Array:
    """Read a binary PGM into an HxW float map in [0, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        data = fh.read(w * h)
        if len(data) != w * h:
            raise ValueError("truncated PGM pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def read_ppm(path) -> Array:
    """Read a binary PPM into a 3xHxW float image in [0, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        data = fh.read(3 * w * h)
        if len(data) != 3 * w * h:
            raise ValueError("truncated PPM pixel data")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return np.moveaxis(arr, 2, 0).astype(np.float64) / 255.0
