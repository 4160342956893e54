"""Binary PPM (P6) and PGM (P5) reading and writing.

Images travel through the model in [-1, 1] float32, channels first.
Quantization to bytes is q = clamp(round((v + 1) * 127.5), 0, 255) with
round-half-up, and dequantization is v = q / 127.5 - 1; the pair is chosen
so save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import os

import numpy as np


def quantize(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float array -> uint8, rounding halves up."""
    q = np.floor((np.asarray(img, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def save_ppm(path, img: np.ndarray) -> None:
    """Write a [3, H, W] float image in [-1, 1] (or [H, W, 3] uint8) as binary PPM."""
    if img.dtype == np.uint8:
        raw = img if img.ndim == 3 and img.shape[2] == 3 else img.transpose(1, 2, 0)
    else:
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] float image, got shape {img.shape}")
        raw = quantize(img).transpose(1, 2, 0)
    h, w = raw.shape[0], raw.shape[1]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(raw).tobytes())


def save_pgm(path, img: np.ndarray) -> None:
    """Write a [H, W] uint8 array as binary PGM."""
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError(f"expected [H, W] uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def _read_header(f, magic: bytes, path):
    got = f.read(2)
    if got != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, found {got!r}")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError(f"{path}: truncated header")
        body = line.split(b"#", 1)[0]
        fields.extend(body.split())
    w, h, maxval = (int(x) for x in fields[:3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, found {maxval}")
    return w, h


def load_ppm(path) -> np.ndarray:
    """Read binary PPM into a [3, H, W] float32 image in [-1, 1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6", path)
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return dequantize(arr.transpose(2, 0, 1))


def load_pgm(path) -> np.ndarray:
    """Read binary PGM into a [H, W] uint8 array."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5", path)
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
