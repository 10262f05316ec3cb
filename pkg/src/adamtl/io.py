"""Binary PGM/PPM readers and writers (maxval 255)."""
from __future__ import annotations

import numpy as np


def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.clip(img, 0, 255).astype(np.uint8).tobytes())


def write_ppm(path: str, img: np.ndarray) -> None:
    """``img`` is [H, W, 3] uint8 or [3, H, W] float in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3 and img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).transpose(1, 2, 0)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.astype(np.uint8).tobytes())


def _read_netpbm(path: str, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, got {fields[0]!r}")
    w, h = int(fields[1]), int(fields[2])
    return w, h, data[pos + 1:]


def read_pgm(path: str) -> np.ndarray:
    w, h, raw = _read_netpbm(path, b"P5")
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w)


def read_ppm(path: str) -> np.ndarray:
    w, h, raw = _read_netpbm(path, b"P6")
    return np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
