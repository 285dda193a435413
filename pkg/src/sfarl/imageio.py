"""Image and kernel file I/O.

Images are exchanged as PNG (8- or 16-bit) or PGM; values map linearly between
[0, 1] and the integer range. Grayscale datasets default to 16-bit PNG so that
synthesis round-trips are lossless at training precision. Kernels travel as
plain-text grids, one row of decimals per line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PilImage


def save_image(path, arr: np.ndarray, bits: int = 16) -> None:
    path = Path(path)
    arr = np.asarray(arr, dtype=np.float64)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    clipped = np.clip(arr, 0.0, 1.0)
    if path.suffix.lower() == ".pgm":
        _save_pgm(path, clipped, bits)
        return
    if arr.ndim == 3:
        data = np.round(clipped * 255.0).astype(np.uint8)
        PilImage.fromarray(data, mode="RGB").save(path)
        return
    if bits == 8:
        PilImage.fromarray(np.round(clipped * 255.0).astype(np.uint8), mode="L").save(path)
    else:
        PilImage.fromarray(np.round(clipped * 65535.0).astype(np.uint16)).save(path)


def load_image(path) -> np.ndarray:
    """Load PNG or PGM as float64 on [0, 1]; color stays (H, W, 3)."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _load_pgm(path)
    img = PilImage.open(path)
    data = np.asarray(img)
    if data.dtype == np.uint8:
        scale = 255.0
    elif data.dtype in (np.uint16, np.int32):
        scale = 65535.0
    else:
        raise ValueError(f"unsupported image dtype {data.dtype} in {path}")
    data = data.astype(np.float64) / scale
    if data.ndim == 3 and data.shape[2] == 4:
        data = data[:, :, :3]
    return data


def _save_pgm(path: Path, arr: np.ndarray, bits: int) -> None:
    if arr.ndim != 2:
        raise ValueError("PGM supports grayscale only")
    maxval = 255 if bits == 8 else 65535
    data = np.round(arr * maxval).astype(">u1" if bits == 8 else ">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode())
        fh.write(data.tobytes())


def _load_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    if magic == b"P5":
        dtype = ">u2" if maxval > 255 else ">u1"
        data = np.frombuffer(blob, dtype=dtype, count=width * height, offset=pos)
    elif magic == b"P2":
        tokens = blob[pos:].split()
        data = np.array(tokens[:width * height], dtype=np.float64)
    else:
        raise ValueError(f"unsupported PGM magic {magic!r}")
    return data.astype(np.float64).reshape(height, width) / maxval


def save_kernel_txt(path, kernel: np.ndarray) -> None:
    np.savetxt(path, np.asarray(kernel, dtype=np.float64), fmt="%.17g")


def load_kernel_txt(path) -> np.ndarray:
    k = np.loadtxt(path, dtype=np.float64)
    if k.ndim == 0:
        k = k.reshape(1, 1)
    return k
