"""Binary image IO: 8-bit PPM (P6) for display output, float PFM for depth
and panorama data. Gamma 2.2 and clamping live here - everything upstream
stays linear."""

from __future__ import annotations

import numpy as np

GAMMA = 2.2


def linear_to_rgb8(rgb: np.ndarray) -> np.ndarray:
    """Clamp linear radiance to [0,1], gamma-encode, quantize to uint8."""
    clamped = np.clip(rgb, 0.0, 1.0)
    encoded = np.power(clamped, 1.0 / GAMMA)
    return (encoded * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, rgb8: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    if rgb8.dtype != np.uint8 or rgb8.ndim != 3 or rgb8.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8, got {rgb8.dtype} {rgb8.shape}")
    h, w = rgb8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb8.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_pfm(path, image: np.ndarray) -> None:
    """Write (H, W) or (H, W, 3) float data as PFM (little-endian).

    PFM stores rows bottom-to-top; the in-memory convention here is row 0 at
    the top, so rows are flipped on write and unflipped on read.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale -> little endian
        f.write(np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: magic {magic!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = h * w * (3 if magic == b"PF" else 1)
        raw = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    if raw.size != count:
        raise ValueError("truncated PFM payload")
    img = raw.reshape((h, w, 3) if magic == b"PF" else (h, w)).astype(np.float32)
    return np.flipud(img).copy()
