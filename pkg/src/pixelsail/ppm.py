"""Binary PPM (P6, maxval 255) read/write for images on disk."""

import numpy as np

from .errors import DataError


def write_ppm(path: str, image: np.ndarray) -> None:
    """image (3,H,W) uint8."""
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise DataError(f"write_ppm needs uint8 (3,H,W), got {image.dtype} {image.shape}")
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Returns (3,H,W) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a P6 PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raw = data[pos : pos + 3 * w * h]
    if len(raw) != 3 * w * h:
        raise DataError(f"{path}: payload has {len(raw)} bytes, expected {3 * w * h}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()
