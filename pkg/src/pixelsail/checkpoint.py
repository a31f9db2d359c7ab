"""Keyed tensor archive used for checkpoints and teacher-feature files.

Layout: a UTF-8 header and a raw float32 payload.

    pixelsail-ckpt-v1
    #<meta-key> <single-line value>        (zero or more)
    <name> <d0>x<d1>x... <byte-offset>     (manifest, one per array)
    <blank line>
    <payload: little-endian float32, concatenated in manifest order>

save(load(x)) is byte-identical because order and metadata are preserved.
"""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError

MAGIC = "pixelsail-ckpt-v1"
F32LE = np.dtype("<f4")


def save_archive(path: str, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if "\n" in value:
            raise CheckpointError(f"meta value for {key!r} must be single-line")
        lines.append(f"#{key} {value}")
    offset = 0
    payload = []
    for name, arr in arrays.items():
        if " " in name:
            raise CheckpointError(f"array name {name!r} may not contain spaces")
        buf = np.ascontiguousarray(arr, dtype=F32LE)
        shape = "x".join(str(d) for d in buf.shape) if buf.ndim else "1"
        lines.append(f"{name} {shape} {offset}")
        payload.append(buf.tobytes())
        offset += buf.nbytes
    header = "\n".join(lines) + "\n\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        for chunk in payload:
            f.write(chunk)


def load_archive(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing blank line after the manifest")
    try:
        header = blob[:sep].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: header is not UTF-8 ({exc})") from exc
    payload = blob[sep + 2 :]
    lines = header.split("\n")
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {lines[0] if lines else ''!r} (want {MAGIC})")

    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            meta[key] = value
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}:{lineno}: malformed manifest line {line!r}")
        name, shape_s, offset_s = parts
        try:
            shape = tuple(int(d) for d in shape_s.split("x"))
            offset = int(offset_s)
        except ValueError as exc:
            raise CheckpointError(f"{path}:{lineno}: bad shape/offset in {line!r}") from exc
        nbytes = int(np.prod(shape)) * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: array {name!r} at offset {offset} ({nbytes} bytes) "
                f"overruns payload of {len(payload)} bytes"
            )
        arrays[name] = (
            np.frombuffer(payload, dtype=F32LE, count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .astype(np.float32)
        )
    return arrays, meta
