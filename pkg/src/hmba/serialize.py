"""Bit-exact tensor files and plain-text parameter directories.

Single-tensor file layout, all little-endian:

    bytes 0..3   magic "HMBA"
    bytes 4..7   u32 format version (currently 1)
    bytes 8..11  u32 ndim
    then         ndim x u64 extents
    then         row-major float64 payload

A parameter directory holds one file per named tensor plus `manifest.txt`
with `name = filename` lines (order defines the load order) and optionally
`config.txt` with the run configuration that built the model.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from hmba.tensor import Tensor

MAGIC = b"HMBA"
VERSION = 1

MANIFEST = "manifest.txt"
CONFIG_FILE = "config.txt"


class FormatError(ValueError):
    """File is not a valid tensor file or directory for this format."""


def write_tensor(path: str | Path, value: Tensor | np.ndarray) -> None:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = struct.pack("<4sII", MAGIC, VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + extents + arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, ndim = struct.unpack_from("<4sII", blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} "
                          "(byteswapped or future file?)")
    offset = 12 + 8 * ndim
    if len(blob) < offset:
        raise FormatError(f"{path}: truncated extent table")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    count = 1
    for s in shape:
        count *= s
    expected = offset + 8 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - offset} bytes, "
            f"extents {tuple(shape)} require {8 * count}")
    arr = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
    return arr.reshape(shape)


def save_params(directory: str | Path,
                named: list[tuple[str, Tensor]],
                config_text: str | None = None) -> None:
    """Write named tensors plus a manifest into `directory` (created fresh)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, tensor) in enumerate(named):
        fname = f"p{i:04d}.tensor"
        write_tensor(directory / fname, tensor)
        lines.append(f"{name} = {fname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    if config_text is not None:
        (directory / CONFIG_FILE).write_text(config_text)


def load_params(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FormatError(f"{directory}: missing {MANIFEST}")
    out: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{manifest}:{lineno}: expected 'name = file'")
        name, fname = (part.strip() for part in line.split("=", 1))
        if name in out:
            raise FormatError(f"{manifest}:{lineno}: duplicate name '{name}'")
        out[name] = read_tensor(directory / fname)
    return out


def load_config_text(directory: str | Path) -> str | None:
    path = Path(directory) / CONFIG_FILE
    return path.read_text() if path.is_file() else None


def restore_params(named: list[tuple[str, Tensor]],
                   loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live tensors, matching by name and shape."""
    live = dict(named)
    missing = sorted(set(live) - set(loaded))
    extra = sorted(set(loaded) - set(live))
    if missing or extra:
        raise FormatError(
            f"parameter name mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in named:
        arr = loaded[name]
        if arr.shape != tensor.shape:
            raise FormatError(
                f"parameter '{name}': file shape {arr.shape} "
                f"!= model shape {tensor.shape}")
        tensor.data = arr.astype(np.float64)
