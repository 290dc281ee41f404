"""Binary containers for denoiser weights and image sets, plus 8-bit PGM exchange.

Both containers share one layout::

    magic (8 bytes) | version u32 | meta length u32 | meta (UTF-8 JSON)
    | array count u32 | per array: ndim u32, dims u32 * ndim, float64 data
    | checksum (8 bytes)

All integers and floats are little-endian.  The checksum is an 8-byte BLAKE2b
digest of every preceding byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams
from .numerics import ConvKernel

CHECKPOINT_MAGIC = b"PNPTTT01"
DATASET_MAGIC = b"PNPTDS01"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8

_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """A container is truncated, has the wrong magic or version, or fails its checksum."""


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def encode_container(magic: bytes, meta: dict, arrays: list[np.ndarray]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta_bytes)), meta_bytes, _U32.pack(len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=_F64)
        parts.append(_U32.pack(a.ndim))
        parts.extend(_U32.pack(d) for d in a.shape)
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def decode_container(data: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict, list[np.ndarray]]:
    if len(data) < len(magic) + 3 * _U32.size + CHECKSUM_BYTES:
        raise FormatError(f"{source}: file too short")
    if data[: len(magic)] != magic:
        raise FormatError(f"{source}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
    body, stored = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if _digest(body) != stored:
        raise FormatError(f"{source}: checksum mismatch")
    pos = len(magic)

    def u32():
        nonlocal pos
        if pos + _U32.size > len(body):
            raise FormatError(f"{source}: truncated header")
        (v,) = _U32.unpack_from(body, pos)
        pos += _U32.size
        return v

    version = u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    n = u32()
    meta = json.loads(body[pos : pos + n].decode())
    pos += n
    arrays = []
    for _ in range(u32()):
        shape = tuple(u32() for _ in range(u32()))
        nbytes = int(np.prod(shape, dtype=np.int64)) * _F64.itemsize
        if pos + nbytes > len(body):
            raise FormatError(f"{source}: truncated array data")
        arrays.append(np.frombuffer(body, dtype=_F64, count=nbytes // _F64.itemsize, offset=pos).reshape(shape).astype(np.float64))
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{source}: {len(body) - pos} trailing bytes")
    return meta, arrays


def _write(path, data: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def _read(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from e


# -- checkpoints -----------------------------------------------------------------


def encode_checkpoint(params: DenoiserParams, extra: dict | None = None) -> bytes:
    meta = {"denoiser": dataclasses.asdict(params.config), "num_layers": len(params.layers)}
    if extra:
        meta["extra"] = extra
    arrays = []
    for k, u in zip(params.layers, params.sn_state):
        arrays += [k.weight, k.bias, u]
    return encode_container(CHECKPOINT_MAGIC, meta, arrays)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> tuple[DenoiserParams, dict]:
    meta, arrays = decode_container(data, CHECKPOINT_MAGIC, source)
    n = meta.get("num_layers")
    if n is None or len(arrays) != 3 * n:
        raise FormatError(f"{source}: expected 3 arrays per layer")
    config = DenoiserConfig(**meta["denoiser"])
    layers = [ConvKernel(arrays[3 * i], arrays[3 * i + 1]) for i in range(n)]
    state = [arrays[3 * i + 2] for i in range(n)]
    if [k.shape for k in layers] != [tuple(s) for s in config.layer_shapes()]:
        raise FormatError(f"{source}: layer shapes do not match the stored config")
    return DenoiserParams(layers, state, config), meta.get("extra", {})


def save_checkpoint(path, params: DenoiserParams, extra: dict | None = None) -> Path:
    return _write(path, encode_checkpoint(params, extra))


def load_checkpoint(path) -> tuple[DenoiserParams, dict]:
    return decode_checkpoint(_read(path), str(path))


# -- image sets ------------------------------------------------------------------


def encode_dataset(images: list[np.ndarray], meta: dict | None = None, shape: tuple[int, int] | None = None) -> bytes:
    """Stack same-sized images into one array; ``shape`` fixes the frame for an empty set."""
    if images:
        stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
        if stack.ndim != 3:
            raise ValueError("images must be 2-D")
    else:
        h, w = shape if shape is not None else (0, 0)
        stack = np.zeros((0, h, w))
    return encode_container(DATASET_MAGIC, dict(meta or {}), [stack])


def decode_dataset(data: bytes, source: str = "<bytes>") -> tuple[list[np.ndarray], dict]:
    meta, arrays = decode_container(data, DATASET_MAGIC, source)
    if len(arrays) != 1 or arrays[0].ndim != 3:
        raise FormatError(f"{source}: dataset must hold one 3-D array")
    return [im.copy() for im in arrays[0]], meta


def save_dataset(path, images: list[np.ndarray], meta: dict | None = None, shape=None) -> Path:
    return _write(path, encode_dataset(images, meta, shape))


def load_dataset(path) -> tuple[list[np.ndarray], dict]:
    return decode_dataset(_read(path), str(path))


def dataset_file_size(count: int, h: int, w: int, meta: dict | None = None) -> int:
    """Exact byte size of a dataset container, from the layout alone."""
    meta_len = len(json.dumps(dict(meta or {}), sort_keys=True, separators=(",", ":")).encode())
    header = len(DATASET_MAGIC) + 3 * _U32.size + meta_len
    framing = 4 * _U32.size
    return header + framing + count * h * w * _F64.itemsize + CHECKSUM_BYTES


# -- PGM -------------------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit graymap mapped to [0, 1]."""
    data = _read(path)
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: only binary P5 graymaps are supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit graymaps are supported")
    if len(data) < pos + w * h:
        raise FormatError(f"{path}: truncated pixel data")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pix.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray) -> Path:
    """Clip to [0, 1], quantize to 8 bits and write a binary graymap."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    return _write(path, f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
