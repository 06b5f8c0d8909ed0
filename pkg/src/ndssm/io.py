"""Tensor container files, NDJSON metrics and PGM kernel images.

Container layout::

    b"NDSSM1" | uint32 LE header length | JSON header | payloads

The header lists every tensor as ``{name, dtype, shape, complex, offset,
nbytes}`` with offsets relative to the start of the payload section, plus a
free-form ``meta`` object.  Payloads are little-endian IEEE-754; complex
tensors store interleaved real/imaginary pairs.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"NDSSM1"
MAX_HEADER = 64 * 1024
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _encode(name, arr, precision):
    arr = np.asarray(arr)
    is_complex = np.iscomplexobj(arr)
    if arr.size == 0:
        raise ContainerError(f"tensor {name!r} is empty")
    if not (is_complex or np.issubdtype(arr.dtype, np.number) or arr.dtype == bool):
        raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    if precision is None:
        precision = "f32" if arr.dtype in (np.float32, np.complex64) else "f64"
    base = _DTYPES[precision]
    data = arr.astype(np.complex128 if is_complex else np.float64)
    if is_complex:
        data = np.stack([data.real, data.imag], axis=-1)
    return precision, is_complex, np.ascontiguousarray(data, dtype=base).tobytes()


def write_container(path, tensors: dict, meta: dict | None = None, precision: str | None = None) -> Path:
    """Write named tensors; ``precision`` forces ``"f32"`` or ``"f64"`` storage for every tensor."""
    if precision is not None and precision not in _DTYPES:
        raise ContainerError(f"unknown precision {precision!r}")
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        dtype, is_complex, blob = _encode(name, arr, precision)
        entries.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)),
                        "complex": is_complex, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    if len(header) > MAX_HEADER:
        raise ContainerError(f"header is {len(header)} bytes, limit {MAX_HEADER}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path, widen: bool = True):
    """Return ``(tensors, meta)``.  With ``widen``, f32 tensors are widened exactly to f64."""
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ContainerError(f"bad magic at byte 0: {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise ContainerError(f"truncated header length at byte {pos}")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if hlen > MAX_HEADER:
        raise ContainerError(f"header length {hlen} at byte {pos - 4} exceeds {MAX_HEADER}")
    if len(raw) < pos + hlen:
        raise ContainerError(f"truncated header: need bytes {pos}..{pos + hlen}, file has {len(raw)}")
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        at = pos + getattr(exc, "pos", getattr(exc, "start", 0))
        raise ContainerError(f"corrupt header near byte {at}: {exc}") from None
    start = pos + hlen
    tensors, last = {}, -1
    for e in header.get("tensors", []):
        name = e.get("name", "?")
        try:
            dtype = _DTYPES[e["dtype"]]
            shape = tuple(int(s) for s in e["shape"])
            offset, nbytes = int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"tensor {name!r}: malformed header entry ({exc})") from None
        if offset <= last:
            raise ContainerError(f"tensor {name!r}: offset {offset} not strictly increasing")
        last = offset
        count = int(np.prod(shape)) * (2 if e.get("complex") else 1)
        if count == 0 or nbytes != count * dtype.itemsize:
            raise ContainerError(f"tensor {name!r}: {nbytes} bytes does not match shape {shape} x {e['dtype']}")
        lo = start + offset
        if lo + nbytes > len(raw):
            raise ContainerError(f"tensor {name!r}: truncated payload (needs bytes {lo}..{lo + nbytes}, "
                                 f"file has {len(raw)})")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=lo)
        if widen:
            arr = arr.astype(np.float64)
        else:
            arr = arr.astype(dtype.newbyteorder("="))
        if e.get("complex"):
            arr = arr.reshape(shape + (2,))
            arr = arr[..., 0] + 1j * arr[..., 1]
        tensors[name] = arr.reshape(shape)
    return tensors, header.get("meta", {})


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, model, config: dict | None = None, history=None, precision: str = "f64"):
    meta = model.meta()
    meta["config_hash"] = config_hash(config or meta["model"])
    meta["stage_history"] = list(history or [])
    return write_container(path, model.state_dict(), meta, precision=precision)


def load_checkpoint(path):
    from .model import IsotropicModel

    tensors, meta = read_container(path)
    return IsotropicModel.from_state(meta, tensors), meta


class MetricsWriter:
    """Append-only newline-delimited JSON sink."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "a")

    def __call__(self, record: dict):
        self._f.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def read_metrics(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def to_pgm(image) -> bytes:
    """8-bit binary PGM, min-max normalized; a constant image maps to all zeros."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo) * 255.0
    pix = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + pix.tobytes()


def write_pgm(path, image) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_pgm(image))
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
