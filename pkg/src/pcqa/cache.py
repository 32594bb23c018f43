"""Content-addressed binary caches for feature fields and coefficient tensors.

Both formats are ``magic | u32 version | fixed header | float64/int64
payload | sha256(all previous bytes)``. A corrupt or stale entry is treated
as a miss and recomputed.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .features import FeatureKind
from .rbf_fit import CoefficientTensor, ReferenceSet

FEATURE_MAGIC = b"PCQAFEAT"
TENSOR_MAGIC = b"PCQATENS"
CACHE_VERSION = 1
ENV_VAR = "PCQ_CACHE_DIR"


def content_key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode())
        h.update(b"\x1f")
    return h.hexdigest()


def _seal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def _unseal(blob: bytes, magic: bytes):
    if len(blob) < len(magic) + 4 + 32 or not blob.startswith(magic):
        return None
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        return None
    (version,) = struct.unpack_from("<I", body, len(magic))
    if version != CACHE_VERSION:
        return None
    return body, len(magic) + 4


def encode_features(curvature, luma, chroma) -> bytes:
    n = len(curvature)
    arr = np.stack([curvature, luma, chroma]).astype("<f8")
    return _seal(FEATURE_MAGIC + struct.pack("<IQ", CACHE_VERSION, n) + arr.tobytes())


def decode_features(blob: bytes):
    got = _unseal(blob, FEATURE_MAGIC)
    if got is None:
        return None
    body, off = got
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    if len(body) - off != 3 * n * 8:
        return None
    arr = np.frombuffer(body, "<f8", 3 * n, off).reshape(3, n).astype(np.float64)
    return arr[0], arr[1], arr[2]


def encode_tensor(t: CoefficientTensor) -> bytes:
    S, F = len(t.scales), len(t.features)
    n = t.coeffs.shape[-1] - 4
    feats = ",".join(f.value for f in t.features).encode()
    head = struct.pack(
        "<IIIIIII", CACHE_VERSION, t.refs.count, len(t.ref_ids), len(t.dropped), S, F, n
    )
    parts = [
        TENSOR_MAGIC, head, struct.pack("<I", len(feats)), feats,
        np.asarray(t.scales, "<f8").tobytes(),
        np.ascontiguousarray(t.refs.points, "<f8").tobytes(),
        np.asarray(t.ref_ids, "<i8").tobytes(),
        np.asarray(t.dropped, "<i8").tobytes(),
        np.ascontiguousarray(t.coeffs, "<f8").tobytes(),
    ]
    return _seal(b"".join(parts))


def decode_tensor(blob: bytes):
    got = _unseal(blob, TENSOR_MAGIC)
    if got is None:
        return None
    body, off = got
    n_total, n_kept, n_drop, S, F, n = struct.unpack_from("<IIIIII", body, off)
    off += 24
    (flen,) = struct.unpack_from("<I", body, off)
    off += 4
    features = tuple(FeatureKind.parse(x) for x in body[off : off + flen].decode().split(","))
    off += flen

    def take(dtype, count, shape=None):
        nonlocal off
        arr = np.frombuffer(body, dtype, count, off)
        off += arr.nbytes
        return arr.reshape(shape if shape else (count,)).copy()

    scales = tuple(float(s) for s in take("<f8", S))
    points = take("<f8", 3 * n_total, (n_total, 3))
    ref_ids = take("<i8", n_kept).astype(np.int64)
    dropped = take("<i8", n_drop).astype(np.int64)
    coeffs = take("<f8", n_kept * S * F * (n + 4), (n_kept, S, F, n + 4)).astype(np.float64)
    if off != len(body):
        return None
    return CoefficientTensor(ReferenceSet(points.astype(np.float64)), ref_ids, coeffs, scales, features, dropped)


class Cache:
    """In-memory memo, optionally backed by a directory."""

    def __init__(self, directory=None):
        directory = directory or os.environ.get(ENV_VAR) or None
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict = {}

    def get(self, kind: str, key: str, decode):
        name = f"{kind}-{key}.bin"
        if name in self._mem:
            return self._mem[name]
        if self.directory and (self.directory / name).is_file():
            value = decode((self.directory / name).read_bytes())
            if value is not None:
                self._mem[name] = value
                return value
        return None

    def put(self, kind: str, key: str, value, encode) -> None:
        name = f"{kind}-{key}.bin"
        self._mem[name] = value
        if self.directory:
            tmp = self.directory / (name + f".tmp{os.getpid()}")
            tmp.write_bytes(encode(value))
            os.replace(tmp, self.directory / name)
