"""Little-endian binary artifact formats.

LTDT  feature matrix   "LTDT" u8 version, u32 rank, u32 dims[rank], f32 payload
LTLB  label vector     "LTLB" u32 count, u32 labels[count]
LTSL  soft labels      "LTSL" u8 version, u32 k, M, K, f32 logits, f64 jitter,
                       f64 tau, u32 n_ids, (u32 len, utf-8 bytes) per teacher id
LTMD  model checkpoint "LTMD" u8 version, u32 D, H, K, u8 activation, f32 params
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import ACTIVATIONS, MlpModel
from .softlabel import SoftLabelSet

VERSION = 1


class ArtifactError(ValueError):
    """Malformed artifact file."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _expect_magic(buf: bytes, magic: bytes, path) -> int:
    if buf[:4] != magic:
        raise ArtifactError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    return 4


def _version(buf, off, path):
    if buf[off] != VERSION:
        raise ArtifactError(f"{path}: unsupported version {buf[off]}")
    return off + 1


def write_matrix(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = b"LTDT" + struct.pack("<BI", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    off = _version(buf, _expect_magic(buf, b"LTDT", path), path)
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * n:
        raise ArtifactError(f"{path}: payload size does not match dims {shape}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)


def write_labels(path, labels) -> None:
    labels = np.ascontiguousarray(labels, dtype="<u4")
    Path(path).write_bytes(b"LTLB" + struct.pack("<I", labels.size) + labels.tobytes())


def read_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    off = _expect_magic(buf, b"LTLB", path)
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) - off != 4 * n:
        raise ArtifactError(f"{path}: expected {n} labels")
    return np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)


def write_softlabels(path, sl: SoftLabelSet) -> None:
    k, m, c = sl.logits.shape
    parts = [b"LTSL", struct.pack("<B3I", VERSION, k, m, c),
             np.ascontiguousarray(sl.logits, dtype="<f4").tobytes(),
             struct.pack("<2dI", sl.jitter_sigma, sl.tau, len(sl.teacher_ids))]
    for tid in sl.teacher_ids:
        raw = str(tid).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def read_softlabels(path) -> SoftLabelSet:
    buf = Path(path).read_bytes()
    off = _version(buf, _expect_magic(buf, b"LTSL", path), path)
    k, m, c = struct.unpack_from("<3I", buf, off)
    off += 12
    n = k * m * c
    logits = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(k, m, c)
    off += 4 * n
    jitter, tau, n_ids = struct.unpack_from("<2dI", buf, off)
    off += 20
    ids = []
    for _ in range(n_ids):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        ids.append(buf[off : off + ln].decode("utf-8"))
        off += ln
    return SoftLabelSet(logits.astype(np.float64), jitter, tuple(ids), tau)


def write_model(path, model: MlpModel) -> None:
    d, h, k = model.dims
    head = b"LTMD" + struct.pack("<B3IB", VERSION, d, h, k, ACTIVATIONS.index(model.activation))
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.params)
    Path(path).write_bytes(head + payload)


def read_model(path) -> MlpModel:
    buf = Path(path).read_bytes()
    off = _version(buf, _expect_magic(buf, b"LTMD", path), path)
    d, h, k, act = struct.unpack_from("<3IB", buf, off)
    off += 13
    shapes = [(d, k), (k,)] if h == 0 else [(d, h), (h,), (h, k), (k,)]
    params = []
    for shape in shapes:
        n = int(np.prod(shape))
        params.append(np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 4 * n
    if off != len(buf):
        raise ArtifactError(f"{path}: trailing bytes after parameters")
    return MlpModel((d, h, k), ACTIVATIONS[act], params)
