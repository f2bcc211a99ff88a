"""Deterministic numeric primitives shared by every stage.

Randomness: every stream is ``numpy.random.Generator(Philox(...))`` keyed by a
``SeedSequence(root_seed, spawn_key=path)``. Philox is a counter-based
generator, so a (seed, path) pair names the same stream on every platform.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DegenerateCorrelationError, DimensionError, DomainError, NumericError, TruncatedBlobError

RNG_ALGORITHM = "numpy.Philox-4x64-10/SeedSequence"

RBT_MAGIC = b"RBT1"


def as_real_array(x, shape=None) -> np.ndarray:
    """Coerce to a finite float64 array, optionally checking its shape."""
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("array contains non-finite entries")
    return arr


def rng_stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for ``seed`` and an optional integer sub-stream path."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """A 64-bit child seed, for handing to components that take plain integers."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def norm_p(a, p) -> float:
    if p != math.inf and not p >= 1:
        raise DomainError(f"p must be >= 1 or inf, got {p}")
    a = np.abs(np.asarray(a, dtype=np.float64).ravel())
    if a.size == 0:
        return 0.0
    if p == math.inf:
        return float(a.max())
    if p == 1:
        return float(a.sum())
    if p == 2:
        return float(np.sqrt(np.dot(a, a)))
    # scale first so large p does not overflow
    m = a.max()
    if m == 0.0:
        return 0.0
    return float(m * np.sum((a / m) ** p) ** (1.0 / p))


def conjugate_exponent(p) -> float:
    """q with 1/p + 1/q = 1."""
    if p == math.inf:
        return 1.0
    if p == 1:
        return math.inf
    return p / (p - 1.0)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise DimensionError("pearson needs at least two observations")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateCorrelationError("constant input has zero variance")
    r = float(np.dot(da, db)) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def bilinear_sample(img, u: float, v: float) -> tuple[float, tuple[float, float]]:
    """Bilinear value at row ``u``, column ``v`` and its partials (d/du, d/dv).

    Coordinates outside the grid clamp to the border; the clamped axis then
    has zero derivative.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise DimensionError("bilinear_sample needs a 2-D image at least 2x2")
    h, w = img.shape
    uc = min(max(u, 0.0), h - 1.0)
    vc = min(max(v, 0.0), w - 1.0)
    i0 = min(int(math.floor(uc)), h - 2)
    j0 = min(int(math.floor(vc)), w - 2)
    fu, fv = uc - i0, vc - j0
    p00, p01 = img[i0, j0], img[i0, j0 + 1]
    p10, p11 = img[i0 + 1, j0], img[i0 + 1, j0 + 1]
    val = (1 - fu) * (1 - fv) * p00 + (1 - fu) * fv * p01 + fu * (1 - fv) * p10 + fu * fv * p11
    gu = (1 - fv) * (p10 - p00) + fv * (p11 - p01) if 0.0 <= u <= h - 1.0 else 0.0
    gv = (1 - fu) * (p01 - p00) + fu * (p11 - p10) if 0.0 <= v <= w - 1.0 else 0.0
    return float(val), (float(gu), float(gv))


def finite_diff_check(f: Callable[[np.ndarray], float], grad_f: Callable[[np.ndarray], np.ndarray],
                      x, h: float = 1e-6) -> float:
    """Max relative error between central differences and ``grad_f`` over all coordinates."""
    if not h > 0:
        raise DomainError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(grad_f(x), dtype=np.float64).ravel()
    if not np.all(np.isfinite(analytic)):
        raise NumericError("analytic gradient is not finite")
    flat = x.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        num = (fp - fm) / (2 * h)
        err = abs(num - analytic[i]) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# RBT1 tensor blobs: b"RBT1" | u32 LE header length | JSON header | f32 LE payload


def encode_rbt(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = json.dumps({"count": int(arr.size), "dtype": "f32", "shape": list(arr.shape)},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return RBT_MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes(order="C")


def decode_rbt(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != RBT_MAGIC:
        raise TruncatedBlobError("missing RBT1 magic")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise TruncatedBlobError("header truncated")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedBlobError(f"unreadable header: {exc}") from exc
    if header.get("dtype") != "f32":
        raise TruncatedBlobError(f"unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    count = int(header["count"])
    if int(np.prod(shape, dtype=np.int64)) != count:
        raise TruncatedBlobError("shape and count disagree")
    payload = data[8 + hlen:]
    if len(payload) != 4 * count:
        raise TruncatedBlobError(f"payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_rbt(path, arr) -> bytes:
    data = encode_rbt(arr)
    Path(path).write_bytes(data)
    return data


def read_rbt(path) -> np.ndarray:
    return decode_rbt(Path(path).read_bytes())
