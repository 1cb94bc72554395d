"""Dense float64 matrix helpers, seeded randomness and weighted sampling.

A "dense matrix" throughout the package is simply a 2-D ``numpy.ndarray`` of
dtype float64. The helpers here validate shapes and finiteness so that the
higher layers can rely on clean inputs.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DMAT\x00\x01\x00\x00"
_U64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class RandomSource:
    """Explicitly passed, splittable random stream.

    Backed by PCG64, whose output sequence is specified bit-for-bit, so the
    same seed reproduces the same draws on every platform. Children derived
    with :meth:`child` are independent of how many draws the parent made.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *key: int | str) -> "RandomSource":
        parts = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF for k in key]
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(parts))
        lo, hi = ss.generate_state(2, dtype=np.uint32)
        return RandomSource((int(hi) << 32) | int(lo))

    def uniform(self) -> float:
        return float(self.gen.random())

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed})"


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(m: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(m).T)


def frobenius_norm(m: np.ndarray) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def column_norms_sq(m: np.ndarray) -> np.ndarray:
    a = as_matrix(m)
    return np.sum(a * a, axis=0)


def row_norms_sq(m: np.ndarray) -> np.ndarray:
    a = as_matrix(m)
    return np.sum(a * a, axis=1)


def weighted_sample_without_replacement(weights, k: int, rng: RandomSource) -> list[int]:
    """Draw ``k`` distinct indices, each proportional to its remaining weight.

    After every draw the chosen index is removed and the rest renormalised.
    Returned indices are in draw order.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("weights must be a vector")
    if k < 0 or k > w.size:
        raise ValueError(f"cannot draw {k} indices from {w.size} weights")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("all weights must be finite and strictly positive")
    remaining = w.copy()
    out: list[int] = []
    for _ in range(k):
        cum = np.cumsum(remaining)
        target = rng.uniform() * cum[-1]
        idx = int(np.searchsorted(cum, target, side="right"))
        # guard against landing on an already-removed slot through rounding
        while idx >= w.size or remaining[idx] == 0.0:
            idx -= 1
        out.append(idx)
        remaining[idx] = 0.0
    return out


def write_matrix(path: str | Path, m: np.ndarray) -> None:
    """Write ``m`` as magic bytes, rows and cols (u64 LE), then row-major f64 LE."""
    a = as_matrix(m)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", *a.shape))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a dense matrix file (bad magic)")
    rows, cols = struct.unpack_from("<QQ", raw, len(MAGIC))
    body = raw[len(MAGIC) + 16 :]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(body) // 8}")
    return as_matrix(np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64))
