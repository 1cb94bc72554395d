"""Inverted-probability CUR factors with a zero linking matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import RandomSource, as_matrix, column_norms_sq, row_norms_sq, weighted_sample_without_replacement

CLAMP_EPS = 1e-12


class DegenerateInputError(ValueError):
    """The weight matrix carries no mass to build probabilities from."""


def _norm_probabilities(norms_sq: np.ndarray) -> np.ndarray:
    total = float(np.sum(norms_sq))
    if total == 0.0:
        raise DegenerateInputError("all-zero matrix has no column/row probabilities")
    p = norms_sq / total
    floor = CLAMP_EPS / p.size
    if np.any(p < floor):
        p = np.maximum(p, floor)
        p = p / np.sum(p)
    return p


def column_probabilities(w: np.ndarray) -> np.ndarray:
    """Squared column norms over the squared Frobenius norm, floored at eps/n."""
    return _norm_probabilities(column_norms_sq(w))


def row_probabilities(w: np.ndarray) -> np.ndarray:
    return _norm_probabilities(row_norms_sq(w))


def invert_probabilities(p: np.ndarray) -> np.ndarray:
    """Normalised reciprocals: the least likely entry becomes the most likely."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("probabilities must be strictly positive to invert")
    inv = 1.0 / p
    return inv / np.sum(inv)


def _top_k(p: np.ndarray, k: int) -> list[int]:
    # stable sort on -p keeps the lowest index first among ties
    return [int(i) for i in np.argsort(-p, kind="stable")[:k]]


@dataclass
class CurFactors:
    c: np.ndarray
    u: np.ndarray
    r: np.ndarray
    col_indices: list[int]
    row_indices: list[int]

    @property
    def rank(self) -> int:
        return len(self.col_indices)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "col_indices": list(self.col_indices),
            "row_indices": list(self.row_indices),
            "u": self.u.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, w: np.ndarray) -> "CurFactors":
        """Rebuild from serialized indices + U; C and R are re-copied from ``w``."""
        w = as_matrix(w, "w")
        cols, rows = list(d["col_indices"]), list(d["row_indices"])
        u = np.array(d["u"], dtype=np.float64).reshape(len(cols), len(rows))
        return cls(w[:, cols].copy(), u, w[rows, :].copy(), cols, rows)


def sample_cur_factors(w: np.ndarray, k: int, rng: RandomSource, mode: str = "sample") -> CurFactors:
    """Pick ``k`` columns and ``k`` rows of ``w`` by inverted probability.

    ``mode="sample"`` draws without replacement; ``mode="topk"`` takes the
    ``k`` highest inverted probabilities deterministically. ``w`` is not
    modified; C and R are copies.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if k < 1 or k >= min(m, n):
        raise ValueError(f"rank {k} must satisfy 1 <= k < min{w.shape}")
    pc = invert_probabilities(column_probabilities(w))
    pr = invert_probabilities(row_probabilities(w))
    if mode == "sample":
        cols = weighted_sample_without_replacement(pc, k, rng.child("columns"))
        rows = weighted_sample_without_replacement(pr, k, rng.child("rows"))
    elif mode == "topk":
        cols, rows = _top_k(pc, k), _top_k(pr, k)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return CurFactors(
        c=w[:, cols].copy(),
        u=np.zeros((k, k)),
        r=w[rows, :].copy(),
        col_indices=cols,
        row_indices=rows,
    )
