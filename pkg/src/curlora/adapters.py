"""CURLoRA and LoRA adapters on a frozen weight matrix.

Both adapters compute ``y = x (W + alpha * delta)`` where ``delta`` is ``C U R``
for CURLoRA (only ``U`` trains) and ``A B`` for LoRA (both train). Gradients are
written out by hand; see ``tests/test_adapters.py`` for the finite-difference
checks.
"""

from __future__ import annotations

import math

import numpy as np

from .cur import CurFactors, sample_cur_factors
from .matrix import RandomSource, ShapeError, as_matrix, frobenius_norm


def _check_input(x: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m:
        raise ShapeError(f"input of shape {x.shape} does not match weight rows {m}")
    return x


class CurLoraAdapter:
    kind = "curlora"

    def __init__(self, w: np.ndarray, factors: CurFactors, alpha: float = 1.0):
        self.w = as_matrix(w, "w")
        self.factors = factors
        self.alpha = float(alpha)
        m, n = self.w.shape
        k = factors.rank
        if factors.c.shape != (m, k) or factors.u.shape != (k, k) or factors.r.shape != (k, n):
            raise ShapeError("CUR factor shapes do not match the weight matrix")

    @classmethod
    def from_weight(cls, w, rank: int, rng: RandomSource, alpha: float = 1.0, mode: str = "sample"):
        return cls(w, sample_cur_factors(w, rank, rng, mode=mode), alpha)

    @property
    def u(self) -> np.ndarray:
        return self.factors.u

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape

    @property
    def rank(self) -> int:
        return self.factors.rank

    def tensors(self) -> dict[str, np.ndarray]:
        return {"U": self.factors.u}

    def delta(self) -> np.ndarray:
        f = self.factors
        return self.alpha * (f.c @ (f.u @ f.r))

    def effective_weight(self) -> np.ndarray:
        return self.w + self.delta()

    def param_grads(self, dw: np.ndarray) -> dict[str, np.ndarray]:
        f = self.factors
        return {"U": self.alpha * (f.c.T @ dw @ f.r.T)}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape), "alpha": self.alpha, **self.factors.to_dict()}


class LoraAdapter:
    kind = "lora"

    def __init__(self, w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float = 1.0):
        self.w = as_matrix(w, "w")
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.alpha = float(alpha)
        m, n = self.w.shape
        r = self.a.shape[1]
        if self.a.shape != (m, r) or self.b.shape != (r, n):
            raise ShapeError("LoRA factor shapes do not match the weight matrix")

    @classmethod
    def from_weight(cls, w, rank: int, rng: RandomSource, alpha: float = 1.0):
        """Kaiming-uniform A on [-sqrt(6/m), sqrt(6/m)], zero B."""
        w = as_matrix(w, "w")
        m, n = w.shape
        bound = math.sqrt(6.0 / m)
        a = rng.gen.uniform(-bound, bound, size=(m, rank))
        return cls(w, a, np.zeros((rank, n)), alpha)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"A": self.a, "B": self.b}

    def delta(self) -> np.ndarray:
        return self.alpha * (self.a @ self.b)

    def effective_weight(self) -> np.ndarray:
        return self.w + self.delta()

    def param_grads(self, dw: np.ndarray) -> dict[str, np.ndarray]:
        return {"A": self.alpha * (dw @ self.b.T), "B": self.alpha * (self.a.T @ dw)}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "shape": list(self.shape),
            "alpha": self.alpha,
            "rank": self.rank,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
        }


Adapter = CurLoraAdapter | LoraAdapter


def adapter_from_dict(d: dict, w: np.ndarray):
    """Inverse of ``to_dict``; the frozen weight is supplied separately."""
    w = as_matrix(w, "w")
    if list(d["shape"]) != list(w.shape):
        raise ShapeError(f"serialized adapter shape {d['shape']} != weight shape {w.shape}")
    if d["kind"] == "curlora":
        return CurLoraAdapter(w, CurFactors.from_dict(d, w), d["alpha"])
    if d["kind"] == "lora":
        r = d["rank"]
        a = np.array(d["a"], dtype=np.float64).reshape(w.shape[0], r)
        b = np.array(d["b"], dtype=np.float64).reshape(r, w.shape[1])
        return LoraAdapter(w, a, b, d["alpha"])
    raise ValueError(f"unknown adapter kind {d['kind']!r}")


def adapter_forward(x: np.ndarray, ad) -> np.ndarray:
    x = _check_input(x, ad.shape[0])
    return x @ ad.effective_weight()


def adapter_backward(x: np.ndarray, dy: np.ndarray, ad) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return ``(trainable grads, dX)`` for upstream gradient ``dy``."""
    x = _check_input(x, ad.shape[0])
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (x.shape[0], ad.shape[1]):
        raise ShapeError(f"upstream gradient {dy.shape} does not match output {(x.shape[0], ad.shape[1])}")
    dw = x.T @ dy
    return ad.param_grads(dw), dy @ ad.effective_weight().T


curlora_forward = lora_forward = adapter_forward
curlora_backward = lora_backward = adapter_backward


def adapted_weight(ad) -> np.ndarray:
    """The additive change to W: alpha*C*U*R or alpha*A*B."""
    return ad.delta()


def output_shift(x: np.ndarray, ad) -> float:
    x = _check_input(x, ad.shape[0])
    return frobenius_norm(x @ ad.delta())


def frobenius_bound_gap(ad: CurLoraAdapter) -> tuple[float, float]:
    """(||alpha CUR||_F, |alpha| ||C||_F ||U||_F ||R||_F)."""
    f = ad.factors
    lhs = frobenius_norm(ad.delta())
    rhs = abs(ad.alpha) * frobenius_norm(f.c) * frobenius_norm(f.u) * frobenius_norm(f.r)
    return lhs, rhs


def trainable_param_count(kind: str, m: int, n: int, rank: int) -> int:
    if kind == "full":
        return m * n
    if kind == "lora":
        return rank * (m + n)
    if kind == "curlora":
        return rank * rank
    raise ValueError(f"unknown adapter kind {kind!r}")
