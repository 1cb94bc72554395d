"""Shared test utilities: central finite differences and small fixtures."""

from pathlib import Path

import numpy as np

FD_STEP = 1e-6
# shipped desk-scale config used by the acceptance run
CONFIG = Path(__file__).resolve().parents[1] / "configs" / "rank16.json"


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    With ``coords`` only those flat indices are filled; the rest stay zero.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference; 0 when both are exactly zero."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
