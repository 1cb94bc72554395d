"""Forward/backward pairs for the layers of the tiny transformer.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes that cache exactly once and returns the input gradient followed by
parameter gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .matrix import ShapeError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class CacheReuseError(RuntimeError):
    pass


class LayerCache:
    __slots__ = ("_data", "_used")

    def __init__(self, **data):
        self._data = data
        self._used = False

    def take(self) -> dict:
        if self._used:
            raise CacheReuseError("layer cache already consumed by a backward pass")
        self._used = True
        return self._data


# --- linear ---------------------------------------------------------------

def linear_forward(x, weight, bias=None, adapter=None):
    """``x @ W_eff + bias`` over the last axis; ``W_eff`` comes from the adapter if given."""
    w = adapter.effective_weight() if adapter is not None else weight
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input {x.shape} does not match weight {w.shape}")
    y = x @ w
    if bias is not None:
        y = y + bias
    return y, LayerCache(x=x, w=w, adapter=adapter, has_bias=bias is not None)


def linear_backward(cache: LayerCache, dy):
    c = cache.take()
    x, w = c["x"], c["w"]
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    grads = {"weight": dw}
    if c["has_bias"]:
        grads["bias"] = dy2.sum(axis=0)
    if c["adapter"] is not None:
        grads.update(c["adapter"].param_grads(dw))
    return dy @ w.T, grads


# --- gelu (tanh approximation) -------------------------------------------

def gelu_forward(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), LayerCache(x=x, t=t)


def gelu_backward(cache: LayerCache, dy):
    c = cache.take()
    x, t = c["x"], c["t"]
    dt = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


# --- layer norm -----------------------------------------------------------

def layer_norm_forward(x, gamma, beta, eps: float = LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, LayerCache(xhat=xhat, rstd=rstd, gamma=gamma)


def layer_norm_backward(cache: LayerCache, dy):
    c = cache.take()
    xhat, rstd, gamma = c["xhat"], c["rstd"], c["gamma"]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    dx = rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, {"gamma": dgamma, "beta": dbeta}


# --- embedding ------------------------------------------------------------

def embedding_forward(tokens, table):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise IndexError(f"token ids must lie in [0, {table.shape[0]})")
    return table[tokens], LayerCache(tokens=tokens, shape=table.shape)


def embedding_backward(cache: LayerCache, dy):
    c = cache.take()
    dtable = np.zeros(c["shape"])
    np.add.at(dtable, c["tokens"].reshape(-1), dy.reshape(-1, dy.shape[-1]))
    return dtable


# --- attention ------------------------------------------------------------

def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def scaled_dot_attention_forward(q, k, v, n_heads: int, causal: bool):
    """Multi-head softmax(Q K^T / sqrt(d_head)) V over inputs of shape (batch, time, d)."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] % n_heads:
        raise ShapeError(f"width {q.shape[-1]} not divisible by {n_heads} heads")
    qh, kh, vh = (_split_heads(z, n_heads) for z in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    t = q.shape[1]
    if causal:
        s = np.where(np.tril(np.ones((t, t), dtype=bool)), s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _merge_heads(p @ vh)
    return out, LayerCache(qh=qh, kh=kh, vh=vh, p=p, scale=scale, n_heads=n_heads)


def scaled_dot_attention_backward(cache: LayerCache, dout):
    c = cache.take()
    qh, kh, vh, p, scale = c["qh"], c["kh"], c["vh"], c["p"], c["scale"]
    do = _split_heads(dout, c["n_heads"])
    dp = do @ vh.transpose(0, 1, 3, 2)
    dvh = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


# --- loss -----------------------------------------------------------------

def softmax_xent_forward(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, v = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= v):
        raise IndexError(f"labels must lie in [0, {v})")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = float(-logp[np.arange(n), labels].mean())
    return loss, LayerCache(logp=logp, labels=labels)


def softmax_xent_backward(cache: LayerCache, dloss: float = 1.0):
    c = cache.take()
    logp, labels = c["logp"], c["labels"]
    n = logp.shape[0]
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return g * (dloss / n)
