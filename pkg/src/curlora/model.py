"""A tiny pre-LN decoder transformer with adapters on the Q/K/V projections.

Parameters live in a flat ``dict[str, ndarray]``. Adapters hold a reference to
the very same frozen weight array, so attaching one never copies the backbone.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .adapters import CurLoraAdapter, LoraAdapter, adapter_from_dict
from .matrix import RandomSource

ADAPTER_KINDS = ("none", "lora", "curlora")
QKV = ("q", "k", "v")


@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_seq_len: int = 64
    adapter: str = "none"
    rank: int = 16
    alpha: float = 1.0
    seed: int = 0
    # "sample" draws C/R columns stochastically; "topk" takes the most likely ones
    selection: str = "sample"
    # conventional alpha/rank scaling for the LoRA baseline, off by default
    lora_scale_by_rank: bool = False

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.adapter not in ADAPTER_KINDS:
            raise ValueError(f"adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")
        if self.adapter != "none" and not 1 <= self.rank < self.d_model:
            raise ValueError(f"rank must satisfy 1 <= rank < d_model, got {self.rank}")
        if self.selection not in ("sample", "topk"):
            raise ValueError(f"selection must be 'sample' or 'topk', got {self.selection!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TaskHead:
    task_id: str
    weight: np.ndarray
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gamma"] = shapes[p + "ln1.beta"] = (d,)
        for name in (*QKV, "o"):
            shapes[p + f"attn.{name}.weight"] = (d, d)
            shapes[p + f"attn.{name}.bias"] = (d,)
        shapes[p + "ln2.gamma"] = shapes[p + "ln2.beta"] = (d,)
        shapes[p + "mlp.fc.weight"] = (d, 4 * d)
        shapes[p + "mlp.fc.bias"] = (4 * d,)
        shapes[p + "mlp.proj.weight"] = (4 * d, d)
        shapes[p + "mlp.proj.bias"] = (d,)
    shapes["ln_f.gamma"] = shapes["ln_f.beta"] = (d,)
    shapes["lm_head.weight"] = (d, v)
    shapes["lm_head.bias"] = (v,)
    return shapes


class TinyTransformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.adapters: dict[str, CurLoraAdapter | LoraAdapter] = {}
        self.heads: dict[str, TaskHead] = {}
        self.active_task: str | None = None
        self.train_backbone = False
        self._tape = None

    # -- parameter views ------------------------------------------------------

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        """Name -> array (by reference) for everything the optimizer may touch."""
        if self.train_backbone:
            return dict(self.params)
        out = {}
        for key, ad in self.adapters.items():
            for name, t in ad.tensors().items():
                out[f"{key}.{name}"] = t
        if self.active_task is not None:
            h = self.heads[self.active_task]
            out[f"heads.{h.task_id}.weight"] = h.weight
            out[f"heads.{h.task_id}.bias"] = h.bias
        return out

    def copy(self) -> "TinyTransformer":
        m = copy.deepcopy(self)
        m._tape = None
        return m

    # -- forward --------------------------------------------------------------

    def _trunk(self, tokens: np.ndarray, causal: bool):
        P, cfg = self.params, self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, time), got shape {tokens.shape}")
        t = tokens.shape[1]
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        tape = {}
        x, tape["tok"] = nn.embedding_forward(tokens, P["tok_emb"])
        x = x + P["pos_emb"][:t]
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            a, tape[p + "ln1"] = nn.layer_norm_forward(x, P[p + "ln1.gamma"], P[p + "ln1.beta"])
            qkv = []
            for name in QKV:
                key = p + f"attn.{name}"
                y, tape[key] = nn.linear_forward(a, P[key + ".weight"], P[key + ".bias"], self.adapters.get(key))
                qkv.append(y)
            att, tape[p + "attn"] = nn.scaled_dot_attention_forward(*qkv, cfg.n_heads, causal)
            o, tape[p + "attn.o"] = nn.linear_forward(att, P[p + "attn.o.weight"], P[p + "attn.o.bias"])
            x = x + o
            b, tape[p + "ln2"] = nn.layer_norm_forward(x, P[p + "ln2.gamma"], P[p + "ln2.beta"])
            f, tape[p + "mlp.fc"] = nn.linear_forward(b, P[p + "mlp.fc.weight"], P[p + "mlp.fc.bias"])
            g, tape[p + "gelu"] = nn.gelu_forward(f)
            m, tape[p + "mlp.proj"] = nn.linear_forward(g, P[p + "mlp.proj.weight"], P[p + "mlp.proj.bias"])
            x = x + m
        h, tape["ln_f"] = nn.layer_norm_forward(x, P["ln_f.gamma"], P["ln_f.beta"])
        return h, tape

    def forward_lm(self, tokens) -> np.ndarray:
        """Next-token logits at every position, shape (batch, time, vocab)."""
        h, tape = self._trunk(tokens, causal=True)
        logits, tape["lm_head"] = nn.linear_forward(h, self.params["lm_head.weight"], self.params["lm_head.bias"])
        self._tape = {"kind": "lm", "tape": tape, "shape": h.shape}
        return logits

    def forward_classify(self, tokens, task_id: str) -> np.ndarray:
        """Task logits read from the final hidden state at the last position."""
        if task_id not in self.heads:
            raise KeyError(f"no head for task {task_id!r}")
        h, tape = self._trunk(tokens, causal=False)
        head = self.heads[task_id]
        last = h[:, -1, :]
        self._tape = {"kind": "classify", "task": task_id, "tape": tape, "shape": h.shape, "last": last}
        return last @ head.weight + head.bias

    # -- backward -------------------------------------------------------------

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the trainable tensors only, from the last forward call."""
        if self._tape is None:
            raise RuntimeError("backward called without a preceding forward")
        rec, self._tape = self._tape, None
        tape, hshape = rec["tape"], rec["shape"]
        P, cfg = self.params, self.cfg
        wanted = self.trainable_tensors()
        grads: dict[str, np.ndarray] = {}

        def keep(name, g):
            if name in wanted:
                grads[name] = g

        if rec["kind"] == "lm":
            dh, g = nn.linear_backward(tape["lm_head"], dlogits)
            keep("lm_head.weight", g["weight"])
            keep("lm_head.bias", g["bias"])
        else:
            task_id, last = rec["task"], rec["last"]
            head = self.heads[task_id]
            keep(f"heads.{task_id}.weight", last.T @ dlogits)
            keep(f"heads.{task_id}.bias", dlogits.sum(axis=0))
            dh = np.zeros(hshape)
            dh[:, -1, :] = dlogits @ head.weight.T

        dx, g = nn.layer_norm_backward(tape["ln_f"], dh)
        keep("ln_f.gamma", g["gamma"])
        keep("ln_f.beta", g["beta"])
        for i in reversed(range(cfg.n_layers)):
            p = f"blocks.{i}."
            dg, g = nn.linear_backward(tape[p + "mlp.proj"], dx)
            self._keep_linear(keep, p + "mlp.proj", g)
            df = nn.gelu_backward(tape[p + "gelu"], dg)
            db, g = nn.linear_backward(tape[p + "mlp.fc"], df)
            self._keep_linear(keep, p + "mlp.fc", g)
            dres, g = nn.layer_norm_backward(tape[p + "ln2"], db)
            keep(p + "ln2.gamma", g["gamma"])
            keep(p + "ln2.beta", g["beta"])
            dx = dx + dres
            datt, g = nn.linear_backward(tape[p + "attn.o"], dx)
            self._keep_linear(keep, p + "attn.o", g)
            dq, dk, dv = nn.scaled_dot_attention_backward(tape[p + "attn"], datt)
            da = 0.0
            for name, dy in zip(QKV, (dq, dk, dv)):
                key = p + f"attn.{name}"
                dai, g = nn.linear_backward(tape[key], dy)
                self._keep_linear(keep, key, g)
                da = da + dai
            dres, g = nn.layer_norm_backward(tape[p + "ln1"], da)
            keep(p + "ln1.gamma", g["gamma"])
            keep(p + "ln1.beta", g["beta"])
            dx = dx + dres
        if "pos_emb" in wanted:
            dpos = np.zeros_like(P["pos_emb"])
            dpos[: dx.shape[1]] = dx.sum(axis=0)
            grads["pos_emb"] = dpos
        if "tok_emb" in wanted:
            grads["tok_emb"] = nn.embedding_backward(tape["tok"], dx)
        return grads

    @staticmethod
    def _keep_linear(keep, key, g):
        keep(key + ".weight", g["weight"])
        keep(key + ".bias", g["bias"])
        for name in ("U", "A", "B"):
            if name in g:
                keep(f"{key}.{name}", g[name])

    # -- fused helpers -------------------------------------------------------

    def loss_and_grads(self, tokens, targets, task_id: str | None = None):
        """Mean cross-entropy and trainable gradients for one batch."""
        if task_id is None:
            logits = self.forward_lm(tokens)
            flat = logits.reshape(-1, logits.shape[-1])
            loss, c = nn.softmax_xent_forward(flat, np.asarray(targets).reshape(-1))
            dlogits = nn.softmax_xent_backward(c).reshape(logits.shape)
        else:
            logits = self.forward_classify(tokens, task_id)
            loss, c = nn.softmax_xent_forward(logits, targets)
            dlogits = nn.softmax_xent_backward(c)
        return loss, self.backward(dlogits)


def _init_backbone(cfg: ModelConfig, rng: RandomSource) -> dict[str, np.ndarray]:
    gen = rng.gen
    proj_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in backbone_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            params[name] = np.zeros(shape)
        elif name.endswith(("attn.o.weight", "mlp.proj.weight")):
            params[name] = gen.normal(0.0, proj_std, size=shape)
        else:
            params[name] = gen.normal(0.0, 0.02, size=shape)
    return params


def attach_adapters(model: TinyTransformer, kind: str, rank: int, alpha: float, rng: RandomSource,
                    selection: str = "sample", lora_scale_by_rank: bool = False) -> TinyTransformer:
    """Wrap every Q/K/V weight in an adapter; C/R (or A) are drawn per matrix."""
    if kind == "none":
        model.adapters = {}
        return model
    if kind not in ("lora", "curlora"):
        raise ValueError(f"unknown adapter kind {kind!r}")
    model.adapters = {}
    for i in range(model.cfg.n_layers):
        for name in QKV:
            key = f"blocks.{i}.attn.{name}"
            w = model.params[key + ".weight"]
            sub = rng.child(key)
            if kind == "curlora":
                model.adapters[key] = CurLoraAdapter.from_weight(w, rank, sub, alpha, mode=selection)
            else:
                scale = alpha / rank if lora_scale_by_rank else alpha
                model.adapters[key] = LoraAdapter.from_weight(w, rank, sub, scale)
    model.cfg = ModelConfig(**{**asdict(model.cfg), "adapter": kind, "rank": rank, "alpha": alpha,
                               "selection": selection, "lora_scale_by_rank": lora_scale_by_rank})
    return model


def init_model(cfg: ModelConfig, rng: RandomSource | None = None) -> TinyTransformer:
    """Deterministic initialisation; adapters (if any) start as exact no-ops."""
    cfg.validate()
    rng = rng if rng is not None else RandomSource(cfg.seed)
    model = TinyTransformer(cfg, _init_backbone(cfg, rng.child("backbone")))
    if cfg.adapter != "none":
        attach_adapters(model, cfg.adapter, cfg.rank, cfg.alpha, rng.child("adapters"),
                        cfg.selection, cfg.lora_scale_by_rank)
    return model


def swap_head(model: TinyTransformer, task_id: str, n_classes: int, rng: RandomSource) -> TinyTransformer:
    """Attach (if new) and activate the head for ``task_id``; other heads stay as they are."""
    if task_id not in model.heads:
        d = model.cfg.d_model
        gen = rng.child("head", task_id).gen
        model.heads[task_id] = TaskHead(task_id, gen.normal(0.0, 0.02, size=(d, n_classes)), np.zeros(n_classes))
    elif model.heads[task_id].n_classes != n_classes:
        raise ValueError(f"task {task_id!r} already has a {model.heads[task_id].n_classes}-class head")
    model.active_task = task_id
    return model


def forward_lm(model: TinyTransformer, tokens) -> np.ndarray:
    return model.forward_lm(tokens)


def forward_classify(model: TinyTransformer, tokens, task_id: str) -> np.ndarray:
    return model.forward_classify(tokens, task_id)


def backward(model: TinyTransformer, dlogits) -> dict[str, np.ndarray]:
    return model.backward(dlogits)


def param_count(model: TinyTransformer) -> dict[str, int]:
    backbone = sum(p.size for p in model.params.values())
    adapter = sum(t.size for ad in model.adapters.values() for t in ad.tensors().values())
    heads = sum(h.weight.size + h.bias.size for h in model.heads.values())
    return {"backbone": backbone, "adapter_trainable": adapter, "heads": heads}


def perplexity(model: TinyTransformer, stream, batch_size: int = 32) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of ``max_seq_len``."""
    stream = np.asarray(stream)
    if stream.ndim != 1 or stream.size < 2:
        raise ValueError("perplexity needs a token stream of at least 2 tokens")
    L = model.cfg.max_seq_len
    n_pred = stream.size - 1
    full = n_pred // L
    total_nll = 0.0

    def nll_sum(inputs, targets):
        logits = model.forward_lm(inputs)
        model._tape = None
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return -float(np.take_along_axis(logp, targets[..., None], axis=-1).sum())

    if full:
        idx = np.arange(full)[:, None] * L + np.arange(L)[None, :]
        for s in range(0, full, batch_size):
            rows = idx[s : s + batch_size]
            total_nll += nll_sum(stream[rows], stream[rows + 1])
    rest = n_pred - full * L
    if rest:
        start = full * L
        total_nll += nll_sum(stream[None, start : start + rest], stream[None, start + 1 : start + rest + 1])
    return math.exp(total_nll / n_pred)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model: TinyTransformer, path: str | Path) -> None:
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    adapters = {}
    for key, ad in model.adapters.items():
        if isinstance(ad, CurLoraAdapter):
            adapters[key] = {"kind": "curlora", "alpha": ad.alpha,
                             "col_indices": ad.factors.col_indices, "row_indices": ad.factors.row_indices}
            arrays[f"adapter/{key}/U"] = ad.factors.u
        else:
            adapters[key] = {"kind": "lora", "alpha": ad.alpha}
            arrays[f"adapter/{key}/A"] = ad.a
            arrays[f"adapter/{key}/B"] = ad.b
    for tid, h in model.heads.items():
        arrays[f"head/{tid}/weight"] = h.weight
        arrays[f"head/{tid}/bias"] = h.bias
    meta = {"config": asdict(model.cfg), "adapters": adapters, "heads": list(model.heads),
            "active_task": model.active_task}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> TinyTransformer:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        data = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
    cfg = ModelConfig.from_dict(meta["config"])
    params = {k[len("param/"):]: v for k, v in data.items() if k.startswith("param/")}
    model = TinyTransformer(cfg, params)
    for key, info in meta["adapters"].items():
        w = params[key + ".weight"]
        k_ = f"adapter/{key}/"
        if info["kind"] == "curlora":
            d = {**info, "shape": list(w.shape), "u": data[k_ + "U"]}
        else:
            d = {**info, "shape": list(w.shape), "rank": data[k_ + "A"].shape[1],
                 "a": data[k_ + "A"], "b": data[k_ + "B"]}
        model.adapters[key] = adapter_from_dict(d, w)
    for tid in meta["heads"]:
        model.heads[tid] = TaskHead(tid, data[f"head/{tid}/weight"], data[f"head/{tid}/bias"])
    model.active_task = meta["active_task"]
    return model
