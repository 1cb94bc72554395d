"""Synthetic classification tasks and the bundled text corpus.

All three rule families draw tokens from the same lowercase-letter alphabet, so
fine-tuning on one task moves the very features the others read.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .matrix import RandomSource

ALPHABET = np.arange(ord("a"), ord("z") + 1)
VOWELS = frozenset(ord(c) for c in "aeiou")
# three disjoint letter groups for the majority rule
GROUPS = (tuple(range(ord("a"), ord("i"))), tuple(range(ord("i"), ord("q"))), tuple(range(ord("q"), ord("y"))))
RULES = ("parity", "order", "majority")


@dataclass
class TaskSpec:
    task_id: str
    rule: str
    n_classes: int
    kind: str = "synthetic"
    train_size: int = 1000
    eval_size: int = 500
    seq_len: int = 16
    seed: int = 0

    def validate(self) -> "TaskSpec":
        if self.kind != "synthetic":
            raise ValueError(f"only synthetic classification tasks can be fine-tuned, got kind {self.kind!r}")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        expected = 3 if self.rule == "majority" else 2
        if self.n_classes != expected:
            raise ValueError(f"rule {self.rule!r} has {expected} classes, not {self.n_classes}")
        if self.train_size < 1 or self.eval_size < 1 or self.seq_len < 2:
            raise ValueError("task sizes must be positive and seq_len >= 2")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d).validate()

    to_dict = asdict


@dataclass
class TaskData:
    spec: TaskSpec
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray


def label_of(rule: str, seq) -> int:
    """Ground-truth label of one token sequence under ``rule``."""
    seq = [int(t) for t in seq]
    if rule == "parity":
        return sum(t in VOWELS for t in seq) % 2
    if rule == "order":
        return int(seq[0] < seq[-1])
    if rule == "majority":
        counts = [sum(t in g for t in seq) for g in GROUPS]
        return int(np.argmax(counts))
    raise ValueError(f"unknown rule {rule!r}")


def _candidate(rule: str, seq_len: int, gen: np.random.Generator, want: int) -> np.ndarray:
    """Draw a sequence aimed at class ``want``; the caller re-labels it with ``label_of``."""
    if rule == "parity":
        vowel = gen.random(seq_len) < 0.35
        cons = np.array([t for t in ALPHABET if t not in VOWELS])
        return np.where(vowel, gen.choice(np.array(sorted(VOWELS)), size=seq_len), gen.choice(cons, size=seq_len))
    if rule == "order":
        seq = gen.choice(ALPHABET, size=seq_len)
        while seq[0] == seq[-1]:
            seq[-1] = gen.choice(ALPHABET)
        return seq
    if rule == "majority":
        n_major = int(gen.integers(seq_len // 2 + 1, seq_len + 1))
        others = [g for i, g in enumerate(GROUPS) if i != want]
        rest = np.concatenate(others)
        seq = np.concatenate([gen.choice(GROUPS[want], size=n_major), gen.choice(rest, size=seq_len - n_major)])
        return gen.permutation(seq)
    raise ValueError(f"unknown rule {rule!r}")


def gen_synthetic_task(spec: TaskSpec, rng: RandomSource) -> TaskData:
    """Balanced, de-duplicated train/eval sets; train and eval never share a sequence."""
    spec.validate()
    gen = rng.gen
    total = spec.train_size + spec.eval_size
    quota = [total // spec.n_classes + (i < total % spec.n_classes) for i in range(spec.n_classes)]
    seen: set[bytes] = set()
    xs, ys = [], []
    want = 0
    attempts = 0
    while len(xs) < total:
        attempts += 1
        if attempts > 200 * total:
            raise RuntimeError(f"could not draw {total} distinct sequences for rule {spec.rule!r}")
        while quota[want] == 0:
            want = (want + 1) % spec.n_classes
        seq = _candidate(spec.rule, spec.seq_len, gen, want).astype(np.int64)
        y = label_of(spec.rule, seq)
        key = seq.tobytes()
        if quota[y] == 0 or key in seen:
            continue
        seen.add(key)
        quota[y] -= 1
        xs.append(seq)
        ys.append(y)
        want = (want + 1) % spec.n_classes
    x = np.stack(xs)
    y = np.array(ys, dtype=np.int64)
    perm = gen.permutation(total)
    x, y = x[perm], y[perm]
    n = spec.train_size
    return TaskData(spec, x[:n], y[:n], x[n:], y[n:])


def load_corpus(path: str | Path | None = None) -> np.ndarray:
    """Byte tokens of the corpus (bundled shard by default)."""
    if path is None:
        raw = resources.files("curlora").joinpath("data/corpus.txt").read_bytes()
    else:
        raw = Path(path).read_bytes()
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if tokens.size and tokens.max() >= 128:
        raise ValueError("corpus must be 7-bit ASCII for the 128-token byte vocabulary")
    return tokens


def split_corpus(tokens: np.ndarray, train_frac: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * train_frac)
    return tokens[:cut], tokens[cut:]
