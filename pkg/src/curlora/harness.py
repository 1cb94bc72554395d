"""Continual-learning protocol: pretrain, then fine-tune a task sequence per arm.

Every (adapter, rank, seed) arm starts from the same pretrained snapshot and sees
the same task data. The sequence for one arm is:

1. held-out perplexity of the untouched model;
2. for each task in order: fresh head, fine-tune, evaluate it, re-evaluate the
   earlier tasks with their own (now frozen) heads;
3. held-out perplexity again.

CUR factors are sampled once, before the first task, and never change; the
trainable adapter tensors carry over from task to task.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapters import CurLoraAdapter, adapter_forward, output_shift, trainable_param_count
from .matrix import RandomSource, frobenius_norm
from .model import ModelConfig, TinyTransformer, attach_adapters, init_model, perplexity, swap_head
from .optim import AdamW, ScheduleConfig, train_epoch
from .tasks import TaskData, TaskSpec, gen_synthetic_task, load_corpus, split_corpus

SCHEMA_VERSION = 1
BOUND_TOL = 1e-9
SHIFT_TOL = 1e-9


def default_tasks() -> list[TaskSpec]:
    return [
        TaskSpec("parity", "parity", 2, train_size=2000, eval_size=500, seq_len=3, seed=1),
        TaskSpec("order", "order", 2, train_size=2000, eval_size=500, seq_len=3, seed=2),
        TaskSpec("majority", "majority", 3, train_size=2000, eval_size=500, seq_len=3, seed=3),
    ]


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapters: list[str] = field(default_factory=lambda: ["lora", "curlora"])
    ranks: list[int] = field(default_factory=lambda: [8, 16, 24])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    tasks: list[TaskSpec] = field(default_factory=default_tasks)
    # optional permutation of ``tasks`` for order-robustness studies
    task_order: list[int] | None = None
    corpus_path: str | None = None
    pretrain_steps: int = 600
    pretrain_batch_size: int = 16
    pretrain_lr: float = 3e-3
    pretrain_seed: int = 0
    lr: float = 2.5e-4
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    warmup_frac: float = 0.05
    alpha: float = 1.0
    selection: str = "sample"
    lora_scale_by_rank: bool = False
    shift_checkpoints: int = 10

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(self.tasks) < 2:
            raise ValueError("the task sequence needs at least two tasks")
        for t in self.tasks:
            t.validate()
        if len({t.task_id for t in self.tasks}) != len(self.tasks):
            raise ValueError("task ids must be unique")
        if self.task_order is not None and sorted(self.task_order) != list(range(len(self.tasks))):
            raise ValueError("task_order must be a permutation of task indices")
        bad = [a for a in self.adapters if a not in ("lora", "curlora")]
        if bad or not self.adapters:
            raise ValueError(f"adapters must be a non-empty subset of ['lora', 'curlora'], got {self.adapters}")
        for r in self.ranks:
            if not 1 <= r < self.model.d_model:
                raise ValueError(f"rank {r} must satisfy 1 <= rank < d_model={self.model.d_model}")
        if self.selection not in ("sample", "topk"):
            raise ValueError(f"selection must be 'sample' or 'topk', got {self.selection!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.pretrain_steps < 1:
            raise ValueError("epochs, batch_size and pretrain_steps must be positive")
        if not 0 < self.warmup_frac <= 1:
            raise ValueError("warmup_frac must lie in (0, 1]")
        return self

    def ordered_tasks(self) -> list[TaskSpec]:
        order = self.task_order if self.task_order is not None else range(len(self.tasks))
        return [self.tasks[i] for i in order]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = asdict(self.model)
        d["tasks"] = [asdict(t) for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "tasks" in d:
            d["tasks"] = [TaskSpec.from_dict(t) for t in d["tasks"]]
        return cls(**d).validate()


# -- reports -----------------------------------------------------------------

def run_key(adapter: str, rank: int, seed: int) -> str:
    return f"{adapter}-{rank}-seed{seed}"


@dataclass
class RunRecord:
    adapter: str
    rank: int
    seed: int
    task_ids: list[str]
    initial_perplexity: float
    final_perplexity: float
    # accuracy[i][j]: task i after training through task j; None where j < i
    accuracy: list[list[float | None]]
    task_losses: list[float]
    u_norm_trace: list[float]
    w_adapted_norm_trace: list[float]
    bound_max_gap: float | None
    bound_holds: bool
    shift_checks: int
    shift_max_error: float
    trainable_params: dict[str, int]
    frozen_checks: dict[str, bool]
    adapter_states: dict[str, dict]

    @property
    def key(self) -> str:
        return run_key(self.adapter, self.rank, self.seed)


@dataclass
class RunReport:
    config: dict
    runs: dict[str, RunRecord] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "runs": {k: asdict(self.runs[k]) for k in sorted(self.runs)},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')!r}")
        runs = {k: RunRecord(**v) for k, v in d["runs"].items()}
        return cls(config=d["config"], runs=runs)

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.dumps())


def merge_reports(reports: list[RunReport]) -> RunReport:
    """Union of runs keyed by identity; insertion order does not matter."""
    if not reports:
        raise ValueError("nothing to merge")
    merged = RunReport(config=reports[0].config)
    for r in reports:
        for k, rec in r.runs.items():
            if k in merged.runs and asdict(merged.runs[k]) != asdict(rec):
                raise ValueError(f"conflicting records for run {k}")
            merged.runs[k] = rec
    return merged


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def forgetting_metrics(report: RunReport) -> dict[str, dict]:
    """Per run: acc[i][i] - acc[i][last] for every task, and final/initial perplexity."""
    out = {}
    for k in sorted(report.runs):
        rec = report.runs[k]
        last = len(rec.task_ids) - 1
        out[k] = {
            "forgetting": {t: rec.accuracy[i][i] - rec.accuracy[i][last] for i, t in enumerate(rec.task_ids)},
            "perplexity_ratio": rec.final_perplexity / rec.initial_perplexity,
        }
    return out


def reevaluation_csv(report: RunReport) -> str:
    """One CSV row per (run, task i, after task j) with j >= i."""
    lines = ["run,adapter,rank,seed,task,after_task,accuracy"]
    for k in sorted(report.runs):
        rec = report.runs[k]
        for i, ti in enumerate(rec.task_ids):
            for j, tj in enumerate(rec.task_ids):
                if j >= i:
                    lines.append(f"{k},{rec.adapter},{rec.rank},{rec.seed},{ti},{tj},{rec.accuracy[i][j]!r}")
    return "\n".join(lines) + "\n"


# -- pieces of the protocol -----------------------------------------------------

def corpus_windows(tokens: np.ndarray, length: int, count: int, rng: RandomSource) -> tuple[np.ndarray, np.ndarray]:
    starts = rng.gen.integers(0, len(tokens) - length - 1, size=count)
    idx = starts[:, None] + np.arange(length)[None, :]
    return tokens[idx], tokens[idx + 1]


def pretrain_lm(cfg: ModelConfig, corpus: np.ndarray, steps: int, rng: RandomSource,
                batch_size: int = 16, lr: float = 3e-3, weight_decay: float = 0.01) -> TinyTransformer:
    """Train every backbone tensor on next-byte prediction; returns a frozen snapshot."""
    base_cfg = ModelConfig(**{**asdict(cfg), "adapter": "none"})
    model = init_model(base_cfg, rng.child("init"))
    model.train_backbone = True
    x, y = corpus_windows(corpus, cfg.max_seq_len, steps * batch_size, rng.child("windows"))
    sched = ScheduleConfig(lr, max(1, steps // 20), steps)
    train_epoch(model, x, y, AdamW(lr=lr, weight_decay=weight_decay), sched, rng.child("order"),
                batch_size=batch_size)
    model.train_backbone = False
    return model


def evaluate_accuracy(model: TinyTransformer, x: np.ndarray, y: np.ndarray, task_id: str,
                      batch_size: int = 256) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    correct = 0
    for s in range(0, len(x), batch_size):
        logits = model.forward_classify(x[s : s + batch_size], task_id)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[s : s + batch_size]))
    model._tape = None
    return correct / len(x)


def task_data_for(cfg: ExperimentConfig, seed: int) -> list[TaskData]:
    return [gen_synthetic_task(t, RandomSource(t.seed).child("data", seed)) for t in cfg.ordered_tasks()]


def _param_counts(model: TinyTransformer, kind: str, rank: int) -> dict[str, int]:
    per = [trainable_param_count(kind, *ad.shape, rank) for ad in model.adapters.values()]
    full = sum(trainable_param_count("full", *ad.shape, rank) for ad in model.adapters.values())
    return {"adapter": sum(per), "adapted_full": full, "heads": sum(h.weight.size + h.bias.size for h in model.heads.values())}


def run_single(cfg: ExperimentConfig, snapshot: TinyTransformer, held_out: np.ndarray, adapter: str,
               rank: int, seed: int) -> tuple[RunRecord, TinyTransformer]:
    """Execute the full protocol for one arm; returns the record and the final model."""
    rng = RandomSource(seed)
    model = snapshot.copy()
    attach_adapters(model, adapter, rank, cfg.alpha, rng.child("adapters"), cfg.selection, cfg.lora_scale_by_rank)
    cur_copies = {k: (ad.factors.c.copy(), ad.factors.r.copy())
                  for k, ad in model.adapters.items() if isinstance(ad, CurLoraAdapter)}
    data = task_data_for(cfg, seed)
    n = len(data)
    steps_per_task = [cfg.epochs * math.ceil(len(d.train_x) / cfg.batch_size) for d in data]
    total_steps = sum(steps_per_task)
    # short runs may place several checks on one step
    checkpoints = Counter(np.linspace(1, total_steps, cfg.shift_checkpoints).round().astype(int).tolist())
    shift_rng = rng.child("shift")
    shift = {"checks": 0, "max_err": 0.0}
    done_steps = 0

    def check_shift(global_step: int) -> None:
        for _ in range(checkpoints.get(global_step, 0)):
            for ad in model.adapters.values():
                x = shift_rng.gen.normal(size=(cfg.batch_size, ad.shape[0]))
                direct = frobenius_norm(adapter_forward(x, ad) - x @ ad.w)
                shift["max_err"] = max(shift["max_err"], abs(direct - output_shift(x, ad)))
            shift["checks"] += 1

    initial_ppl = perplexity(model, held_out)
    acc: list[list[float | None]] = [[None] * n for _ in range(n)]
    u_trace: list[float] = []
    w_trace: list[float] = []
    gaps: list[float] = []
    losses: list[float] = []
    head_snapshots: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for j, d in enumerate(data):
        tid = d.spec.task_id
        try:
            swap_head(model, tid, d.spec.n_classes, rng.child("heads"))
            opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
            total = steps_per_task[j]
            sched = ScheduleConfig(cfg.lr, max(1, round(cfg.warmup_frac * total)), total)
            step = 0
            for epoch in range(cfg.epochs):
                met = train_epoch(model, d.train_x, d.train_y, opt, sched, rng.child("shuffle", j, epoch),
                                  batch_size=cfg.batch_size, task_id=tid, step_offset=step,
                                  on_step=lambda s, off=done_steps: check_shift(off + s))
                step += len(met.losses)
                u_trace += met.u_norms
                w_trace += met.w_adapted_norms
                gaps += met.bound_gaps
            done_steps += step
            losses.append(met.mean_loss)
            model.active_task = None
            head = model.heads[tid]
            head_snapshots[tid] = (head.weight.copy(), head.bias.copy())
            for i in range(j + 1):
                acc[i][j] = evaluate_accuracy(model, data[i].eval_x, data[i].eval_y, data[i].spec.task_id)
        except Exception as exc:
            raise RuntimeError(f"run {run_key(adapter, rank, seed)} failed at task {j + 1} ({tid}): {exc}") from exc
    final_ppl = perplexity(model, held_out)

    frozen = {
        "backbone": all(np.array_equal(model.params[k], snapshot.params[k]) for k in snapshot.params),
        "cur_factors": all(np.array_equal(model.adapters[k].factors.c, c) and np.array_equal(model.adapters[k].factors.r, r)
                           for k, (c, r) in cur_copies.items()),
        "inactive_heads": all(np.array_equal(model.heads[t].weight, w) and np.array_equal(model.heads[t].bias, b)
                              for t, (w, b) in head_snapshots.items()),
    }
    max_gap = max(gaps) if gaps else None
    record = RunRecord(
        adapter=adapter,
        rank=rank,
        seed=seed,
        task_ids=[d.spec.task_id for d in data],
        initial_perplexity=initial_ppl,
        final_perplexity=final_ppl,
        accuracy=acc,
        task_losses=losses,
        u_norm_trace=u_trace,
        w_adapted_norm_trace=w_trace,
        bound_max_gap=max_gap,
        bound_holds=max_gap is None or max_gap <= BOUND_TOL,
        shift_checks=shift["checks"],
        shift_max_error=shift["max_err"],
        trainable_params=_param_counts(model, adapter, rank),
        frozen_checks=frozen,
        adapter_states={k: ad.to_dict() for k, ad in model.adapters.items() if isinstance(ad, CurLoraAdapter)},
    )
    return record, model


def prepare(cfg: ExperimentConfig) -> tuple[TinyTransformer, np.ndarray]:
    """Pretrain the shared snapshot and return it with the held-out token stream."""
    train, held = split_corpus(load_corpus(cfg.corpus_path))
    snapshot = pretrain_lm(cfg.model, train, cfg.pretrain_steps, RandomSource(cfg.pretrain_seed),
                           cfg.pretrain_batch_size, cfg.pretrain_lr, cfg.weight_decay)
    return snapshot, held


def _run_arm(args):
    cfg, snapshot, held, adapter, rank, seed = args
    t0 = time.perf_counter()
    record, _ = run_single(cfg, snapshot, held, adapter, rank, seed)
    return record, time.perf_counter() - t0


def run_continual_protocol(cfg: ExperimentConfig, snapshot: TinyTransformer | None = None,
                           held_out: np.ndarray | None = None, jobs: int = 1,
                           timings: dict[str, float] | None = None) -> RunReport:
    """All (adapter, rank, seed) arms of ``cfg``; wall-clock goes to ``timings`` if given."""
    cfg.validate()
    if snapshot is None or held_out is None:
        snapshot, held_out = prepare(cfg)
    arms = [(cfg, snapshot, held_out, a, r, s) for r in cfg.ranks for a in cfg.adapters for s in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_arm, arms))
    else:
        results = [_run_arm(a) for a in arms]
    report = RunReport(config=cfg.to_dict())
    for record, seconds in results:
        report.runs[record.key] = record
        if timings is not None:
            timings[record.key] = seconds
    return report
