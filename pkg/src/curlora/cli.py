"""``curlora`` command line: decompose, run, report.

Exit codes: 0 success, 1 runtime failure, 2 invalid arguments or config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cur import column_probabilities, invert_probabilities, row_probabilities, sample_cur_factors
from .harness import ExperimentConfig, RunReport, merge_reports, prepare, run_continual_protocol, write_atomic
from .matrix import RandomSource, read_matrix, write_matrix
from .model import load_checkpoint, save_checkpoint
from .tasks import load_corpus, split_corpus

log = logging.getLogger("curlora")


class UsageError(Exception):
    """Bad arguments or config; maps to exit code 2."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- decompose -----------------------------------------------------------------

def cmd_decompose(args) -> int:
    try:
        w = read_matrix(args.weights)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read weights {args.weights}: {exc}") from exc
    m, n = w.shape
    if not 1 <= args.rank < min(m, n):
        raise UsageError(f"rank {args.rank} must satisfy 1 <= rank < min(m, n) = {min(m, n)}")
    seed = 0 if args.seed is None else args.seed
    try:
        factors = sample_cur_factors(w, args.rank, RandomSource(seed), mode=args.mode)
        pc, pr = column_probabilities(w), row_probabilities(w)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    probs = {
        "column": pc.tolist(),
        "column_inverted": invert_probabilities(pc).tolist(),
        "row": pr.tolist(),
        "row_inverted": invert_probabilities(pr).tolist(),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "factors.json", _dump({**factors.to_dict(), "seed": seed, "mode": args.mode, "shape": [m, n]}))
    write_atomic(out / "probabilities.json", _dump(probs))
    for name, mat in (("C", factors.c), ("R", factors.r)):
        tmp = out / f"{name}.dmat.tmp"
        write_matrix(tmp, mat)
        tmp.replace(out / f"{name}.dmat")
    log.info("wrote factors for %dx%d weight at rank %d to %s", m, n, args.rank, out)
    return 0


# -- run -------------------------------------------------------------------------

def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def snapshot_key(cfg: ExperimentConfig) -> str:
    """Hash of everything that determines the pretrained snapshot."""
    fields = {"model": asdict(cfg.model), "corpus": cfg.corpus_path, "steps": cfg.pretrain_steps,
              "batch": cfg.pretrain_batch_size, "lr": cfg.pretrain_lr, "seed": cfg.pretrain_seed,
              "wd": cfg.weight_decay}
    return hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:12]


def cmd_run(args) -> int:
    if args.config is None:
        raise UsageError("run needs --config PATH")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snap_path = out / f"pretrained-{snapshot_key(cfg)}.npz"
    if snap_path.exists():
        log.info("reusing pretrained snapshot %s", snap_path)
        snapshot = load_checkpoint(snap_path)
        held = split_corpus(load_corpus(cfg.corpus_path))[1]
    else:
        log.info("pretraining for %d steps", cfg.pretrain_steps)
        snapshot, held = prepare(cfg)
        tmp = snap_path.with_name(snap_path.name + ".tmp")
        save_checkpoint(snapshot, tmp)
        tmp.replace(snap_path)
    timings: dict[str, float] = {}
    report = run_continual_protocol(cfg, snapshot, held, jobs=args.jobs, timings=timings)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    for key, rec in report.runs.items():
        RunReport(config=report.config, runs={key: rec}).save(runs_dir / f"{key}.json")
        log.info("%s: acc %s, perplexity %.4f -> %.4f", key, rec.accuracy, rec.initial_perplexity,
                 rec.final_perplexity)
    write_atomic(out / "timing.json", _dump(timings))
    write_atomic(out / "config.json", _dump(report.config))
    print(f"{len(report.runs)} runs written to {runs_dir}")
    return 0


# -- report ----------------------------------------------------------------------

ADAPTER_LABEL = {"lora": "LoRA", "curlora": "CURLoRA"}


def table_rows(report: RunReport) -> tuple[list[str], list[str], list[list[float]]]:
    """Columns adapter x rank in table order; rows are metrics; cells average over seeds."""
    groups: dict[tuple[int, int], list] = {}
    for rec in report.runs.values():
        order = (rec.rank, 0 if rec.adapter == "lora" else 1)
        groups.setdefault(order, []).append(rec)
    keys = sorted(groups)
    columns = [f"{ADAPTER_LABEL[groups[k][0].adapter]}-{k[0]}" for k in keys]
    task_ids = groups[keys[0]][0].task_ids
    if any(rec.task_ids != task_ids for g in groups.values() for rec in g):
        raise UsageError("reports disagree on the task sequence")
    cells: list[tuple[str, callable]] = [("Initial Perplexity", lambda r: r.initial_perplexity)]
    for j, tj in enumerate(task_ids):
        cells.append((f"{tj} Accuracy (after {tj})", lambda r, j=j: r.accuracy[j][j]))
        for i in range(j):
            cells.append((f"{task_ids[i]} Accuracy (after {tj})", lambda r, i=i, j=j: r.accuracy[i][j]))
    cells.append(("Final Perplexity", lambda r: r.final_perplexity))
    values = [[float(np.mean([f(r) for r in groups[k]])) for k in keys] for _, f in cells]
    return [name for name, _ in cells], columns, values


def render_table(report: RunReport) -> tuple[str, str]:
    rows, columns, values = table_rows(report)
    width = max(len(r) for r in rows)
    colw = max(12, *(len(c) for c in columns))
    lines = ["Metric".ljust(width) + "".join(c.rjust(colw + 2) for c in columns)]
    for name, vals in zip(rows, values):
        lines.append(name.ljust(width) + "".join(f"{v:.4f}".rjust(colw + 2) for v in vals))
    text = "\n".join(lines) + "\n"
    csv = ["metric," + ",".join(columns)]
    csv += [f'"{name}",' + ",".join(repr(v) for v in vals) for name, vals in zip(rows, values)]
    return text, "\n".join(csv) + "\n"


def cmd_report(args) -> int:
    if not args.reports:
        raise UsageError("report needs at least one report file")
    reports = []
    for path in args.reports:
        try:
            reports.append(RunReport.load(path))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read report {path}: {exc}") from exc
    try:
        report = merge_reports(reports)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text, csv = render_table(report)
    sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "table.txt", text)
        write_atomic(out / "table.csv", csv)
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    common.add_argument("--seed", type=int, default=None, help="override the seed (list)")

    p = argparse.ArgumentParser(prog="curlora", description="CUR-decomposition adapters for continual fine-tuning.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", parents=[common], help="sample CUR factors of a stored weight matrix")
    d.add_argument("weights", help="matrix file (DMAT binary format)")
    d.add_argument("--rank", type=int, required=True)
    d.add_argument("--mode", choices=["sample", "topk"], default="sample")
    d.add_argument("--out", default="decompose-out")
    d.set_defaults(func=cmd_decompose)

    r = sub.add_parser("run", parents=[common], help="run the continual-learning protocol from a config")
    r.add_argument("--config", help="experiment config (JSON)")
    r.add_argument("--out", default="runs-out")
    r.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("report", parents=[common], help="render a comparison table from report files")
    t.add_argument("reports", nargs="*")
    t.add_argument("--out", default=None, help="also write table.txt and table.csv here")
    t.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
