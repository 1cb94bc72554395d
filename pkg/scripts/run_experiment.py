"""Run the continual-learning comparison and print the summary table.

    python scripts/run_experiment.py --config configs/desk.json --out results/desk

Writes one report per (adapter, rank, seed) under OUT/runs, then the merged
table (OUT/table.txt, OUT/table.csv), the per-run re-evaluation matrix
(OUT/reevaluation.csv) and forgetting metrics (OUT/forgetting.json).
"""

import argparse
import json
import sys
from pathlib import Path

from curlora.cli import main as cli_main
from curlora.harness import RunReport, forgetting_metrics, merge_reports, reevaluation_csv, write_atomic


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    code = cli_main(["run", "--config", args.config, "--out", args.out, "--jobs", str(args.jobs), "--verbose"])
    if code:
        return code
    out = Path(args.out)
    runs = sorted(str(p) for p in (out / "runs").glob("*.json"))
    code = cli_main(["report", *runs, "--out", str(out)])
    if code:
        return code
    merged = merge_reports([RunReport.load(p) for p in runs])
    write_atomic(out / "reevaluation.csv", reevaluation_csv(merged))
    metrics = forgetting_metrics(merged)
    write_atomic(out / "forgetting.json", json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    for key, m in metrics.items():
        drops = ", ".join(f"{t} {v:+.3f}" for t, v in m["forgetting"].items())
        print(f"{key:22s} forgetting: {drops}; perplexity x{m['perplexity_ratio']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
