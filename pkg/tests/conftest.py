import os
import time

import pytest
from hypothesis import HealthCheck, settings

from curlora.cli import load_config
from curlora.harness import prepare, run_single
from helpers import CONFIG

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    RESULTS = getattr(mod, "RESULTS", None)
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, name, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}  {name}: {detail}")


@pytest.fixture(scope="session")
def desk():
    """Pretrain once, then run every rank-16 arm of the shipped config."""
    t0 = time.perf_counter()
    cfg = load_config(CONFIG)
    snapshot, held = prepare(cfg)
    runs = {}
    for seed in cfg.seeds:
        for kind in cfg.adapters:
            runs[(kind, seed)] = run_single(cfg, snapshot, held, kind, 16, seed)
    return {"cfg": cfg, "snapshot": snapshot, "held": held, "runs": runs, "seconds": time.perf_counter() - t0}
