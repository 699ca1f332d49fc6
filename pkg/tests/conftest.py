import os
from pathlib import Path

import pytest

from moedm import pipeline as pl
from moedm.config import load_config

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.toml"
# default-config artifacts are cached here between sessions; the manifest's
# stage hashes decide what is still valid
CACHE = Path(os.environ.get("MOEDM_TEST_CACHE", ROOT / ".test_cache"))

ACCEPTANCE_LINES: list[str] = []


def run_all(cfg, stages=pl.STAGES):
    run = pl.Run(cfg)
    fns = {"gen-data": pl.gen_data, "train-primitive": pl.train_primitive, "train-experts": pl.train_experts,
           "collect": pl.collect, "train-rl": pl.train_rl, "evaluate": pl.evaluate}
    for s in stages:
        fns[s](run)
    return run


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = load_config(SMOKE, [f'run.root="{root}"'])
    run = run_all(cfg)
    pl.report(run)
    return run


@pytest.fixture(scope="session")
def default_experts_run():
    """Default configuration through ``train-experts`` (a few minutes on first use)."""
    cfg = load_config(None, [f'run.root="{CACHE}"', 'run.name="default"'])
    return run_all(cfg, ("gen-data", "train-primitive", "train-experts"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
