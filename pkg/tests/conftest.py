import logging

import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


import subprocess
import sys
import time
from pathlib import Path

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "caps.cli", "--threads", "1", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """Full pipeline on the 64-scene smoke config, one process per command."""
    root = tmp_path_factory.mktemp("smoke")
    c = SMOKE_CONFIG
    steps = [
        ("gen-data", "--config", c, "--out", root / "data"),
        ("train-stage1", "--config", c, "--data", root / "data", "--out", root / "s1"),
        ("assign", "--ckpt", root / "s1", "--data", root / "data", "--out", root / "assign"),
        ("weights", "--assignments", root / "assign", "--out", root / "w"),
        ("train-stage2", "--config", c, "--data", root / "data", "--ckpt", root / "s1",
         "--weights", root / "w", "--out", root / "s2"),
        ("eval", "--config", c, "--ckpt", root / "s2", "--suite", root / "data", "--out",
         root / "eval", "--assignments", root / "assign"),
        ("inspect-clusters", "--ckpt", root / "s1", "--data", root / "data", "--out",
         root / "inspect", "--top", "4"),
    ]
    t0 = time.time()
    results = [run_cli(*s) for s in steps]
    return {"root": root, "results": results, "seconds": time.time() - t0}


def pytest_terminal_summary(terminalreporter):
    from criteria import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
