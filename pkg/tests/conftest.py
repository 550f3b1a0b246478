import shutil
import time
from pathlib import Path

import pytest

from cascade_distill import cli

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CONFIG = ROOT / "configs" / "reference.cfg"

# acceptance results, printed at the end of the session
ACCEPTANCE = {}


def record(number, title, ok, detail=""):
    ACCEPTANCE[number] = (title, bool(ok), detail)


def run_pipeline(out):
    t0 = time.perf_counter()
    for command in cli.PIPELINE:
        cli.run(command, REFERENCE_CONFIG, out=str(out))
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """The reference pipeline, run once per session: (output dir, seconds)."""
    out = tmp_path_factory.mktemp("reference")
    shutil.rmtree(out)
    elapsed = run_pipeline(out)
    return out, elapsed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}" + (f"  ({detail})" if detail else ""))
