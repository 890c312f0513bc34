"""Shared fixtures and the acceptance-criteria summary hook."""

import re

import pytest
import torch

from pairalign.config import RunConfig
from pairalign.data import load_corpus
from pairalign.synthdata import generate_corpus

torch.set_num_threads(1)


def tiny_run_config(steps: int = 2, seed: int = 0, batch_size: int = 4) -> RunConfig:
    """A desk-scale-within-desk-scale config for fast trainer tests."""
    raw = RunConfig().to_dict()
    raw["encoder"].update(patch_size=32, depth=1, width=32, heads=2,
                          embed_dim=32, proj_dim_dino=32, proj_dim_contrast=16)
    raw["views"].update(n_local=2)
    raw["curriculum"].update(batch_size=batch_size, seed=seed)
    for stage in raw["curriculum"]["stages"]:
        stage["steps"] = steps
    return RunConfig.from_dict(raw)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 slides x 6 patches; enough for trainer and loader tests."""
    root = tmp_path_factory.mktemp("corpus") / "small"
    generate_corpus(4, 6, seed=5, out_dir=root)
    return load_corpus(root)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per numbered criterion
# ---------------------------------------------------------------------------

_CRITERION_RE = re.compile(r"test_criterion_(\d+)")
_criterion_outcomes = {}
_criterion_names = {}


def pytest_runtest_logreport(report):
    match = _CRITERION_RE.search(report.nodeid)
    if not match or "test_acceptance" not in report.nodeid:
        return
    number = int(match.group(1))
    _criterion_names[number] = report.nodeid.split("::")[-1]
    if report.when == "call":
        _criterion_outcomes[number] = report.outcome
    elif report.when == "setup" and report.outcome != "passed":
        _criterion_outcomes[number] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criterion_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criterion_outcomes):
        outcome = _criterion_outcomes[number]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIPPED"}.get(
            outcome, outcome.upper())
        terminalreporter.write_line(
            f"criterion {number}: {status}  ({_criterion_names[number]})")
