"""Shared fixtures: the toy lab is built once per session through the CLI."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from beyondlab import cli, config, dataio
from beyondlab.detector import DetectorThresholds, NeighborScores, input_seeds, score_inputs
from beyondlab.models import ModelBundle


@dataclass
class ToyLab:
    root: Path
    cfg: dict
    bundle: ModelBundle
    thresholds: DetectorThresholds
    cal: dataio.DatasetContainer
    held: dataio.DatasetContainer
    cal_scores: NeighborScores
    held_scores: NeighborScores
    build_seconds: float
    summaries: dict

    @property
    def policy(self):
        return config.policy_of(self.cfg)



@pytest.fixture(scope="session")
def toy(tmp_path_factory) -> ToyLab:
    # BEYONDLAB_TOY_WORKSPACE reuses a workspace built earlier by the same commands (development aid)
    reuse = os.environ.get("BEYONDLAB_TOY_WORKSPACE")
    root = Path(reuse) if reuse else tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    summaries = {}
    for cmd in ("gen-data", "train-clf", "train-ssl", "probe", "calibrate"):
        if not reuse:
            assert cli.main([cmd, "--out", str(root)]) == 0, cmd
        summaries[cmd] = json.loads((root / "results" / cmd / "summary.json").read_text())
    build = time.perf_counter() - t0 if not reuse else float("nan")  # unknown for a reused workspace
    cfg = config.resolve()
    ws = cli.Workspace(root, cfg, force=False)
    bundle = ws.bundle()
    cal, held = ws.splits()
    k = cfg["detector"]["k"]
    policy = config.policy_of(cfg)
    seed = cfg["seed"]
    # same neighbor seeds as the calibrate command
    cal_scores = score_inputs(bundle, cal.as_float(), k, policy, input_seeds(seed, len(cal), 1_000_000))
    held_scores = score_inputs(bundle, held.as_float(), k, policy, input_seeds(seed, len(held), 2_000_000))
    return ToyLab(root, cfg, bundle, ws.thresholds(), cal, held, cal_scores, held_scores, build, summaries)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from importlib import import_module

    try:
        lines = import_module("test_acceptance").RESULTS
    except ImportError:
        return
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
