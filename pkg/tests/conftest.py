import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from nucleo.config import parse_config

OVERFIT_CONFIG = """\
epochs = 25
stage_epochs = 10,10,5
steps_per_epoch = 8
batch_size = 2
lr_initial = 0.01
lr_final = 0.001
test_count = 0
val_fraction = 0.0
augment.crop_hw = none
augment.rotation_degrees = 0.0,0.0
augment.blur_sigma = 0.0,0.0
augment.flip_h_prob = 0.0
augment.flip_v_prob = 0.0
"""

_ACCEPTANCE: dict[str, str] = {}
_MEASURED: dict[str, dict] = {}


@dataclass
class OverfitRun:
    root: Path
    out_dir: Path
    trainer: object
    log: object
    seconds: float


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    from nucleo.synth import make_synthetic_dataset

    root = tmp_path_factory.mktemp("synth")
    make_synthetic_dataset(2, root, seed=0)
    return root


@pytest.fixture(scope="session")
def overfit_run(synth_root, tmp_path_factory):
    """The two-image, 200-step training run shared by the slow tests."""
    from nucleo.training import prepare_trainer

    out = tmp_path_factory.mktemp("overfit")
    cfg = parse_config(OVERFIT_CONFIG, {"dataset_root": str(synth_root), "out_dir": str(out)})
    trainer = prepare_trainer(cfg)
    t0 = time.perf_counter()
    log = trainer.fit()
    return OverfitRun(synth_root, out, trainer, log, time.perf_counter() - t0)


@pytest.fixture
def measured(request):
    """Dict whose entries are echoed beside the test's acceptance line."""
    values = _MEASURED.setdefault(request.node.name, {})
    return values


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _ACCEPTANCE.items():
        values = _MEASURED.get(name, {})
        detail = "  ".join(f"{k}={_fmt(v)}" for k, v in values.items())
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)
