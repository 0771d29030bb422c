import json
import shutil
import time
from pathlib import Path

import pytest

from rsaforge.cli import main

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """The desk-scale training run: 4 classes x 50 images, 10 epochs, seed 7."""
    out = tmp_path_factory.mktemp("train")
    start = time.perf_counter()
    code = main(["train", "--synthetic", "classes=4,per_class=50", "--epochs", "10",
                 "--seed", "7", "--out", str(out)])
    elapsed = time.perf_counter() - start
    log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    return {"dir": out, "exit_code": code, "seconds": elapsed, "log": log}


@pytest.fixture(scope="session")
def checkpoint10(trained_run):
    return trained_run["dir"] / "epoch_010.rdma"


@pytest.fixture
def manifest_for(tmp_path):
    """Write a manifest over the shipped stimulus sets; returns its path."""

    def make(checkpoint, sets=("set92", "set118"), label="resnet20", name="eval",
             ledger="ledger.json", **extra):
        data = {
            "label": label,
            "checkpoint": str(checkpoint),
            "output_dir": str(tmp_path / name),
            "ledger": str(tmp_path / ledger),
            "sets": {s: {"images": str(FIXTURES / s / "images"),
                         "brain": str(FIXTURES / s / "brain.rdma")} for s in sets},
            **extra,
        }
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(data))
        return path

    return make


@pytest.fixture
def golden_dir(tmp_path):
    dst = tmp_path / "golden"
    shutil.copytree(FIXTURES / "golden", dst)
    return dst
