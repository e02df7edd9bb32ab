import json
import time
from dataclasses import replace
from pathlib import Path

import pytest

from promptmil.dataio import SyntheticConfig, generate_synthetic, load_manifest
from promptmil.harness import ExperimentConfig, run_experiment


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory) -> Path:
    """Small d=8 dataset used by layer/model tests."""
    out = tmp_path_factory.mktemp("tiny")
    generate_synthetic(
        SyntheticConfig(n_classes=2, dim=8, train_per_class=6, test_per_class=6,
                        patch_range=(3, 7), prototypes_per_class=2,
                        patch_examples_per_class=2, slide_examples_per_class=2,
                        seed=11),
        out)
    return out


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dir):
    return load_manifest(tiny_dir / "manifest.json")


@pytest.fixture(scope="session")
def default_dir(tmp_path_factory) -> Path:
    """The default synthetic family (d=64, U=2, 200 test bags)."""
    out = tmp_path_factory.mktemp("default-family")
    generate_synthetic(SyntheticConfig(seed=0), out)
    return out


@pytest.fixture(scope="session")
def default_manifest(default_dir):
    return load_manifest(default_dir / "manifest.json")


@pytest.fixture(scope="session")
def knowledge_gain(default_dir, tmp_path_factory):
    """The full few-shot experiment: PEMP vs LinearProbe vs the no-examples
    ablation, 5 seeds each. Run once per session; several tests read it."""
    out = tmp_path_factory.mktemp("runs")
    exp = ExperimentConfig(manifest=str(default_dir / "manifest.json"),
                           out_dir=str(out), shots=4)
    t0 = time.perf_counter()
    runs = {
        "pemp": run_experiment(exp),
        "linearprobe": run_experiment(replace(exp, method="linearprobe")),
        "wo_vt_examples": run_experiment(replace(exp, variant="wo_vt_examples")),
    }
    elapsed = time.perf_counter() - t0
    return {"runs": runs, "elapsed": elapsed, "out": out,
            "manifest_dir": default_dir}


@pytest.fixture(scope="session")
def ground_truth(default_dir):
    doc = json.loads((default_dir / "ground_truth.json").read_text())
    return doc
