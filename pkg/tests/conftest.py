import os
from pathlib import Path

import numpy as np
import pytest
import torch

from swfd import toy
from swfd.data import LabeledExample, from_levels, load_dataset
from swfd.models import ClassifierHandle, load_model

# Bump when the synthetic data or toy architectures change.
ZOO_VERSION = "2"
ZOO_DIR = Path(os.environ.get("SWFD_TOY_ZOO", Path.home() / ".cache" / "swfd" / "toy_zoo"))


@pytest.fixture(scope="session")
def toy_zoo():
    """Trained toy models plus a 200-image evaluation split, built once and cached on disk."""
    stamp = ZOO_DIR / "VERSION"
    if not stamp.is_file() or stamp.read_text().strip() != ZOO_VERSION:
        toy.build_zoo(ZOO_DIR)
        stamp.write_text(ZOO_VERSION)
    return ZOO_DIR


@pytest.fixture(scope="session")
def toy_surrogate(toy_zoo):
    return load_model("toy_convnet", checkpoint_dir=toy_zoo / "checkpoints")


@pytest.fixture(scope="session")
def toy_victims(toy_zoo):
    return [load_model(n, checkpoint_dir=toy_zoo / "checkpoints") for n in ("toy_resnet", "toy_plainnet")]


@pytest.fixture(scope="session")
def toy_examples(toy_zoo):
    _, examples = load_dataset(toy_zoo / "data" / "manifest.csv", num_categories=10, limit=None)
    return examples


def make_tiny(seed=0, size=16, dtype=torch.float64, arch="convnet"):
    """An untrained, very small toy network: fast enough for trajectory checks."""
    torch.manual_seed(seed)
    net = toy.build(arch, widths=(4, 8, 8, 8))
    layers = {i: f"stage{i}" for i in range(1, 5)}
    return ClassifierHandle(f"tiny_{arch}", net.to(dtype), size, (0.5,) * 3, (0.25,) * 3, 10, layers).to(dtype)


def random_example(seed=0, size=16, true_label=1, target_label=3, ex_id=None):
    rng = np.random.default_rng(seed)
    levels = torch.from_numpy(rng.integers(0, 256, size=(3, size, size)))
    return LabeledExample(ex_id or f"ex{seed}", from_levels(levels, torch.float64), true_label, target_label)


@pytest.fixture
def tiny_model():
    return make_tiny()


@pytest.fixture
def tiny_example():
    return random_example()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            name = nodeid.split("::")[1]
            number = int(name.split("_")[2])
            detail = dict(rep.user_properties).get("detail", "")
            if rep.failed:
                reason = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else ""
                detail = f"{detail} | {reason}" if detail else reason
            status = "PASS" if rep.passed else "FAIL"
            # parametrized criteria pass only if every case passes
            prev = lines.get(number)
            if prev is None or status == "FAIL" or prev[0] == "PASS":
                tag = name.split("[", 1)[1].rstrip("]") if "[" in name else ""
                entries = (prev[1] if prev else []) + [f"{tag + ': ' if tag else ''}{detail}"]
                worst = "FAIL" if status == "FAIL" or (prev and prev[0] == "FAIL") else "PASS"
                lines[number] = (worst, entries)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        status, entries = lines[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  " + " || ".join(e for e in entries if e))
