import numpy as np
import pytest
import torch

from dsvm_unet.data import SynthConfig, generate_synthetic, load_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthConfig(n_samples=12, n_val=4, size=64, seed=3), root)
    return root


@pytest.fixture(scope="session")
def tiny_splits(synth_root):
    return load_dataset(synth_root, "train", 64), load_dataset(synth_root, "val", 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
