import os
import time

import numpy as np
import pytest
import torch

from f2tta.synth_data import generate_dataset
from f2tta.vit import TinyViT, ViTConfig, load_checkpoint, save_checkpoint, train_source

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

# (criterion, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def acceptance_log():
    def record(name, passed, detail):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")

    return record


@pytest.fixture
def tiny_config():
    return ViTConfig(image_size=32, patch_size=8, depth=2, dim=16, heads=2, mlp_ratio=2.0, n_classes=2, dropout_rate=0.1)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return TinyViT(tiny_config).eval()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(3, 40, 32, 2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


BENCH_DOMAINS = 4
BENCH_PER_DOMAIN = 1600
BENCH_EPOCHS = 40


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """4-domain benchmark and its trained source model, built once per session."""
    t0 = time.perf_counter()
    ds = generate_dataset(BENCH_DOMAINS, BENCH_PER_DOMAIN, 32, 2, seed=0)
    result = train_source(ds, ViTConfig(), epochs=BENCH_EPOCHS, lr=1e-4, seed=0, prefix_rows=12)
    path = save_checkpoint(result.model, tmp_path_factory.mktemp("bench") / "source.pt")
    return {
        "dataset": ds,
        "checkpoint": path,
        "val_accuracy": result.val_accuracy,
        "train_seconds": time.perf_counter() - t0,
        "load": lambda: load_checkpoint(path),
    }
