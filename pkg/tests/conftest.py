import sys

import numpy as np
import pytest
import torch

from eibert.data import SyntheticTask, generate_splits
from eibert.model import ModelSpec, build_model
from eibert.numerics import precision


@pytest.fixture
def f64():
    with precision(64):
        yield


@pytest.fixture(autouse=True)
def _float32_default():
    # every test starts in 32-bit mode regardless of what the previous one did
    with precision(32):
        yield


def tiny_spec(**overrides) -> ModelSpec:
    base = dict(vocab_size=50, max_seq_len=12, embed_dim=8, hidden_dim=16, intermediate_dim=24, num_layers=2,
                num_heads=2, share_layers=True, factorized_embedding=True, num_classes=3, seed=0)
    base.update(overrides)
    return ModelSpec(**base)


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def model(spec):
    return build_model(spec)


def random_batch(vocab_size=50, batch=4, length=7, seed=0, ragged=True):
    rng = np.random.default_rng(seed)
    ids = torch.as_tensor(rng.integers(4, vocab_size, size=(batch, length)))
    mask = torch.ones_like(ids)
    if ragged:
        for i in range(batch):
            n = int(rng.integers(2, length + 1))
            mask[i, n:] = 0
            ids[i, n:] = 0
    ids[:, 0] = 2
    return ids, mask


@pytest.fixture(scope="session")
def small_task():
    return SyntheticTask(vocab_size=120, num_classes=3, tokens_per_class=20, min_len=7, max_len=10, seed=3)


@pytest.fixture(scope="session")
def small_splits(small_task):
    return generate_splits(small_task, 300, 80, 80)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
