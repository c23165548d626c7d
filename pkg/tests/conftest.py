import os

import numpy as np
import pytest

os.environ.setdefault("PYTHONWARNINGS", "ignore")

from pgtensor.state import LabelSet, PriorState, TrainConfig, init_state  # noqa: E402
from pgtensor.tensor import SparseBinaryTensor, sample_minibatch  # noqa: E402

_REPORT = []


def small_instance(seed, shape=(6, 7, 5), R=4, n_ones=60, batch=40, labeled_mode=1, n_labels=4):
    """Random tensor, labels, state, prior and a fixed minibatch with moderate magnitudes."""
    rng = np.random.default_rng(seed)
    ones = np.stack([rng.integers(0, n, n_ones) for n in shape], axis=1)
    tensor = SparseBinaryTensor(shape, ones)
    ids = rng.choice(shape[labeled_mode], n_labels, replace=False)
    labels = LabelSet.from_pairs((labeled_mode, int(i), 1 if j % 2 else -1) for j, i in enumerate(ids))
    cfg = TrainConfig(rank=R, init_scale=0.5, init_loc=0.8)
    state, prior = init_state(shape, labels, cfg, rng)
    # spread the prior so that its diagonal is not a multiple of the identity
    prior = PriorState(prior.delta, rng.uniform(0.5, 2.0, R), prior.rho2,
                       [m * rng.uniform(0.5, 2.0, m.shape) for m in prior.mu2])
    mb = sample_minibatch(tensor, batch, 0.5, rng)
    return tensor, labels, state, prior, mb, cfg


@pytest.fixture
def report():
    """Record one acceptance line: ``report(criterion, passed, detail)``."""
    def add(name, passed, detail=""):
        _REPORT.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
    return add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
