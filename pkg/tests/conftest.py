import os

import numpy as np
import pytest

from svb.dataset import gen_synthetic
from svb.mlr import LabeledSample, SparseVector


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SVB_SKIP_TCP") == "1":
        skip = pytest.mark.skip(reason="SVB_SKIP_TCP=1")
        for item in items:
            if "tcp" in item.keywords:
                item.add_marker(skip)


def dense_sample(x, label):
    return LabeledSample(SparseVector.from_dense(np.asarray(x, dtype=float)), label)


@pytest.fixture(scope="session")
def bench():
    """The desk-scale benchmark: K=10, D=50, N=2000, margin 3."""
    return gen_synthetic(10, 50, 2000, seed=0, margin=3.0)


@pytest.fixture(scope="session")
def small():
    return gen_synthetic(4, 12, 200, seed=3, margin=3.0)


@pytest.fixture
def four_samples():
    # K=3, D=2 fixture shared by the loss and accuracy tests
    return [
        dense_sample([1.0, 0.0], 0),
        dense_sample([0.0, 1.0], 1),
        dense_sample([1.0, 1.0], 2),
        dense_sample([2.0, -1.0], 1),
    ]


def random_sparse(rng, length, density=0.5):
    from svb.mlr import SparseVector

    mask = rng.random(length) < density
    idx = np.flatnonzero(mask)
    vals = rng.normal(size=idx.size)
    return SparseVector(length, idx, vals)


def random_message(rng):
    """One random SV or matrix message, with varied codings and bit patterns."""
    from svb.protocol import Kind, MatrixMessage, SvMessage

    sender = int(rng.integers(0, 2**16))
    clock = int(rng.integers(0, 2**63)) * 2 + int(rng.integers(0, 2))
    if rng.random() < 0.6:
        k, d = int(rng.integers(1, 12)), int(rng.integers(1, 40))
        if rng.random() < 0.5:
            u = rng.normal(size=k) * np.exp(rng.normal(scale=30, size=k))
        else:
            u = random_sparse(rng, k)
        return SvMessage(sender, clock, u, random_sparse(rng, d, rng.random()))
    k, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    kind = Kind.PARAMETERS if rng.random() < 0.5 else Kind.GRADIENT
    return MatrixMessage(sender, clock, kind, rng.normal(size=(k, d)))
