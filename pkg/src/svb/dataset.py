"""Datasets: LIBSVM text I/O, round-robin partitioning, synthetic data, sampling.

All randomness comes from :class:`SplitMix64`, a 64-bit counter-based
generator whose output depends only on the seed and the draw count::

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z     <- state
    z     <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z     <- (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    out   <- z ^ (z >> 31)

Derived quantities:

* uniform integer in ``[0, n)``: ``(out * n) >> 64``
* uniform real in ``[0, 1)``: ``(out >> 11) * 2**-53``
* standard normal: Box-Muller on two consecutive reals ``a, b``:
  ``sqrt(-2 ln(1 - a)) * cos(2 pi b)``
* per-worker stream seed: the ``p``-th output of ``SplitMix64(seed)``
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataIOError, DimensionError, EmptyDataError, ParseError
from .mlr import LabeledSample, SparseVector

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = 2**64 - 1


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def next(self):
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _M1) & _MASK
        z = ((z ^ (z >> 27)) * _M2) & _MASK
        return z ^ (z >> 31)

    def block(self, n):
        """The next ``n`` outputs as a uint64 array (same values as ``n`` calls to next)."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
        self.state = (self.state + n * _GOLDEN) & _MASK
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    def below(self, n):
        return (self.next() * n) >> 64

    def uniforms(self, n):
        return (self.block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n):
        u = self.uniforms(2 * n)
        a, b = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-a)) * np.cos(2.0 * math.pi * b)


def derive_seed(seed, worker_id):
    rng = SplitMix64(seed)
    for _ in range(worker_id):
        rng.next()
    return rng.next()


class Dataset:
    def __init__(self, samples, num_features, num_classes):
        self.samples = list(samples)
        self.num_features = int(num_features)
        self.num_classes = int(num_classes)
        self._design = None
        if not self.samples:
            raise EmptyDataError("dataset has no samples")
        for n, s in enumerate(self.samples):
            if s.features.indices.size and s.features.indices[-1] >= self.num_features:
                raise DimensionError(
                    f"sample {n}: feature index {int(s.features.indices[-1])} >= D={self.num_features}"
                )
            if not 0 <= s.label < self.num_classes:
                raise DimensionError(f"sample {n}: label {s.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.num_features, self.num_classes) == (other.num_features, other.num_classes)
            and len(self) == len(other)
            and all(
                a.label == b.label and a.features == b.features
                for a, b in zip(self.samples, other.samples)
            )
        )

    def design(self):
        """Cached CSR feature matrix (N x D) and label array."""
        if self._design is None:
            indptr = np.zeros(len(self) + 1, dtype=np.int64)
            indptr[1:] = np.cumsum([s.features.nnz for s in self.samples])
            x = sp.csr_matrix(
                (
                    np.concatenate([s.features.values for s in self.samples]),
                    np.concatenate([s.features.indices for s in self.samples]),
                    indptr,
                ),
                shape=(len(self), self.num_features),
            )
            y = np.array([s.label for s in self.samples], dtype=np.int64)
            self._design = (x, y)
        return self._design


@dataclass(frozen=True, eq=False)
class Shard:
    """Read-only view of the samples one worker owns."""

    worker_id: int
    dataset: Dataset = field(repr=False)
    indices: np.ndarray

    def __len__(self):
        return int(self.indices.size)

    def samples(self):
        return [self.dataset[int(i)] for i in self.indices]


def partition(ds, num_workers, worker_id):
    """Round-robin shard: sample ``i`` goes to worker ``i mod num_workers``."""
    if num_workers < 1 or num_workers > len(ds):
        raise ValueError(f"need 1 <= workers <= N={len(ds)}, got {num_workers}")
    if not 0 <= worker_id < num_workers:
        raise ValueError(f"worker_id {worker_id} outside [0, {num_workers})")
    return Shard(worker_id, ds, np.arange(worker_id, len(ds), num_workers))


class SampleStream:
    """Endless uniform draws (with replacement) of dataset indices from a shard."""

    def __init__(self, shard, seed):
        if len(shard) == 0:
            raise EmptyDataError(f"shard of worker {shard.worker_id} is empty")
        self.indices = shard.indices
        self.rng = SplitMix64(seed)

    def __iter__(self):
        return self

    def __next__(self):
        return int(self.indices[self.rng.below(self.indices.size)])


def sample_stream(shard, seed):
    return SampleStream(shard, seed)


def gen_synthetic(num_classes, num_features, num_samples, seed, margin=3.0):
    """Gaussian clusters around equal-norm class centers; labels from the planted argmax.

    Centers are random directions scaled to norm ``margin``; each sample is a
    uniformly chosen center plus isotropic noise of expected norm 1.  Returns
    ``(dataset, planted)`` where ``planted`` is the center matrix.
    """
    k, d, n = num_classes, num_features, num_samples
    if k < 2 or d < k or n < k:
        raise ValueError(f"need K >= 2, D >= K, N >= K; got K={k}, D={d}, N={n}")
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    rng = SplitMix64(seed)
    g = rng.normals(k * d).reshape(k, d)
    centers = margin * g / np.linalg.norm(g, axis=1, keepdims=True)
    classes = np.array([rng.below(k) for _ in range(n)])
    x = centers[classes] + rng.normals(n * d).reshape(n, d) / math.sqrt(d)
    labels = np.argmax(x @ centers.T, axis=1)
    samples = [
        LabeledSample(SparseVector.from_dense(row), int(lab)) for row, lab in zip(x, labels)
    ]
    return Dataset(samples, d, k), centers


def load_libsvm(path, num_classes=None, num_features=None):
    """Read ``label idx:val ...`` lines with 0-based labels and feature indices."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    samples = []
    max_index, max_label = -1, -1
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label_f = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", line=lineno) from None
        if not label_f.is_integer() or label_f < 0:
            raise ParseError(f"label {tokens[0]!r} is not a nonnegative integer", line=lineno)
        label = int(label_f)
        idx, vals = [], []
        for tok in tokens[1:]:
            i_str, sep, v_str = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                i, v = int(i_str), float(v_str)
            except ValueError:
                raise ParseError(f"bad feature token {tok!r}", line=lineno) from None
            if i < 0:
                raise ParseError(f"negative feature index {i}", line=lineno)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value in {tok!r}", line=lineno)
            if idx and i <= idx[-1]:
                raise ParseError(f"feature index {i} unsorted or duplicated", line=lineno)
            idx.append(i)
            vals.append(v)
        if num_classes is not None and label >= num_classes:
            raise ParseError(f"label {label} >= K={num_classes}", line=lineno)
        if num_features is not None and idx and idx[-1] >= num_features:
            raise ParseError(f"feature index {idx[-1]} >= D={num_features}", line=lineno)
        if idx:
            max_index = max(max_index, idx[-1])
        max_label = max(max_label, label)
        samples.append((idx, vals, label))
    if not samples:
        raise EmptyDataError(f"{path} contains no samples")
    d = num_features if num_features is not None else max_index + 1
    k = num_classes if num_classes is not None else max_label + 1
    if d < 1:
        raise ParseError(f"{path}: cannot infer feature dimension (no features)")
    return Dataset(
        [LabeledSample(SparseVector(d, i, v, check=False), lab) for i, v, lab in samples], d, k
    )


def write_libsvm(ds, path):
    lines = []
    for s in ds:
        feats = " ".join(
            f"{int(i)}:{float(v)!r}" for i, v in zip(s.features.indices, s.features.values)
        )
        lines.append(f"{s.label} {feats}".rstrip() + "\n")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as e:
        raise DataIOError(f"cannot write {os.fspath(path)}: {e}") from e
