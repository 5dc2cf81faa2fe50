"""Multiclass logistic regression primitives.

The weight matrix is a plain ``float64`` array of shape ``(K, D)`` whose row
``k`` is the weight vector of class ``k``.  A stochastic gradient step on one
sample is the rank-1 matrix ``u v^T`` with ``u = -eta * (softmax(W x) - onehot(y))``
and ``v = x``, so a step can be shipped and replayed as the pair ``(u, v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, EmptyDataError, NonFiniteError


class SparseVector:
    """A real vector of nominal length ``length`` stored as (indices, values).

    Indices are strictly increasing and below ``length``.  Equality compares
    values bit-for-bit, which is what the wire roundtrip guarantees.
    """

    __slots__ = ("length", "indices", "values")

    def __init__(self, length, indices, values, *, check=True):
        self.length = int(length)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if check:
            self.validate()

    def validate(self):
        idx = self.indices
        if idx.ndim != 1 or self.values.ndim != 1 or idx.shape != self.values.shape:
            raise DimensionError("indices and values must be 1-d arrays of equal length")
        if self.length < 0:
            raise DimensionError(f"negative nominal length {self.length}")
        if idx.size:
            if idx[0] < 0:
                raise DimensionError(f"negative index {int(idx[0])}", index=int(idx[0]))
            bad = np.flatnonzero(np.diff(idx) <= 0)
            if bad.size:
                i = int(idx[bad[0] + 1])
                raise DimensionError(f"indices not strictly increasing at index {i}", index=i)
            if idx[-1] >= self.length:
                i = int(idx[-1])
                raise DimensionError(
                    f"index {i} out of range for length {self.length}", index=i
                )
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("sparse vector holds non-finite values")

    @classmethod
    def from_dense(cls, x):
        x = np.asarray(x, dtype=np.float64)
        nz = np.flatnonzero(x)
        return cls(x.size, nz, x[nz])

    def to_dense(self):
        out = np.zeros(self.length, dtype=np.float64)
        out[self.indices] = self.values
        return out

    @property
    def nnz(self):
        return int(self.indices.size)

    def __len__(self):
        return self.length

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.length == other.length
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self):
        return f"SparseVector(length={self.length}, nnz={self.nnz})"


@dataclass(frozen=True, eq=False)
class LabeledSample:
    features: SparseVector
    label: int


@dataclass(frozen=True, eq=False)
class SufficientVectors:
    """Rank-1 update factors; the step size is already folded into ``u``."""

    u: np.ndarray
    v: SparseVector

    def delta(self):
        """Dense ``u v^T`` with the exact products ``apply_sv`` adds."""
        out = np.zeros((self.u.size, self.v.length))
        out[:, self.v.indices] = np.outer(self.u, self.v.values)
        return out


def zero_weights(num_classes, num_features):
    if num_classes < 1 or num_features < 1:
        raise DimensionError(f"invalid weight shape ({num_classes}, {num_features})")
    return np.zeros((num_classes, num_features), dtype=np.float64)


def _check_features(w, x):
    if x.indices.size and x.indices[-1] >= w.shape[1]:
        i = int(x.indices[x.indices >= w.shape[1]][0])
        raise DimensionError(
            f"feature index {i} out of range for D={w.shape[1]}", index=i
        )


def logits(w, x):
    _check_features(w, x)
    return w[:, x.indices] @ x.values


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax input contains non-finite values")
    e = np.exp(z - z.max())
    return e / e.sum()


def compute_sv(w, sample, eta):
    if not (eta > 0 and math.isfinite(eta)):
        raise ValueError(f"step size must be positive and finite, got {eta}")
    k = w.shape[0]
    if not 0 <= sample.label < k:
        raise DimensionError(f"label {sample.label} out of range for K={k}", index=sample.label)
    residual = softmax(logits(w, sample.features))
    residual[sample.label] -= 1.0
    return SufficientVectors(-eta * residual, sample.features)


def apply_sv(w, sv):
    """Add ``u v^T`` to ``w`` in place, touching only nonzero rows of u and columns of v."""
    u = np.asarray(sv.u, dtype=np.float64)
    if u.shape != (w.shape[0],):
        raise DimensionError(f"u has length {u.size}, replica has K={w.shape[0]}")
    _check_features(w, sv.v)
    rows = np.flatnonzero(u)
    cols = sv.v.indices
    if rows.size and cols.size:
        w[np.ix_(rows, cols)] += np.outer(u[rows], sv.v.values)
    return w


def predict(w, x):
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(logits(w, x)))


def _design(w, data):
    """Return (sparse design matrix, labels) for a dataset or a sample sequence."""
    if hasattr(data, "design"):
        x, y = data.design()
    else:
        if len(data) == 0:
            raise EmptyDataError("no samples to evaluate")
        rows, cols, vals = [], [], []
        for n, s in enumerate(data):
            rows.append(np.full(s.features.nnz, n))
            cols.append(s.features.indices)
            vals.append(s.features.values)
        ncols = max([w.shape[1]] + [int(c[-1]) + 1 for c in cols if c.size])
        x = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(data), ncols),
        )
        y = np.array([s.label for s in data], dtype=np.int64)
    if x.shape[0] == 0:
        raise EmptyDataError("no samples to evaluate")
    if x.shape[1] > w.shape[1]:
        used = np.unique(x.indices)
        if used.size and used[-1] >= w.shape[1]:
            i = int(used[used >= w.shape[1]][0])
            raise DimensionError(f"feature index {i} out of range for D={w.shape[1]}", index=i)
        x = x[:, : w.shape[1]]
    elif x.shape[1] < w.shape[1]:
        x = sp.csr_matrix((x.data, x.indices, x.indptr), shape=(x.shape[0], w.shape[1]))
    if y.size and y.max() >= w.shape[0]:
        raise DimensionError(f"label {int(y.max())} out of range for K={w.shape[0]}")
    return x, y


def batch_logits(w, data):
    x, y = _design(w, data)
    return np.asarray(x @ w.T), y


def nll_loss(w, data):
    """Mean cross entropy ``-log softmax(W x)[y]`` via log-sum-exp."""
    z, y = batch_logits(w, data)
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float(np.mean(lse - z[np.arange(y.size), y]))


def accuracy(w, data):
    z, y = batch_logits(w, data)
    return float(np.mean(np.argmax(z, axis=1) == y))
