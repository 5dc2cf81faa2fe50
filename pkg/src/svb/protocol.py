"""Binary wire format for sufficient-vector, matrix and control messages.

Layout, all little-endian::

    magic "SVB1" | version u8 | kind u8 | sender_id u16 | clock u64      (16 bytes)

    kind 1, SV:       u_flag u8 | K u32 | D u32 | u | v
                      u dense  = K * f64
                      u sparse = count u32 | indices u32[count] | values f64[count]
                      v         = count u32 | indices u32[count] | values f64[count]
    kind 2/3, matrix: K u32 | D u32 | K*D f64 row-major
    kind 4, control:  code u8
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import (
    BadMagicError,
    DataIOError,
    DimensionError,
    EncodeError,
    IndexOrderError,
    MalformedMessageError,
    TruncatedMessageError,
    UnsupportedVersionError,
)
from .mlr import SparseVector

MAGIC = b"SVB1"
VERSION = 1
HEADER = struct.Struct("<4sBBHQ")
HEADER_SIZE = HEADER.size  # 16
SV_PREAMBLE = struct.Struct("<BII")
MATRIX_PREAMBLE = struct.Struct("<II")
SV_HEADER_SIZE = HEADER_SIZE + SV_PREAMBLE.size  # 25
MATRIX_HEADER_SIZE = HEADER_SIZE + MATRIX_PREAMBLE.size  # 24
REAL_SIZE = 8
INDEX_SIZE = 4
COUNT_SIZE = 4
U32_MAX = 2**32 - 1


class Kind(enum.IntEnum):
    SV = 1
    PARAMETERS = 2
    GRADIENT = 3
    CONTROL = 4


class ControlCode(enum.IntEnum):
    HELLO = 0
    SHUTDOWN = 1
    PULL = 2


@dataclass(frozen=True, eq=False)
class SvMessage:
    """One broadcast rank-1 update. ``u`` is a dense array or a SparseVector."""

    sender_id: int
    clock: int
    u: Union[np.ndarray, SparseVector]
    v: SparseVector

    @property
    def num_classes(self):
        return self.u.length if isinstance(self.u, SparseVector) else int(self.u.size)

    @property
    def num_features(self):
        return self.v.length

    def dense_u(self):
        if isinstance(self.u, SparseVector):
            return self.u.to_dense()
        return np.asarray(self.u, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, SvMessage):
            return NotImplemented
        if (self.sender_id, self.clock) != (other.sender_id, other.clock):
            return False
        if isinstance(self.u, SparseVector) != isinstance(other.u, SparseVector):
            return False
        if isinstance(self.u, SparseVector):
            same_u = self.u == other.u
        else:
            a, b = np.asarray(self.u, np.float64), np.asarray(other.u, np.float64)
            same_u = a.shape == b.shape and a.tobytes() == b.tobytes()
        return same_u and self.v == other.v


@dataclass(frozen=True, eq=False)
class MatrixMessage:
    sender_id: int
    clock: int
    kind: Kind
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in (Kind.PARAMETERS, Kind.GRADIENT):
            raise ValueError(f"matrix message kind must be PARAMETERS or GRADIENT, got {self.kind}")
        if np.ndim(self.values) != 2:
            raise DimensionError("matrix message values must be 2-d")

    def __eq__(self, other):
        if not isinstance(other, MatrixMessage):
            return NotImplemented
        a = np.asarray(self.values, np.float64)
        b = np.asarray(other.values, np.float64)
        return (
            (self.sender_id, self.clock, self.kind) == (other.sender_id, other.clock, other.kind)
            and a.shape == b.shape
            and a.tobytes() == b.tobytes()
        )


@dataclass(frozen=True)
class ControlMessage:
    sender_id: int
    clock: int
    code: ControlCode


Message = Union[SvMessage, MatrixMessage, ControlMessage]


def sparsify(u, epsilon=0.0):
    """Keep entries with ``|u_k| > epsilon``; dropped mass is not renormalized."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    u = np.asarray(u, dtype=np.float64)
    keep = np.flatnonzero(np.abs(u) > epsilon)
    return SparseVector(u.size, keep, u[keep], check=False)


# -- encoding ---------------------------------------------------------------


def _check_u32(n, what):
    if not 0 <= n <= U32_MAX:
        raise EncodeError(f"{what} {n} does not fit in u32")


def _header(kind, sender_id, clock):
    if not 0 <= sender_id <= 0xFFFF:
        raise EncodeError(f"sender_id {sender_id} does not fit in u16")
    if not 0 <= clock <= 2**64 - 1:
        raise EncodeError(f"clock {clock} does not fit in u64")
    return HEADER.pack(MAGIC, VERSION, int(kind), sender_id, clock)


def _sparse_bytes(x):
    _check_u32(x.length, "vector length")
    _check_u32(x.nnz, "nonzero count")
    return b"".join(
        (
            struct.pack("<I", x.nnz),
            x.indices.astype("<u4").tobytes(),
            x.values.astype("<f8").tobytes(),
        )
    )


def encode(msg):
    if isinstance(msg, SvMessage):
        k, d = msg.num_classes, msg.num_features
        _check_u32(k, "K")
        _check_u32(d, "D")
        sparse_u = isinstance(msg.u, SparseVector)
        if sparse_u:
            body_u = _sparse_bytes(msg.u)
        else:
            body_u = np.asarray(msg.u, dtype="<f8").tobytes()
        return b"".join(
            (
                _header(Kind.SV, msg.sender_id, msg.clock),
                SV_PREAMBLE.pack(1 if sparse_u else 0, k, d),
                body_u,
                _sparse_bytes(msg.v),
            )
        )
    if isinstance(msg, MatrixMessage):
        k, d = np.shape(msg.values)
        _check_u32(k, "K")
        _check_u32(d, "D")
        return b"".join(
            (
                _header(msg.kind, msg.sender_id, msg.clock),
                MATRIX_PREAMBLE.pack(k, d),
                np.ascontiguousarray(msg.values, dtype="<f8").tobytes(),
            )
        )
    if isinstance(msg, ControlMessage):
        return _header(Kind.CONTROL, msg.sender_id, msg.clock) + struct.pack("<B", int(msg.code))
    raise TypeError(f"cannot encode {type(msg).__name__}")


def wire_size(msg):
    """Length of ``encode(msg)``, computed from the layout alone."""
    if isinstance(msg, SvMessage):
        if isinstance(msg.u, SparseVector):
            u_bytes = COUNT_SIZE + (INDEX_SIZE + REAL_SIZE) * msg.u.nnz
        else:
            u_bytes = REAL_SIZE * msg.num_classes
        return SV_HEADER_SIZE + u_bytes + COUNT_SIZE + (INDEX_SIZE + REAL_SIZE) * msg.v.nnz
    if isinstance(msg, MatrixMessage):
        k, d = np.shape(msg.values)
        return MATRIX_HEADER_SIZE + REAL_SIZE * k * d
    if isinstance(msg, ControlMessage):
        return HEADER_SIZE + 1
    raise TypeError(f"cannot size {type(msg).__name__}")


def payload_size(msg):
    """Bytes spent on real values; everything else in ``wire_size`` is overhead."""
    if isinstance(msg, SvMessage):
        nu = msg.u.nnz if isinstance(msg.u, SparseVector) else msg.num_classes
        return REAL_SIZE * (nu + msg.v.nnz)
    if isinstance(msg, MatrixMessage):
        return REAL_SIZE * int(np.size(msg.values))
    return 0


# -- decoding ---------------------------------------------------------------


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if n > len(self.data) - self.pos:
            raise TruncatedMessageError(
                f"truncated {what}: need {n} bytes, have {len(self.data) - self.pos}",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def reals(self, n, what):
        return np.frombuffer(self.take(REAL_SIZE * n, what), dtype="<f8").astype(np.float64)

    def sparse(self, length, what):
        start = self.pos
        count = self.u32(f"{what} count")
        if count > length:
            raise IndexOrderError(f"{what} has {count} entries for length {length}", offset=start)
        idx = np.frombuffer(self.take(INDEX_SIZE * count, f"{what} indices"), dtype="<u4")
        idx = idx.astype(np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[-1] >= length):
            raise IndexOrderError(
                f"{what} indices not strictly increasing below {length}", offset=start + COUNT_SIZE
            )
        vals = self.reals(count, f"{what} values")
        return SparseVector(length, idx, vals, check=False)


def decode(data):
    r = _Reader(data)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}", offset=0)
    version, kind, sender_id, clock = r.unpack(struct.Struct("<BBHQ"), "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", offset=4)
    if kind == Kind.SV:
        flag, k, d = r.unpack(SV_PREAMBLE, "SV preamble")
        if flag == 0:
            u = r.reals(k, "u")
        elif flag == 1:
            u = r.sparse(k, "u")
        else:
            raise MalformedMessageError(f"unknown u coding flag {flag}", offset=HEADER_SIZE)
        v = r.sparse(d, "v")
        msg = SvMessage(sender_id, clock, u, v)
    elif kind in (Kind.PARAMETERS, Kind.GRADIENT):
        k, d = r.unpack(MATRIX_PREAMBLE, "matrix preamble")
        vals = r.reals(k * d, "matrix values").reshape(k, d)
        msg = MatrixMessage(sender_id, clock, Kind(kind), vals)
    elif kind == Kind.CONTROL:
        (code,) = r.unpack(struct.Struct("<B"), "control code")
        try:
            code = ControlCode(code)
        except ValueError:
            raise MalformedMessageError(f"unknown control code {code}", offset=HEADER_SIZE) from None
        msg = ControlMessage(sender_id, clock, code)
    else:
        raise MalformedMessageError(f"unknown message kind {kind}", offset=5)
    if r.pos != len(r.data):
        raise MalformedMessageError(f"{len(r.data) - r.pos} trailing bytes", offset=r.pos)
    return msg


# -- model files --------------------------------------------------------------


def write_model(path, weights, sender_id=0, clock=0):
    """Store a weight matrix as one encoded PARAMETERS message."""
    data = encode(MatrixMessage(sender_id, clock, Kind.PARAMETERS, np.asarray(weights)))
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as e:
        raise DataIOError(f"cannot write model to {path}: {e}") from e


def read_model(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise DataIOError(f"cannot read model {path}: {e}") from e
    msg = decode(data)
    if not isinstance(msg, MatrixMessage) or msg.kind != Kind.PARAMETERS:
        raise MalformedMessageError(f"{path} does not hold a parameter matrix")
    return msg.values
