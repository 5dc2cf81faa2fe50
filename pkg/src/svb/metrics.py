"""Convergence snapshots and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import DataIOError
from .mlr import accuracy, nll_loss

CSV_FIELDS = ("wall_ms", "step", "loss", "accuracy", "bytes_sent", "bytes_received")


@dataclass(frozen=True)
class ByteCounters:
    """Cumulative per-worker traffic; every field only ever grows."""

    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0


@dataclass(frozen=True)
class Snapshot:
    wall_ms: float
    step: int
    loss: float
    accuracy: float
    bytes_sent: int
    bytes_received: int


@dataclass
class RunMetrics:
    """What a worker reports at the end of a run."""

    worker_id: int = 0
    snapshots: list = field(default_factory=list)
    applied_updates: int = 0
    counters: object = None


def take_snapshot(replica, eval_set, counters, wall_ms, step):
    """Evaluate ``replica`` on ``eval_set``; ``counters`` must already be a consistent copy."""
    return Snapshot(
        wall_ms=float(wall_ms),
        step=int(step),
        loss=nll_loss(replica, eval_set),
        accuracy=accuracy(replica, eval_set),
        bytes_sent=int(counters.bytes_sent),
        bytes_received=int(counters.bytes_received),
    )


def write_csv(snapshots, path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for s in snapshots:
                w.writerow(
                    [
                        repr(s.wall_ms),
                        s.step,
                        repr(s.loss),
                        repr(s.accuracy),
                        s.bytes_sent,
                        s.bytes_received,
                    ]
                )
    except OSError as e:
        raise DataIOError(f"cannot write metrics to {path}: {e}") from e


def read_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise DataIOError(f"cannot read metrics from {path}: {e}") from e
    return [
        Snapshot(
            wall_ms=float(r["wall_ms"]),
            step=int(r["step"]),
            loss=float(r["loss"]),
            accuracy=float(r["accuracy"]),
            bytes_sent=int(r["bytes_sent"]),
            bytes_received=int(r["bytes_received"]),
        )
        for r in rows
    ]
