"""Per-worker training runtime.

A worker owns a replica of the weight matrix and a shard of the data.  Each
local step samples from the shard, computes the sufficient vectors, applies
them to the replica and hands the message to the transport for broadcast.
Messages from peers are replayed onto the replica as they arrive.

Two schedules are supported:

* asynchronous: three threads (local update, remote update, communication)
  connected by bounded FIFO queues, applying remote updates whenever they
  are available;
* lockstep: one thread replays the global order ``(round, worker)`` so that
  every replica sees the same update sequence and the run is bit-reproducible.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .dataset import derive_seed, sample_stream
from .errors import ConfigError, DimensionError, DuplicateMessageError, TransportError
from .metrics import ByteCounters, RunMetrics, take_snapshot
from .mlr import SufficientVectors, apply_sv, compute_sv, zero_weights
from .protocol import ControlCode, ControlMessage, SvMessage, sparsify

MODES = ("svb", "cps", "serial")
RECV_TIMEOUT = 60.0


@dataclass
class TrainingConfig:
    eta0: float = 0.1
    decay: float = 0.0
    steps: int = 1000
    eval_every: int = 100
    epsilon_u: float = 0.0
    mode: str = "svb"
    lockstep: bool = False
    seed: int = 0
    tau: int = 1
    queue_capacity: int = 1024

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be > 0, got {self.eta0}")
        if self.decay < 0:
            raise ConfigError(f"decay must be >= 0, got {self.decay}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.epsilon_u < 0:
            raise ConfigError(f"epsilon_u must be >= 0, got {self.epsilon_u}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if self.queue_capacity < 1:
            raise ConfigError(f"queue_capacity must be >= 1, got {self.queue_capacity}")


def eta(t, config):
    return config.eta0 / (1.0 + config.decay * t)


class SvQueues:
    """Input and output SV queues; ``put`` blocks when full, nothing is dropped."""

    def __init__(self, capacity=1024):
        self.input = queue.Queue(maxsize=capacity)
        self.output = queue.Queue(maxsize=capacity)


class Worker:
    """Replica, shard, sampling stream and bookkeeping of one worker.

    Every read or write of ``replica`` happens under ``lock``; the lock is
    never held while waiting on a queue or the network.
    """

    def __init__(self, shard, config, *, eval_set=None, record_deltas=False):
        ds = shard.dataset
        self.worker_id = shard.worker_id
        self.shard = shard
        self.config = config
        self.eval_set = eval_set if eval_set is not None else ds
        self.replica = zero_weights(ds.num_classes, ds.num_features)
        self.clock = 0
        self.stream = sample_stream(shard, derive_seed(config.seed, shard.worker_id))
        self.seen = set()
        self.applied = 0
        self.lock = threading.Lock()
        self.deltas = {} if record_deltas else None
        self.metrics = RunMetrics(worker_id=self.worker_id)
        self._t0 = None

    # -- update primitives ---------------------------------------------------

    def next_sv(self):
        """Sufficient vectors for the next local step at the current replica."""
        sample = self.shard.dataset[next(self.stream)]
        with self.lock:
            sv = compute_sv(self.replica, sample, eta(self.clock, self.config))
        if self.config.epsilon_u > 0:
            u = sparsify(sv.u, self.config.epsilon_u)
            return SufficientVectors(u.to_dense(), sv.v), u
        return sv, sv.u

    def local_step(self):
        sv, u_wire = self.next_sv()
        with self.lock:
            apply_sv(self.replica, sv)
            self.clock += 1
            self.applied += 1
        msg = SvMessage(self.worker_id, self.clock, u_wire, sv.v)
        if self.deltas is not None:
            self.deltas[(self.worker_id, self.clock)] = sv.delta()
        return msg

    def apply_remote(self, msg):
        k, d = self.replica.shape
        if msg.num_classes != k or msg.num_features != d:
            raise DimensionError(
                f"message from {msg.sender_id} has shape ({msg.num_classes}, {msg.num_features}),"
                f" replica is ({k}, {d})"
            )
        key = (msg.sender_id, msg.clock)
        if msg.sender_id == self.worker_id or key in self.seen:
            raise DuplicateMessageError(f"duplicate update (sender={key[0]}, clock={key[1]})")
        sv = SufficientVectors(msg.dense_u(), msg.v)
        with self.lock:
            apply_sv(self.replica, sv)
            self.seen.add(key)
            self.applied += 1
        if self.deltas is not None:
            self.deltas[key] = sv.delta()

    def replace_replica(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.replica.shape:
            raise DimensionError(f"pulled matrix {values.shape} != replica {self.replica.shape}")
        with self.lock:
            self.replica[...] = values

    def weights(self):
        with self.lock:
            return self.replica.copy()

    # -- metrics -------------------------------------------------------------

    def start(self):
        self._t0 = time.perf_counter()

    def snapshot(self, counters):
        if self._t0 is None:
            self._t0 = time.perf_counter()
        wall_ms = (time.perf_counter() - self._t0) * 1000.0
        with self.lock:
            snap = take_snapshot(self.replica, self.eval_set, counters, wall_ms, self.clock)
        self.metrics.snapshots.append(snap)
        return snap

    def snapshot_due(self):
        return self.clock % self.config.eval_every == 0 and self.clock < self.config.steps

    def finish(self, transport):
        counters = transport.counters() if transport is not None else _ZERO
        self.snapshot(counters)
        self.metrics.applied_updates = self.applied
        self.metrics.counters = counters
        return self.weights(), self.metrics

    # -- schedules -----------------------------------------------------------

    def run_serial(self):
        self.start()
        self.snapshot(_ZERO)
        for _ in range(self.config.steps):
            self.local_step()
            if self.snapshot_due():
                self.snapshot(_ZERO)
        return self.finish(None)

    def run(self, transport):
        self.start()
        try:
            self.snapshot(transport.counters())
            if transport.num_workers == 1:
                for _ in range(self.config.steps):
                    self.local_step()
                    if self.snapshot_due():
                        self.snapshot(transport.counters())
            elif self.config.lockstep:
                self._run_lockstep(transport)
            else:
                self._run_async(transport)
            return self.finish(transport)
        except TransportError as e:
            self.metrics.applied_updates = self.applied
            e.metrics = self.metrics
            raise

    def _run_lockstep(self, transport):
        peers = transport.peers
        for r in range(self.config.steps):
            for q in range(transport.num_workers):
                if q == self.worker_id:
                    transport.broadcast(self.local_step())
                    if self.snapshot_due():
                        self.snapshot(transport.counters())
                    continue
                msg = transport.recv_from(q, RECV_TIMEOUT)
                if not isinstance(msg, SvMessage) or msg.clock != r + 1:
                    raise TransportError(
                        f"lockstep: expected update {r + 1} from worker {q}, got {msg!r}", peer=q
                    )
                self.apply_remote(msg)
        transport.broadcast(ControlMessage(self.worker_id, self.clock, ControlCode.SHUTDOWN))
        for q in peers:
            msg = transport.recv_from(q, RECV_TIMEOUT)
            if not (isinstance(msg, ControlMessage) and msg.code == ControlCode.SHUTDOWN):
                raise TransportError(f"lockstep: expected shutdown from worker {q}, got {msg!r}", peer=q)

    def _run_async(self, transport):
        queues = SvQueues(self.config.queue_capacity)
        failures = []
        done = object()
        stop = threading.Event()

        def put(q, item):
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.05)
                    return
                except queue.Full:
                    pass

        def guarded(fn):
            def target():
                try:
                    fn()
                except BaseException as e:  # noqa: BLE001 - re-raised on the caller's thread
                    failures.append(e)
                    stop.set()

            return target

        def local_loop():
            for _ in range(self.config.steps):
                if stop.is_set():
                    return
                put(queues.output, self.local_step())
                if self.snapshot_due():
                    self.snapshot(transport.counters())
            put(queues.output, done)

        def remote_loop():
            while True:
                try:
                    msg = queues.input.get(timeout=0.05)
                except queue.Empty:
                    if stop.is_set():
                        return
                    continue
                if msg is done:
                    return
                self.apply_remote(msg)

        def comm_loop():
            finished = set()
            sent_shutdown = False
            try:
                while not stop.is_set() and not (sent_shutdown and finished == set(transport.peers)):
                    while not sent_shutdown:
                        try:
                            item = queues.output.get_nowait()
                        except queue.Empty:
                            break
                        if item is done:
                            transport.broadcast(
                                ControlMessage(self.worker_id, self.clock, ControlCode.SHUTDOWN)
                            )
                            sent_shutdown = True
                        else:
                            transport.broadcast(item)
                    msg = transport.recv(0.001)
                    incoming = ([msg] if msg is not None else []) + transport.poll()
                    for m in incoming:
                        if isinstance(m, SvMessage):
                            put(queues.input, m)
                        elif isinstance(m, ControlMessage) and m.code == ControlCode.SHUTDOWN:
                            finished.add(m.sender_id)
                        else:
                            raise TransportError(f"unexpected message {m!r}", peer=m.sender_id)
            finally:
                put(queues.input, done)

        threads = [
            threading.Thread(target=guarded(f), name=f"worker{self.worker_id}-{f.__name__}")
            for f in (local_loop, remote_loop, comm_loop)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            raise failures[0]


_ZERO = ByteCounters()


def run(config, shard, transport=None, *, eval_set=None):
    """Train one worker; ``transport=None`` or mode ``serial`` trains alone."""
    w = Worker(shard, config, eval_set=eval_set)
    if transport is None or config.mode == "serial":
        return w.run_serial()
    return w.run(transport)

