"""Moving encoded messages between workers, and the parameter-server baseline.

A :class:`Transport` is one node's view of the network: it can send to or
broadcast over its peers and drain what they sent.  Received frames land in
a single inbox queue tagged with the sender; decoded messages that were
skipped by :meth:`Transport.recv_from` are stashed per sender so that
per-sender FIFO order is always preserved.

Two substrates share that machinery: an in-process loopback network
(:func:`loopback_mesh`, :func:`loopback_star`) and TCP with u32
little-endian length-prefixed frames (:class:`TcpTransport`).  In a TCP mesh
worker ``p`` dials every ``q < p`` and opens with a HELLO control frame.

The centralized parameter server speaks the same wire format: workers send
a PULL control message and receive the parameter matrix, and push dense
gradient matrices which the server adds to its copy.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, DimensionError, TransportError
from .metrics import ByteCounters
from .mlr import zero_weights
from .protocol import (
    ControlCode,
    ControlMessage,
    Kind,
    MatrixMessage,
    decode,
    encode,
)
from .worker import RECV_TIMEOUT, Worker

CPS_SERVER_ID = 0xFFFF
FRAME = struct.Struct("<I")


@dataclass(frozen=True)
class PeerAddress:
    worker_id: int
    host: str
    port: int

    def __str__(self):
        return f"{self.host}:{self.port}"


def parse_address(text, worker_id=0):
    host, sep, port = text.strip().rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {text!r} is not host:port")
    try:
        return PeerAddress(worker_id, host, int(port))
    except ValueError:
        raise ValueError(f"address {text!r} has a non-integer port") from None


def parse_peers(text):
    """``host:port,host:port,...`` -> addresses with worker ids in list order."""
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty peer list")
    return [parse_address(p, i) for i, p in enumerate(parts)]


class Transport:
    def __init__(self, node_id, peers):
        self.node_id = node_id
        self.peers = list(peers)
        self.inbox = queue.Queue()
        self._stash = {p: deque() for p in self.peers}
        self._lock = threading.Lock()
        self._sent = [0, 0]
        self._received = [0, 0]
        self._finished = set()

    @property
    def num_workers(self):
        """Mesh size including this node."""
        return len(self.peers) + 1

    def _send_bytes(self, peer, data):
        raise NotImplementedError

    def close(self):
        pass

    # -- sending -------------------------------------------------------------

    def _count_sent(self, nbytes, nmsgs):
        with self._lock:
            self._sent[0] += nbytes
            self._sent[1] += nmsgs

    def send(self, peer, msg):
        data = encode(msg)
        self._send_bytes(peer, data)
        self._count_sent(len(data), 1)

    def broadcast(self, msg):
        """Send ``msg`` once to every peer (M - 1 unicasts)."""
        data = encode(msg)
        for p in self.peers:
            self._send_bytes(p, data)
            self._count_sent(len(data), 1)

    # -- receiving -----------------------------------------------------------

    def _ingest(self, peer, data):
        """Decode one inbox item; ``None`` data means the peer hung up."""
        if data is None:
            if peer in self._finished:
                return None
            raise TransportError(f"peer {peer} disconnected", peer=peer)
        try:
            msg = decode(data)
        except DecodeError as e:
            raise TransportError(f"bad frame from peer {peer}: {e}", peer=peer) from e
        with self._lock:
            self._received[0] += len(data)
            self._received[1] += 1
        if isinstance(msg, ControlMessage) and msg.code == ControlCode.SHUTDOWN:
            self._finished.add(peer)
        return msg

    def _pop_stash(self, peer=None):
        for p in [peer] if peer is not None else self.peers:
            if self._stash[p]:
                return self._stash[p].popleft()
        return None

    def poll(self):
        """Every message received so far and not yet returned. Never blocks."""
        out = []
        while (m := self._pop_stash()) is not None:
            out.append(m)
        while True:
            try:
                peer, data = self.inbox.get_nowait()
            except queue.Empty:
                return out
            msg = self._ingest(peer, data)
            if msg is not None:
                out.append(msg)

    def recv(self, timeout=None):
        """Next message from any peer, or ``None`` on timeout."""
        m = self._pop_stash()
        if m is not None:
            return m
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                peer, data = self.inbox.get(timeout=remaining)
            except queue.Empty:
                return None
            msg = self._ingest(peer, data)
            if msg is not None:
                return msg

    def recv_from(self, peer, timeout=RECV_TIMEOUT):
        """Next message from ``peer``; others are stashed. Raises on timeout."""
        m = self._pop_stash(peer)
        if m is not None:
            return m
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            try:
                sender, data = self.inbox.get(timeout=max(0.0, remaining))
            except queue.Empty:
                raise TransportError(f"timed out waiting for peer {peer}", peer=peer) from None
            if data is None and sender != peer:
                # a finished bystander hanging up must not abort the wait
                self._ingest(sender, data)
                continue
            msg = self._ingest(sender, data)
            if msg is None:
                raise TransportError(f"peer {peer} closed before sending", peer=peer)
            if sender == peer:
                return msg
            self._stash[sender].append(msg)

    def counters(self):
        with self._lock:
            return ByteCounters(self._sent[0], self._received[0], self._sent[1], self._received[1])


# -- loopback ---------------------------------------------------------------


class LoopbackNetwork:
    def __init__(self):
        self.inboxes = {}
        self.closed = set()

    def endpoint(self, node_id, peers):
        t = LoopbackTransport(self, node_id, peers)
        self.inboxes[node_id] = t.inbox
        return t


class LoopbackTransport(Transport):
    def __init__(self, network, node_id, peers):
        super().__init__(node_id, peers)
        self.network = network

    def _send_bytes(self, peer, data):
        if peer in self.network.closed or self.node_id in self.network.closed:
            raise TransportError(f"peer {peer} is disconnected", peer=peer)
        self.network.inboxes[peer].put((self.node_id, data))

    def close(self):
        if self.node_id in self.network.closed:
            return
        self.network.closed.add(self.node_id)
        for p in self.peers:
            self.network.inboxes[p].put((self.node_id, None))


def loopback_mesh(num_workers):
    net = LoopbackNetwork()
    ids = range(num_workers)
    return [net.endpoint(p, [q for q in ids if q != p]) for p in ids]


def loopback_star(num_workers):
    """(server transport, worker transports) for an in-process CPS run."""
    net = LoopbackNetwork()
    server = net.endpoint(CPS_SERVER_ID, range(num_workers))
    return server, [net.endpoint(p, [CPS_SERVER_ID]) for p in range(num_workers)]


# -- TCP --------------------------------------------------------------------


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def _read_frame(sock):
    head = _recv_exact(sock, FRAME.size)
    if head is None:
        return None
    body = _recv_exact(sock, FRAME.unpack(head)[0])
    if body is None:
        raise ConnectionError("connection closed mid-frame")
    return body


def _write_frame(sock, data):
    sock.sendall(FRAME.pack(len(data)) + data)


def _hello(sock, node_id):
    _write_frame(sock, encode(ControlMessage(node_id, 0, ControlCode.HELLO)))


def _accept_hello(listener, timeout):
    listener.settimeout(timeout)
    sock, _ = listener.accept()
    sock.settimeout(timeout)
    frame = _read_frame(sock)
    msg = decode(frame) if frame is not None else None
    if not (isinstance(msg, ControlMessage) and msg.code == ControlCode.HELLO):
        sock.close()
        raise TransportError(f"expected HELLO handshake, got {msg!r}")
    sock.settimeout(None)
    return msg.sender_id, sock


def _dial(address, timeout):
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((address.host, address.port), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(None)
            return sock
        except OSError as e:
            if time.monotonic() >= deadline:
                raise TransportError(
                    f"cannot connect to peer {address.worker_id} at {address}: {e}",
                    peer=address.worker_id,
                ) from e
            time.sleep(0.05)


def listen(address):
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((address.host, address.port))
    sock.listen(64)
    return sock


class TcpTransport(Transport):
    def __init__(self, node_id, sockets):
        super().__init__(node_id, sorted(sockets))
        self.sockets = dict(sockets)
        self._send_locks = {p: threading.Lock() for p in self.sockets}
        self._readers = []
        for peer, sock in self.sockets.items():
            t = threading.Thread(target=self._reader, args=(peer, sock), daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, peer, sock):
        try:
            while True:
                frame = _read_frame(sock)
                if frame is None:
                    break
                self.inbox.put((peer, frame))
        except OSError:
            pass
        self.inbox.put((peer, None))

    def _send_bytes(self, peer, data):
        try:
            with self._send_locks[peer]:
                _write_frame(self.sockets[peer], data)
        except OSError as e:
            raise TransportError(f"send to peer {peer} failed: {e}", peer=peer) from e

    def close(self):
        for sock in self.sockets.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    @classmethod
    def mesh(cls, worker_id, addresses, listener=None, timeout=30.0):
        """Join the full mesh described by ``addresses`` (indexed by worker id)."""
        own = addresses[worker_id]
        if listener is None:
            listener = listen(own)
        socks = {}
        try:
            for q in range(worker_id):
                socks[q] = _dial(addresses[q], timeout)
                _hello(socks[q], worker_id)
            for _ in range(len(addresses) - 1 - worker_id):
                q, sock = _accept_hello(listener, timeout)
                if q in socks or not worker_id < q < len(addresses):
                    sock.close()
                    raise TransportError(f"unexpected HELLO from worker {q}", peer=q)
                socks[q] = sock
        except (OSError, DecodeError) as e:
            for s in socks.values():
                s.close()
            raise TransportError(f"mesh setup failed for worker {worker_id}: {e}") from e
        finally:
            listener.close()
        return cls(worker_id, socks)

    @classmethod
    def serve(cls, address, num_workers, listener=None, timeout=30.0):
        """Accept ``num_workers`` CPS workers; returns the server-side transport."""
        if listener is None:
            listener = listen(address)
        socks = {}
        try:
            while len(socks) < num_workers:
                q, sock = _accept_hello(listener, timeout)
                if q in socks or not 0 <= q < num_workers:
                    sock.close()
                    raise TransportError(f"unexpected HELLO from worker {q}", peer=q)
                socks[q] = sock
        except (OSError, DecodeError) as e:
            for s in socks.values():
                s.close()
            raise TransportError(f"server setup failed: {e}") from e
        finally:
            listener.close()
        return cls(CPS_SERVER_ID, socks)

    @classmethod
    def connect(cls, worker_id, server, timeout=30.0):
        sock = _dial(server, timeout)
        try:
            _hello(sock, worker_id)
        except OSError as e:
            sock.close()
            raise TransportError(f"handshake with server failed: {e}", peer=CPS_SERVER_ID) from e
        return cls(worker_id, {CPS_SERVER_ID: sock})


# -- centralized parameter server -------------------------------------------


def _expect(msg, peer, kind_ok, what):
    if not kind_ok(msg):
        raise TransportError(f"expected {what} from worker {peer}, got {msg!r}", peer=peer)
    return msg


def _is_pull(m):
    return isinstance(m, ControlMessage) and m.code == ControlCode.PULL


def _is_push(m):
    return isinstance(m, MatrixMessage) and m.kind == Kind.GRADIENT


def _is_shutdown(m):
    return isinstance(m, ControlMessage) and m.code == ControlCode.SHUTDOWN


def cps_server_run(config, transport, num_classes, num_features):
    """Serve pulls and accumulate pushed gradients until every worker shuts down.

    With ``config.lockstep`` the server admits workers strictly in the order
    ``(round, worker)``, which fixes the global update order.
    """
    w = zero_weights(num_classes, num_features)
    pushes = 0

    def add(msg):
        nonlocal pushes
        if msg.values.shape != w.shape:
            raise DimensionError(f"pushed gradient {msg.values.shape} != server matrix {w.shape}")
        w[...] += msg.values
        pushes += 1

    def reply(peer):
        transport.send(peer, MatrixMessage(CPS_SERVER_ID, pushes, Kind.PARAMETERS, w))

    workers = sorted(transport.peers)
    if config.lockstep:
        for r in range(config.steps):
            for p in workers:
                if r % config.tau == 0:
                    _expect(transport.recv_from(p), p, _is_pull, "PULL")
                    reply(p)
                add(_expect(transport.recv_from(p), p, _is_push, "gradient push"))
        for p in workers:
            _expect(transport.recv_from(p), p, _is_shutdown, "SHUTDOWN")
        return w

    done = set()
    while len(done) < len(workers):
        msg = transport.recv(RECV_TIMEOUT)
        if msg is None:
            raise TransportError("server timed out waiting for workers")
        if _is_pull(msg):
            reply(msg.sender_id)
        elif _is_push(msg):
            add(msg)
        elif _is_shutdown(msg):
            done.add(msg.sender_id)
        else:
            raise TransportError(f"unexpected message {msg!r}", peer=msg.sender_id)
    return w


def cps_worker_step(worker, link):
    """One CPS step: pull every ``tau`` steps, then compute and push a dense gradient."""
    if worker.clock % worker.config.tau == 0:
        link.send(CPS_SERVER_ID, ControlMessage(worker.worker_id, worker.clock, ControlCode.PULL))
        msg = link.recv_from(CPS_SERVER_ID)
        if not (isinstance(msg, MatrixMessage) and msg.kind == Kind.PARAMETERS):
            raise TransportError(f"expected parameters from server, got {msg!r}", peer=CPS_SERVER_ID)
        worker.replace_replica(msg.values)
    msg = worker.local_step()
    delta = np.outer(msg.dense_u(), msg.v.to_dense())
    link.send(CPS_SERVER_ID, MatrixMessage(worker.worker_id, worker.clock, Kind.GRADIENT, delta))
    return worker


def cps_worker_run(config, shard, link, *, eval_set=None):
    worker = Worker(shard, config, eval_set=eval_set)
    worker.start()
    try:
        worker.snapshot(link.counters())
        for _ in range(config.steps):
            cps_worker_step(worker, link)
            if worker.snapshot_due():
                worker.snapshot(link.counters())
        link.send(CPS_SERVER_ID, ControlMessage(worker.worker_id, worker.clock, ControlCode.SHUTDOWN))
        return worker.finish(link)
    except TransportError as e:
        worker.metrics.applied_updates = worker.applied
        e.metrics = worker.metrics
        raise

