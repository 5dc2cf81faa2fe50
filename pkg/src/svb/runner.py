"""In-process multi-worker harnesses and the serial interleaving reference."""

from __future__ import annotations

import threading

from .dataset import derive_seed, partition, sample_stream
from .mlr import SufficientVectors, apply_sv, compute_sv, zero_weights
from .protocol import sparsify
from .transport import cps_server_run, cps_worker_run, loopback_mesh, loopback_star
from .worker import Worker, eta


def _run_threads(targets):
    """Run callables on their own threads; re-raise the first failure."""
    results = [None] * len(targets)
    errors = []

    def wrap(i, fn):
        def target():
            try:
                results[i] = fn()
            except BaseException as e:  # noqa: BLE001 - surfaced below
                errors.append(e)

        return target

    threads = [threading.Thread(target=wrap(i, fn), daemon=True) for i, fn in enumerate(targets)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def run_serial(dataset, config, *, eval_set=None):
    """Single replica over the whole dataset; returns (weights, metrics)."""
    return Worker(partition(dataset, 1, 0), config, eval_set=eval_set).run_serial()


def run_svb(dataset, config, num_workers, *, eval_set=None, record_deltas=False):
    """SVB over a loopback mesh. Returns the list of Worker objects after the run."""
    transports = loopback_mesh(num_workers)
    workers = [
        Worker(partition(dataset, num_workers, p), config, eval_set=eval_set, record_deltas=record_deltas)
        for p in range(num_workers)
    ]
    _run_threads([lambda w=w, t=t: w.run(t) for w, t in zip(workers, transports)])
    return workers, transports


def run_cps(dataset, config, num_workers, *, eval_set=None):
    """CPS over a loopback star. Returns (server weights, worker metrics, transports)."""
    server, links = loopback_star(num_workers)
    jobs = [lambda: cps_server_run(config, server, dataset.num_classes, dataset.num_features)]
    jobs += [
        lambda p=p: cps_worker_run(config, partition(dataset, num_workers, p), links[p], eval_set=eval_set)
        for p in range(num_workers)
    ]
    results = _run_threads(jobs)
    return results[0], [m for _, m in results[1:]], (server, links)


def interleaved_reference(dataset, config, num_workers):
    """Apply every worker's update stream to one matrix in ``(round, worker)`` order.

    Built only from the math primitives, so it checks the runtimes rather
    than sharing code paths with them.
    """
    w = zero_weights(dataset.num_classes, dataset.num_features)
    streams = [
        sample_stream(partition(dataset, num_workers, p), derive_seed(config.seed, p))
        for p in range(num_workers)
    ]
    for r in range(config.steps):
        for stream in streams:
            sv = compute_sv(w, dataset[next(stream)], eta(r, config))
            if config.epsilon_u > 0:
                sv = SufficientVectors(sparsify(sv.u, config.epsilon_u).to_dense(), sv.v)
            apply_sv(w, sv)
    return w
