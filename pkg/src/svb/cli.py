"""Command-line entry point: ``svb train``, ``svb gen-data`` and ``svb eval``.

Labels and feature indices in LIBSVM files are 0-based.  Training settings
come from built-in defaults, then a JSON ``--config`` file (keys spelled like
the flags, e.g. ``"eval-every"``), then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .dataset import gen_synthetic, load_libsvm, partition, write_libsvm
from .errors import (
    ConfigError,
    DataIOError,
    DecodeError,
    DimensionError,
    EmptyDataError,
    ParseError,
    SvbError,
)
from .metrics import write_csv
from .mlr import accuracy, nll_loss
from .protocol import read_model, write_model
from .runner import run_cps, run_serial, run_svb
from .transport import TcpTransport, cps_server_run, cps_worker_run, parse_address, parse_peers
from .worker import MODES, TrainingConfig, Worker

log = logging.getLogger("svb")

ROLES = ("peer", "server", "cps-worker")

DEFAULTS = {
    "mode": "svb",
    "workers": 1,
    "role": "peer",
    "peers": None,
    "listen": None,
    "worker-id": None,
    "data": None,
    "eval-path": None,
    "synth-classes": 10,
    "synth-features": 50,
    "synth-samples": 2000,
    "synth-margin": 3.0,
    "eta0": 0.1,
    "decay": 0.0,
    "steps": 1000,
    "eval-every": 100,
    "epsilon-u": 0.0,
    "lockstep": False,
    "seed": 0,
    "tau": 1,
    "queue-capacity": 1024,
    "out-csv": None,
    "out-model": None,
}


class UsageError(SvbError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunSpec:
    config: TrainingConfig
    workers: int
    role: str
    peers: list
    listen: object
    worker_id: int
    data: str
    eval_path: str
    synthetic: tuple
    out_csv: str
    out_model: str


def _train_flags(p):
    p.add_argument("--config", help="JSON file with the same keys as the flags")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--workers", type=int, help="number of workers M")
    p.add_argument("--role", choices=ROLES)
    p.add_argument("--peers", help="host:port[,host:port...] (svb: all workers; cps-worker: the server)")
    p.add_argument("--listen", help="host:port this process binds")
    p.add_argument("--worker-id", type=int, help="worker id for --role cps-worker")
    p.add_argument("--data", help="LIBSVM training file (0-based labels and indices)")
    p.add_argument("--eval-path", help="LIBSVM evaluation file; defaults to the training data")
    p.add_argument("--synth-classes", type=int)
    p.add_argument("--synth-features", type=int)
    p.add_argument("--synth-samples", type=int)
    p.add_argument("--synth-margin", type=float)
    p.add_argument("--eta0", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--steps", type=int, help="local SGD steps per worker")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--epsilon-u", type=float, help="drop |u_k| <= epsilon from messages (0 = off)")
    p.add_argument("--lockstep", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=int, help="CPS pull period in steps")
    p.add_argument("--queue-capacity", type=int)
    p.add_argument("--out-csv")
    p.add_argument("--out-model")


def build_parser():
    parser = _Parser(prog="svb", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _train_flags(sub.add_parser("train", help="train a model"))
    g = sub.add_parser("gen-data", help="write a synthetic LIBSVM dataset and its planted model")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--features", type=int, required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--margin", type=float, default=3.0)
    g.add_argument("--out", required=True)
    g.add_argument("--out-model", help="planted model path (default: OUT.model)")
    e = sub.add_parser("eval", help="print loss and accuracy of a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    return parser


def merge_settings(args):
    """defaults < config file < flags, keyed by flag name."""
    settings = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load config {args.config}: {e}") from e
        if not isinstance(from_file, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(from_file) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        settings.update(from_file)
    for key in DEFAULTS:
        value = getattr(args, key.replace("-", "_"))
        if value is not None:
            settings[key] = value
    return settings


def _as(kind, settings, key):
    value = settings[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def resolve_spec(settings):
    s = settings
    try:
        config = TrainingConfig(
            eta0=_as(float, s, "eta0"),
            decay=_as(float, s, "decay"),
            steps=_as(int, s, "steps"),
            eval_every=_as(int, s, "eval-every"),
            epsilon_u=_as(float, s, "epsilon-u"),
            mode=str(s["mode"]),
            lockstep=_as(bool, s, "lockstep"),
            seed=_as(int, s, "seed"),
            tau=_as(int, s, "tau"),
            queue_capacity=_as(int, s, "queue-capacity"),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    role = s["role"]
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}, got {role!r}")
    workers = _as(int, s, "workers")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    try:
        peers = parse_peers(s["peers"]) if s["peers"] else []
        listen = parse_address(s["listen"]) if s["listen"] else None
    except ValueError as e:
        raise ConfigError(str(e)) from e
    worker_id = None if s["worker-id"] is None else _as(int, s, "worker-id")

    if config.mode == "serial":
        if role != "peer" or peers or workers != 1:
            raise ConfigError("serial mode runs one worker: drop --role/--peers/--workers")
    if role in ("server", "cps-worker") and config.mode != "cps":
        raise ConfigError(f"role {role} requires --mode cps")
    if role == "server" and listen is None:
        raise ConfigError("role server requires --listen")
    if role == "cps-worker":
        if len(peers) != 1:
            raise ConfigError("role cps-worker requires --peers with exactly the server address")
        if worker_id is None or not 0 <= worker_id < workers:
            raise ConfigError("role cps-worker requires --worker-id in [0, workers)")
    if role == "peer" and peers:
        if config.mode != "svb":
            raise ConfigError("--peers with role peer is only valid in svb mode")
        if listen is None:
            raise ConfigError("--peers requires --listen naming this worker's entry")
        matches = [a.worker_id for a in peers if (a.host, a.port) == (listen.host, listen.port)]
        if not matches:
            raise ConfigError(f"--listen {listen} is not in --peers")
        if s["workers"] != DEFAULTS["workers"] and workers != len(peers):
            raise ConfigError(f"--workers {workers} disagrees with {len(peers)} peers")
        workers = len(peers)
        worker_id = matches[0]

    for key in ("data", "eval-path"):
        path = s[key]
        if path and not Path(path).is_file():
            raise ConfigError(f"{key}: no such file {path}")
    synthetic = (
        _as(int, s, "synth-classes"),
        _as(int, s, "synth-features"),
        _as(int, s, "synth-samples"),
        _as(float, s, "synth-margin"),
    )
    return RunSpec(
        config=config,
        workers=workers,
        role=role,
        peers=peers,
        listen=listen,
        worker_id=worker_id,
        data=s["data"],
        eval_path=s["eval-path"],
        synthetic=synthetic,
        out_csv=s["out-csv"],
        out_model=s["out-model"],
    )


def _load_inputs(spec):
    try:
        if spec.data:
            ds = load_libsvm(spec.data)
        else:
            k, d, n, margin = spec.synthetic
            ds, _ = gen_synthetic(k, d, n, spec.config.seed, margin)
        eval_set = None
        if spec.eval_path:
            eval_set = load_libsvm(spec.eval_path, num_classes=ds.num_classes, num_features=ds.num_features)
        if spec.role != "server":
            partition(ds, spec.workers, spec.worker_id or 0)
    except (ParseError, EmptyDataError, DimensionError, DataIOError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return ds, eval_set


def _side_path(path, worker_id):
    p = Path(path)
    return str(p.with_name(f"{p.stem}.worker{worker_id}{p.suffix}"))


def _emit(spec, results):
    """Write CSV/model outputs; ``results`` is a list of (worker_id, weights, metrics)."""
    for i, (wid, weights, metrics) in enumerate(results):
        if spec.out_csv and metrics is not None:
            write_csv(metrics.snapshots, spec.out_csv if i == 0 else _side_path(spec.out_csv, wid))
        if spec.out_model and weights is not None:
            path = spec.out_model if i == 0 else _side_path(spec.out_model, wid)
            write_model(path, weights, clock=spec.config.steps)


def cmd_train(spec):
    ds, eval_set = _load_inputs(spec)
    cfg = spec.config
    if cfg.mode == "serial":
        w, m = run_serial(ds, cfg, eval_set=eval_set)
        results = [(0, w, m)]
    elif spec.role == "server":
        t = TcpTransport.serve(spec.listen, spec.workers)
        try:
            w = cps_server_run(cfg, t, ds.num_classes, ds.num_features)
        finally:
            t.close()
        results = [(0, w, None)]
        log.info("server finished; received %d bytes", t.counters().bytes_received)
    elif spec.role == "cps-worker":
        t = TcpTransport.connect(spec.worker_id, spec.peers[0])
        try:
            w, m = cps_worker_run(cfg, partition(ds, spec.workers, spec.worker_id), t, eval_set=eval_set)
        finally:
            t.close()
        results = [(spec.worker_id, w, m)]
    elif spec.peers:
        t = TcpTransport.mesh(spec.worker_id, spec.peers)
        try:
            worker = Worker(partition(ds, spec.workers, spec.worker_id), cfg, eval_set=eval_set)
            w, m = worker.run(t)
        finally:
            t.close()
        results = [(spec.worker_id, w, m)]
    elif cfg.mode == "cps":
        w, metrics, _ = run_cps(ds, cfg, spec.workers, eval_set=eval_set)
        results = [(0, w, metrics[0])] + [(p, None, m) for p, m in enumerate(metrics) if p > 0]
    else:
        workers, _ = run_svb(ds, cfg, spec.workers, eval_set=eval_set)
        results = [(wk.worker_id, wk.replica, wk.metrics) for wk in workers]
    _emit(spec, results)
    final = next((m for _, _, m in results if m is not None), None)
    if final is not None and final.snapshots:
        s = final.snapshots[-1]
        print(f"step={s.step} loss={s.loss!r} accuracy={s.accuracy!r} bytes_sent={s.bytes_sent}")
    return 0


def cmd_gen_data(args):
    try:
        ds, planted = gen_synthetic(args.classes, args.features, args.samples, args.seed, args.margin)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    try:
        write_libsvm(ds, args.out)
        write_model(args.out_model or args.out + ".model", planted)
    except DataIOError as e:
        raise ConfigError(str(e)) from e
    print(f"wrote {len(ds)} samples (K={ds.num_classes}, D={ds.num_features}) to {args.out}")
    return 0


def cmd_eval(args):
    try:
        w = read_model(args.model)
        ds = load_libsvm(args.data, num_classes=w.shape[0], num_features=w.shape[1])
        loss, acc = nll_loss(w, ds), accuracy(w, ds)
    except (DataIOError, DecodeError, ParseError, EmptyDataError, DimensionError) as e:
        raise ConfigError(str(e)) from e
    print(f"loss={loss!r} accuracy={acc!r}")
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        if args.command == "train":
            spec = resolve_spec(merge_settings(args))
            return cmd_train(spec)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        return cmd_eval(args)
    except (UsageError, ConfigError) as e:
        _error(e)
        return 2
    except (SvbError, OSError) as e:
        _error(e)
        return 1


def _error(e):
    print("error: " + " ".join(str(e).split()), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
