import json
import math
import os
import socket
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from svb.cli import DEFAULTS, build_parser, main, merge_settings, resolve_spec
from svb.dataset import Dataset, gen_synthetic, load_libsvm, write_libsvm
from svb.errors import ConfigError
from svb.metrics import read_csv
from svb.mlr import accuracy
from svb.protocol import read_model, write_model

from conftest import dense_sample

DATA = Path(__file__).parent / "data"
TINY = str(DATA / "tiny.svm")


def train_spec(*argv):
    return resolve_spec(merge_settings(build_parser().parse_args(["train", *argv])))


def run_main(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestTrain:
    def test_serial_smoke(self, tmp_path, capsys):
        csv, model = tmp_path / "m.csv", tmp_path / "w.model"
        code, out, _ = run_main(
            capsys, "train", "--mode", "serial", "--data", TINY, "--steps", "1500",
            "--eta0", "0.5", "--eval-every", "250", "--out-csv", str(csv), "--out-model", str(model),
        )
        assert code == 0
        snaps = read_csv(csv)
        assert [s.step for s in snaps] == list(range(0, 1501, 250))
        assert snaps[-1].accuracy >= 0.99
        assert read_model(model).shape == (3, 8)
        assert "accuracy=" in out

    def test_eval_matches_final_snapshot(self, tmp_path, capsys):
        csv, model = tmp_path / "m.csv", tmp_path / "w.model"
        run_main(capsys, "train", "--mode", "serial", "--data", TINY, "--steps", "300",
                 "--out-csv", str(csv), "--out-model", str(model))
        code, out, _ = run_main(capsys, "eval", "--model", str(model), "--data", TINY)
        assert code == 0
        fields = dict(kv.split("=") for kv in out.split())
        last = read_csv(csv)[-1]
        assert abs(float(fields["accuracy"]) - last.accuracy) <= 1e-12
        assert abs(float(fields["loss"]) - last.loss) <= 1e-12

    def test_lockstep_two_workers_identical_models(self, tmp_path, capsys):
        model = tmp_path / "w.model"
        code, _, _ = run_main(
            capsys, "train", "--mode", "svb", "--workers", "2", "--lockstep", "--data", TINY,
            "--steps", "200", "--out-model", str(model), "--out-csv", str(tmp_path / "m.csv"),
        )
        assert code == 0
        other = tmp_path / "w.worker1.model"
        assert model.read_bytes() == other.read_bytes()
        assert (tmp_path / "m.worker1.csv").exists()

    def test_cps_harness(self, tmp_path, capsys):
        code, out, _ = run_main(capsys, "train", "--mode", "cps", "--workers", "2", "--data", TINY,
                                "--steps", "100", "--out-model", str(tmp_path / "w.model"))
        assert code == 0 and (tmp_path / "w.model").exists()

    def test_synthetic_default_input(self, capsys):
        code, out, _ = run_main(capsys, "train", "--mode", "serial", "--synth-classes", "3",
                                "--synth-features", "5", "--synth-samples", "50", "--steps", "20")
        assert code == 0 and out.startswith("step=20 ")


class TestValidation:
    @pytest.mark.parametrize(
        "argv",
        [
            ["--role", "server", "--mode", "svb", "--listen", "127.0.0.1:9"],
            ["--role", "server", "--mode", "cps"],
            ["--role", "cps-worker", "--mode", "cps", "--peers", "h:1", "--worker-id", "3", "--workers", "2"],
            ["--mode", "serial", "--workers", "3"],
            ["--mode", "cps", "--peers", "127.0.0.1:1", "--listen", "127.0.0.1:1"],
            ["--peers", "127.0.0.1:1,127.0.0.1:2", "--listen", "127.0.0.1:3"],
            ["--peers", "127.0.0.1:1,127.0.0.1:2"],
            ["--eta0", "0"],
            ["--steps", "0"],
            ["--data", "/nonexistent.svm"],
            ["--workers", "0"],
        ],
    )
    def test_conflicts_exit_2(self, argv, capsys):
        code, _, err = run_main(capsys, "train", *argv)
        assert code == 2
        assert err.startswith("error: ") and err.count("\n") == 1

    def test_usage_error_exit_2(self, capsys):
        code, _, err = run_main(capsys, "train", "--steps", "many")
        assert code == 2 and err.startswith("error: ")

    def test_peer_worker_id_from_listen(self):
        spec = train_spec("--peers", "127.0.0.1:5000,127.0.0.1:5001", "--listen", "127.0.0.1:5001")
        assert (spec.worker_id, spec.workers) == (1, 2)

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        # nothing listens at the server address, so connecting fails at run time
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        from svb import transport

        old = transport._dial
        transport._dial = lambda address, timeout: old(address, 0.2)
        try:
            code, _, err = run_main(
                capsys, "train", "--mode", "cps", "--role", "cps-worker", "--workers", "1",
                "--worker-id", "0", "--peers", f"127.0.0.1:{port}", "--data", TINY, "--steps", "5",
            )
        finally:
            transport._dial = old
        assert code == 1 and err.startswith("error: ")


class TestPrecedence:
    @pytest.fixture
    def cfg(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"eta0": 0.3, "steps": 77, "eval-every": 7, "lockstep": True}))
        return str(p)

    def test_defaults(self):
        spec = train_spec()
        assert spec.config.eta0 == DEFAULTS["eta0"] and spec.config.steps == DEFAULTS["steps"]
        assert spec.config.lockstep is False

    def test_file_over_default(self, cfg):
        spec = train_spec("--config", cfg)
        assert (spec.config.eta0, spec.config.steps, spec.config.eval_every) == (0.3, 77, 7)
        assert spec.config.lockstep is True
        assert spec.config.decay == DEFAULTS["decay"]

    def test_flag_over_file(self, cfg):
        spec = train_spec("--config", cfg, "--steps", "5", "--no-lockstep")
        assert (spec.config.eta0, spec.config.steps, spec.config.lockstep) == (0.3, 5, False)

    def test_flag_over_default(self):
        assert train_spec("--decay", "0.5").config.decay == 0.5

    def test_unknown_config_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"learning-rate": 1}')
        with pytest.raises(ConfigError):
            train_spec("--config", str(p))

    def test_bad_config_value(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text('{"steps": "lots"}')
        code, _, _ = run_main(capsys, "train", "--config", str(p))
        assert code == 2


class TestGenData:
    def _gen(self, capsys, out, seed="4"):
        return run_main(capsys, "gen-data", "--classes", "10", "--features", "50", "--samples", "2000",
                        "--seed", seed, "--out", str(out))

    def test_deterministic_and_counted(self, tmp_path, capsys):
        a, b = tmp_path / "a.svm", tmp_path / "b.svm"
        assert self._gen(capsys, a)[0] == 0 and self._gen(capsys, b)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        assert Path(str(a) + ".model").read_bytes() == Path(str(b) + ".model").read_bytes()
        assert len(a.read_text().splitlines()) == 2000

    def test_planted_model_accuracy(self, tmp_path, capsys):
        out = tmp_path / "a.svm"
        self._gen(capsys, out)
        w = read_model(str(out) + ".model")
        assert accuracy(w, load_libsvm(out, num_classes=10, num_features=50)) >= 0.99

    def test_bad_shape_exit_2(self, tmp_path, capsys):
        code, _, err = run_main(capsys, "gen-data", "--classes", "0", "--features", "5",
                                "--samples", "10", "--out", str(tmp_path / "x.svm"))
        assert code == 2 and err.startswith("error: ")

    def test_unwritable_exit_2(self, tmp_path, capsys):
        code, _, _ = run_main(capsys, "gen-data", "--classes", "2", "--features", "5",
                              "--samples", "10", "--out", str(tmp_path / "no" / "x.svm"))
        assert code == 2


class TestEval:
    @pytest.fixture
    def binary(self, tmp_path):
        ds = Dataset([dense_sample([1.0, 0.0, 2.0], 0), dense_sample([0.0, 1.0, 0.0], 1)], 3, 2)
        path = tmp_path / "two.svm"
        write_libsvm(ds, path)
        return path

    def test_zero_model_log2(self, tmp_path, binary, capsys):
        model = tmp_path / "z.model"
        write_model(model, np.zeros((2, 3)))
        code, out, _ = run_main(capsys, "eval", "--model", str(model), "--data", str(binary))
        assert code == 0
        loss = float(out.split()[0].removeprefix("loss="))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_model_too_narrow_exit_2(self, tmp_path, binary, capsys):
        model = tmp_path / "z.model"
        write_model(model, np.zeros((2, 2)))
        code, _, err = run_main(capsys, "eval", "--model", str(model), "--data", str(binary))
        assert code == 2 and err.startswith("error: ")

    def test_corrupt_model_exit_2(self, tmp_path, binary, capsys):
        model = tmp_path / "z.model"
        model.write_bytes(b"nope")
        code, _, _ = run_main(capsys, "eval", "--model", str(model), "--data", str(binary))
        assert code == 2


def _free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def _svb(*argv):
    cmd = [sys.executable, "-m", "svb.cli", *argv]
    return subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=os.environ)


@pytest.mark.tcp
class TestMultiProcess:
    def test_console_script_help(self):
        r = subprocess.run([sys.executable, "-m", "svb.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "gen-data" in r.stdout

    def test_tcp_lockstep_mesh(self, tmp_path):
        ports = _free_ports(2)
        peers = ",".join(f"127.0.0.1:{p}" for p in ports)
        procs = [
            _svb("train", "--peers", peers, "--listen", f"127.0.0.1:{ports[i]}", "--lockstep",
                 "--data", TINY, "--steps", "100", "--out-model", str(tmp_path / f"w{i}.model"))
            for i in range(2)
        ]
        for p in procs:
            _, err = p.communicate(timeout=120)
            assert p.returncode == 0, err
        assert (tmp_path / "w0.model").read_bytes() == (tmp_path / "w1.model").read_bytes()

    def test_tcp_cps(self, tmp_path):
        (port,) = _free_ports(1)
        server = _svb("train", "--mode", "cps", "--role", "server", "--workers", "2", "--lockstep",
                      "--listen", f"127.0.0.1:{port}", "--data", TINY, "--steps", "50",
                      "--out-model", str(tmp_path / "server.model"))
        workers = [
            _svb("train", "--mode", "cps", "--role", "cps-worker", "--workers", "2", "--lockstep",
                 "--worker-id", str(i), "--peers", f"127.0.0.1:{port}", "--data", TINY, "--steps", "50")
            for i in range(2)
        ]
        for p in [server, *workers]:
            _, err = p.communicate(timeout=120)
            assert p.returncode == 0, err
        harness = tmp_path / "harness.model"
        assert main(["train", "--mode", "cps", "--workers", "2", "--lockstep", "--data", TINY,
                     "--steps", "50", "--out-model", str(harness)]) == 0
        assert (tmp_path / "server.model").read_bytes() == harness.read_bytes()
