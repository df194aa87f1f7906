import json

import numpy as np
import pytest

from sghmcseg.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main

TINY = {
    "model": {"levels": 2, "base_channels": 4},
    "sampler": {"epochs": 8, "cycles": 2, "restart_epochs": 1, "thin_stride": 1, "burn_in": 0.5},
    "energy": {"batch_size": 4},
    "protocol": {"members": 2, "samples": 4},
    "augment": {"enabled": False},
    "data": {"train": 4, "val": 2, "test_in": 2, "test_shift": 4},
    "eval": {"temperatures": [0.0, 1e-5], "lams": [1e-2]},
}


@pytest.fixture(scope="module")
def conf(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _run(*args):
    return main([str(a) for a in args])


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"sampler": {"epoch": 3}}))
        assert _run("gen-data", "--config", p, "--out", tmp_path / "o") == EXIT_INVALID

    def test_missing_config_file(self, tmp_path):
        assert _run("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path) == EXIT_INVALID

    def test_bad_flags(self, conf, tmp_path):
        assert _run("train", "--config", conf, "--out", tmp_path, "--protocol", "nope") == EXIT_INVALID
        assert _run("train", "--config", conf, "--out", tmp_path, "--temperature", "-1") == EXIT_INVALID
        assert _run("train", "--config", conf, "--out", tmp_path, "--samples", "0") == EXIT_INVALID
        assert _run("train", "--config", conf, "--out", tmp_path, "--seed", "-3") == EXIT_INVALID
        assert _run("frobnicate") == EXIT_INVALID

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_a_runtime_failure(self, conf, tmp_path):
        rc = _run("train", "--config", conf, "--out", tmp_path, "--set", "sampler.lr0=1e6",
                  "--set", "sampler.lr_restart=1e7")
        assert rc == EXIT_RUNTIME
        prov = json.loads((tmp_path / "provenance_train.json").read_text())
        assert prov["status"] == EXIT_RUNTIME and "error" in prov["summary"]

    def test_report_needs_a_directory(self, tmp_path):
        f = tmp_path / "file"
        f.write_text("")
        assert _run("report", "--out", f) == EXIT_INVALID


class TestPipeline:
    def test_commands_and_report(self, conf, tmp_path):
        out = tmp_path / "run"
        for cmd in ("gen-data", "train", "infer", "calibrate", "diversity", "failures"):
            assert _run(cmd, "--config", conf, "--out", out, "--seed", 4) == EXIT_OK, cmd
        prov = json.loads((out / "provenance_train.json").read_text())
        assert prov["seed"] == 4 and prov["version"] and prov["config"]["sampler"]["epochs"] == 8
        assert len(prov["summary"]["schedule"][0]) == 8                 # eta recorded per epoch
        assert (out / "timing_train.json").exists()
        probs = np.load(out / "probs_sghmc-multi_test_in.npy")
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

        assert _run("calibrate", "--config", conf, "--out", out, "--seed", 4, "--protocol", "vanilla") == EXIT_OK
        assert _run("report", "--out", out) == EXIT_OK
        first = (out / "report_calibration.csv").read_bytes()
        assert first.count(b"\n") == 1 + 4                                # two protocols x two splits
        assert _run("report", "--out", out) == EXIT_OK
        assert (out / "report_calibration.csv").read_bytes() == first

    def test_reruns_are_byte_identical(self, conf, tmp_path):
        for d in ("a", "b"):
            assert _run("calibrate", "--config", conf, "--out", tmp_path / d, "--temperature", 0) == EXIT_OK
        for name in ("calibration_sghmc-multi.csv", "provenance_calibrate.json"):
            a = (tmp_path / "a" / name).read_text().replace(str(tmp_path / "a"), "")
            b = (tmp_path / "b" / name).read_text().replace(str(tmp_path / "b"), "")
            assert a == b

    def test_provenance_snapshot_reproduces_the_run(self, conf, tmp_path):
        assert _run("train", "--config", conf, "--out", tmp_path / "a", "--samples", 2) == EXIT_OK
        snap = json.loads((tmp_path / "a" / "provenance_train.json").read_text())["config"]
        snap["out"] = str(tmp_path / "b")
        p = tmp_path / "snap.json"
        p.write_text(json.dumps(snap))
        assert _run("train", "--config", p) == EXIT_OK
        ca = sorted((tmp_path / "a" / "checkpoints").rglob("*.sghc"))
        cb = sorted((tmp_path / "b" / "checkpoints").rglob("*.sghc"))
        assert len(ca) == len(cb) > 0
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(ca, cb))

    def test_train_cache_ignores_sample_count_but_not_seed(self, conf, tmp_path):
        assert _run("train", "--config", conf, "--out", tmp_path, "--samples", 4) == EXIT_OK
        ck = sorted((tmp_path / "checkpoints").rglob("*.sghc"))
        stamp = [c.stat().st_mtime_ns for c in ck]
        assert _run("infer", "--config", conf, "--out", tmp_path, "--samples", 2) == EXIT_OK
        assert [c.stat().st_mtime_ns for c in ck] == stamp             # reused, not retrained
        before = (tmp_path / "data" / "train_images.npy").read_bytes()
        assert _run("train", "--config", conf, "--out", tmp_path, "--seed", 9) == EXIT_OK
        assert (tmp_path / "data" / "train_images.npy").read_bytes() != before
        prov = json.loads((tmp_path / "checkpoints" / "sghmc-multi" / "provenance.json").read_text())
        assert prov["seeds"]["global"] == 9

    def test_sweep(self, conf, tmp_path):
        assert _run("sweep", "--config", conf, "--out", tmp_path) == EXIT_OK
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0].startswith("temperature,") and len(lines) == 1 + 3


def test_oracle_command(tmp_path):
    assert _run("oracle", "--out", tmp_path) == EXIT_OK
    rep = json.loads((tmp_path / "oracle.json").read_text())
    assert rep["pass"] and all(v["pass"] for v in rep["results"].values())
