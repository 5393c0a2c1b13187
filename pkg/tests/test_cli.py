import csv
import json

import pytest

from michscan.cli import main
from michscan.experiment import SweepConfig
from michscan.traces import load_traces

SMALL = {"counts": {"predeploy": 20, "runtime": 5}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out-dir", str(out), "--seed", "42"]) == 0
    assert main(["predeploy", str(out / "predeploy.mch"), "--bundle-out", str(out / "bundle.json")]) == 0
    return out


class TestSimulate:
    def test_manifest(self, sim):
        manifest = json.loads((sim / "manifest.json").read_text())
        files = {f["condition"]: f for f in manifest["files"]}
        assert files["predeploy"]["n_traces"] == 500
        assert set(files) == {"predeploy", "benign", "trojan_retrain", "poison_final_layer", "bit_flip"}
        assert manifest["master_seed"] == 42
        for f in manifest["files"]:
            assert (sim / f["path"]).exists()

    def test_byte_identical_reruns(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(SMALL))
        for d in ("a", "b"):
            code, _, _ = run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path / d, "--seed", 3)
            assert code == 0
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_nyquist_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"device": {"clock_hz": 1.5e6}}))
        code, out, err = run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path / "x")
        assert code == 1 and "above Nyquist" in err and out == ""

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path)[0] == 1
        cfg.write_text(json.dumps({"devices": {}}))
        code, _, err = run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path)
        assert code == 1 and "unknown keys" in err

    def test_csv_chain(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(SMALL))
        assert run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path, "--format", "csv")[0] == 0
        assert (tmp_path / "predeploy.meta.json").exists()
        assert run(capsys, "predeploy", tmp_path / "predeploy.csv", "--bundle-out", tmp_path / "b.json", "--format", "csv")[0] == 0
        # 19 similarity values cannot reach p < 1e-5: the smallest exact p is 2 / C(24, 5)
        code, out, _ = run(
            capsys, "check", tmp_path / "b.json", tmp_path / "bit_flip.csv", "--format", "csv", "--pth", 1e-4
        )
        assert code == 2 and json.loads(out)["violation_detected"]


class TestPredeploy:
    def test_bundle_size(self, sim):
        bundle = json.loads((sim / "bundle.json").read_text())
        assert len(bundle["similarity_sample"]) == 499

    def test_too_few_traces(self, sim, capsys):
        code, _, err = run(capsys, "predeploy", sim / "benign.mch", "--bundle-out", sim / "x.json")
        assert code == 1 and ">= 6" in err

    def test_layer_flag(self, sim, capsys, tmp_path):
        code, out, _ = run(
            capsys, "predeploy", sim / "predeploy.mch", "--bundle-out", tmp_path / "b.json",
            "--layer", "conv2", "--n-traces", 50,
        )
        assert code == 0
        span = load_traces(sim / "benign.mch")[0].marker("conv2")
        assert json.loads(out)["template_length"] == span.end - span.start
        bundle = json.loads((tmp_path / "b.json").read_text())
        assert len(bundle["golden_template"]["samples"]) == span.end - span.start


class TestCheck:
    def test_benign(self, sim, capsys):
        code, out, err = run(capsys, "check", sim / "bundle.json", sim / "benign.mch")
        assert code == 0
        assert json.loads(out)["violation_detected"] is False
        assert "benign" in err

    def test_attacks(self, sim, capsys):
        for cond in ("bit_flip", "poison_final_layer", "trojan_retrain"):
            code, out, _ = run(capsys, "check", sim / "bundle.json", sim / f"{cond}.mch")
            assert code == 2
            assert json.loads(out)["p_value"] < 1e-5

    def test_pth_one_always_flags(self, sim, capsys):
        assert run(capsys, "check", sim / "bundle.json", sim / "benign.mch", "--pth", "1.0")[0] == 2

    def test_small_n_ra_warning(self, sim, capsys):
        code, out, err = run(capsys, "check", sim / "bundle.json", sim / "benign.mch", "--n-ra", 3)
        assert code == 0 and "warning" in err
        assert json.loads(out)["warnings"]

    def test_operational_errors(self, sim, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**SMALL, "device": {"sample_rate_hz": 3e6}}))
        run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path)
        code, _, err = run(capsys, "check", sim / "bundle.json", tmp_path / "benign.mch")
        assert code == 1 and "sampled at" in err
        assert run(capsys, "check", sim / "bundle.json", sim / "benign.mch", "--n-ra", 6)[0] == 1
        assert run(capsys, "check", sim / "missing.json", sim / "benign.mch")[0] == 1
        assert run(capsys, "check", sim / "bundle.json", sim / "benign.mch", "--layer", "zz")[0] == 1


class TestSweep:
    def test_small_sweep(self, tmp_path, capsys):
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps({"n_ra": [3, 5], "trials": 2, "predeploy": {"n_traces": 30}}))
        code, out, _ = run(capsys, "sweep", "--config", cfg, "--out-report", tmp_path / "r.json")
        assert code == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report == json.loads(out)
        assert len(report["rows"]) == 8
        assert report["config_digest"].startswith("sha256:")
        for row in report["rows"]:
            assert ("warning" in row) == (row["n_ra"] == 3)
            assert 0 <= row["detections"] <= row["trials"] == 2
        with open(tmp_path / "r.pvalues.csv") as fh:
            table = list(csv.DictReader(fh))
        assert len(table) == 4 * 2 * 2 * 3
        assert {r["layer"] for r in table} == {"conv1", "conv2", "fc"}

    def test_trials_zero(self, tmp_path, capsys):
        code, _, err = run(capsys, "sweep", "--trials", 0, "--out-report", tmp_path / "r.json")
        assert code == 1 and "trials" in err


class TestUsage:
    def test_exit_codes(self, capsys):
        assert run(capsys, "check")[0] == 1
        assert run(capsys, "frobnicate")[0] == 1
        assert run(capsys, "check", "a", "b", "--n-ra", "five")[0] == 1
        assert run(capsys, "--help")[0] == 0

    def test_default_config_is_loadable(self, capsys):
        code, out, _ = run(capsys, "default-config", "sweep")
        assert code == 0
        assert SweepConfig.from_json(json.loads(out)).trials == 100
        code, out, _ = run(capsys, "default-config", "simulate")
        assert json.loads(out)["counts"] == {"predeploy": 500, "runtime": 5}
