"""End-to-end command-line runs: CSV schemas, the exit-code taxonomy,
manifest sidecars, deterministic recompilation, and the Monte Carlo
verification gate."""

import copy
import csv
import json
from types import SimpleNamespace

import pytest
from click.testing import CliRunner

import relnet.cli as cli
from relnet.compile import save_rbn
from relnet.scenarios import builtin_model


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def rbn_dir(tmp_path_factory, lifecycle_cm, infranet_cm):
    d = tmp_path_factory.mktemp("rbn")
    save_rbn(lifecycle_cm, d / "lifecycle.rbn")
    save_rbn(infranet_cm, d / "infranet.rbn")
    return d


@pytest.fixture(scope="module")
def frame_rbn(tmp_path_factory, runner):
    path = tmp_path_factory.mktemp("rbn") / "frame.rbn"
    res = runner.invoke(cli.main, ["compile", "--model", "frame",
                                   "--out", str(path), "--quiet"])
    assert res.exit_code == 0, res.output
    return path


def _rows(stdout: str) -> list[dict]:
    return list(csv.DictReader(stdout.splitlines()))


class TestCompile:
    def test_writes_network_and_manifest(self, runner, tmp_path):
        out = tmp_path / "frame.rbn"
        res = runner.invoke(cli.main, ["compile", "--model", "frame",
                                       "--out", str(out), "--quiet"])
        assert res.exit_code == 0
        assert "441 series solves" in res.stderr
        doc = json.loads(out.read_text())
        assert doc["format"] == "rbn-1"
        manifest = json.loads((tmp_path / "frame.rbn.manifest.json").read_text())
        assert manifest["command"] == "compile"
        assert manifest["totals"]["series_solves"] == 441
        assert len(manifest["model_sha256"]) == 64
        assert set(manifest["scheme_sha256"]) == {"capacity", "reading"}

    def test_recompilation_is_byte_identical(self, runner, tmp_path, frame_rbn):
        out = tmp_path / "again.rbn"
        res = runner.invoke(cli.main, ["compile", "--model", "frame",
                                       "--out", str(out), "--quiet"])
        assert res.exit_code == 0
        assert out.read_bytes() == frame_rbn.read_bytes()

    def test_unknown_model_name(self, runner, tmp_path):
        res = runner.invoke(cli.main, ["compile", "--model", "bogus",
                                       "--out", str(tmp_path / "x.rbn")])
        assert res.exit_code == 2
        assert "built-ins" in res.stderr


class TestTimeline:
    def test_schema_and_decay(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn")])
        assert res.exit_code == 0
        assert res.stdout.splitlines()[0] == "t,beta,pf"
        rows = _rows(res.stdout)
        assert [int(r["t"]) for r in rows] == list(range(1, 11))
        betas = [float(r["beta"]) for r in rows]
        assert all(a > b for a, b in zip(betas, betas[1:]))
        pfs = [float(r["pf"]) for r in rows]
        assert all(a < b for a, b in zip(pfs, pfs[1:]))

    def test_horizon_truncates(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn"),
                                       "--horizon", "3"])
        assert [int(r["t"]) for r in _rows(res.stdout)] == [1, 2, 3]

    def test_hazard_free_years_raise_every_beta(self, runner, rbn_dir):
        base = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn")])
        cond = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn"),
                                        "--evidence", "infranet_sequence:b"])
        assert cond.exit_code == 0
        for before, after in zip(_rows(base.stdout), _rows(cond.stdout)):
            assert float(after["beta"]) > float(before["beta"])

    def test_contradictory_evidence_exits_three(self, runner, rbn_dir, tmp_path):
        script = tmp_path / "contra.json"
        script.write_text(json.dumps({
            "name": "contra", "model": "infranet",
            "steps": [{"label": "a",
                       "findings": [{"node": "Esys1", "state": "fail"}]}],
        }))
        res = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn"),
                                       "--evidence", str(script)])
        assert res.exit_code == 3
        assert "contradicts survival" in res.stderr

    def test_unknown_step_label(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn"),
                                       "--evidence", "infranet_sequence:zz"])
        assert res.exit_code == 2
        assert "no step labelled" in res.stderr

    def test_manifest_sidecar(self, runner, rbn_dir, tmp_path):
        out = tmp_path / "tl.csv"
        res = runner.invoke(cli.main, ["timeline", "--rbn", str(rbn_dir / "infranet.rbn"),
                                       "--evidence", "infranet_sequence:b",
                                       "--out", str(out)])
        assert res.exit_code == 0
        manifest = json.loads((tmp_path / "tl.csv.manifest.json").read_text())
        assert manifest["command"] == "timeline"
        assert manifest["model"] == "infranet"
        assert manifest["years"] == 10
        assert manifest["evidence_fingerprint"]
        assert _rows(out.read_text())[0]["t"] == "1"


class TestDecide:
    def test_prior_keeps(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["decide", "--rbn", str(rbn_dir / "lifecycle.rbn")])
        assert res.exit_code == 0
        rows = _rows(res.stdout)
        assert [r["alternative"] for r in rows] == ["keep", "replace"]
        assert sum(int(r["optimal"]) for r in rows) == 1
        assert rows[0]["optimal"] == "1"

    def test_low_readings_flip_to_replace(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["decide", "--rbn", str(rbn_dir / "lifecycle.rbn"),
                                       "--evidence", "lifecycle_case_b"])
        rows = {r["alternative"]: r for r in _rows(res.stdout)}
        assert rows["replace"]["optimal"] == "1"
        assert float(rows["replace"]["expected_utility"]) == pytest.approx(-32678.24, abs=0.5)
        assert "optimal replace" in res.stderr

    def test_mixed_readings_keep(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["decide", "--rbn", str(rbn_dir / "lifecycle.rbn"),
                                       "--evidence", "lifecycle_case_c"])
        rows = {r["alternative"]: r for r in _rows(res.stdout)}
        assert rows["keep"]["optimal"] == "1"

    def test_model_without_decision(self, runner, frame_rbn):
        res = runner.invoke(cli.main, ["decide", "--rbn", str(frame_rbn)])
        assert res.exit_code == 2
        assert "declares no decision" in res.stderr


class TestVoi:
    def test_default_sets(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["voi", "--rbn", str(rbn_dir / "lifecycle.rbn")])
        assert res.exit_code == 0
        rows = _rows(res.stdout)
        assert [r["measurements"] for r in rows] == ["M4", "M5", "M4,M5"]
        values = [float(r["voi"]) for r in rows]
        assert values[0] == pytest.approx(1648.85, abs=0.01)
        assert values[1] == pytest.approx(975.94, abs=0.01)
        assert values[2] == pytest.approx(2524.18, abs=0.01)
        # observing more can't be worth less
        assert values[2] >= max(values[0], values[1])

    def test_cost_thresholds_switch_the_recommendation(self, runner, rbn_dir):
        cheap = runner.invoke(cli.main, ["voi", "--rbn", str(rbn_dir / "lifecycle.rbn"),
                                         "--cost", "500"])
        picked = [r["measurements"] for r in _rows(cheap.stdout) if r["recommended"] == "1"]
        assert picked == ["M4,M5"]
        dear = runner.invoke(cli.main, ["voi", "--rbn", str(rbn_dir / "lifecycle.rbn"),
                                        "--cost", "1500"])
        picked = [r["measurements"] for r in _rows(dear.stdout) if r["recommended"] == "1"]
        assert picked == ["M4"]
        assert "recommended: measure M4 " in dear.stderr

    def test_explicit_sets(self, runner, rbn_dir):
        res = runner.invoke(cli.main, ["voi", "--rbn", str(rbn_dir / "lifecycle.rbn"),
                                       "--sets", "M5"])
        rows = _rows(res.stdout)
        assert len(rows) == 1 and rows[0]["recommended"] == "1"

    def test_model_without_measurements(self, runner, frame_rbn):
        res = runner.invoke(cli.main, ["voi", "--rbn", str(frame_rbn)])
        assert res.exit_code == 2
        assert "declares no measurements" in res.stderr


class TestVerify:
    def test_frame_inside_sampling_bands(self, runner, tmp_path):
        out = tmp_path / "checks.csv"
        res = runner.invoke(cli.main, ["verify", "--model", "frame", "-n", "60000",
                                       "--seed", "1", "--workers", "2",
                                       "--out", str(out)])
        assert res.exit_code == 0, res.stderr
        rows = _rows(out.read_text())
        assert {r["check"] for r in rows} >= {"unconditional", "frame_m4-150_m5-100",
                                              "frame_m4-150_m5-200", "frame_m4-50_m5-100"}
        assert all(r["status"] == "PASS" for r in rows)
        for r in rows:
            assert float(r["band_lo"]) <= float(r["pf"]) <= float(r["band_hi"])

    def test_overbuilt_capacities_pass_with_no_failures(self, runner, tmp_path):
        raw = copy.deepcopy(builtin_model("frame").raw)
        raw["name"] = "frame_hardened"
        for var in ("R1", "R2", "R3", "R4", "R5"):
            raw["variables"][var]["mean"] *= 100
        path = tmp_path / "hardened.json"
        path.write_text(json.dumps(raw))
        res = runner.invoke(cli.main, ["verify", "--model", str(path),
                                       "-n", "20000", "--workers", "2"])
        assert res.exit_code == 0, res.stderr
        assert "unconditional" in res.stderr and "PASS" in res.stderr

    def test_gate_failure_nodes_are_refused(self, runner):
        res = runner.invoke(cli.main, ["verify", "--model", "lifecycle", "-n", "1000"])
        assert res.exit_code == 2
        assert "direct limit-state failure node" in res.stderr

    def test_band_miss_exits_four(self, runner, monkeypatch):
        fake = SimpleNamespace(band=(0.5, 0.6), n=1000, warnings=("forced band",))
        monkeypatch.setattr(cli, "mcs", lambda *a, **k: fake)
        monkeypatch.setattr(cli, "conditional_mcs", lambda *a, **k: fake)
        res = runner.invoke(cli.main, ["verify", "--model", "frame", "-n", "1000"])
        assert res.exit_code == 4
        assert "FAIL" in res.stderr
        assert "outside the sampling band" in res.stderr


def test_help_lists_every_command(runner):
    res = runner.invoke(cli.main, ["--help"])
    assert res.exit_code == 0
    for name in ("compile", "timeline", "decide", "voi", "verify", "serve"):
        assert name in res.stdout
