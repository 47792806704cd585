from __future__ import annotations

import json

import numpy as np
import pytest

from ddrlab.cli import main
from ddrlab.config import ConfigError, ExperimentConfig, Thresholds, canonical_json


def test_config_round_trip():
    cfg = ExperimentConfig(scenario="annulus", h=0.01, thresholds=Thresholds(tau_cut=0.07), seed=3)
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.to_json() == cfg.to_json()


@pytest.mark.parametrize("doc", [
    {"h": 0.0}, {"h": -1}, {"frame_spacing": 0}, {"scenario": "torus"}, {"stencil_radius": 0},
    {"thresholds": {"lambda_tol": 2.0}}, {"bogus": 1}, {"thresholds": {"nope": 1}},
])
def test_config_validation(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_canonical_json_is_deterministic():
    a = canonical_json({"b": np.float64(0.1), "a": [1, np.int64(2)], "c": float("inf")})
    b = canonical_json({"a": [1, 2], "c": float("inf"), "b": 0.1})
    assert a == b
    assert json.loads(a)["c"] == "inf"


def test_invalid_h_exits_2(capsys):
    assert main(["run", "--scenario", "disk", "--h", "0"]) == 2
    assert "h must be > 0" in capsys.readouterr().err
    assert main(["verify", "--lemma", "dphi", "--h", "-0.1"]) == 2


def test_bad_config_file_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["run", "--config", str(p)]) == 2


def test_report_without_args_exits_2(capsys):
    assert main(["report"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2


def test_report_rejects_corrupt_files(tmp_path, capsys):
    bad = tmp_path / "x.ddf1"
    bad.write_bytes(b"DDF1" + b"\x00" * 7)
    assert main(["report", str(bad)]) == 1
    assert "truncated" in capsys.readouterr().err
    junk = tmp_path / "y.bin"
    junk.write_bytes(b"\xff\xfe\x00garbage")
    assert main(["report", str(junk)]) == 1


def test_generate_ddf_reconstruct_report(tmp_path, capsys):
    ma, mb = tmp_path / "A.json", tmp_path / "B.json"
    assert main(["generate", "--scenario", "disk", "--h", "0.04", "--out", str(ma)]) == 0
    assert main(["generate", "--scenario", "disk", "--h", "0.04", "--twin", "gauge", "--out", str(mb)]) == 0
    da, db = tmp_path / "a.ddf1", tmp_path / "b.ddf1"
    assert main(["ddf", "--mesh", str(ma), "--sources", "grid:0.2", "--frame-spacing", "0.04",
                 "--out", str(da)]) == 0
    assert main(["ddf", "--mesh", str(mb), "--sources", "grid:0.2", "--frame-spacing", "0.04",
                 "--out", str(db)]) == 0
    assert da.read_bytes()[:4] == b"DDF1"
    cert = tmp_path / "cert.json"
    assert main(["reconstruct", "--data-a", str(da), "--data-b", str(db), "--mesh-a", str(ma),
                 "--mesh-b", str(mb), "--probes", "4", "--out", str(cert)]) == 0
    doc = json.loads(cert.read_text())
    for key in ("pairs", "boundary_defect", "certificate", "verdict", "thresholds"):
        assert key in doc
    assert doc["verdict"]["boundary_ok"]
    capsys.readouterr()
    main(["report", str(cert), str(da), "--plots", str(tmp_path / "plots")])
    out = capsys.readouterr().out
    assert "boundary defect" in out and "DDF1 archive" in out


def test_identity_certificate_report_all_green(tmp_path, capsys):
    ma = tmp_path / "A.json"
    main(["generate", "--scenario", "disk", "--h", "0.02", "--out", str(ma)])
    da = tmp_path / "a.ddf1"
    main(["ddf", "--mesh", str(ma), "--sources", "grid:0.2", "--frame-spacing", "0.02", "--out", str(da)])
    cert = tmp_path / "cert.json"
    assert main(["reconstruct", "--data-a", str(da), "--data-b", str(da), "--mesh-a", str(ma),
                 "--mesh-b", str(ma), "--probes", "4", "--out", str(cert)]) == 0
    capsys.readouterr()
    assert main(["report", str(cert)]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS" in out


def test_archive_not_matching_mesh_is_rejected(tmp_path, capsys):
    ma, mc = tmp_path / "A.json", tmp_path / "C.json"
    main(["generate", "--scenario", "disk", "--h", "0.04", "--out", str(ma)])
    main(["generate", "--scenario", "disk", "--h", "0.04", "--twin", "control", "--out", str(mc)])
    da = tmp_path / "a.ddf1"
    main(["ddf", "--mesh", str(ma), "--sources", "grid:0.2", "--frame-spacing", "0.04", "--out", str(da)])
    assert main(["reconstruct", "--data-a", str(da), "--data-b", str(da), "--mesh-a", str(ma),
                 "--mesh-b", str(mc), "--out", str(tmp_path / "c.json")]) == 1
    assert "does not match" in capsys.readouterr().err


def test_ddf_refuses_huge_archive(tmp_path):
    ma = tmp_path / "A.json"
    main(["generate", "--scenario", "disk", "--h", "0.05", "--out", str(ma)])
    assert main(["ddf", "--mesh", str(ma), "--sources", "all", "--max-bytes", "1e6",
                 "--out", str(tmp_path / "x.ddf1")]) == 2


def test_verify_report_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["verify", "--lemma", "dphi", "--scenario", "disk", "--h", "0.04", "--frame-spacing", "0.04", "--n", "4"]
    assert main(args + ["--report", str(a)]) == 0
    assert main(args + ["--report", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_run_disk_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", "disk", "--h", "0.02", "--out-dir", str(out)]) == 0
    for name in ("mesh_a.json", "mesh_b.json", "a.ddf1", "b.ddf1", "report.json", "timings.json", "lambda_hist.svg"):
        assert (out / name).exists(), name
    doc = json.loads((out / "report.json").read_text())
    assert all(c["passed"] for c in doc["checks"])
    assert "seconds" not in json.dumps(doc)
    capsys.readouterr()
    assert main(["report", str(out / "report.json")]) == 0
