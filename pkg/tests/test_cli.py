import json
import subprocess
import sys

import numpy as np
import pytest

from hawkesid import io
from hawkesid.cli import cmd_pipeline, main
from hawkesid.config import load_config
from hawkesid.cumulants import CPFactors, estimate_cumulant
from hawkesid.errors import ConfigError
from hawkesid.model import HawkesModel
from hawkesid.simulate import bin_events, simulate, simulate_inar
from hawkesid.spectral import estimate_psd, wilson_factorize

ZERO = {
    "model": {
        "p": 2,
        "baseline": [0.5, 0.8],
        "kernels": [[{"kind": "zero"}, {"kind": "zero"}], [{"kind": "zero"}, {"kind": "zero"}]],
    },
    "simulation": {"horizon": 2000, "delta": 0.1},
}

UNSTABLE = {
    "model": {"p": 1, "baseline": [0.5], "kernels": [[{"kind": "exponential", "params": {"alpha": 1.2, "beta": 1.0}}]]}
}

BAD = """{
  "model": {"p": 1, "baseline": [0.5], "kernels": [[{"kind": "zero"}]]},
  "simulation": {
    "horizon": -3,
    "delta": "x"
  },
  "bogus": 1
}
"""


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return path


def numeric_artifacts(manifest):
    return sorted((a["path"], a["sha256"]) for a in manifest["artifacts"])


def test_smoke_pipeline(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["pipeline", "--config", str(write_cfg(tmp_path, ZERO)), "--out", str(out), "--threads", "1"]) == 0
    assert "artifacts" in capsys.readouterr().out
    scores = io.read_json(out / "scores.json")
    report = io.read_json(out / "ident_report.json")
    manifest = io.read_json(out / "run_manifest.json")
    assert report["variety_dim"] == 0 and report["identifiable"]
    assert scores["mcc"] > 0.99
    assert manifest["status"] == "ok" and manifest["error"] is None
    assert {"simulate", "estimate", "identify", "evaluate"} <= set(manifest["timings"])
    for a in manifest["artifacts"]:
        assert (out / a["path"]).stat().st_size == a["bytes"]


def test_unstable_config_exits_one(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["pipeline", "--config", str(write_cfg(tmp_path, UNSTABLE)), "--out", str(out)])
    assert code == 1
    assert "UnstableModelError" in capsys.readouterr().err
    err = io.read_json(out / "run_manifest.json")["error"]
    assert err["stage"] == "simulate" and err["type"] == "UnstableModelError"
    assert err["spectral_radius"] == pytest.approx(1.2)


def test_schema_violation_exits_two_with_diagnostics(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(BAD)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "line 4: field simulation.horizon" in err
    assert "line 5: field simulation.delta" in err
    assert "line 7: field bogus" in err
    assert not (tmp_path / "o").exists()


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "model": {\n  "p": 1,,\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(path)


def test_model_path_resolves_relative_to_config(tmp_path):
    (tmp_path / "models").mkdir()
    (tmp_path / "models" / "m.json").write_text(json.dumps(ZERO["model"]))
    cfg = load_config(write_cfg(tmp_path, {"model": "models/m.json"}))
    assert cfg["model"]["p"] == 2
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(write_cfg(tmp_path, {"model": "missing.json"}, "c2.json"))


def test_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = write_cfg(tmp_path, ZERO)
    assert cmd_pipeline(cfg, out=a, threads=1) == 0
    assert cmd_pipeline(cfg, out=b, threads=2) == 0
    ma, mb = io.read_json(a / "run_manifest.json"), io.read_json(b / "run_manifest.json")
    assert numeric_artifacts(ma) == numeric_artifacts(mb)
    assert ma["config_sha256"] == mb["config_sha256"]


def test_stages_chain_through_files(tmp_path):
    cfg = write_cfg(tmp_path, ZERO)
    staged, full = tmp_path / "staged", tmp_path / "full"
    for cmd in ("simulate", "estimate", "identify", "evaluate"):
        assert main([cmd, "--config", str(cfg), "--out", str(staged), "--threads", "1"]) == 0
        assert (staged / f"manifest_{cmd}.json").exists()
    assert cmd_pipeline(cfg, out=full, threads=1) == 0
    for a in io.read_json(full / "run_manifest.json")["artifacts"]:
        assert (staged / a["path"]).read_bytes() == (full / a["path"]).read_bytes(), a["path"]


def test_estimate_without_simulation_fails(tmp_path):
    out = tmp_path / "o"
    assert main(["estimate", "--config", str(write_cfg(tmp_path, ZERO)), "--out", str(out)]) == 1
    err = io.read_json(out / "manifest_estimate.json")["error"]
    assert "simulate first" in err["message"]


def test_environment_overrides(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, ZERO)
    monkeypatch.setenv("HAWKESID_OUT", str(tmp_path / "env_out"))
    monkeypatch.setenv("HAWKESID_THREADS", "1")
    assert main(["simulate", "--config", str(cfg)]) == 0
    manifest = io.read_json(tmp_path / "env_out" / "manifest_simulate.json")
    assert manifest["threads"] == 1
    assert main(["simulate", "--config", str(cfg), "--threads", "2"]) == 0
    assert io.read_json(tmp_path / "env_out" / "manifest_simulate.json")["threads"] == 2
    monkeypatch.setenv("HAWKESID_THREADS", "many")
    assert main(["simulate", "--config", str(cfg)]) == 2
    monkeypatch.delenv("HAWKESID_THREADS")
    assert main(["simulate", "--config", str(cfg), "--threads", "0"]) == 2


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, UNSTABLE)
    proc = subprocess.run(
        [sys.executable, "-m", "hawkesid.cli", "simulate", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 1
    assert "failed in simulate" in proc.stderr


# ------------------------------------------------------------------ file formats


def test_events_round_trip(tmp_path):
    m = HawkesModel.exponential([0.3, 0.2], [[0.2, 0.1], [0.1, 0.2]], 1.0)
    e = simulate(m, 100.0, seed=0)
    back = io.read_events(io.write_events(tmp_path / "e.csv", e), 2, 100.0)
    for x, y in zip(e.events, back.events):
        np.testing.assert_allclose(x, y, atol=1e-12)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "process_id,timestamp"
    times = [float(line.split(",")[1]) for line in lines[1:]]
    assert times == sorted(times)


def test_counts_and_series_round_trip(tmp_path):
    b = simulate_inar(HawkesModel.zero([0.4, 0.2]), 0.1, 50.0, seed=1)
    back = io.read_counts(io.write_counts(tmp_path / "c.csv", b))
    np.testing.assert_array_equal(back.counts, b.counts)
    assert back.delta == 0.1
    x = np.random.default_rng(0).standard_normal((30, 3))
    obs = io.read_series(io.write_series(tmp_path / "o.csv", x, 0.1))
    np.testing.assert_array_equal(obs.data, x)
    assert (tmp_path / "o.csv").read_text().splitlines()[0] == "t0,o_1,o_2,o_3"


def test_json_documents_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((4096, 2))
    s = estimate_psd(x, 32, taper="hann", segments=None)
    s2 = io.spectra_from_dict(json.loads(json.dumps(io.spectra_to_dict(s))))
    np.testing.assert_array_equal(s2.matrices, s.matrices)

    f = wilson_factorize(s)
    f2 = io.factor_from_dict(json.loads(json.dumps(io.factor_to_dict(f))))
    np.testing.assert_array_equal(f2.G, f.G)
    np.testing.assert_array_equal(f2.sigma, f.sigma)

    t = estimate_cumulant(x, 3)
    t2 = io.cumulant_from_dict(json.loads(json.dumps(io.cumulant_to_dict(t))))
    np.testing.assert_array_equal(t2.data, t.data)

    cp = CPFactors(np.array([2.0, 1.0]), np.eye(3)[:, :2], 1e-9, 3)
    cp2 = io.cp_from_dict(json.loads(json.dumps(io.cp_to_dict(cp, {"note": 1}))))
    np.testing.assert_array_equal(cp2.factors, cp.factors)
    np.testing.assert_array_equal(cp2.weights, cp.weights)

    z = np.array([[1 + 2j, -0.5j]])
    np.testing.assert_array_equal(io.decode_complex(io.encode_complex(z)), z)


def test_bin_then_write_matches_inar_layout(tmp_path):
    e = simulate(HawkesModel.zero([1.0]), 10.0, seed=0)
    path = io.write_counts(tmp_path / "c.csv", bin_events(e, 0.5))
    header, first = path.read_text().splitlines()[:2]
    assert header == "t0,z_1" and first.startswith("0.0,")
