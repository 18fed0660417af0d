import json
import shutil
import subprocess
import sys

import pytest

from qlabayes.cli import UsageError, main, parse_config

MC_TOML = """
[mc]
n_list = [300, 600]
replicates = 50
seed = 11
losses = [
  {id = "p2", loss1 = "power:2", loss2 = "power:2"},
  {id = "p1", loss1 = "power:1", loss2 = "power:1"},
]
"""


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_config_h():
    cfg = parse_config(["simulate", "--model", "OU", "--n", "1000", "--gamma", "0.6", "--seed", "7"])
    assert cfg.params["h"] == pytest.approx(1000 ** -0.6, rel=1e-15)
    assert cfg.params["seed"] == 7


def test_flags_override_config(tmp_path):
    conf = tmp_path / "c.toml"
    conf.write_text('[model]\nname = "BOU"\n[simulate]\nn = 50\nseed = 3\n')
    cfg = parse_config(["simulate", "--config", str(conf), "--seed", "9"])
    assert cfg.model["name"] == "BOU" and cfg.params["n"] == 50 and cfg.params["seed"] == 9


@pytest.mark.parametrize("text,key", [("modle = 'OU'\n", "modle"), ("[simulate]\nmodle = 1\n", "modle"),
                                      ("[model]\nnmae = 'OU'\n", "nmae"), ("[plot]\nx = 1\n", "plot")])
def test_unknown_keys_named(tmp_path, text, key):
    conf = tmp_path / "c.toml"
    conf.write_text(text)
    with pytest.raises(UsageError, match=key):
        parse_config(["simulate", "--config", str(conf), "--n", "5"])


def test_parse_error_has_line_number(tmp_path, capsys):
    conf = tmp_path / "bad.toml"
    conf.write_text("[simulate]\nn = 10\nseed = = 3\n")
    code, _, err = run(["simulate", "--config", str(conf)], capsys)
    assert code == 2 and "line 3" in err


def test_missing_required_field_named(capsys):
    code, _, err = run(["simulate"], capsys)
    assert code == 2 and "'n'" in err


def test_mc_gamma_rejected(capsys):
    code, _, err = run(["mc", "--gamma", "0.4"], capsys)
    assert code == 2 and "gamma must be in (0.5, 1)" in err


def test_info_ou(capsys):
    code, out, _ = run(["info", "--model", "OU"], capsys)
    doc = json.loads(out)
    assert code == 0
    assert doc["gamma1"] == pytest.approx(2.0, abs=1e-6)
    assert doc["gamma2"] == pytest.approx(0.5, abs=1e-6)
    assert doc["limit_covariance"][0] == pytest.approx([0.5, 0.0], abs=1e-6)
    assert doc["limit_covariance"][1] == pytest.approx([0.0, 2.0], abs=1e-6)
    assert doc["identifiability"]["chi2"] == pytest.approx(0.25, rel=0.05)


def test_validate_loss_power2(capsys):
    code, out, _ = run(["validate-loss", "--loss", "power:2", "--eta", "0.5", "--r0", "4"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["passed"]
    assert all(doc["properties"]["checks"].values())
    assert doc["C1"]["holds"] and doc["A5"]["holds"]


def test_validate_loss_counterexample_reports_failure(capsys):
    code, out, _ = run(["validate-loss", "--loss", "custom:asymmetric"], capsys)
    doc = json.loads(out)
    assert code == 0 and not doc["passed"]
    assert "property2" in doc["properties"]["witnesses"]


def test_estimate_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    code, _, err = run(["estimate", "--data", str(missing)], capsys)
    assert code == 1 and str(missing) in err


def test_simulate_then_estimate(tmp_path, capsys):
    code, out, _ = run(["simulate", "--model", "BOU", "--n", "800", "--seed", "5", "--output-dir", str(tmp_path)],
                       capsys)
    assert code == 0
    data = json.loads(out)["path"]
    code, out, _ = run(["estimate", "--model", "BOU", "--data", data, "--loss1", "power:1", "--loss2",
                        "indicator:1", "--oracle-pilot", "--grid-nodes", "201"], capsys)
    doc = json.loads(out)
    assert code == 0
    assert set(doc) == {"theta_hat", "theta_tilde", "diagnostics"}
    assert doc["diagnostics"]["bayes"]["losses"] == ["power:1", "indicator:1"]


def test_estimate_wrong_dimension_is_domain_error(tmp_path, capsys):
    p = tmp_path / "two.csv"
    p.write_text("t,x_1,x_2\n0.0,0.0,0.0\n0.1,0.1,0.2\n0.2,0.0,0.1\n")
    code, _, err = run(["estimate", "--data", str(p)], capsys)
    assert code == 1 and "state columns" in err


def test_custom_model_from_config(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text('[model]\nname = "cubic"\ndrift = [0.0, 1.0, 0.0, 0.2]\ndiff = [1.0, 0.3]\n'
                    '[simulate]\nn = 200\nseed = 1\n')
    code, out, _ = run(["simulate", "--config", str(conf), "--output-dir", str(tmp_path)], capsys)
    assert code == 0
    code, out, _ = run(["estimate", "--config", str(conf), "--data", str(tmp_path / "observations.csv")], capsys)
    assert code == 0 and len(json.loads(out)["theta_hat"]) == 2


@pytest.mark.parametrize("argv,code", [
    (["info", "--model", "OU"], 0),
    (["validate-loss", "--loss", "indicator:1"], 0),
    (["simulate", "--n", "20", "--seed", "1"], 0),
    (["info", "--model", "XYZ"], 2),
    (["simulate", "--n", "0"], 2),
    (["validate-loss", "--loss", "custom:nope"], 2),
    (["validate-loss", "--loss", "power:2", "--r0", "1"], 2),
    (["estimate", "--data", "/nonexistent/x.csv"], 1),
    (["frobnicate"], 2),
    (["simulate", "--n", "ten"], 2),
    (["estimate", "--data", "x.csv", "--pilot", "1", "--oracle-pilot"], 2),
])
def test_exit_code_matrix(argv, code, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    capsys.readouterr()


def test_simulation_explosion_is_domain_error(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text('[model]\nname = "blowup"\ndrift = [0.0, 0.0, 0.0, -1.0]\nx0 = [3.0]\n'
                    '[simulate]\nn = 50\ngamma = 0.55\nseed = 1\nsubsteps = 1\n')
    code, _, err = run(["simulate", "--config", str(conf), "--output-dir", str(tmp_path)], capsys)
    assert code == 1 and "step" in err


def test_mc_outputs_byte_identical(tmp_path, capsys):
    conf = tmp_path / "mc.toml"
    conf.write_text(MC_TOML)
    for d in ("a", "b"):
        code, out, _ = run(["mc", "--config", str(conf), "--output-dir", str(tmp_path / d)], capsys)
        assert code == 0
        assert "PASS theorem1 loss independence" in out or "FAIL theorem1 loss independence" in out
    for name in ("report.json", "summary.csv", "checks.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert "started" in meta and meta["config"]["params"]["seed"] == 11
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert "started" not in json.dumps(report)


def test_seed_changes_outputs(tmp_path, capsys):
    for seed in ("1", "2"):
        assert main(["simulate", "--n", "30", "--seed", seed, "--output-dir", str(tmp_path / seed)]) == 0
    capsys.readouterr()
    assert (tmp_path / "1" / "observations.csv").read_bytes() != (tmp_path / "2" / "observations.csv").read_bytes()
    assert main(["simulate", "--n", "30", "--seed", "1", "--output-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "1" / "observations.csv").read_bytes() == (tmp_path / "again" / "observations.csv").read_bytes()


@pytest.mark.skipif(shutil.which("qlabayes") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["qlabayes", "info", "--model", "OU"], capture_output=True, text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["gamma1"] == pytest.approx(2.0, abs=1e-6)
    out = subprocess.run([sys.executable, "-m", "qlabayes.cli", "mc", "--gamma", "0.4"], capture_output=True, text=True)
    assert out.returncode == 2
