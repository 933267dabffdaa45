import json

import pytest

from kamred.cli_report import (
    LEDGER_COLUMNS,
    RunConfig,
    dispatch,
    emit_report,
)
from kamred.errors import ValidationError


def write_reduce_config(path, **overrides):
    base = {
        "omega": "[1.9905, 1.00675]",
        "gamma": "5e-3",
        "tol": "1e-14",
        "max_stages": "3",
        "scale": "3.0",
        "seed": "42",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    path.write_text(f"""
schema = 1
l = 1
n = 2
N = 32
eps = 1e-3
omega = {base['omega']}
gamma = {base['gamma']}
tau = 2.5
kmax = 6
seed = {base['seed']}
basis = "ladder"

[w_random]
kind = "web"
scale = {base['scale']}

[schedule]
r = 1.0
theta = 0.5
max_stages = {base['max_stages']}
tol = {base['tol']}
d2 = 2.0

[output]
ledger = "ledger.csv"
state = "state.json"
manifest = "manifest.json"
""")


def test_emit_report_header_only(tmp_path):
    out = tmp_path / "empty.csv"
    emit_report([], ["a", "b"], out)
    assert out.read_bytes() == b"a,b\r\n"


def test_emit_report_17_digits(tmp_path):
    out = tmp_path / "x.csv"
    emit_report([{"a": 1.0 / 3.0}], ["a"], out)
    assert "0.33333333333333331" in out.read_text()


def test_config_unknown_keys_rejected(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("schema = 1\nbogus_key = 3\n")
    with pytest.raises(ValidationError):
        RunConfig.from_toml(cfg)
    cfg.write_text("schema = 1\n[schedule]\nbogus = 1\n")
    with pytest.raises(ValidationError):
        RunConfig.from_toml(cfg)


def test_config_range_validation():
    with pytest.raises(ValidationError):
        RunConfig({"omega": [0.5], "n": 1})
    with pytest.raises(ValidationError):
        RunConfig({"l": 0})
    with pytest.raises(ValidationError):
        RunConfig({"basis": "other"})


def test_spectrum_command(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc = dispatch(["spectrum", "--l", "2", "--n", "24", "--out", "basis.json"])
    assert rc == 0
    data = json.loads((tmp_path / "basis.json").read_text())
    assert data["N"] == 24
    manifest = json.loads((tmp_path / "basis.json.manifest.json").read_text())
    assert manifest["config"]["command"] == "spectrum"
    assert "versions" in manifest


def test_measure_command_deterministic(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    args = ["measure", "--set", "omega0", "--gamma", "1e-3", "--tau", "2.5",
            "--n", "2", "--samples", "50000", "--seed", "7", "--out", "m1.csv"]
    assert dispatch(args) == 0
    assert dispatch(args[:-1] + ["m2.csv"]) == 0
    assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    header = (tmp_path / "m1.csv").read_text().splitlines()[0]
    assert header == "gamma,tau,n,samples,excluded_fraction,ci95"


def test_reduce_command_and_outputs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "run.toml"
    write_reduce_config(cfg)
    assert dispatch(["reduce", "--config", str(cfg)]) == 0
    rows = (tmp_path / "ledger.csv").read_text().splitlines()
    assert rows[0] == ",".join(LEDGER_COLUMNS)
    assert len(rows) >= 3
    eps_col = [float(r.split(",")[3]) for r in rows[1:]]
    assert all(b < a for a, b in zip(eps_col, eps_col[1:]))  # monotone decay
    state = json.loads((tmp_path / "state.json").read_text())
    assert len(state["lambda_inf"]) == 32
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 42


def test_reduce_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "run.toml"
    write_reduce_config(cfg, max_stages=2)
    assert dispatch(["reduce", "--config", str(cfg)]) == 0
    first = (tmp_path / "ledger.csv").read_bytes()
    assert dispatch(["reduce", "--config", str(cfg)]) == 0
    assert (tmp_path / "ledger.csv").read_bytes() == first


def test_reduce_resonant_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "res.toml"
    cfg.write_text("""
schema = 1
l = 1
n = 1
N = 16
eps = 1e-3
omega = [1.0]
gamma = 0.05
tau = 2.5
kmax = 4
seed = 3
basis = "ladder"

[[w_terms]]
a = 1
b = 0
k = [1]
coeff = 0.5

[[w_terms]]
a = 1
b = 0
k = [-1]
coeff = 0.5
""")
    rc = dispatch(["reduce", "--config", str(cfg)])
    assert rc == 3
    err = capsys.readouterr().err
    assert "resonance certificate" in err
    cert = json.loads(err.split("resonance certificate: ")[1])
    assert {"i", "j", "k"} <= set(cert)


def test_evolve_command(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "ev.toml"
    cfg.write_text("""
schema = 1
l = 1
n = 1
N = 16
eps = 1e-2
omega = [1.6180339887498949]
seed = 3
basis = "oscillator"

[[w_terms]]
a = 1
b = 0
k = [1]
coeff = 0.5

[[w_terms]]
a = 1
b = 0
k = [-1]
coeff = 0.5

[evolve]
t_final = 5.0
dt = 2e-3
psi0 = "ground"

[output]
trace = "trace.csv"
manifest = "m.json"
""")
    assert dispatch(["evolve", "--config", str(cfg)]) == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,l2,h1,h2,leakage,unitarity_defect"
    last = lines[-1].split(",")
    assert abs(float(last[1]) - 1.0) < 1e-8  # L2 conserved


def test_verify_command(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc = dispatch(["verify", "--seed", "1", "--trials", "30", "--out", "v.json"])
    assert rc == 0
    report = json.loads((tmp_path / "v.json").read_text())
    assert report["violations"] == []
    assert set(report["checks"]) == {
        "lie_distance", "static_remainder", "duhamel_remainder",
        "divided_matrix", "recursion",
    }


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert dispatch(["measure", "--bogus"]) == 2
    assert dispatch(["nonsense"]) == 2
    cfg = tmp_path / "bad.toml"
    cfg.write_text("schema = 1\nunknown_thing = 2\n")
    assert dispatch(["reduce", "--config", str(cfg)]) == 2
    assert dispatch(["reduce", "--config", str(tmp_path / "missing.toml")]) == 4
