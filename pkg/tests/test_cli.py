import json
import subprocess
import sys

import pytest

from brsdr import cli, harness, validation

TOML = """
format = "brsdr-study/1"
study = "Sim1"
n = [200]
replications = 5
methods = ["GLM", "SA", "BRS"]

[synthesis]
n_iter = 40
burn_in = 10
"""


def test_simulate_flags_override_file(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text(TOML)
    out = tmp_path / "out"
    code = cli.main(["simulate", "--config", str(cfg), "--replications", "2",
                     "--output-dir", str(out), "--quiet"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["replications"] == 2
    assert manifest["config"]["synthesis"]["n_iter"] == 40
    assert len(harness.read_metrics(out / "metrics.tsv")) == 3
    assert "results written to" in capsys.readouterr().out


def test_simulate_without_file(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["simulate", "--study", "Sim3", "--n", "200", "--replications", "1",
                     "--n-iter", "30", "--burn-in", "10", "--output-dir", str(out), "--quiet"])
    assert code == 0
    methods = [r["method"] for r in harness.read_metrics(out / "metrics.tsv")]
    assert methods == list(harness.default_methods("Sim3"))


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text(TOML + "mystery = 1\n")
    assert cli.main(["simulate", "--config", str(cfg)]) == 2
    assert "mystery" in capsys.readouterr().err


def test_empirical_without_data_exits_2(tmp_path, capsys):
    code = cli.main(["empirical", "--data", str(tmp_path / "none.csv"),
                     "--output-dir", str(tmp_path / "e")])
    assert code == 2
    assert "mbsmoke" in capsys.readouterr().err


def test_dump_draws(tmp_path, capsys):
    out = tmp_path / "d.tsv"
    code = cli.main(["dump-draws", "--target", "pi", "--n-iter", "30", "--burn-in", "10",
                     "--probe", "0", "3", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    # no sigma2 for the binary chain: (J + 1) x (tau2, psi) + 2 probes per draw, J = 3
    assert len(lines) == 1 + 20 * 10
    assert "psi acceptance" in capsys.readouterr().out


def test_validate_quick(capsys):
    assert cli.main(["validate", "--quick"]) == 0
    text = capsys.readouterr().out
    assert text.count("PASS") == len(validation.SUITE) - 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "brsdr.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for sub in ("simulate", "empirical", "validate", "dump-draws"):
        assert sub in res.stdout


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
