"""Command-line behavior: configs, artifacts, exit codes."""

import csv
import json

import pytest

from dslsr1.cli import main
from dslsr1.config import load_config
from dslsr1.errors import ConfigError

CONFIG = """
version = 1

[run]
variant = "dslsr1"
workers = 2
seed = 42
max_iters = 4
transport = "sim"
grad_norm_tol = 1e-12

[problem]
kind = "logistic_l2"
d = 12
n = 64
l2 = 0.01
seed = 7

[memory]
m = 4
eta = 1e-8

[trust_region]
delta0 = 1.0
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


class TestConfig:
    def test_load_and_fields(self, config_path):
        cfg = load_config(config_path)
        opt = cfg["optimizer"]
        assert opt.variant == "dslsr1"
        assert opt.workers == 2
        assert opt.m == 4
        assert cfg["backend"] == "sim"

    def test_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "nope.toml"
        with pytest.raises(ConfigError) as err:
            load_config(missing)
        assert str(missing) in str(err.value)

    def test_version_required(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[run]\nvariant='serial'\nmax_iters=1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text(CONFIG.replace("eta = 1e-8", "eta = 1e-8\nbogus = 3"))
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "bogus" in str(err.value)


class TestRunCommand:
    def test_run_writes_artifacts_and_matching_ledger(self, config_path, tmp_path):
        out = tmp_path / "out"
        code = main(["run", "--config", str(config_path), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["ledger_check"]["all_exact"] is True
        for name in ("trajectory.csv", "trajectory.json", "ledger.csv",
                     "ledger.json", "report.json", "convergence.png",
                     "communication.png", "comm_scaling.png"):
            assert (out / name).exists(), name
        with open(out / "trajectory.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and rows[0]["k"] == "0"

    def test_missing_config_is_error_exit(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "absent.toml"),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        err = capsys.readouterr().err
        assert "absent.toml" in err

    def test_serial_override_with_jaccard_and_spectrum(self, config_path, tmp_path):
        out = tmp_path / "serial_out"
        code = main(["run", "--config", str(config_path), "--variant", "serial",
                     "--jaccard", "--spectrum-every", "2", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["variant"] == "serial"
        assert report["jaccard"] is not None
        assert (out / "jaccard.png").exists()
        assert (out / "spectrum.csv").exists()
        assert (out / "spectrum.png").exists()

    def test_variant_compare_reports_ratio(self, config_path, tmp_path):
        out = tmp_path / "cmp_out"
        code = main(["run", "--config", str(config_path), "--variant", "naive",
                     "--variant-compare", "dslsr1", "--out", str(out),
                     "--no-figures"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        cmp = report["comparison"]
        m, d = 4, 12
        expected = (2 * m * d + d + 1) / (m * m + 2 * d + 2 * m + 1)
        assert cmp["formula_ratio_full_memory"] == pytest.approx(expected)
        assert cmp["per_iteration"]

    def test_tcp_transport_round_trip(self, config_path, tmp_path):
        out = tmp_path / "tcp_out"
        code = main(["run", "--config", str(config_path), "--transport", "tcp",
                     "--out", str(out), "--no-figures"])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["ledger_check"]["all_exact"] is True


class TestPredictCommand:
    def test_predict_outputs_formulas(self, capsys):
        code = main(["predict", "--d", "100", "--m", "4"])
        assert code == 0
        rows = json.loads(capsys.readouterr().out)
        by_variant = {r["variant"]: r for r in rows}
        assert by_variant["dslsr1"]["noncommon_delta"] == 16 + 200 + 8 + 1
        assert by_variant["naive"]["noncommon_delta"] == 800 + 100 + 1
