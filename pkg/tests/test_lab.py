import csv
import json

import numpy as np
import pytest

from mfglab.exceptions import ConfigurationError
from mfglab.girsanov import GirsanovWeights
from mfglab.lab.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from mfglab.lab.config import ExperimentConfig, git_blob_hash
from mfglab.lab.experiments import run_verification_suites, suite_martingale
from mfglab.lab.io import ReportWriter

SMALL_SOLVE = """
[model]
n_actions = 41
[grid]
n_steps = 10
[scenarios]
count = 2
"""


def _write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_and_overrides():
    cfg = ExperimentConfig.from_string("[grid]\nn_steps = 10\n[convergence]\nn_list = 4, 8, 16\n", seed=3)
    assert cfg["grid"]["n_steps"] == 10 and cfg["convergence"]["n_list"] == [4, 8, 16]
    assert cfg.seed == 3 and cfg["grid"]["state_bins"] == 61
    assert cfg.time_grid().n_steps == 10


@pytest.mark.parametrize("text", [
    "[nowhere]\nx = 1\n",
    "[grid]\nbogus = 1\n",
    "[grid]\nn_steps = many\n",
    "[convergence]\nn_list = 16, 4\n",
    "[suites]\nrun = telepathy\n",
    "[picard]\ndamping = 0\n",
    "[model]\nname = no_such_model\n",
    "[model]\nsigma = -1\n",
    "[experiment]\nworkers = 0\n",
    "not an ini file",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_string(text)


def test_hash_ignores_output_and_workers():
    a = ExperimentConfig.from_string("", output="x", workers=1)
    b = ExperimentConfig.from_string("", output="y", workers=4)
    c = ExperimentConfig.from_string("", seed=5)
    assert a.config_hash == b.config_hash != c.config_hash
    assert len(a.config_hash) == 40


def test_git_blob_hash_of_empty_blob():
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_ini_roundtrip():
    cfg = ExperimentConfig.from_string("[spde]\nmodel.gamma = 0.5\n[grid]\nn_steps = 12\n")
    again = ExperimentConfig.from_string(cfg.to_ini())
    assert again.config_hash == cfg.config_hash


def test_report_writer_provenance(tmp_path):
    w = ReportWriter(tmp_path / "r", "exp", "abc", 7)
    w.record("metric", np.float64(1.5), se=0.1, n=np.int64(4), note=np.array([1, 2]))
    w.record("metric", float("nan"))
    lines = (tmp_path / "r" / "records.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert first["config_hash"] == "abc" and first["seed"] == 7 and first["n"] == 4
    assert first["extra"] == {"note": [1, 2]} and "module_version" in first
    assert json.loads(lines[1])["value"] == "nan"
    w.write_csv("t.csv", ["a", "b"], [[1, 0.25]])
    rows = list(csv.reader(open(tmp_path / "r" / "t.csv")))
    assert rows[0] == ["a", "b", "config_hash", "seed", "module_version"]
    assert rows[1][:4] == ["1", "0.25", "abc", "7"]


def test_cli_exit_codes_for_configuration_errors(tmp_path, capsys):
    assert main(["no-such-command"]) == EXIT_CONFIG
    assert main(["validate", "--bogus-flag"]) == EXIT_CONFIG
    assert main(["validate", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    bad = _write(tmp_path, "[grid]\nn_steps = -3\n")
    assert main(["validate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["validate", "--workers", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_cli_validate_succeeds(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("PASS validate")
    assert any((tmp_path / "validate").iterdir())


def test_solve_reports_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL_SOLVE)
    for out in ("a", "b"):
        assert main(["solve-mfe", "--config", str(cfg), "--out", str(tmp_path / out), "--seed", "4"]) == EXIT_OK
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and files_a
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_saved_solution_for_other_model_is_rejected(tmp_path):
    cfg = _write(tmp_path, SMALL_SOLVE)
    assert main(["solve-mfe", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    stem = next((tmp_path / "solve-mfe").glob("*.json")).with_suffix("")
    other = _write(tmp_path, "[model]\nname = lq_crowd\n", "other.ini")
    assert main(["simulate", "--config", str(other), "--solution", str(stem), "--out", str(tmp_path)]) == EXIT_CONFIG


MARTINGALE_ONLY = "[girsanov]\nreplicas = 20000\n[suites]\nrun = martingale\n"


def _flipped_ito(xi, dW, dt, clip=50.0):
    inc = np.sum(xi * dW, axis=-1) + 0.5 * np.sum(xi * xi, axis=-1) * dt
    logz = np.concatenate([np.zeros(inc.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    return GirsanovWeights(xi, logz)


def test_martingale_suite_detects_wrong_ito_correction():
    cfg = ExperimentConfig.from_string(MARTINGALE_ONLY)
    assert suite_martingale(cfg).passed
    mutated = suite_martingale(cfg, zeta_fn=_flipped_ito)
    assert not mutated.passed
    assert not run_verification_suites(cfg, zeta_fn=_flipped_ito).passed


def test_informational_suite_does_not_fail_the_run(tmp_path, capsys):
    crowd = "[model]\nname = lq_crowd\n[suites]\nrun = monotonicity\n"
    blocking = _write(tmp_path, crowd, "blocking.ini")
    info = _write(tmp_path, crowd + "informational = monotonicity\n", "info.ini")
    assert main(["verify-all", "--config", str(blocking), "--out", str(tmp_path / "b")]) == EXIT_FAIL
    assert "FAIL monotonicity" in capsys.readouterr().out
    assert main(["verify-all", "--config", str(info), "--out", str(tmp_path / "i")]) == EXIT_OK
    assert "INFO monotonicity" in capsys.readouterr().out
    verdicts = [json.loads(s) for s in (tmp_path / "i" / "verify-all" / "verdicts.jsonl").read_text().splitlines()]
    assert verdicts[0]["verdict"] == "info-fail"
