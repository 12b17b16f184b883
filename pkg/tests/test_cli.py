import subprocess
import sys

from ssanc.cli import EXIT_CONFIG, EXIT_FAILED_ROWS, EXIT_IO, EXIT_OK, main
from ssanc.experiment import CSV_COLUMNS, read_csv


def test_validate_ok(tiny_config_path, capsys):
    assert main(["validate", str(tiny_config_path)]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith(": ok")


def test_validate_reports_problems(tmp_path, tiny_config_text, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(tiny_config_text.replace("rho_divisors = [1e4]", "rho_divisors = [0]"))
    assert main(["validate", str(path)]) == EXIT_CONFIG
    assert "rho_divisor=0" in capsys.readouterr().out


def test_syntax_error_is_config_error(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("[design\n")
    assert main(["validate", str(path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_file_is_io_error(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "missing.cfg")]) == EXIT_IO
    assert main(["run", str(tmp_path / "missing.cfg")]) == EXIT_IO


def test_run_writes_results_and_plots(tiny_config_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(tiny_config_path), "--out", str(out), "--jobs", "2"]) == EXIT_OK
    rows = read_csv(out / "results.csv")
    assert len(rows) == 6
    assert (out / "results.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert sorted(p.suffix for p in out.iterdir()) == [".csv", ".svg", ".svg"]
    assert "6 sweep points, 0 failed" in capsys.readouterr().out


def test_seed_override_changes_results(tiny_config_path, tmp_path):
    main(["run", str(tiny_config_path), "--out", str(tmp_path / "a"), "--seed", "0"])
    main(["run", str(tiny_config_path), "--out", str(tmp_path / "b"), "--seed", "3"])
    assert (tmp_path / "a/results.csv").read_bytes() != (tmp_path / "b/results.csv").read_bytes()


def test_failed_rows_exit_code(tmp_path, tiny_config_text, capsys):
    path = tmp_path / "fail.cfg"
    path.write_text(tiny_config_text.replace("anneal_after_s = 0.5", "anneal_after_s = 0.5\n  convergence_threshold = 1e-30"))
    assert main(["run", str(path), "--out", str(tmp_path / "o"), "--jobs", "1"]) == EXIT_FAILED_ROWS
    assert "FAILED tiny" in capsys.readouterr().err
    assert all(r.failed for r in read_csv(tmp_path / "o/results.csv"))


def test_unwritable_output_is_io_error(tiny_config_path, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", str(tiny_config_path), "--out", str(blocker / "x")]) == EXIT_IO


def test_bad_jobs_flag(tiny_config_path):
    assert main(["run", str(tiny_config_path), "--jobs", "0"]) == EXIT_CONFIG


def test_plot_subcommand(tiny_config_path, tmp_path):
    main(["run", str(tiny_config_path), "--out", str(tmp_path / "r")])
    assert main(["plot", str(tmp_path / "r/results.csv"), "--out", str(tmp_path / "p")]) == EXIT_OK
    assert len(list((tmp_path / "p").glob("*.svg"))) == 2


def test_console_entry_point(tiny_config_path):
    proc = subprocess.run(
        [sys.executable, "-m", "ssanc.cli", "validate", str(tiny_config_path)], capture_output=True, text=True
    )
    assert proc.returncode == 0 and "ok" in proc.stdout
