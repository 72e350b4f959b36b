import csv
import json

import pytest

from gridverify.cli import main, parse_range

from conftest import SCENARIOS

GOLDEN = str(SCENARIOS / "golden.json")


def test_parse_range():
    assert parse_range("1..7") == list(range(1, 8))
    assert parse_range("1,3, 5") == [1, 3, 5]
    assert parse_range("4") == [4]
    assert parse_range("1..2,6") == [1, 2, 6]
    with pytest.raises(ValueError):
        parse_range(",")


def test_verify_honest(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["verify", "--scenario", GOLDEN, "--out", str(out), "--emit-traces"]) == 0
    text = capsys.readouterr().out
    assert "outcome: converged" in text and "dev MW" in text
    report = json.loads((out / "report.json").read_text())
    assert report["outcome"] == "converged" and report["exit_code"] == 0
    assert (out / "traces" / "trace_1_2.csv").exists()
    assert (out / "ledgers" / "phase0" / "GL.jsonl").exists()


def test_verify_attack_exit_code(tmp_path, capsys):
    code = main(["verify", "--scenario", GOLDEN, "--attacker", "1", "--seed", "3",
                 "--out", str(tmp_path)])
    assert code == 2
    text = capsys.readouterr().out
    assert "attacker(1)" in text and "isolated: [1]" in text
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["attack"]["seed"] == 3
    assert report["config"]["noise_seed"] == 3


def test_verify_exhausted_exit_code(tmp_path):
    assert main(["verify", "--scenario", GOLDEN, "--max-iters", "3", "--out", str(tmp_path)]) == 3


def test_verify_default_out_is_relative_to_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["verify", "--scenario", GOLDEN, "--no-ledger"]) == 0
    assert (tmp_path / "gridverify-out" / "report.json").exists()
    assert not (tmp_path / "gridverify-out" / "ledgers").exists()


def test_analyze(tmp_path, capsys):
    main(["verify", "--scenario", GOLDEN, "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["analyze", "--report", str(tmp_path / "report.json"), "--limit", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "outcome: converged"
    assert len(lines) == 5


def test_sweep(tmp_path, capsys):
    assert main(["sweep", "--scenario", GOLDEN, "--attackers", "2,6", "--seeds", "2",
                 "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "attacker" in text
    with open(tmp_path / "sweep_runs.csv") as fh:
        runs = list(csv.DictReader(fh))
    assert len(runs) == 4
    assert all(r["argmax"] == r["attacker"] for r in runs)
    assert (tmp_path / "pi_bars_attacker6.csv").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["verify"],
    ["verify", "--scenario", GOLDEN, "--seed", "x"],
    ["verify", "--scenario", GOLDEN, "--attack-kind", "bogus"],
])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["verify", "--scenario", "/nonexistent/scenario.json"],
    ["verify", "--scenario", GOLDEN, "--attack-kind", "state_update"],
    ["sweep", "--scenario", GOLDEN, "--attackers", "9"],
    ["analyze", "--report", "/nonexistent/report.json"],
])
def test_runtime_errors(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err
