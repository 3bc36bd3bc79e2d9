import json

from helpers import knife_drop_kb
from recover_kit.cli import main
from recover_kit.orchestrator import make_config, run
from recover_kit.worldsim import feasible, schema


def test_run(capsys, tmp_path):
    out = tmp_path / "rec.json"
    assert main(["run", "--task", "T4", "--failure", "6", "--out", str(out)]) == 0
    assert "RecoveredAndCompleted" in capsys.readouterr().out
    assert json.loads(out.read_text())["outcome"] == "RecoveredAndCompleted"


def test_run_infeasible(capsys):
    assert main(["run", "--task", "T3", "--failure", "4"]) == 2
    assert "refused" in capsys.readouterr().err


def test_verify_lint(capsys):
    assert main(["verify"]) == 0
    assert capsys.readouterr().out


def test_verify_snapshot(tmp_path, capsys):
    from recover_kit.events import EventLog

    rec = run(make_config("T8", 2))
    kb = schema().copy_schema()
    EventLog.from_jsonl(rec.log, kb)
    snap = tmp_path / "kb.nt"
    kb.dump(snap)
    eid = next(e for e, v in rec.verdicts if "DroppingObjFailure" in v)
    assert main(["verify", "--snapshot", str(snap), "--event", eid]) == 0
    assert "DroppingObjFailure" in capsys.readouterr().out


def test_verify_bruteforce_agrees(tmp_path, capsys):
    snap = tmp_path / "kb.nt"
    knife_drop_kb(schema()).dump(snap)
    assert main(["verify", "--snapshot", str(snap), "--event", "e3"]) == 0
    fast = capsys.readouterr().out
    assert main(["verify", "--snapshot", str(snap), "--event", "e3", "--bruteforce"]) == 0
    assert capsys.readouterr().out == fast
    assert "DroppingObjFailure" in fast


def test_verify_snapshot_needs_event(tmp_path):
    snap = tmp_path / "kb.nt"
    snap.write_text("")
    assert main(["verify", "--snapshot", str(snap)]) == 2


def test_matrix_then_report(tmp_path):
    cfg = tmp_path / "suite.yaml"
    cfg.write_text("tasks: [T3, T4]\nfailures: [4, 6]\n")
    csv_path, grid = tmp_path / "m.csv", tmp_path / "grid.txt"
    assert main(["matrix", "--config", str(cfg), "--out", str(csv_path), "--grid", str(grid)]) == 0
    report = tmp_path / "report.txt"
    assert main(["report", "--matrix", str(csv_path), "--out", str(report)]) == 0
    assert report.read_text() == grid.read_text()
    n = sum(feasible(t, f) for t in ("T3", "T4") for f in (4, 6))
    assert n >= 1
    assert f"feasible pairs: {n}" in report.read_text()
