import json

import pytest

from services.errors import DatasetIOError
from services.reporting import REPORT_HEADER, aggregate, load_summaries, report_csv, write_report


def summary(model, seed, mse, task="hull3d"):
    return {"model": model, "task": task, "seed": seed, "test_mse": mse, "best_iter": 10,
            "best_val_mse": mse, "sec_per_iter": 0.5}


def write_runs(directory, runs):
    for i, run in enumerate(runs):
        sub = directory / f"run{i}"
        sub.mkdir()
        (sub / "model.ckpt.summary.json").write_text(json.dumps(run), encoding="utf-8")


def test_aggregate_groups_by_model():
    rows = aggregate([summary("gnn", 0, 1.0), summary("gnn", 1, 3.0), summary("cgegnn-1-2", 0, 0.5)])
    by_model = {r["model"]: r for r in rows}
    assert by_model["gnn"]["mean_mse"] == 2.0
    assert by_model["gnn"]["std_mse"] == 1.0
    assert by_model["gnn"]["seeds"] == 2
    assert by_model["cgegnn-1-2"]["std_mse"] == 0.0


def test_csv_layout():
    text = report_csv(aggregate([summary("egnn", 0, 0.25)]))
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[1] == "egnn,0.25,0,1,0.5,hull3d"


def test_no_summaries(tmp_path):
    with pytest.raises(DatasetIOError):
        load_summaries(str(tmp_path))


def test_broken_summary(tmp_path):
    (tmp_path / "x.summary.json").write_text("{", encoding="utf-8")
    with pytest.raises(DatasetIOError):
        load_summaries(str(tmp_path))


def test_write_report(tmp_path):
    runs = tmp_path / "runs"
    runs.mkdir()
    write_runs(runs, [summary("gnn", s, 1.0 + s) for s in range(3)])
    out = tmp_path / "report.csv"
    text = write_report(str(runs), str(out))
    assert out.read_text(encoding="utf-8") == text
    assert "gnn,2,0.816497,3,0.5,hull3d" in text
