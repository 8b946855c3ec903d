import csv
import json

import pytest

from fedfleet.metrics import CSV_COLUMNS, MetricsWriter, emit_metrics, read_metrics


def record(r, acc=0.5):
    return {"round": r, "wallclock_s": 1.0 * r, "global_accuracy": acc, "global_loss": 1.0,
            "selected_clients": ["a", "b"], "failed_clients": [], "agg_time_s": 0.01,
            "val_time_s": 0.02, "overhead_s": 0.1}


def test_empty_run_gives_header_only(tmp_path):
    p = emit_metrics([], tmp_path / "m.csv")
    assert p.read_text().strip() == ",".join(CSV_COLUMNS)


def test_csv_and_jsonl_agree(tmp_path):
    recs = [record(r, acc=0.1 * r) for r in (1, 2, 3)]
    emit_metrics(recs, tmp_path / "m.csv")
    emit_metrics(recs, tmp_path / "m.jsonl", fmt="jsonl")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 3
    back = read_metrics(tmp_path / "m.jsonl")
    assert back == recs
    for row, rec in zip(rows, recs):
        assert int(row["round"]) == rec["round"]
        assert float(row["global_accuracy"]) == pytest.approx(rec["global_accuracy"])
        assert row["selected_clients"] == "a;b" and row["num_selected"] == "2"


def test_missing_values_are_blank(tmp_path):
    emit_metrics([{"round": 1}], tmp_path / "m.csv")
    row = next(csv.DictReader(open(tmp_path / "m.csv")))
    assert row["global_accuracy"] == "" and row["num_failed"] == "0"


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_metrics([], tmp_path / "m.x", fmt="xml")


def test_writer_appends_and_reader_skips_markers(tmp_path):
    w = MetricsWriter(tmp_path / "sub" / "m.jsonl")
    w.write(record(1))
    w.write({"event": "resume", "round": 1})
    w.write(record(2))
    with open(tmp_path / "sub" / "m.jsonl", "a") as fh:
        fh.write('{"round": 3, "wallc')
    assert [r["round"] for r in read_metrics(tmp_path / "sub" / "m.jsonl")] == [1, 2]
    assert read_metrics(tmp_path / "absent.jsonl") == []
    MetricsWriter(None).write(record(1))
    json.loads((tmp_path / "sub" / "m.jsonl").read_text().splitlines()[0])
