"""Per-round metrics records: JSONL stream and plot-ready CSV export."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Iterable

RECORD_FIELDS = ("round", "wallclock_s", "global_accuracy", "global_loss", "selected_clients",
                 "failed_clients", "agg_time_s", "val_time_s", "overhead_s")
CSV_COLUMNS = ("round", "wallclock_s", "global_accuracy", "global_loss", "num_selected", "num_failed",
               "agg_time_s", "val_time_s", "overhead_s", "selected_clients", "failed_clients")


class MetricsWriter:
    """Append-only JSONL writer; each record is flushed as it is written."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()


def read_metrics(path: str | os.PathLike) -> list[dict]:
    """Round records from a JSONL stream; non-round lines (e.g. resume
    markers) and a torn final line are skipped."""
    out = []
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text(encoding="utf-8").splitlines():
        try:
            rec = json.loads(line)
        except ValueError:
            continue
        if isinstance(rec, dict) and "round" in rec and rec.get("event", "round") == "round":
            out.append(rec)
    return out


def _csv_row(rec: dict) -> dict:
    sel = rec.get("selected_clients") or []
    fail = rec.get("failed_clients") or []
    row = {k: rec.get(k) for k in CSV_COLUMNS}
    row.update(num_selected=len(sel), num_failed=len(fail),
               selected_clients=";".join(sel), failed_clients=";".join(fail))
    return {k: "" if v is None else v for k, v in row.items()}


def emit_metrics(records: Iterable[dict], path: str | os.PathLike, fmt: str = "csv") -> Path:
    """Write records as ``csv`` (fixed, ordered columns) or ``jsonl``."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        with open(p, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    elif fmt == "csv":
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for rec in records:
                w.writerow(_csv_row(rec))
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")
    return p
