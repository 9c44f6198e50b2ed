"""Metrics persistence: newline-delimited JSON, one record per batch, plus a
ready-to-plot CSV of (frames, rolling mean, stderr).

The JSONL file is append-only and parses back losslessly; identical runs
write byte-identical files when wall-clock reporting is disabled
(``deterministic`` mode writes 0.0 seconds).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def truncate_from(self, batch_index: int) -> None:
        """Drop records at or past `batch_index` (crash-consistent resume)."""
        if not self.path.exists():
            return
        rows = [r for r in read_metrics(self.path) if r["batch"] < batch_index]
        with open(self.path, "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_curve_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["frames", "rolling_mean", "stderr"])
        for r in rows:
            writer.writerow([r["frames"],
                             "" if r["rolling_mean"] is None else r["rolling_mean"],
                             "" if r["rolling_stderr"] is None else r["rolling_stderr"]])


def read_curve(path: str | Path) -> list[tuple[int, float | None, float | None]]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append((int(row["frames"]),
                        float(row["rolling_mean"]) if row["rolling_mean"] else None,
                        float(row["stderr"]) if row["stderr"] else None))
    return out
