"""CSV metric emission: comma-separated, LF line endings, floats via repr
so values parse back bit-exactly.  Writers are append-safe: the header is
written once, on first creation."""

from __future__ import annotations

import csv
from pathlib import Path


class MetricsError(Exception):
    pass


TRAIN_COLUMNS = ["step", "nll", "kl", "total", "lr", "tokens_per_s"]
EVAL_COLUMNS = ["split", "accuracy", "nll"]
BENCH_COLUMNS = ["update_count", "state_bytes", "update_ms", "read_ms"]


class CsvWriter:
    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = list(columns)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = self.path.open("a", newline="", encoding="utf-8")
        except OSError as e:
            raise MetricsError(f"cannot open metrics file {path}: {e}") from e
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(self.columns)
            self._fh.flush()

    def emit(self, record: dict):
        row = []
        for c in self.columns:
            v = record[c]
            row.append(repr(v) if isinstance(v, float) else v)
        self._w.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path) -> list:
    """Parse a metrics CSV back into dicts with numeric fields restored."""
    path = Path(path)
    out = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MetricsError(f"{path}: empty file, expected a header row")
        for row in reader:
            rec = {}
            for key, raw in zip(header, row):
                try:
                    rec[key] = int(raw)
                except ValueError:
                    try:
                        rec[key] = float(raw)
                    except ValueError:
                        rec[key] = raw
            out.append(rec)
    return out
