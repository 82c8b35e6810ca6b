"""Render experiment figures from the harness CSV files.

Pure consumers: every number plotted comes straight out of a CSV produced
by the primary component; no statistics are recomputed here.  Output is
deterministic (fixed style, fixed dpi) and written atomically as both PNG
and SVG.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

DPI = 150

REQUIRED_COLUMNS = {
    "tradeoff": ["n_basis", "mse", "accuracy"],
    "accuracy_by_length": ["length", "accuracy"],
    "bounded": ["update_count", "state_bytes", "update_ms", "read_ms"],
    "sticky": ["bin_left", "bin_right", "count"],
}


class PlotError(Exception):
    pass


@dataclass
class FigureSpec:
    kind: str
    in_path: Path
    out_path: Path                 # base path; .png and .svg are appended
    xlabel: str = ""
    ylabel: str = ""
    title: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REQUIRED_COLUMNS:
            raise PlotError(f"unknown figure kind {self.kind!r}")
        self.in_path = Path(self.in_path)
        self.out_path = Path(self.out_path)


def load_rows(path: Path, required: list) -> list:
    try:
        with Path(path).open("r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise PlotError(f"{path}: empty file, no header row")
            for col in required:
                if col not in reader.fieldnames:
                    raise PlotError(f"{path}: missing required column {col!r}")
            rows = list(reader)
    except OSError as e:
        raise PlotError(f"cannot read {path}: {e}") from e
    if not rows:
        raise PlotError(f"{path}: no data rows")
    return rows


def _col(rows, name):
    return [float(r[name]) for r in rows]


def _style(ax, spec, xlabel, ylabel):
    ax.set_xlabel(spec.xlabel or xlabel)
    ax.set_ylabel(spec.ylabel or ylabel)
    ax.grid(True, alpha=0.3)


def _fig_tradeoff(spec, rows):
    fig, ax_acc = plt.subplots(figsize=(5.5, 4))
    ax_mse = ax_acc.twinx()
    n = _col(rows, "n_basis")
    ax_acc.plot(n, _col(rows, "accuracy"), "o-", color="tab:blue", label="accuracy")
    ax_mse.plot(n, _col(rows, "mse"), "s--", color="tab:red", label="regression MSE")
    ax_acc.set_xscale("log", base=2)
    _style(ax_acc, spec, "basis functions N", "sorting accuracy")
    ax_mse.set_ylabel("regression MSE")
    lines = ax_acc.get_lines() + ax_mse.get_lines()
    ax_acc.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    return fig


def _fig_accuracy_by_length(spec, rows):
    by_len = {}
    for r in rows:
        by_len.setdefault(float(r["length"]), []).append(float(r["accuracy"]))
    lengths = sorted(by_len)
    means = [sum(by_len[l]) / len(by_len[l]) for l in lengths]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(lengths, means, "o-", color="tab:blue")
    _style(ax, spec, "sequence length", "sorting accuracy")
    return fig


def _fig_bounded(spec, rows):
    fig, ax_bytes = plt.subplots(figsize=(5.5, 4))
    ax_ms = ax_bytes.twinx()
    n = _col(rows, "update_count")
    ax_bytes.plot(n, _col(rows, "state_bytes"), "-", color="tab:green",
                  label="state bytes")
    ax_ms.plot(n, _col(rows, "update_ms"), "-", color="tab:blue", alpha=0.7,
               label="update ms")
    ax_ms.plot(n, _col(rows, "read_ms"), "-", color="tab:red", alpha=0.7,
               label="read ms")
    ax_bytes.set_ylim(bottom=0)
    _style(ax_bytes, spec, "update count", "memory state size (bytes)")
    ax_ms.set_ylabel("wall time (ms)")
    lines = ax_bytes.get_lines() + ax_ms.get_lines()
    ax_bytes.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    return fig


def _fig_sticky(spec, rows):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    lefts = _col(rows, "bin_left")
    widths = [r - l for l, r in zip(lefts, _col(rows, "bin_right"))]
    ax.bar(lefts, _col(rows, "count"), width=widths, align="edge",
           color="tab:purple", edgecolor="white")
    _style(ax, spec, "memory position", "sampled locations")
    return fig


_RENDERERS = {
    "tradeoff": _fig_tradeoff,
    "accuracy_by_length": _fig_accuracy_by_length,
    "bounded": _fig_bounded,
    "sticky": _fig_sticky,
}


def _atomic_save(fig, target: Path):
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=target.suffix)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=DPI, format=target.suffix.lstrip("."))
        os.replace(tmp, target)
    except BaseException:
        os.unlink(tmp)
        raise


def render(spec: FigureSpec) -> list:
    """Validate the CSV, draw the figure, write <out>.png and <out>.svg."""
    rows = load_rows(spec.in_path, REQUIRED_COLUMNS[spec.kind])
    fig = _RENDERERS[spec.kind](spec, rows)
    if spec.title:
        fig.axes[0].set_title(spec.title)
    fig.tight_layout()
    written = []
    try:
        for suffix in (".png", ".svg"):
            target = spec.out_path.with_suffix(suffix)
            _atomic_save(fig, target)
            written.append(target)
    finally:
        plt.close(fig)
    return written
