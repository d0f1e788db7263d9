"""CSV/JSON run artifacts.

A recorder accumulates rows in memory; ``write`` lays the run directory out
as metrics.csv, scale_grads.csv, and config.json.  Files are written even
when no rows were recorded (header-only), so downstream tooling can always
open them, and each file lands atomically via temp + rename.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import tempfile
from fractions import Fraction
from typing import Iterable

METRICS_HEADER = ("epoch", "precision", "loss", "accuracy", "lambda_b")
SCALE_GRADS_HEADER = ("step", "layer", "bit", "max_abs")
PARETO_HEADER = ("avg_bits", "accuracy", "objective", "bits")


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _render_csv(header: tuple[str, ...], rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        try:
            return value.item()
        except (AttributeError, ValueError):
            pass
    return value


class MetricsRecorder:
    """Collects per-epoch metrics and raw scale-gradient magnitudes."""

    def __init__(self) -> None:
        self.metric_rows: list[tuple] = []
        self.scale_grad_rows: list[tuple] = []

    def metric(self, epoch: int, precision: int, loss: float, accuracy: float,
               lambda_b: float) -> None:
        self.metric_rows.append(
            (epoch, precision, f"{loss:.6f}", f"{accuracy:.4f}", f"{lambda_b:.8g}")
        )

    def scale_grad(self, step: int, layer: int, bit: int, max_abs: float) -> None:
        self.scale_grad_rows.append((step, layer, bit, f"{max_abs:.8g}"))

    def write(self, directory: str, config=None) -> None:
        os.makedirs(directory, exist_ok=True)
        _atomic_write(os.path.join(directory, "metrics.csv"),
                      _render_csv(METRICS_HEADER, self.metric_rows))
        _atomic_write(os.path.join(directory, "scale_grads.csv"),
                      _render_csv(SCALE_GRADS_HEADER, self.scale_grad_rows))
        if config is not None:
            write_config(os.path.join(directory, "config.json"), config)


def write_config(path: str, config) -> None:
    """Echo the run configuration as stable, sorted JSON."""
    _atomic_write(path, json.dumps(_jsonable(config), indent=2, sort_keys=True) + "\n")


def write_pareto(path: str, assignments) -> None:
    """One row per evaluated width assignment: average width ascending."""
    rows = []
    for a in sorted(assignments, key=lambda a: (a.avg_bits, -(a.accuracy or 0.0))):
        acc = "" if a.accuracy is None else f"{a.accuracy:.4f}"
        rows.append((f"{float(a.avg_bits):.4f}", acc, f"{a.objective:.6g}",
                     " ".join(str(b) for b in a.bits)))
    _atomic_write(path, _render_csv(PARETO_HEADER, rows))
