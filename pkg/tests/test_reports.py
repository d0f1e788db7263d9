"""Run-artifact writers: CSV layout, empty-file headers, config JSON."""
import csv
import json
import os
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pytest

from bitswitch.quant import BitWidthSet
from bitswitch.reports import (
    METRICS_HEADER,
    PARETO_HEADER,
    SCALE_GRADS_HEADER,
    MetricsRecorder,
    write_config,
    write_pareto,
)
from bitswitch.search import SubNetAssignment
from bitswitch.trainer import TrainConfig


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestMetricsRecorder:
    def test_empty_run_still_writes_header_only_files(self, tmp_path):
        rec = MetricsRecorder()
        rec.write(str(tmp_path / "run"))
        metrics = read_rows(str(tmp_path / "run" / "metrics.csv"))
        grads = read_rows(str(tmp_path / "run" / "scale_grads.csv"))
        assert metrics == [list(METRICS_HEADER)]
        assert grads == [list(SCALE_GRADS_HEADER)]
        assert not os.path.exists(str(tmp_path / "run" / "config.json"))

    def test_rows_round_trip_with_fixed_formats(self, tmp_path):
        rec = MetricsRecorder()
        rec.metric(epoch=0, precision=8, loss=1.09861229, accuracy=0.3333, lambda_b=0.001)
        rec.metric(epoch=1, precision=2, loss=0.25, accuracy=1.0, lambda_b=1.25e-6)
        rec.scale_grad(step=3, layer=2, bit=4, max_abs=0.125)
        rec.write(str(tmp_path))
        metrics = read_rows(str(tmp_path / "metrics.csv"))
        assert metrics[0] == list(METRICS_HEADER)
        assert metrics[1] == ["0", "8", "1.098612", "0.3333", "0.001"]
        assert metrics[2] == ["1", "2", "0.250000", "1.0000", "1.25e-06"]
        grads = read_rows(str(tmp_path / "scale_grads.csv"))
        assert grads[1] == ["3", "2", "4", "0.125"]

    def test_write_is_atomic_no_temp_left_behind(self, tmp_path):
        rec = MetricsRecorder()
        rec.metric(0, 8, 0.5, 0.9, 1e-3)
        rec.write(str(tmp_path))
        rec.write(str(tmp_path))  # overwrite in place
        leftovers = [n for n in os.listdir(tmp_path) if n.endswith(".tmp")]
        assert leftovers == []
        assert len(read_rows(str(tmp_path / "metrics.csv"))) == 2

    def test_config_lands_next_to_metrics(self, tmp_path):
        rec = MetricsRecorder()
        cfg = TrainConfig(bits=BitWidthSet((8, 2)), epochs=1, batch_size=16)
        rec.write(str(tmp_path), config=cfg)
        with open(tmp_path / "config.json") as fh:
            data = json.load(fh)
        assert data["epochs"] == 1
        assert data["batch_size"] == 16


class TestWriteConfig:
    def test_dataclass_with_numpy_and_fractions(self, tmp_path):
        @dataclass
        class Probe:
            rate: object
            width: object
            ratio: Fraction

        path = str(tmp_path / "config.json")
        write_config(path, Probe(rate=np.float32(0.5), width=np.int64(8),
                                 ratio=Fraction(16, 3)))
        with open(path) as fh:
            text = fh.read()
        data = json.loads(text)
        assert data == {"rate": 0.5, "width": 8, "ratio": "16/3"}
        # stable output: sorted keys, trailing newline
        assert text.index('"rate"') < text.index('"ratio"') < text.index('"width"')
        assert text.endswith("\n")

    def test_nested_containers_and_int_keys(self, tmp_path):
        path = str(tmp_path / "config.json")
        write_config(path, {"per_bit": {8: [1, 2], 2: (3,)}, "name": "run"})
        with open(path) as fh:
            data = json.load(fh)
        assert data["per_bit"] == {"8": [1, 2], "2": [3]}

    def test_train_config_round_trips_bit_set(self, tmp_path):
        cfg = TrainConfig(bits=BitWidthSet((8, 4, 2)), epochs=3, batch_size=32)
        path = str(tmp_path / "config.json")
        write_config(path, cfg)
        with open(path) as fh:
            data = json.load(fh)
        assert data["bits"] == {"bits": [8, 4, 2]}
        assert data["mode"] == cfg.mode


class TestWritePareto:
    def assignments(self):
        return [
            SubNetAssignment(bits=(4, 4), objective=8.0, avg_bits=Fraction(4)),
            SubNetAssignment(bits=(8, 4), objective=20.0, avg_bits=Fraction(6),
                             accuracy=0.91),
            SubNetAssignment(bits=(2, 2), objective=4.0, avg_bits=Fraction(2),
                             accuracy=0.62),
        ]

    def test_rows_sorted_by_average_width(self, tmp_path):
        path = str(tmp_path / "pareto.csv")
        write_pareto(path, self.assignments())
        rows = read_rows(path)
        assert rows[0] == list(PARETO_HEADER)
        assert [r[0] for r in rows[1:]] == ["2.0000", "4.0000", "6.0000"]
        assert rows[1] == ["2.0000", "0.6200", "4", "2 2"]
        assert rows[2][1] == ""  # unevaluated assignment leaves accuracy blank
        assert rows[3][3] == "8 4"

    def test_empty_front_is_header_only(self, tmp_path):
        path = str(tmp_path / "pareto.csv")
        write_pareto(path, [])
        assert read_rows(path) == [list(PARETO_HEADER)]

    def test_fractional_average_width(self, tmp_path):
        path = str(tmp_path / "pareto.csv")
        write_pareto(path, [
            SubNetAssignment(bits=(8, 4, 2), objective=1.0,
                             avg_bits=Fraction(14, 3), accuracy=0.8),
        ])
        rows = read_rows(path)
        assert rows[1][0] == "4.6667"
