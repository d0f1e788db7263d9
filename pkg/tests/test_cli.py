"""Command-line workflow tests.

The heavyweight piece is a module-scoped pipeline fixture that runs
train-mp -> sensitivity -> train-mixed -> search -> eval end to end in one
temp directory; individual tests assert on its artifacts.  Subcommands run
in-process through ``main(argv)`` so coverage and speed stay reasonable;
one subprocess smoke test exercises ``python3 -m bitswitch``.
"""
import contextlib
import csv
import io
import json
import struct
import subprocess
import sys
import warnings

import pytest

from bitswitch.checkpoint import load
from bitswitch.cli import main
from bitswitch.sensitivity import SensitivityProfile

DATA_ARGS = ["--dataset", "blobs", "--samples", "240", "--classes", "3",
             "--features", "6", "--eval-fraction", "0.2"]


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    run = root / "run"
    mixed = root / "mixed"
    art = {
        "root": root,
        "run": run,
        "mixed": mixed,
        "model": str(run / "model.ckpt"),
        "profile": str(root / "profile.json"),
        "mixed_ckpt": str(mixed / "mixed.ckpt"),
        "assignments": str(root / "assignments.json"),
        "train_args": ["train-mp", *DATA_ARGS, "--seed", "0", "--bits", "8,4,2",
                       "--hidden", "12,12,12", "--float-epochs", "5",
                       "--epochs", "2", "--lr", "0.01"],
    }
    art["train"] = run_cli(art["train_args"] + ["--out", str(run)])
    art["sensitivity"] = run_cli([
        "sensitivity", *DATA_ARGS, "--seed", "0", "--ckpt", art["model"],
        "--probes", "8", "--out", art["profile"]])
    art["mixed_run"] = run_cli([
        "train-mixed", *DATA_ARGS, "--seed", "0", "--bits", "8,4,2",
        "--hidden", "12,12,12", "--epochs", "2", "--lr", "0.001",
        "--init-ckpt", art["model"], "--profile", art["profile"],
        "--out", str(mixed)])
    art["search"] = run_cli([
        "search", "--profile", art["profile"], "--bits", "8,4,2",
        "--avg", "5", "--out", art["assignments"]])
    return art


class TestPipeline:
    def test_train_mp_writes_all_artifacts(self, pipeline):
        code, out, err = pipeline["train"]
        assert code == 0, err
        for name in ("float.ckpt", "model.ckpt", "metrics.csv",
                     "scale_grads.csv", "config.json"):
            assert (pipeline["run"] / name).exists()
        assert "wrote" in out

    def test_train_mp_reports_every_width(self, pipeline):
        _, out, _ = pipeline["train"]
        accs = {}
        for line in out.splitlines():
            if "-bit accuracy" in line:
                width = int(line.split("-bit")[0])
                accs[width] = float(line.rsplit(" ", 1)[1])
        assert sorted(accs) == [2, 4, 8]
        assert all(0.0 <= a <= 1.0 for a in accs.values())
        assert accs[8] > 0.5

    def test_metrics_csv_covers_epochs_and_widths(self, pipeline):
        with open(pipeline["run"] / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["precision"] for r in rows} == {"8", "4", "2"}
        assert {r["epoch"] for r in rows} == {"0", "1"}

    def test_config_echo(self, pipeline):
        with open(pipeline["run"] / "config.json") as fh:
            cfg = json.load(fh)
        assert cfg["mode"] == "alrs"
        assert cfg["bits"] == "8,4,2"
        assert "func" not in cfg

    def test_sensitivity_profile(self, pipeline):
        code, out, err = pipeline["sensitivity"]
        assert code == 0, err
        with open(pipeline["profile"]) as fh:
            profile = SensitivityProfile.from_json(fh.read())
        assert list(profile.layer_indices) == [2, 5]
        assert all(t >= 0.0 for t in profile.traces)
        assert "layer 2: trace" in out

    def test_train_mixed_produces_mixed_checkpoint(self, pipeline):
        code, out, err = pipeline["mixed_run"]
        assert code == 0, err
        state = load(pipeline["mixed_ckpt"])
        assert state.mixed
        assert "uniform 8-bit accuracy" in out

    def test_search_assignments_hit_the_target_average(self, pipeline):
        code, out, err = pipeline["search"]
        assert code == 0, err
        with open(pipeline["assignments"]) as fh:
            payload = json.load(fh)
        assert payload["layer_indices"] == [2, 5]
        assert len(payload["assignments"]) >= 1
        for row in payload["assignments"]:
            assert sum(row["bits"]) == 5 * 2
        assert "widths" in out

    def test_eval_scores_assignment_file(self, pipeline, tmp_path):
        pareto = str(tmp_path / "pareto.csv")
        code, out, err = run_cli([
            "eval", *DATA_ARGS, "--seed", "0", "--ckpt", pipeline["mixed_ckpt"],
            "--assignments", pipeline["assignments"], "--pareto-out", pareto])
        assert code == 0, err
        assert "pareto front:" in out
        with open(pareto, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["avg_bits", "accuracy", "objective", "bits"]
        assert len(rows) >= 2

    def test_eval_uniform_and_per_layer(self, pipeline):
        code, out, _ = run_cli(["eval", *DATA_ARGS, "--seed", "0",
                                "--ckpt", pipeline["model"], "--uniform-bits", "8"])
        assert code == 0
        acc = float(out.split("accuracy")[1].strip())
        assert 0.0 <= acc <= 1.0
        code, out, _ = run_cli(["eval", *DATA_ARGS, "--seed", "0",
                                "--ckpt", pipeline["mixed_ckpt"], "--per-layer", "8,2"])
        assert code == 0 and "accuracy" in out

    def test_inspect_ckpt(self, pipeline):
        code, out, _ = run_cli(["inspect-ckpt", pipeline["model"]])
        assert code == 0
        assert "storage" in out
        assert "fully-connected" in out

    def test_retrain_same_seed_is_byte_identical(self, pipeline, tmp_path):
        code, _, err = run_cli(pipeline["train_args"] + ["--out", str(tmp_path / "again")])
        assert code == 0, err
        with open(pipeline["model"], "rb") as a, \
                open(tmp_path / "again" / "model.ckpt", "rb") as b:
            assert a.read() == b.read()

    def test_module_entrypoint_smoke(self, pipeline):
        proc = subprocess.run(
            [sys.executable, "-m", "bitswitch", "inspect-ckpt", pipeline["model"]],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "storage" in proc.stdout


class TestSmallDatasets:
    def test_moons_trains(self, tmp_path):
        code, out, err = run_cli([
            "train-mp", "--dataset", "moons", "--samples", "200",
            "--eval-fraction", "0.2", "--seed", "1", "--bits", "8,2",
            "--hidden", "8,8", "--float-epochs", "2", "--epochs", "1",
            "--lr", "0.01", "--out", str(tmp_path / "m")])
        assert code == 0, err
        assert (tmp_path / "m" / "model.ckpt").exists()

    def test_idx_pair_trains(self, tmp_path):
        import numpy as np

        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(60, 4, 4), dtype=np.uint8)
        labels = (np.arange(60) % 2).astype(np.uint8)
        images_path = str(tmp_path / "images.idx")
        labels_path = str(tmp_path / "labels.idx")
        with open(images_path, "wb") as fh:
            fh.write(struct.pack(">BBBB3I", 0, 0, 0x08, 3, 60, 4, 4))
            fh.write(pixels.tobytes())
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">BBBB1I", 0, 0, 0x08, 1, 60))
            fh.write(labels.tobytes())
        code, _, err = run_cli([
            "train-mp", "--dataset", "idx", "--idx-images", images_path,
            "--idx-labels", labels_path, "--eval-fraction", "0.2", "--seed", "0",
            "--bits", "8,2", "--hidden", "8,8", "--float-epochs", "1",
            "--epochs", "1", "--out", str(tmp_path / "r")])
        assert code == 0, err


class TestExitCodes:
    def test_unknown_subcommand_is_argparse_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli(["no-such-command"])
        assert exc.value.code == 2

    def test_bad_bit_list(self, tmp_path):
        code, _, err = run_cli(["train-mp", *DATA_ARGS, "--bits", "8,x",
                                "--out", str(tmp_path / "o")])
        assert code == 2
        assert "error:" in err

    def test_idx_without_files(self, tmp_path):
        code, _, err = run_cli(["train-mp", "--dataset", "idx",
                                "--out", str(tmp_path / "o")])
        assert code == 2
        assert "idx" in err

    def test_inspect_missing_file(self, tmp_path):
        code, _, err = run_cli(["inspect-ckpt", str(tmp_path / "absent.ckpt")])
        assert code == 2

    def test_inspect_garbage_file(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"this is not a checkpoint at all")
        code, _, err = run_cli(["inspect-ckpt", str(path)])
        assert code == 2
        assert "bad magic" in err

    def test_divergent_training_is_a_numerical_failure(self, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # overflow warnings on the way down
            code, _, err = run_cli([
                "train-mp", *DATA_ARGS, "--seed", "0", "--bits", "8,2",
                "--hidden", "8,8", "--float-epochs", "2", "--epochs", "1",
                "--lr", "1e18", "--out", str(tmp_path / "o")])
        assert code == 3
        assert "numerical failure" in err

    def make_profile(self, tmp_path) -> str:
        profile = SensitivityProfile((2, 5), (10.0, 1.0), (16, 16), 8, 0)
        path = str(tmp_path / "profile.json")
        with open(path, "w") as fh:
            fh.write(profile.to_json())
        return path

    def test_infeasible_search_prints_achievable_averages(self, tmp_path):
        code, _, err = run_cli([
            "search", "--profile", self.make_profile(tmp_path), "--bits", "4,2",
            "--avg", "6", "--out", str(tmp_path / "a.json")])
        assert code == 4
        assert "infeasible" in err
        assert "achievable averages: 2, 3, 4" in err

    def test_non_integer_width_total(self, tmp_path):
        code, _, err = run_cli([
            "search", "--profile", self.make_profile(tmp_path), "--bits", "8,4,2",
            "--avg", "7/4", "--out", str(tmp_path / "a.json")])
        assert code == 4

    def test_corrupt_profile(self, tmp_path):
        path = tmp_path / "profile.json"
        path.write_text("{not json")
        code, _, err = run_cli(["search", "--profile", str(path), "--avg", "4",
                                "--out", str(tmp_path / "a.json")])
        assert code == 2
        assert "bad profile" in err

    def test_eval_requires_exactly_one_target(self, pipeline):
        code, _, err = run_cli(["eval", *DATA_ARGS, "--seed", "0",
                                "--ckpt", pipeline["model"]])
        assert code == 2
        assert "exactly one" in err
        code, _, err = run_cli([
            "eval", *DATA_ARGS, "--seed", "0", "--ckpt", pipeline["model"],
            "--uniform-bits", "8", "--per-layer", "8,2"])
        assert code == 2

    def test_eval_per_layer_wrong_count(self, pipeline):
        code, _, err = run_cli(["eval", *DATA_ARGS, "--seed", "0",
                                "--ckpt", pipeline["model"], "--per-layer", "8"])
        assert code == 2
        assert "needs 2 widths" in err

    def test_eval_assignment_layer_mismatch(self, pipeline, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({
            "layer_indices": [0],
            "assignments": [{"bits": [8], "objective": 1.0}],
        }))
        code, _, err = run_cli(["eval", *DATA_ARGS, "--seed", "0",
                                "--ckpt", pipeline["model"],
                                "--assignments", str(path)])
        assert code == 2
        assert "indexes layers" in err

    def test_eval_unknown_uniform_width(self, pipeline):
        code, _, err = run_cli(["eval", *DATA_ARGS, "--seed", "0",
                                "--ckpt", pipeline["model"], "--uniform-bits", "5"])
        assert code == 2
