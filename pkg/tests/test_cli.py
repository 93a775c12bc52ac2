import json
import subprocess
import sys

import pytest
import yaml

from partkd.cli import main
from partkd.part_matrix import EfficiencyMatrix

SYNTH = dict(num_actions=3, samples_per_action=6, frame_length=16, solitary_fraction=1 / 3)
TRAIN = dict(epochs=2, lr_decay_epochs=[1], frames=16,
             backbone=dict(num_blocks=2, channel_plan=[8, 16], temporal_strides=[2, 1], temporal_kernel=3),
             distill=dict(batch_low=8, batch_high=8))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(yaml.safe_dump(SYNTH))
    (root / "train.yaml").write_text(yaml.safe_dump(TRAIN))
    cfg = str(root / "train.yaml")
    assert main(["synth", "--config", str(root / "synth.yaml"), "--seed", "1", "--out", str(root / "data")]) == 0
    assert main(["synth", "--config", str(root / "synth.yaml"), "--seed", "2", "--out", str(root / "test")]) == 0
    assert main(["train-teacher", "--data", str(root / "data"), "--out", str(root / "teacher"), "--config", cfg]) == 0
    assert main(["build-matrix", "--teacher", str(root / "teacher" / "teacher.pt"), "--data", str(root / "data"),
                 "--out", str(root / "matrix")]) == 0
    assert main(["train-student", "--data", str(root / "data"), "--out", str(root / "kd"), "--config", cfg,
                 "--teacher", str(root / "teacher" / "teacher.pt"), "--matrix", str(root / "matrix"),
                 "--occlusion-p", "0.3"]) == 0
    assert main(["train-student", "--data", str(root / "data"), "--out", str(root / "nokd"), "--config", cfg,
                 "--no-kd", "--occlusion-p", "0.3"]) == 0
    return root


def test_pipeline_outputs(pipeline):
    root = pipeline
    for f in ("data/synth_config.yaml", "teacher/teacher.pt", "teacher/train_config.yaml", "teacher/history.json",
              "matrix/efficiency_matrix.json", "matrix/efficiency_matrix.png", "kd/student.pt", "nokd/student.pt"):
        assert (root / f).exists(), f
    E = EfficiencyMatrix.load(root / "matrix")
    assert E.normalized.shape == (3, 5)


def test_config_echo_is_complete(pipeline):
    echo = yaml.safe_load((pipeline / "kd" / "train_config.yaml").read_text())
    assert echo["epochs"] == 2 and echo["occlusion_p"] == 0.3 and echo["kd"] is True
    assert echo["backbone"]["channel_plan"] == [8, 16]
    assert {"lr", "momentum", "weight_decay", "lr_decay_epochs", "seed", "eval_seed", "distill"} <= set(echo)
    assert yaml.safe_load((pipeline / "data" / "synth_config.yaml").read_text())["seed"] == 1


def test_student_history_logs_solitary(pipeline):
    hist = json.loads((pipeline / "kd" / "history.json").read_text())
    assert sum(r["solitary_terms"] for r in hist) > 0
    assert all(r["pmsc"] is not None for r in hist)
    assert all(r["pmsc"] is None for r in json.loads((pipeline / "nokd" / "history.json").read_text()))


def test_eval_writes_metrics(pipeline, capsys):
    out = pipeline / "metrics.json"
    assert main(["eval", "--checkpoint", str(pipeline / "kd" / "student.pt"), "--data", str(pipeline / "test"),
                 "--occlusion-p", "0.3", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["occlusion_p"] == 0.3 and 0.0 <= doc["top1"] <= doc["top5"] <= 1.0
    assert "top1" in capsys.readouterr().out


def test_plot_matrix(pipeline):
    assert main(["plot-matrix", "--matrix", str(pipeline / "matrix"), "--out", str(pipeline / "heat.png")]) == 0
    assert (pipeline / "heat.png").read_bytes()[:4] == b"\x89PNG"


def test_exit_code_config_error(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("num_actions: 1\n")
    assert main(["synth", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "d")]) == 2
    assert "error" in capsys.readouterr().err


def test_exit_code_missing_teacher_args(pipeline):
    assert main(["train-student", "--data", str(pipeline / "data"), "--out", str(pipeline / "x")]) == 2


def test_exit_code_runtime_failure(tmp_path, capsys):
    (tmp_path / "broken.pt").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "broken.pt"), "--data", str(tmp_path)]) == 3
    assert "unreadable checkpoint" in capsys.readouterr().err


def test_run_experiment_stage_tagged(tmp_path, capsys):
    manifest = dict(synth=dict(num_actions=3, samples_per_action=2, frame_length=16),
                    train={**TRAIN, "holdout_fraction": 0.5}, occlusion_levels=[], pairing_fractions=[0.5])
    (tmp_path / "m.yaml").write_text(yaml.safe_dump(manifest))
    assert main(["run-experiment", "--manifest", str(tmp_path / "m.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert "during train-teacher pairing=0.5 seed=0" in capsys.readouterr().err


def test_run_experiment_tiny(tmp_path, capsys):
    manifest = dict(name="cli", synth=dict(num_actions=3, samples_per_action=6, frame_length=16), train=TRAIN,
                    test_samples_per_action=2, occlusion_levels=[0.0, 0.6], pairing_fractions=[1.0])
    (tmp_path / "m.yaml").write_text(yaml.safe_dump(manifest))
    assert main(["run-experiment", "--manifest", str(tmp_path / "m.yaml"), "--out", str(tmp_path / "o"),
                 "--seeds", "3"]) == 0
    text = capsys.readouterr().out
    assert "## occlusion sweep" in text and "Student (w/ KD)" in text
    assert (tmp_path / "o" / "results.txt").read_text() in text


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "partkd.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "train-teacher", "build-matrix", "train-student", "eval", "plot-matrix", "run-experiment"):
        assert cmd in res.stdout
