"""End-to-end CLI runs through main() with argv lists; exit codes 0/1/2."""

import json
import os
import subprocess
import sys

import pytest

from mono3d.cli import main


def _read(path):
    with open(path, "r", encoding="ascii") as fh:
        return fh.read()


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _listdir(path):
    return sorted(os.listdir(path))


# -- argument parsing ---------------------------------------------------------


def test_no_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 2


def test_bad_variant_choice_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--variant", "b7"])
    assert exc.value.code == 2


def test_set_without_equals_exits_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "o"), "--set", "lr"]) == 2
    assert "KEY=VALUE" in capsys.readouterr().err


def test_set_unknown_key_exits_2(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "o"), "--set", "bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "none.json")]) == 2


def test_invalid_config_file_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{oops")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "not valid JSON" in capsys.readouterr().err


# -- synth --------------------------------------------------------------------


def test_synth_writes_corpus(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert main(["synth", "--out", str(out), "--n-images", "3", "--n-objects", "1"]) == 0
    assert _listdir(out / "images") == ["000000.ppm", "000001.ppm", "000002.ppm"]
    assert _listdir(out / "labels") == ["000000.txt", "000001.txt", "000002.txt"]
    assert _listdir(out / "calibs") == ["000000.txt", "000001.txt", "000002.txt"]
    assert _read(out / "split.txt").split() == ["000000", "000001", "000002"]
    cfg = json.loads(_read(out / "config.json"))
    assert cfg["command"] == "synth"
    assert cfg["n_images"] == 3 and cfg["n_objects"] == 1
    assert "wrote 3 scenes" in capsys.readouterr().out


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--out", str(a), "--n-images", "2"]) == 0
    assert main(["synth", "--out", str(b), "--n-images", "2"]) == 0
    for rel in ("images/000001.ppm", "labels/000001.txt", "calibs/000001.txt"):
        assert _read_bytes(a / rel) == _read_bytes(b / rel)


def test_config_file_then_flag_precedence(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"n_images": 2, "n_objects": 1}))
    out = tmp_path / "o"
    assert main(["synth", "--config", str(cfg_path), "--out", str(out), "--n-images", "3"]) == 0
    assert len(_listdir(out / "images")) == 3  # flag beats file
    echoed = json.loads(_read(out / "config.json"))
    assert echoed["n_images"] == 3 and echoed["n_objects"] == 1  # file beats default


# -- eval ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval") / "corpus"
    assert main(["synth", "--out", str(out), "--n-images", "3"]) == 0
    return out


def _copy_labels_as_predictions(corpus, pred_dir, score=" 1.0"):
    os.makedirs(pred_dir, exist_ok=True)
    for name in _listdir(corpus / "labels"):
        lines = _read(corpus / "labels" / name).splitlines()
        text = "".join(line + score + "\n" for line in lines)
        with open(os.path.join(pred_dir, name), "w", encoding="ascii") as fh:
            fh.write(text)


def test_eval_missing_dirs_exit_2(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path / "o")]) == 2
    assert "--pred" in capsys.readouterr().err


def test_eval_ground_truth_as_predictions_is_perfect(corpus, tmp_path, capsys):
    pred = tmp_path / "pred"
    _copy_labels_as_predictions(corpus, pred)
    out = tmp_path / "report"
    code = main(
        [
            "eval",
            "--pred", str(pred),
            "--gt", str(corpus / "labels"),
            "--calib-dir", str(corpus / "calibs"),
            "--out", str(out),
        ]
    )
    assert code == 0
    text = capsys.readouterr().out
    assert _read(out / "eval_report.txt") == text
    records = [json.loads(line) for line in _read(out / "eval_records.jsonl").splitlines()]
    assert {rec["thresholds"] for rec in records} == {"official", "relaxed"}
    defined = [rec for rec in records if rec["n_gt"] > 0]
    assert defined and all(rec["ap"] == 100.0 for rec in defined)


def test_eval_threshold_flag_narrows_report(corpus, tmp_path):
    pred = tmp_path / "pred"
    _copy_labels_as_predictions(corpus, pred)
    out = tmp_path / "report"
    code = main(
        [
            "eval",
            "--pred", str(pred),
            "--gt", str(corpus / "labels"),
            "--thresholds", "official",
            "--out", str(out),
        ]
    )
    assert code == 0
    records = [json.loads(line) for line in _read(out / "eval_records.jsonl").splitlines()]
    assert {rec["thresholds"] for rec in records} == {"official"}


def test_eval_itemizes_missing_prediction_file(corpus, tmp_path, capsys):
    pred = tmp_path / "pred"
    _copy_labels_as_predictions(corpus, pred)
    os.remove(pred / "000001.txt")
    code = main(
        ["eval", "--pred", str(pred), "--gt", str(corpus / "labels"), "--out", str(tmp_path / "o")]
    )
    assert code == 0  # itemized, not fatal
    err = capsys.readouterr().err
    assert "1 file errors" in err and "000001" in err and "missing prediction file" in err


def test_eval_itemizes_scoreless_prediction_file(corpus, tmp_path, capsys):
    pred = tmp_path / "pred"
    _copy_labels_as_predictions(corpus, pred)
    _copy_labels_as_predictions(corpus, pred)  # rewrite, then strip one file's scores
    with open(pred / "000000.txt", "w", encoding="ascii") as fh:
        fh.write(_read(corpus / "labels" / "000000.txt"))
    code = main(
        ["eval", "--pred", str(pred), "--gt", str(corpus / "labels"), "--out", str(tmp_path / "o")]
    )
    assert code == 0
    err = capsys.readouterr().err
    assert "without a score field" in err and "000000" in err


# -- train-toy and infer ------------------------------------------------------


TRAIN_ARGS = ["train-toy", "--epochs", "2", "--n-images", "2", "--seed", "0"]


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "run"
    assert main(TRAIN_ARGS + ["--out", str(out)]) == 0
    return out


def test_train_toy_writes_artifacts(toy_run):
    names = _listdir(toy_run)
    for expect in ("calibs", "config.json", "images", "labels", "loss.csv", "model.ckpt", "model.ckpt.json", "split.txt"):
        assert expect in names
    rows = _read(toy_run / "loss.csv").splitlines()
    assert len(rows) == 3  # header + one row per epoch
    assert rows[0].startswith("epoch,heatmap,") and rows[0].count(",") == 18


def test_train_toy_applies_profile_under_flags(toy_run):
    cfg = json.loads(_read(toy_run / "config.json"))
    assert cfg["command"] == "train-toy"
    assert cfg["epochs"] == 2  # flag beats profile
    assert cfg["lr"] == 2.5e-4  # profile beats full-scale default
    assert cfg["decay_epochs"] == [150, 180]


def test_train_toy_deterministic(toy_run, tmp_path):
    out = tmp_path / "again"
    assert main(TRAIN_ARGS + ["--out", str(out)]) == 0
    assert _read(out / "loss.csv") == _read(toy_run / "loss.csv")
    assert _read_bytes(out / "model.ckpt") == _read_bytes(toy_run / "model.ckpt")


def test_infer_missing_flags_exit_2(tmp_path, capsys):
    assert main(["infer", "--out", str(tmp_path / "o")]) == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_infer_missing_checkpoint_file_exits_2(toy_run, tmp_path):
    code = main(
        [
            "infer",
            "--checkpoint", str(tmp_path / "none.ckpt"),
            "--image", str(toy_run / "images" / "000000.ppm"),
            "--calib", str(toy_run / "calibs" / "000000.txt"),
            "--out", str(tmp_path / "o"),
        ]
    )
    assert code == 2


def test_infer_writes_predictions_and_overlay(toy_run, tmp_path, capsys):
    out = tmp_path / "inf"
    code = main(
        [
            "infer",
            "--checkpoint", str(toy_run / "model.ckpt"),
            "--image", str(toy_run / "images" / "000000.ppm"),
            "--calib", str(toy_run / "calibs" / "000000.txt"),
            "--score-threshold", "0.0",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert os.path.exists(out / "predictions" / "000000.txt")
    assert os.path.exists(out / "000000_overlay.ppm")
    assert "detections ->" in capsys.readouterr().out


def test_infer_no_overlay_skips_render(toy_run, tmp_path):
    out = tmp_path / "inf"
    code = main(
        [
            "infer",
            "--checkpoint", str(toy_run / "model.ckpt"),
            "--image", str(toy_run / "images" / "000000.ppm"),
            "--calib", str(toy_run / "calibs" / "000000.txt"),
            "--no-overlay",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert os.path.exists(out / "predictions" / "000000.txt")
    assert not os.path.exists(out / "000000_overlay.ppm")


def test_infer_checkpoint_model_mismatch_exits_1(toy_run, tmp_path, capsys):
    code = main(
        [
            "infer",
            "--checkpoint", str(toy_run / "model.ckpt"),
            "--image", str(toy_run / "images" / "000000.ppm"),
            "--calib", str(toy_run / "calibs" / "000000.txt"),
            "--no-attention",
            "--out", str(tmp_path / "o"),
        ]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "checkpoint holds" in err and "attention=True" in err and "attention=False" in err


# -- gradcheck ----------------------------------------------------------------


def test_gradcheck_quick_suite_passes(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--seeds", "1", "--no-pipeline", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert _read(out / "gradcheck.txt") == text
    assert "all components passed" in text
    assert json.loads(_read(out / "config.json"))["command"] == "gradcheck"


def test_gradcheck_fault_injection_fails_and_names_op(tmp_path, capsys):
    out = tmp_path / "gc"
    code = main(
        ["gradcheck", "--seeds", "1", "--no-pipeline", "--inject-fault", "relu", "--out", str(out)]
    )
    assert code == 1
    text = capsys.readouterr().out
    assert "FAILING:" in text and "relu" in text.split("FAILING:")[1]


def test_cli_runs_on_pure_numpy_backend(tmp_path):
    # the fallback kernel path must serve the same external interface
    env = dict(os.environ, MONO3D_KERNELS="numpy")
    proc = subprocess.run(
        [sys.executable, "-m", "mono3d.cli", "gradcheck", "--seeds", "1", "--no-pipeline",
         "--out", str(tmp_path / "gc")],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0, proc.stderr
    assert "all components passed" in proc.stdout
