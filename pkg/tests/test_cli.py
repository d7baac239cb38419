import json
import subprocess
import sys

import numpy as np
import pytest

from mdm import cli, imageio, models

FAST = ["--steps", "25", "--scales", "3"]


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps({"train_samples": 40, "epochs": 2}))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["synth-data", "--out", str(out), "--n", "3", "--seed", "5"]) == 0
    return out


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --- synth-data / train-model ---------------------------------------------------------


def test_synth_data_layout(dataset):
    names = sorted(p.name for p in (dataset / "images").iterdir())
    assert names == ["img000.pgm", "img001.pgm", "img002.pgm"]
    assert sorted(p.name for p in (dataset / "masks").iterdir()) == names
    lines = (dataset / "labels.csv").read_text().splitlines()
    assert lines[0] == "name,label,center_row,center_col" and len(lines) == 4
    mask = imageio.load_ppm(dataset / "masks" / "img000.pgm")
    assert set(np.unique(mask)) <= {0.0, 1.0} and mask.any()


def test_train_model_is_deterministic(tmp_path, small_config, capsys):
    digests = []
    for name in ("a.mdmw", "b.mdmw"):
        code, out, _ = run(["train-model", "--config", small_config, "--seed", 3,
                            "--out", tmp_path / name], capsys)
        assert code == 0
        assert "train_accuracy=" in out and "heldout_accuracy=" in out and "final_loss=" in out
        digests.append(out.split("sha256=")[1].strip())
    assert digests[0] == digests[1]
    assert (tmp_path / "a.mdmw").read_bytes() == (tmp_path / "b.mdmw").read_bytes()
    assert models.load_model(tmp_path / "a.mdmw").input_shape == (1, 24, 24)


def test_zero_epochs_writes_the_initial_network(tmp_path, small_config, capsys):
    code, out, _ = run(["train-model", "--config", small_config, "--seed", 3, "--epochs", 0,
                        "--out", tmp_path / "init.mdmw"], capsys)
    assert code == 0 and "epochs=0" in out and "final_loss" not in out
    init = models.build_tiny_cnn(3)
    assert (tmp_path / "init.mdmw").read_bytes() == models.model_to_bytes(init)


def test_env_seed_is_overridden_by_flag(tmp_path, small_config, capsys, monkeypatch):
    monkeypatch.setenv("MDM_SEED", "8")
    run(["train-model", "--config", small_config, "--epochs", 0, "--out", tmp_path / "env.mdmw"], capsys)
    run(["train-model", "--config", small_config, "--epochs", 0, "--seed", 3,
         "--out", tmp_path / "flag.mdmw"], capsys)
    assert (tmp_path / "env.mdmw").read_bytes() == models.model_to_bytes(models.build_tiny_cnn(8))
    assert (tmp_path / "flag.mdmw").read_bytes() == models.model_to_bytes(models.build_tiny_cnn(3))


# --- explain --------------------------------------------------------------------------


def test_explain_outputs(model_file, dataset, tmp_path, capsys):
    out = tmp_path / "exp"
    code, text, _ = run(["explain", model_file, dataset / "images" / "img000.pgm",
                         "--out", out, *FAST], capsys)
    assert code == 0 and "predicted_class=" in text
    for name in ("heatmap.ppm", "binary_mask.ppm", "fused.mdmm", "trace.csv", "explain.png", "trace.png"):
        assert (out / name).stat().st_size > 0
    assert imageio.load_ppm(out / "heatmap.ppm").shape == (3, 24, 24)
    # the binary-mask image keeps input pixels where the fused mask passed the threshold
    x = imageio.load_ppm(dataset / "images" / "img000.pgm")
    kept = imageio.load_ppm(out / "binary_mask.ppm")
    assert np.all((kept == 0) | (kept == x)) and kept.any()
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "rows,cols,iteration,consistency,l1,total"
    assert len(lines) == 1 + 3 * 25


def test_explain_is_byte_identical(model_file, dataset, tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["explain", model_file, dataset / "images" / "img001.pgm", "--out", tmp_path / d,
                    *FAST, "--no-figures"], capsys)[0] == 0
    for name in ("heatmap.ppm", "binary_mask.ppm", "fused.mdmm", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not (tmp_path / "a" / "explain.png").exists()


def test_explain_resizes_colour_input(model_file, tmp_path, capsys):
    img = tmp_path / "big.ppm"
    imageio.save_ppm(img, np.random.default_rng(0).uniform(size=(3, 40, 30)))
    code, _, _ = run(["explain", model_file, img, "--out", tmp_path / "o", *FAST, "--no-figures"], capsys)
    assert code == 0
    assert imageio.load_ppm(tmp_path / "o" / "heatmap.ppm").shape == (3, 24, 24)


def test_blank_image_succeeds(model_file, tmp_path, capsys):
    img = tmp_path / "blank.pgm"
    imageio.save_ppm(img, np.zeros((1, 24, 24)))
    code, _, _ = run(["explain", model_file, img, "--out", tmp_path / "o", *FAST, "--no-figures"], capsys)
    assert code == 0
    assert not imageio.load_ppm(tmp_path / "o" / "binary_mask.ppm").any()


def test_degenerate_explanation_warns_but_succeeds(model_file, dataset, tmp_path, capsys):
    # a huge mask weight with a step size large enough to drive every mask to zero
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.05}))
    code, text, err = run(["explain", model_file, dataset / "images" / "img000.pgm", "--out", tmp_path / "o",
                           "--config", cfg, *FAST, "--lambda", "1e6", "--no-figures"], capsys)
    assert code == 0 and "degenerate" in err and "degenerate=True" in text
    assert (tmp_path / "o" / "heatmap.ppm").exists()


def test_failed_explain_leaves_no_partial_outputs(model_file, dataset, tmp_path, capsys, monkeypatch):
    from mdm import plotting

    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(plotting, "plot_traces", boom)
    out = tmp_path / "new" / "exp"
    code, _, err = run(["explain", model_file, dataset / "images" / "img000.pgm", "--out", out, *FAST],
                       capsys)
    assert code == 2 and "disk full" in err
    assert not (tmp_path / "new").exists()


@pytest.mark.parametrize("make,match", [
    (lambda p: None, "not found"),
    (lambda p: p.write_bytes(b"MDMW garbage"), "error"),
])
def test_explain_rejects_bad_model(tmp_path, dataset, capsys, make, match):
    path = tmp_path / "m.mdmw"
    make(path)
    code, _, err = run(["explain", path, dataset / "images" / "img000.pgm", "--out", tmp_path / "o"], capsys)
    assert code == 2 and match in err


def test_explain_rejects_bad_image(model_file, tmp_path, capsys):
    img = tmp_path / "x.pgm"
    img.write_bytes(b"P5\n3 3\n255\n\x00")
    code, _, err = run(["explain", model_file, img, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "truncated" in err
    assert not (tmp_path / "o").exists()


def test_bad_config_is_an_error(model_file, dataset, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iterations": "many"}))
    code, _, err = run(["explain", model_file, dataset / "images" / "img000.pgm", "--out", tmp_path / "o",
                        "--config", cfg], capsys)
    assert code == 2 and "iterations" in err


# --- evaluate -------------------------------------------------------------------------


def test_evaluate_outputs(model_file, dataset, tmp_path, capsys):
    out = tmp_path / "ev"
    code, text, _ = run(["evaluate", model_file, dataset / "images", dataset / "masks", "--out", out, *FAST],
                        capsys)
    assert code == 0 and "[mdm]" in text and "[random]" in text
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"mdm", "random"}
    assert len(report["mdm"]["per_image"]) == 3
    curves = sorted(p.name for p in (out / "curves").iterdir())
    assert len(curves) == 3 * 2 * 2 and "img000_mdm_deletion.csv" in curves
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert sweep[0] == "method,percentile,dice,iou,ppv,sensitivity"
    assert {line.split(",")[0] for line in sweep[1:]} == {"mdm", "random"}
    assert (out / "figures" / "curves.png").exists() and (out / "figures" / "overlap_sweep.png").exists()


def test_evaluate_without_baseline_and_unpaired_files(model_file, dataset, tmp_path, capsys):
    images = tmp_path / "images"
    images.mkdir()
    for name in ("img000.pgm", "extra.pgm"):
        src = dataset / "images" / ("img000.pgm" if name == "extra.pgm" else name)
        (images / name).write_bytes(src.read_bytes())
    code, _, err = run(["evaluate", model_file, images, dataset / "masks", "--out", tmp_path / "ev",
                        "--no-random-baseline", "--no-figures", *FAST], capsys)
    assert code == 0
    assert "extra.pgm has no partner" in err and "img001.pgm has no partner" in err
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert set(report) == {"mdm"} and len(report["mdm"]["per_image"]) == 1


def test_evaluate_with_no_pairs(model_file, tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    code, _, err = run(["evaluate", model_file, tmp_path / "a", tmp_path / "b", "--out", tmp_path / "o"], capsys)
    assert code == 2 and "no image/mask pairs" in err
    code, _, err = run(["evaluate", model_file, tmp_path / "nope", tmp_path / "b", "--out", tmp_path / "o"],
                       capsys)
    assert code == 2 and "directory not found" in err


# --- oracle-test and entry points ---------------------------------------------------------


def test_oracle_test_command(capsys):
    code, text, _ = run(["oracle-test", "--trials", 3, "--required", 3], capsys)
    lines = text.splitlines()
    assert len(lines) == 4 and all(line.startswith("trial ") for line in lines[:3])
    assert lines[-1].startswith("PASS" if code == 0 else "FAIL")


def test_oracle_test_failure_exit_code(capsys):
    code, text, _ = run(["oracle-test", "--trials", 2, "--required", 3], capsys)
    assert code == 1 and text.splitlines()[-1].startswith("FAIL")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mdm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for command in ("synth-data", "train-model", "explain", "evaluate", "oracle-test"):
        assert command in res.stdout


def test_usage_errors_exit_two():
    res = subprocess.run([sys.executable, "-m", "mdm", "explain"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr
