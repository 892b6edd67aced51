"""Command-line behaviour: outputs, manifests and exit codes."""
import numpy as np
import pytest
from PIL import Image

from faslseg.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main

QUICK = ["--preset", "toy", "--set", "train.epochs=1", "--set", "data.synthetic_n=4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--synthetic", "--out", str(out), *QUICK]) == EXIT_OK
    return out


def test_train_outputs(trained):
    for name in ("run_manifest.txt", "train_log.tsv", "steps.tsv", "timing.tsv"):
        assert (trained / name).is_file(), name
    assert (trained / "checkpoints" / "last" / "manifest.txt").is_file()
    manifest = (trained / "run_manifest.txt").read_text()
    assert manifest.startswith("command = train\n")
    assert "train.epochs = 1" in manifest and "end = 20" in manifest


def test_eval_writes_metrics_and_overlays(trained, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(trained / "checkpoints" / "last"), "--synthetic", "--out", str(tmp_path), "--overlay"])
    assert code == EXIT_OK
    assert "mean" in capsys.readouterr().out
    assert (tmp_path / "metrics.tsv").read_text().startswith("class\tiou\tdice_standard\tfpr\n")
    overlays = sorted((tmp_path / "overlays").iterdir())
    assert len(overlays) == 4
    assert Image.open(overlays[0]).size == (64, 64)


def test_eval_oracle_is_perfect(trained, tmp_path):
    ck = str(trained / "checkpoints" / "last")
    assert main(["eval", "--checkpoint", ck, "--synthetic", "--out", str(tmp_path / "a"), "--oracle"]) == EXIT_OK
    rows = [line.split("\t") for line in (tmp_path / "a" / "metrics.tsv").read_text().splitlines()[1:]]
    for _, iou, dice, fpr in rows:
        assert float(iou) == pytest.approx(1.0) and float(dice) == pytest.approx(1.0)
        assert float(fpr) == pytest.approx(0.0, abs=1e-6)
    assert main(["eval", "--checkpoint", ck, "--synthetic", "--out", str(tmp_path / "b"), "--oracle", "--dice-variant", "as_printed"]) == EXIT_OK
    mean = (tmp_path / "b" / "metrics.tsv").read_text().splitlines()[-1].split("\t")
    assert float(mean[2]) == pytest.approx(2.0, rel=1e-6)


def test_eval_on_mask_directory(trained, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--n", "2", "--size", "64", "--num-classes", "4"]) == EXIT_OK
    ck = str(trained / "checkpoints" / "last")
    assert main(["eval", "--checkpoint", ck, "--data", str(data), "--out", str(tmp_path / "e"), "--class-names", str(data / "classes.txt")]) == EXIT_OK
    assert "background" in (tmp_path / "e" / "metrics.txt").read_text()


def test_eval_class_count_mismatch_is_config_error(trained, tmp_path):
    data = tmp_path / "data6"
    main(["synth", "--out", str(data), "--n", "2", "--size", "64", "--num-classes", "6"])
    ck = str(trained / "checkpoints" / "last")
    assert main(["eval", "--checkpoint", ck, "--data", str(data), "--out", str(tmp_path / "e")]) == EXIT_CONFIG
    assert main(["eval", "--checkpoint", ck, "--synthetic", "--out", str(tmp_path / "f"), "--class-names", str(data / "classes.txt")]) == EXIT_CONFIG


def test_missing_masks_directory_is_data_error(tmp_path, capsys):
    (tmp_path / "d" / "images").mkdir(parents=True)
    code = main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o"), *QUICK])
    assert code == EXIT_DATA
    assert str(tmp_path / "d" / "masks") in capsys.readouterr().err


def test_bad_config_is_config_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.lr = 1e-3\ntrain.warmup = 5\n")
    assert main(["train", "--synthetic", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["info", "--set", "model.num_classes=0"]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_numerical_failure(tmp_path):
    code = main(["train", "--synthetic", "--out", str(tmp_path), *QUICK, "--set", "train.lr=1e30", "--set", "train.batch_size=1"])
    assert code == EXIT_NUMERIC


def test_identical_train_runs_are_identical(tmp_path):
    args = ["train", "--synthetic", *QUICK, "--set", "train.batch_size=2", "--seed", "3"]
    for name in ("a", "b"):
        assert main([*args, "--out", str(tmp_path / name)]) == EXIT_OK
    for rel in ("train_log.tsv", "steps.tsv", "checkpoints/last/params/decoder.head.laplacian.bin"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_ablate_summary(tmp_path, capsys):
    code = main(["ablate", "--rows", "Model-1,FASL-Seg", "--synthetic", "--out", str(tmp_path), *QUICK, "--max-steps", "1"])
    assert code == EXIT_OK
    rows = (tmp_path / "ablation_summary.tsv").read_text().splitlines()
    assert rows[0] == "model\tmIoU\tDice\tparams"
    assert [r.split("\t")[0] for r in rows[1:]] == ["Model-1", "FASL-Seg"]
    assert (tmp_path / "Model-1" / "run_manifest.txt").is_file()
    assert "Model-1" in capsys.readouterr().out


def test_ablate_unknown_row(tmp_path):
    assert main(["ablate", "--rows", "Model-0", "--synthetic", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_info_reports_counts(capsys):
    assert main(["info", "--preset", "toy"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "398,716" in out and "multiply-accumulates at 64x64" in out


def test_info_full_preset_compares_with_reference_count(capsys):
    assert main(["info", "--preset", "full", "--no-macs"]) == EXIT_OK
    assert "81,990,000" in capsys.readouterr().out


def test_synth_writes_readable_dataset(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "3", "--size", "32", "--num-classes", "3"]) == EXIT_OK
    mask = np.asarray(Image.open(tmp_path / "masks" / "synth_00002.png"))
    assert mask.shape == (32, 32) and mask.max() <= 2
