"""End-to-end CLI contract: exit codes, artifacts, determinism."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from dala.cli import main
from dala.metrics import classification_report, confusion

ARGS_FAST = [
    "--input-side",
    "16",
    "--epochs",
    "1",
    "--batch-size",
    "8",
    "--learning-rate",
    "0.003",
    "--no-augment",
]


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = main(
        ["generate", "--out", str(root), "--seed", "7", "--side", "16",
         "--samples-per-class", "10"]
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(
        ["train", "--data", str(dataset), "--stage", "4", "--out", str(out),
         "--seed", "3", *ARGS_FAST]
    )
    assert code == 0
    return out


class TestGenerate:
    def test_same_seed_identical_trees(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert main(
                ["generate", "--out", str(out), "--seed", "7", "--side", "16",
                 "--samples-per-class", "3"]
            ) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_missing_out_is_usage_error(self):
        assert main(["generate", "--seed", "1"]) == 2

    def test_masks_only_for_lesion_class(self, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text())
        for entry in manifest["entries"]:
            cls = manifest["class_names"][entry["label"]]
            assert (entry["mask"] is not None) == (cls == "lesion")

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DALA_SEED", "7")
        a = tmp_path / "env"
        assert main(
            ["generate", "--out", str(a), "--side", "16", "--samples-per-class", "3"]
        ) == 0
        b = tmp_path / "flag"
        assert main(
            ["generate", "--out", str(b), "--seed", "7", "--side", "16",
             "--samples-per-class", "3"]
        ) == 0
        assert tree_digest(a) == tree_digest(b)


class TestSplit:
    def test_writes_three_manifests(self, dataset, tmp_path):
        out = tmp_path / "splits"
        assert main(["split", "--data", str(dataset), "--out", str(out), "--seed", "2"]) == 0
        sizes = {}
        for name in ("train", "val", "test"):
            doc = json.loads((out / f"{name}.json").read_text())
            sizes[name] = len(doc["entries"])
        assert sizes == {"train": 12, "val": 2, "test": 6}

    def test_bad_ratios_exit_two(self, dataset, tmp_path):
        code = main(
            ["split", "--data", str(dataset), "--out", str(tmp_path / "x"),
             "--train-ratio", "0.5", "--val-ratio", "0.1", "--test-ratio", "0.3"]
        )
        assert code == 2


class TestTrain:
    def test_invalid_stage_rejected_before_side_effects(self, dataset, tmp_path):
        from dala.training import TrainConfig

        assert TrainConfig().epochs == 50  # CLI default when no flag is given
        out = tmp_path / "never"
        code = main(["train", "--data", str(dataset), "--stage", "5", "--out", str(out)])
        assert code == 2
        assert not out.exists() or not any(out.iterdir())

    def test_report_epoch_override_honored(self, trained):
        report = json.loads((trained / "train_report.json").read_text())
        assert report["epochs"] == 1
        assert len(report["per_epoch"]) == 1
        assert report["learning_rate"] == 0.003
        assert report["variant"] == "layer-4"
        assert Path(report["checkpoint_path"]).exists()

    def test_invalid_stage_exit_two(self, dataset, tmp_path):
        code = main(
            ["train", "--data", str(dataset), "--stage", "9", "--out",
             str(tmp_path / "x"), *ARGS_FAST]
        )
        assert code == 2

    def test_config_file_supplies_values_flags_override(self, dataset, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"train": {"epochs": 1, "batch_size": 8,
                                                "learning_rate": 0.003},
                                      "seed": 3}))
        out = tmp_path / "cfgrun"
        code = main(
            ["train", "--data", str(dataset), "--config", str(config), "--out", str(out),
             "--input-side", "16", "--no-augment", "--epochs", "2"]
        )
        assert code == 0
        report = json.loads((out / "train_report.json").read_text())
        assert report["epochs"] == 2  # flag wins over config file
        assert report["batch_size"] == 8  # config wins over default


class TestEval:
    def test_metrics_artifacts_and_cross_check(self, dataset, trained, tmp_path):
        out = tmp_path / "eval"
        splits = tmp_path / "splits"
        assert main(["split", "--data", str(dataset), "--out", str(splits), "--seed", "3"]) == 0
        code = main(
            ["eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--manifest", str(splits / "test.json"), "--out", str(out)]
        )
        assert code == 0
        report = json.loads((out / "metrics.json").read_text())
        for key in ("accuracy", "f1_macro", "f1_weighted", "iba", "gmean", "auc_roc", "per_class"):
            assert key in report

        # recompute every metric from the dumped predictions
        rows = (out / "predictions.csv").read_text().strip().splitlines()
        header = rows[0].split(",")
        data = [r.split(",") for r in rows[1:]]
        truths = np.array([int(r[header.index("truth")]) for r in data])
        preds = np.array([int(r[header.index("prediction")]) for r in data])
        scores = np.array(
            [[float(r[header.index("score_lesion")]), float(r[header.index("score_normal")])]
             for r in data]
        )
        cm = confusion(preds, truths, 2, ["lesion", "normal"])
        recomputed = classification_report(cm, truths, scores)
        assert report["accuracy"] == recomputed["accuracy"]
        assert report["iba"] == recomputed["iba"]
        assert report["gmean"] == recomputed["gmean"]
        assert report["auc_roc"] == recomputed["auc_roc"]

        csv_lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert csv_lines[0].split(",")[:4] == ["num_samples", "accuracy", "f1_macro", "f1_weighted"]

    def test_missing_checkpoint_exit_two(self, dataset, tmp_path):
        code = main(
            ["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data",
             str(dataset), "--out", str(tmp_path / "out")]
        )
        assert code == 2


class TestExplain:
    def test_degenerate_dt_matches_gradcam_csv_bytes(self, dataset, trained, tmp_path):
        manifest = json.loads((dataset / "manifest.json").read_text())
        image = dataset / manifest["entries"][0]["image"]
        ckpt = trained / "checkpoint.ckpt"
        out1 = tmp_path / "e1"
        out2 = tmp_path / "e2"
        assert main(
            ["explain", "--checkpoint", str(ckpt), "--image", str(image),
             "--out", str(out1), "--method", "gradcam", "--run-id", "fixed", "--seed", "1"]
        ) == 0
        assert main(
            ["explain", "--checkpoint", str(ckpt), "--image", str(image),
             "--out", str(out2), "--method", "dt", "--N", "1", "--sigma", "0",
             "--no-otsu", "--no-morph", "--run-id", "fixed", "--seed", "1"]
        ) == 0
        a = (out1 / "fixed" / "gradcam.csv").read_bytes()
        b = (out2 / "fixed" / "dtgradcam.csv").read_bytes()
        assert a == b

    def test_both_methods_written_by_default(self, dataset, trained, tmp_path):
        manifest = json.loads((dataset / "manifest.json").read_text())
        image = dataset / manifest["entries"][0]["image"]
        out = tmp_path / "both"
        assert main(
            ["explain", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--image", str(image), "--out", str(out), "--run-id", "r", "--seed", "2"]
        ) == 0
        names = {p.name for p in (out / "r").iterdir()}
        assert {"gradcam.png", "gradcam.csv", "gradcam_overlay.png",
                "dtgradcam.png", "dtgradcam.csv", "dtgradcam_overlay.png",
                "explain.json"} <= names

    def test_forced_class_recorded_in_metadata(self, dataset, trained, tmp_path):
        manifest = json.loads((dataset / "manifest.json").read_text())
        image = dataset / manifest["entries"][0]["image"]
        out = tmp_path / "forced"
        assert main(
            ["explain", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--image", str(image), "--out", str(out), "--class", "1",
             "--run-id", "r", "--seed", "2"]
        ) == 0
        meta = json.loads((out / "r" / "explain.json").read_text())
        assert meta["target_class"] == 1
        assert meta["target_class_forced"] is True

    def test_missing_checkpoint_exit_two(self, dataset, tmp_path):
        manifest = json.loads((dataset / "manifest.json").read_text())
        image = dataset / manifest["entries"][0]["image"]
        code = main(
            ["explain", "--checkpoint", str(tmp_path / "missing.ckpt"),
             "--image", str(image), "--out", str(tmp_path / "o")]
        )
        assert code == 2


class TestCamEval:
    def test_table_shape_and_dice_equals_f1(self, dataset, trained, tmp_path):
        out = tmp_path / "cameval"
        code = main(
            ["cam-eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--data", str(dataset), "--out", str(out), "--seed", "5", "--N", "3"]
        )
        assert code == 0
        result = json.loads((out / "cam_metrics.json").read_text())
        assert set(result["methods"]) == {"gradcam", "dt"}
        for method in result["methods"].values():
            assert set(method) == {"iou", "dice", "recall", "f1"}
            assert method["dice"] == method["f1"]
            for v in method.values():
                assert 0.0 <= v <= 1.0
        table = (out / "cam_metrics.txt").read_text()
        assert table.splitlines()[0].split() == ["Method", "IoU", "Dice", "Recall", "F1"]

    def test_class_without_masks_rejected(self, dataset, trained, tmp_path):
        code = main(
            ["cam-eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--data", str(dataset), "--out", str(tmp_path / "x"),
             "--class", "1", "--seed", "5"]
        )
        assert code == 2
