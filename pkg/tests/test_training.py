"""Training loop: determinism, overfit sanity, evaluation cross-checks,
stage sweep harness."""

import numpy as np
import pytest

from dala.blocks import Backbone, BackboneConfig
from dala.checkpoint import load_model
from dala.data import SplitSpec, SyntheticSpec, generate_synthetic, stratified_split
from dala.exceptions import NumericsError
from dala.metrics import classification_report, confusion
from dala.training import (
    TrainConfig,
    evaluate,
    evaluate_model,
    load_arrays,
    predict_scores,
    stage_sweep,
    sweep_table_text,
    train,
    train_on_arrays,
)


def tiny_backbone(side=16, classes=2):
    return BackboneConfig(
        num_classes=classes,
        input_side=side,
        stem_kernel=3,
        stem_stride=1,
        stem_pool=False,
        stage_widths=(4, 8, 8, 8),
        stage_blocks=(1, 1, 1, 1),
        stage_strides=(1, 2, 2, 1),
        attention_stages=(4,),
        reduction_ratio=4,
        dropout_rate=0.0,
    ).validate()


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinydata")
    spec = SyntheticSpec(side=16, samples_per_class=12, seed=21)
    manifest = generate_synthetic(spec, root)
    return stratified_split(manifest, SplitSpec(seed=4))


class TestTrainLoop:
    def test_overfits_ten_samples(self, tiny_dataset):
        train_m, val_m, _ = tiny_dataset
        x, y = load_arrays(train_m.subset(range(10)), 16)
        xv, yv = load_arrays(val_m, 16)
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=3e-3, batch_size=10, epochs=40, seed=5
        )
        model, report = train_on_arrays(config, x, y, xv, yv)
        assert report.per_epoch[-1].train_accuracy == 1.0

    def test_same_seed_bitwise_identical_losses(self, tiny_dataset):
        train_m, val_m, _ = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=3, seed=9
        )
        _, first = train(config, train_m, val_m)
        _, second = train(config, train_m, val_m)
        assert [e.train_loss for e in first.per_epoch] == [
            e.train_loss for e in second.per_epoch
        ]
        assert [e.val_accuracy for e in first.per_epoch] == [
            e.val_accuracy for e in second.per_epoch
        ]

    def test_different_seed_changes_losses(self, tiny_dataset):
        train_m, val_m, _ = tiny_dataset
        base = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=2, seed=1
        )
        other = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=2, seed=2
        )
        _, a = train(base, train_m, val_m)
        _, b = train(other, train_m, val_m)
        assert [e.train_loss for e in a.per_epoch] != [e.train_loss for e in b.per_epoch]

    def test_report_carries_default_learning_rate(self, tiny_dataset):
        train_m, val_m, _ = tiny_dataset
        config = TrainConfig(backbone=tiny_backbone(), epochs=1, seed=3)
        _, report = train(config, train_m, val_m)
        assert config.learning_rate == 0.0001
        assert report.to_dict()["learning_rate"] == 0.0001
        assert report.to_dict()["batch_size"] == 32

    def test_divergence_aborts_with_diagnostic(self, tiny_dataset):
        train_m, val_m, _ = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e12, batch_size=8, epochs=5, seed=6
        )
        with np.errstate(all="ignore"), pytest.raises(NumericsError, match="diverged"):
            train(config, train_m, val_m)

    def test_best_checkpoint_written_and_loadable(self, tiny_dataset, tmp_path):
        train_m, val_m, _ = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=2, seed=7
        )
        ckpt = tmp_path / "best.ckpt"
        _, report = train(config, train_m, val_m, checkpoint_path=ckpt)
        assert ckpt.exists()
        assert report.checkpoint_path == str(ckpt)
        restored = load_model(ckpt)
        assert restored.config == config.backbone

    def test_validation_runs_in_inference_mode(self, tiny_dataset):
        train_m, val_m, _ = tiny_dataset
        config = TrainConfig(backbone=tiny_backbone(), epochs=1, seed=8)
        model, _ = train(config, train_m, val_m)
        assert model.last_forward_training is False


class TestEvaluate:
    def test_constant_predictor_scores_prevalence(self, tiny_dataset):
        _, _, test_m = tiny_dataset
        model = Backbone(tiny_backbone(), seed=1)
        model.fc_w.data = np.zeros_like(model.fc_w.data)
        model.fc_b.data = np.zeros_like(model.fc_b.data)  # argmax ties to class 0
        x, y = load_arrays(test_m, 16)
        report, preds, _ = evaluate_model(model, x, y)
        assert set(preds.tolist()) == {0}
        assert report["accuracy"] == pytest.approx(float(np.mean(y == 0)))

    def test_report_schema_keys(self, tiny_dataset, tmp_path):
        train_m, val_m, test_m = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=1, seed=2
        )
        ckpt = tmp_path / "m.ckpt"
        train(config, train_m, val_m, checkpoint_path=ckpt)
        report, _, _ = evaluate(ckpt, test_m)
        for key in [
            "accuracy",
            "f1_macro",
            "f1_weighted",
            "iba",
            "gmean",
            "auc_roc",
            "per_class",
            "confusion_matrix",
        ]:
            assert key in report
        assert set(report["per_class"]) == {"lesion", "normal"}
        for stats in report["per_class"].values():
            assert {"sensitivity", "specificity", "ppv", "npv"} <= set(stats)

    def test_metrics_match_direct_recomputation_from_dump(self, tiny_dataset):
        _, _, test_m = tiny_dataset
        model = Backbone(tiny_backbone(), seed=3)
        x, y = load_arrays(test_m, 16)
        report, preds, scores = evaluate_model(model, x, y, test_m.class_names)
        cm = confusion(preds, y, 2, test_m.class_names)
        recomputed = classification_report(cm, y, scores)
        assert report == recomputed

    def test_scores_are_probabilities(self, tiny_dataset):
        _, _, test_m = tiny_dataset
        model = Backbone(tiny_backbone(), seed=4)
        x, _ = load_arrays(test_m, 16)
        scores = predict_scores(model, x)
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-5)
        assert scores.min() >= 0.0


class TestStageSweep:
    def test_sweep_rows_and_checksums(self, tiny_dataset):
        train_m, val_m, test_m = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=1, seed=11
        )
        sweep = stage_sweep(config, {4}, train_m, val_m, test_m)
        assert [r["variant"] for r in sweep["rows"]] == ["baseline", "layer-4"]
        checksums = {
            (r["train_checksum"], r["val_checksum"], r["test_checksum"])
            for r in sweep["rows"]
        }
        assert len(checksums) == 1  # identical data order across variants
        assert sweep["columns"] == ["variant", "accuracy", "f1", "auc_roc"]

    def test_sweep_metrics_in_unit_interval(self, tiny_dataset):
        train_m, val_m, test_m = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=1, seed=12
        )
        sweep = stage_sweep(config, {2, 4}, train_m, val_m, test_m)
        for row in sweep["rows"]:
            assert 0.0 <= row["accuracy"] <= 1.0
            assert 0.0 <= row["auc_roc"] <= 1.0
            macro, weighted = (float(v) for v in row["f1"].split("/"))
            assert 0.0 <= macro <= 1.0 and 0.0 <= weighted <= 1.0

    def test_sweep_table_rendering(self, tiny_dataset):
        train_m, val_m, test_m = tiny_dataset
        config = TrainConfig(
            backbone=tiny_backbone(), learning_rate=1e-3, batch_size=8, epochs=1, seed=13
        )
        sweep = stage_sweep(config, {4}, train_m, val_m, test_m)
        text = sweep_table_text(sweep)
        lines = text.strip().splitlines()
        assert lines[0].startswith("Variant")
        assert any("layer-4" in line for line in lines)
