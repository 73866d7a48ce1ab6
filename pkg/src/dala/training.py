"""Seeded training/evaluation loop and the per-stage insertion sweep.

Determinism contract: with a fixed seed and single-threaded execution,
every run produces bit-identical parameters, reports, and checkpoints.
All randomness (shuffling, augmentation, dropout) is derived from the
config seed plus structural indices (epoch, batch, sample), never from
global state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import functional as F
from . import metrics as M
from .blocks import Backbone, BackboneConfig
from .checkpoint import load_model, save_model
from .data import AugmentSpec, DatasetManifest, load_and_preprocess
from .exceptions import ConfigurationError, InputError, NumericsError
from .optim import Adam
from .tensor import Tensor, no_grad

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainReport",
    "load_arrays",
    "train_on_arrays",
    "train",
    "predict_scores",
    "evaluate_model",
    "evaluate",
    "stage_sweep",
    "sweep_table_text",
]


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    learning_rate: float = 1e-4  # initial (and only) rate; no schedule
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    augment: Optional[AugmentSpec] = None

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        self.backbone.validate()
        if self.augment is not None:
            self.augment.validate()
        return self


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int
    per_epoch: list[EpochStats]
    best_epoch: int
    best_val_accuracy: float
    seconds_to_best: float
    total_seconds: float
    checkpoint_path: Optional[str]

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "per_epoch": [vars(e).copy() for e in self.per_epoch],
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "seconds_to_best": self.seconds_to_best,
            "total_seconds": self.total_seconds,
            "checkpoint_path": self.checkpoint_path,
        }


def load_arrays(manifest: DatasetManifest, target_side: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode and preprocess every manifest image into one float32 batch."""
    if len(manifest) == 0:
        raise InputError("manifest is empty")
    images = np.stack(
        [load_and_preprocess(manifest.image_path(e), target_side).data for e in manifest.entries]
    )
    labels = np.array([e.label for e in manifest.entries], dtype=np.int64)
    return images, labels


def _augmented_batch(
    x: np.ndarray, indices: np.ndarray, aug: Optional[AugmentSpec], epoch: int
) -> np.ndarray:
    if aug is None:
        return x[indices]
    from .data import augment  # local import keeps module load cheap

    rows = [
        augment(Tensor(x[i]), aug, sample_index=int(i), epoch=epoch).data for i in indices
    ]
    return np.stack(rows)


def predict_scores(model: Backbone, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Softmax class scores in inference mode (dropout off, no recording)."""
    scores = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            logits = model(Tensor(x[start : start + batch_size]), training=False).data
            shifted = logits - logits.max(axis=1, keepdims=True)
            exp = np.exp(shifted)
            scores.append(exp / exp.sum(axis=1, keepdims=True))
    return np.concatenate(scores, axis=0)


def _split_loss_accuracy(model, x, y, batch_size) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            yb = y[start : start + batch_size]
            logits = model(Tensor(xb), training=False)
            loss = F.softmax_cross_entropy(logits, yb)
            total_loss += float(loss.data) * len(xb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / len(x), correct / len(x)


def train_on_arrays(
    config: TrainConfig,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    checkpoint_path=None,
    log=None,
) -> tuple[Backbone, TrainReport]:
    """Adam training with per-epoch shuffling, augmentation, validation
    tracking, and best-checkpoint selection (ties keep the earlier epoch)."""
    config.validate()
    if len(x_train) == 0 or len(x_val) == 0:
        raise InputError("training and validation sets must be non-empty")
    num_classes = config.backbone.num_classes
    if y_train.max() >= num_classes or y_val.max() >= num_classes:
        raise InputError("labels exceed the configured class count")

    model = Backbone(config.backbone, seed=config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    start_time = time.perf_counter()
    best_epoch = -1
    best_val_accuracy = -1.0
    seconds_to_best = 0.0
    stats: list[EpochStats] = []

    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, 1, epoch]).permutation(len(x_train))
        epoch_loss = 0.0
        epoch_correct = 0
        for batch_index, start in enumerate(range(0, len(perm), config.batch_size)):
            indices = perm[start : start + config.batch_size]
            xb = _augmented_batch(x_train, indices, config.augment, epoch)
            yb = y_train[indices]
            opt.zero_grad()
            try:
                logits = model(
                    Tensor(xb),
                    training=True,
                    dropout_seed=epoch * 1_000_003 + batch_index,
                )
                loss = F.softmax_cross_entropy(logits, yb)
                loss.backward()
                opt.step()
            except NumericsError as exc:
                raise NumericsError(
                    f"training diverged at epoch {epoch}, batch {batch_index}: {exc}"
                ) from exc
            epoch_loss += float(loss.data) * len(indices)
            epoch_correct += int((logits.data.argmax(axis=1) == yb).sum())

        val_loss, val_accuracy = _split_loss_accuracy(model, x_val, y_val, config.batch_size)
        assert model.last_forward_training is False  # validation ran in inference mode
        stat = EpochStats(
            epoch=epoch,
            train_loss=epoch_loss / len(x_train),
            train_accuracy=epoch_correct / len(x_train),
            val_loss=val_loss,
            val_accuracy=val_accuracy,
        )
        stats.append(stat)
        if log is not None:
            log(
                f"epoch {epoch}: train_loss={stat.train_loss:.4f} "
                f"train_acc={stat.train_accuracy:.3f} val_acc={stat.val_accuracy:.3f}"
            )
        if val_accuracy > best_val_accuracy:
            best_val_accuracy = val_accuracy
            best_epoch = epoch
            seconds_to_best = time.perf_counter() - start_time
            if checkpoint_path is not None:
                save_model(checkpoint_path, model)

    report = TrainReport(
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        epochs=config.epochs,
        seed=config.seed,
        per_epoch=stats,
        best_epoch=best_epoch,
        best_val_accuracy=best_val_accuracy,
        seconds_to_best=seconds_to_best,
        total_seconds=time.perf_counter() - start_time,
        checkpoint_path=str(checkpoint_path) if checkpoint_path is not None else None,
    )
    return model, report


def train(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    checkpoint_path=None,
    log=None,
) -> tuple[Backbone, TrainReport]:
    side = config.backbone.input_side
    x_train, y_train = load_arrays(train_manifest, side)
    x_val, y_val = load_arrays(val_manifest, side)
    return train_on_arrays(
        config, x_train, y_train, x_val, y_val, checkpoint_path=checkpoint_path, log=log
    )


def evaluate_model(
    model: Backbone, x: np.ndarray, y: np.ndarray, class_names=None
) -> tuple[dict, np.ndarray, np.ndarray]:
    """Full metrics report plus the raw (predictions, scores) it was
    computed from, so external tooling can re-derive every number."""
    scores = predict_scores(model, x)
    preds = scores.argmax(axis=1)
    cm = M.confusion(preds, y, model.config.num_classes, class_names)
    report = M.classification_report(cm, y, scores)
    return report, preds, scores


def evaluate(checkpoint_path, test_manifest: DatasetManifest) -> tuple[dict, np.ndarray, np.ndarray]:
    model = load_model(checkpoint_path)
    x, y = load_arrays(test_manifest, model.config.input_side)
    return evaluate_model(model, x, y, class_names=test_manifest.class_names)


def stage_sweep(
    config: TrainConfig,
    stages,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    log=None,
) -> dict:
    """Train one variant per insertion choice (plus the no-attention
    baseline) on identical data and seeds; emit accuracy, the dual F1
    pair, and AUC-ROC per variant."""
    stages = sorted(set(int(s) for s in stages))
    for s in stages:
        if not 1 <= s <= len(config.backbone.stage_widths):
            raise ConfigurationError(f"sweep stage {s} out of range")

    side = config.backbone.input_side
    x_train, y_train = load_arrays(train_manifest, side)
    x_val, y_val = load_arrays(val_manifest, side)
    x_test, y_test = load_arrays(test_manifest, side)

    variants = [()] + [(s,) for s in stages]
    rows = []
    for attention_stages in variants:
        backbone = replace(config.backbone, attention_stages=attention_stages)
        variant_config = replace(config, backbone=backbone)
        if log is not None:
            log(f"sweep: training variant {backbone.label}")
        model, report = train_on_arrays(variant_config, x_train, y_train, x_val, y_val)
        test_report, _, _ = evaluate_model(
            model, x_test, y_test, class_names=test_manifest.class_names
        )
        rows.append(
            {
                "variant": backbone.label,
                "accuracy": test_report["accuracy"],
                "f1": test_report["f1"],
                "auc_roc": test_report["auc_roc"],
                "best_val_accuracy": report.best_val_accuracy,
                "train_checksum": train_manifest.checksum,
                "val_checksum": val_manifest.checksum,
                "test_checksum": test_manifest.checksum,
            }
        )
    return {
        "seed": config.seed,
        "epochs": config.epochs,
        "columns": ["variant", "accuracy", "f1", "auc_roc"],
        "rows": rows,
    }


def sweep_table_text(sweep: dict) -> str:
    """Fixed-width text rendering of a sweep result."""
    headers = ["Variant", "Accuracy", "F1 (macro/weighted)", "AUC-ROC"]
    lines = [
        [
            row["variant"],
            f"{row['accuracy']:.3f}",
            row["f1"],
            f"{row['auc_roc']:.3f}" if row["auc_roc"] is not None else "n/a",
        ]
        for row in sweep["rows"]
    ]
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths))

    out = [fmt(headers), fmt(["-" * w for w in widths])]
    out.extend(fmt(l) for l in lines)
    return "\n".join(out) + "\n"
