"""Two-stage training: joint pretraining on base classes, then fine-tuning.

Pretraining minimizes classification loss plus `decode_weight` times the
transform-decoding loss. Two ablation modes share the code path:
`baseline` drops the decoding term entirely, `naive_augment` instead feeds
the warped images straight into the classifier with their original labels.
All modes sample one transform per image per step so the random streams
stay aligned; with decode_weight = 0 the flat mode is bitwise identical to
the baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import augment_batch, sample_k_shot
from .errors import ConfigError, DataError, NumericError
from .evaluation import topk_accuracy
from .optim import SgdState, lr_at_epoch, sgd_step
from .rng import make_rng
from .tensor import Tensor, mse, no_grad, softmax_cross_entropy, zero_grads
from .transforms import corners_to_homography, sample_transform, warp_image

MODES = ("flat", "baseline", "naive_augment")
SETTINGS = ("all_classes", "novel_classes", "transfer")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.01
    decay_rate: float = 0.1
    decay_every: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decode_weight: float = 4.0  # the balancing coefficient on the decoding loss
    transform_magnitude: float = 0.25
    mode: str = "flat"
    crop_pad: int = 4
    flip_prob: float = 0.5
    eval_each_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.decode_weight < 0:
            raise ConfigError(f"decode_weight must be >= 0, got {self.decode_weight}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.mode == "baseline" and self.decode_weight != 0.0:
            # baseline means no decoding term, whatever weight was configured
            object.__setattr__(self, "decode_weight", 0.0)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-4
    setting: str = "all_classes"
    freeze_encoder: bool = False
    init: str = "imprint"
    k_shot: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.k_shot < 1:
            raise ConfigError(f"k_shot must be >= 1, got {self.k_shot}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got '{self.setting}'")
        if self.init not in ("imprint", "random"):
            raise ConfigError(f"init must be 'imprint' or 'random', got '{self.init}'")


@dataclass
class TrainState:
    rng: object
    sgd: SgdState
    epoch: int = 0
    step: int = 0
    class_loss_sum: float = 0.0
    decode_loss_sum: float = 0.0
    steps_in_epoch: int = 0

    def start_epoch(self):
        self.class_loss_sum = 0.0
        self.decode_loss_sum = 0.0
        self.steps_in_epoch = 0


def pretrain_step(model, state, images, labels, config):
    """One optimization step of the joint objective; returns loss components."""
    size = model.encoder.input_size
    rho = config.transform_magnitude
    transforms = [sample_transform(state.rng, rho) for _ in range(len(images))]

    decode_active = config.mode == "flat" and config.decode_weight > 0.0
    if decode_active or config.mode == "naive_augment":
        warped = np.stack([
            warp_image(img, corners_to_homography(t, size, size))
            for img, t in zip(images, transforms)
        ])

    if decode_active:
        f_orig = model.encode(images)
        logits = model.classify(f_orig, head="base")
        class_loss = softmax_cross_entropy(logits, labels)
        f_trans = model.encode(warped)
        predicted = model.decode_transform(f_orig, f_trans)
        targets = Tensor(np.stack([
            (t.corner_offsets / rho).astype(np.float32) for t in transforms
        ]))
        decode_loss = mse(predicted, targets)
        total = class_loss + decode_loss * config.decode_weight
        decode_val = decode_loss.item()
    else:
        # baseline and flat-with-zero-weight share this exact path;
        # naive_augment classifies the warped images under the original labels
        inputs = warped if config.mode == "naive_augment" else images
        logits = model.classify(model.encode(inputs), head="base")
        class_loss = softmax_cross_entropy(logits, labels)
        total = class_loss
        decode_val = 0.0

    params = model.parameters()
    zero_grads(params)
    total.backward()
    sgd_step(params, state.sgd)
    model.post_step()

    total_val, class_val = total.item(), class_loss.item()
    if not (np.isfinite(total_val) and np.isfinite(decode_val)):
        raise NumericError(f"non-finite loss at step {state.step}: {total_val}")
    state.step += 1
    state.steps_in_epoch += 1
    state.class_loss_sum += class_val
    state.decode_loss_sum += decode_val
    return total_val, class_val, decode_val


def _base_eval_accuracy(model, dataset):
    images, labels = dataset.subset("base_test")
    if len(images) == 0:
        return None
    logits = []
    with no_grad():
        for i in range(0, len(images), 64):
            feats = model.encode(images[i:i + 64])
            logits.append(model.classify(feats, head="base").data)
    return topk_accuracy(np.concatenate(logits), labels, k=1)


def init_train_state(model, config):
    return TrainState(
        rng=make_rng(config.seed, "pretrain"),
        sgd=SgdState(
            learning_rate=config.base_lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        ),
    )


def pretrain(model, dataset, config, state=None, on_epoch=None):
    """Run pretraining epochs on the base split; returns per-epoch metrics.

    Pass a restored `state` to continue an interrupted run; the epoch
    counter, optimizer velocity, and rng position pick up where they left
    off, reproducing the uninterrupted trajectory exactly.
    """
    images, labels = dataset.subset("base_train")
    if dataset.n_base < 2 or len(images) == 0:
        raise ConfigError("pretraining needs a base split with at least 2 classes")
    if state is None:
        state = init_train_state(model, config)

    metrics = []
    for epoch in range(state.epoch, config.epochs):
        state.sgd.learning_rate = lr_at_epoch(
            config.base_lr, epoch, config.decay_rate, config.decay_every
        )
        state.sgd.epoch = epoch
        state.start_epoch()
        totals = 0.0
        order = state.rng.permutation(len(images))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = augment_batch(images[idx], state.rng,
                                  config.crop_pad, config.flip_prob)
            total, _, _ = pretrain_step(model, state, batch, labels[idx], config)
            totals += total
        n = state.steps_in_epoch
        entry = {
            "stage": "pretrain",
            "epoch": epoch,
            "lr": state.sgd.learning_rate,
            "class_loss": state.class_loss_sum / n,
            "decode_loss": state.decode_loss_sum / n,
            "total_loss": totals / n,
        }
        if config.eval_each_epoch:
            acc = _base_eval_accuracy(model, dataset)
            if acc is not None:
                entry["eval_acc"] = acc
        state.epoch = epoch + 1
        metrics.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return metrics, state


def train_head(model, images, labels, head, epochs, lr, batch_size, rng,
               freeze_encoder=False, momentum=0.9, weight_decay=0.0,
               on_epoch=None, stage="finetune"):
    """Cross-entropy training of a classifier head on a fixed example set."""
    if head == "joint":
        prefixes = ("cls.",) if freeze_encoder else ("enc.", "cls.")
    else:
        prefixes = ("cls.novel.", "cls.scale") if freeze_encoder \
            else ("enc.", "cls.novel.", "cls.scale")
    params = model.parameters(prefixes)
    sgd = SgdState(learning_rate=lr, momentum=momentum, weight_decay=weight_decay)

    frozen_feats = None
    if freeze_encoder:
        with no_grad():
            frozen_feats = model.encode(images).data

    metrics = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        loss_sum, steps = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            if frozen_feats is not None:
                feats = Tensor(frozen_feats[idx])
            else:
                feats = model.encode(images[idx])
            loss = softmax_cross_entropy(model.classify(feats, head=head), labels[idx])
            zero_grads(params)
            loss.backward()
            sgd_step(params, sgd)
            model.post_step()
            loss_sum += loss.item()
            steps += 1
        entry = {
            "stage": stage,
            "epoch": epoch,
            "lr": lr,
            "class_loss": loss_sum / steps,
            "total_loss": loss_sum / steps,
        }
        metrics.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return metrics


def finetune(model, dataset, config, on_epoch=None):
    """Imprint (or randomize) the novel head, then train it per the setting.

    all_classes / novel_classes keep the expanded joint head; transfer
    trains the novel head alone. Decoding plays no part here.
    """
    rng = make_rng(config.seed, "finetune")
    support_idx, _ = sample_k_shot(dataset, config.k_shot, rng)
    counts = np.bincount(dataset.labels[support_idx], minlength=dataset.n_novel)
    if np.any(counts != config.k_shot):
        raise DataError(f"support draw is not exactly {config.k_shot} per class")

    images = dataset.images[support_idx]
    novel_labels = dataset.labels[support_idx]

    if config.init == "imprint":
        with no_grad():
            feats = model.encode(images).data
        model.imprint([feats[novel_labels == c] for c in range(dataset.n_novel)])
    else:
        d = model.encoder.feature_dim
        rows = rng.standard_normal((dataset.n_novel, d)).astype(np.float32)
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        model.params["cls.novel.weight"] = Tensor(rows, requires_grad=True)

    if config.epochs == 0:
        return []

    if config.setting == "transfer":
        head, labels = "novel", novel_labels
    else:
        head, labels = "joint", model.n_base + novel_labels
    return train_head(
        model, images, labels, head,
        epochs=config.epochs, lr=config.lr, batch_size=config.batch_size,
        rng=rng, freeze_encoder=config.freeze_encoder,
        momentum=config.momentum, weight_decay=config.weight_decay,
        on_epoch=on_epoch,
    )


def config_with(config, **overrides):
    return replace(config, **overrides)
