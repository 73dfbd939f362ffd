"""Evaluation: top-k accuracy, episodic N-way K-shot protocol, fixed-split settings.

Episodes draw N novel classes, imprint a fresh head on a cloned model from
K support examples (optionally fine-tuning it), and score top-1 on the
query examples. The pretrained model itself is never mutated. Reports carry
the per-run accuracies, their mean, and a 95% confidence interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, StateError
from .rng import make_rng
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class EpisodeProtocol:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    n_runs: int = 600
    seed: int = 0
    finetune_epochs: int = 0   # 0 = pure imprinting
    finetune_lr: float = 0.002
    finetune_batch_size: int = 32
    freeze_encoder: bool = True

    def __post_init__(self):
        for name in ("n_way", "k_shot", "n_query", "n_runs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")


@dataclass
class Episode:
    n_way: int
    k_shot: int
    n_query: int
    support_images: np.ndarray
    support_labels: np.ndarray  # episode-local, 0..n_way-1
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray       # original novel class ids, in episode order


@dataclass
class EvalReport:
    setting: str
    accuracies: list
    mean: float
    ci95: float
    n_runs: int
    n_way: int = None
    k_shot: int = None

    @classmethod
    def from_accuracies(cls, setting, accuracies, n_way=None, k_shot=None):
        accs = [float(a) for a in accuracies]
        mean = float(np.mean(np.asarray(accs, dtype=np.float64)))
        ci95 = confidence_interval_95(accs)
        return cls(setting=setting, accuracies=accs, mean=mean, ci95=ci95,
                   n_runs=len(accs), n_way=n_way, k_shot=k_shot)

    def to_json(self, include_per_run=True):
        out = {
            "setting": self.setting,
            "k_shot": self.k_shot,
            "n_runs": self.n_runs,
            "mean": self.mean,
            "ci95": self.ci95,
        }
        if self.n_way is not None:
            out["n_way"] = self.n_way
        if include_per_run:
            out["per_run"] = self.accuracies
        return out


def confidence_interval_95(accuracies):
    """1.96 * sample standard deviation / sqrt(n); zero for n < 2."""
    if len(accuracies) < 2:
        return 0.0
    arr = np.asarray(accuracies, dtype=np.float64)
    if np.all(arr == arr[0]):
        return 0.0  # exact, not mean-rounding noise
    return float(1.96 * np.std(arr, ddof=1) / math.sqrt(len(arr)))


def topk_accuracy(logits, labels, k=1):
    """Fraction of rows whose label is among the k largest logits.

    Ties resolve in favor of the lowest class index.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    n, c = data.shape
    if k < 1 or k > c:
        raise ConfigError(f"k must be in [1, {c}], got {k}")
    # stable sort on -logits: equal logits keep ascending class order
    top = np.argsort(-data, axis=1, kind="stable")[:, :k]
    hits = (top == labels[:, None]).any(axis=1)
    return float(hits.sum(dtype=np.float64) / n)


def _novel_pool(dataset):
    idx = dataset.indices("novel_train", "novel_test")
    return idx, dataset.labels[idx]


def sample_episode(dataset, n_way, k_shot, n_query, rng):
    """Draw one episode from the novel split, support and query disjoint."""
    if n_way > dataset.n_novel:
        raise DataError(
            f"cannot sample {n_way}-way episodes from {dataset.n_novel} novel classes"
        )
    pool_idx, pool_labels = _novel_pool(dataset)
    need = k_shot + n_query
    classes = rng.choice(dataset.n_novel, size=n_way, replace=False)
    sup_img, sup_lab, qry_img, qry_lab = [], [], [], []
    for slot, c in enumerate(classes):
        candidates = pool_idx[pool_labels == c]
        if len(candidates) < need:
            raise DataError(
                f"novel class '{dataset.class_name(int(c), novel=True)}' has "
                f"{len(candidates)} examples, episode needs {need}"
            )
        chosen = rng.choice(candidates, size=need, replace=False)
        sup_img.append(dataset.images[chosen[:k_shot]])
        qry_img.append(dataset.images[chosen[k_shot:]])
        sup_lab.extend([slot] * k_shot)
        qry_lab.extend([slot] * n_query)
    return Episode(
        n_way=n_way, k_shot=k_shot, n_query=n_query,
        support_images=np.concatenate(sup_img),
        support_labels=np.asarray(sup_lab, dtype=np.int64),
        query_images=np.concatenate(qry_img),
        query_labels=np.asarray(qry_lab, dtype=np.int64),
        class_ids=np.asarray(classes, dtype=np.int64),
    )


def evaluate_episode(model, episode, protocol, rng):
    """Imprint (and optionally fine-tune) on a clone, return query top-1."""
    work = model.clone()
    with no_grad():
        feats = work.encode(episode.support_images).data
    work.imprint([
        feats[episode.support_labels == slot] for slot in range(episode.n_way)
    ])
    if protocol.finetune_epochs > 0:
        from .training import train_head

        train_head(
            work, episode.support_images, episode.support_labels, head="novel",
            epochs=protocol.finetune_epochs, lr=protocol.finetune_lr,
            batch_size=protocol.finetune_batch_size, rng=rng,
            freeze_encoder=protocol.freeze_encoder,
        )
    with no_grad():
        logits = work.classify(work.encode(episode.query_images), head="novel")
    return topk_accuracy(logits, episode.query_labels, k=1)


def run_episodes(model, dataset, protocol, on_episode=None):
    """Run the episodic protocol; the input model is left untouched."""
    rng = make_rng(protocol.seed, "episodes")
    accuracies = []
    for i in range(protocol.n_runs):
        try:
            episode = sample_episode(
                dataset, protocol.n_way, protocol.k_shot, protocol.n_query, rng
            )
            acc = evaluate_episode(model, episode, protocol, rng)
        except Exception as exc:
            raise type(exc)(f"episode {i}: {exc}") from exc
        accuracies.append(acc)
        if on_episode is not None:
            on_episode(i, acc)
    return EvalReport.from_accuracies(
        "episodic", accuracies, n_way=protocol.n_way, k_shot=protocol.k_shot
    )


def evaluate_setting(model, dataset, setting, k_shot=None):
    """Single-pass top-1 on the fixed test split for one of the three settings.

    all_classes: joint head, base + novel test examples.
    novel_classes: joint head, novel test examples only.
    transfer: novel-only head, novel test examples only.
    """
    if setting in ("all_classes", "novel_classes"):
        head = "joint"
    elif setting == "transfer":
        head = "novel"
    else:
        raise ConfigError(f"unknown evaluation setting '{setting}'")
    if model.n_novel is None:
        raise StateError(f"setting '{setting}' needs a novel head on the model")

    novel_imgs, novel_labs = dataset.subset("novel_test")
    if setting == "all_classes":
        base_imgs, base_labs = dataset.subset("base_test")
        images = np.concatenate([base_imgs, novel_imgs])
        labels = np.concatenate([base_labs, model.n_base + novel_labs])
    elif setting == "novel_classes":
        images, labels = novel_imgs, model.n_base + novel_labs
    else:
        images, labels = novel_imgs, novel_labs
    if len(images) == 0:
        raise DataError(f"no test examples available for setting '{setting}'")

    logits = []
    with no_grad():
        for i in range(0, len(images), 64):
            feats = model.encode(images[i:i + 64])
            logits.append(model.classify(feats, head=head).data)
    acc = topk_accuracy(np.concatenate(logits), labels, k=1)
    return EvalReport.from_accuracies(setting, [acc], k_shot=k_shot)
