"""Seen-class accuracy, A_avg / A_fin, and memory byte accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .memory import ReplayMemory, SBDMemory
from .nets import EncoderParams, ModelState, SAParams, r_path_logits

BYTES_PER_ELEMENT = 4
SPLITS = ("validation-current", "validation-task0", "test-seen")


@dataclass
class EvalRecord:
    task_index: int
    epoch: int
    step: int
    split: str
    accuracy: float
    seen_classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


@dataclass
class BudgetReport:
    replay_bytes: int
    sbd_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.replay_bytes + self.sbd_bytes

    def as_dict(self) -> dict:
        return {"replay_bytes": self.replay_bytes, "sbd_bytes": self.sbd_bytes, "total_bytes": self.total_bytes}


def predict(m: ModelState, p_r: EncoderParams, sa: SAParams, images, batch_size: int = 512) -> np.ndarray:
    """Argmax class over all logits (unseen classes compete too)."""
    images = np.asarray(images)
    preds = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            logits = r_path_logits(m, p_r, sa, images[s:s + batch_size]).data
            preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy_from_predictions(preds, labels, seen_classes=None) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if seen_classes is not None:
        seen = np.asarray(sorted(seen_classes))
        if len(seen) == 0:
            raise ValueError("seen_classes must not be empty")
        mask = np.isin(labels, seen)
        preds, labels = preds[mask], labels[mask]
    if len(labels) == 0:
        raise ValueError("no test samples belong to the seen classes")
    correct = int(np.count_nonzero(preds == labels))
    return correct / len(labels)


def evaluate(m: ModelState, p_r: EncoderParams, sa: SAParams, images, labels, seen_classes=None) -> float:
    """Accuracy of the r-path on samples whose label is in ``seen_classes``.

    ``seen_classes=None`` scores every sample.
    """
    labels = np.asarray(labels)
    if seen_classes is not None:
        if len(seen_classes) == 0:
            raise ValueError("seen_classes must not be empty")
        mask = np.isin(labels, np.asarray(sorted(seen_classes)))
        images, labels = np.asarray(images)[mask], labels[mask]
    if len(labels) == 0:
        raise ValueError("no test samples belong to the seen classes")
    return accuracy_from_predictions(predict(m, p_r, sa, images), labels)


def a_avg(task_accuracies) -> float:
    acc = list(task_accuracies)
    if not acc:
        raise ValueError("A_avg of an empty sequence")
    return float(np.mean(acc))


def a_fin(task_accuracies) -> float:
    acc = list(task_accuracies)
    if not acc:
        raise ValueError("A_fin of an empty sequence")
    return float(acc[-1])


def budget_report(r: ReplayMemory | None, e: SBDMemory | None) -> BudgetReport:
    replay = 0 if r is None else len(r) * int(np.prod(r.image_shape)) * BYTES_PER_ELEMENT
    sbd = 0 if e is None else e.num_elements() * BYTES_PER_ELEMENT
    return BudgetReport(replay, sbd)
