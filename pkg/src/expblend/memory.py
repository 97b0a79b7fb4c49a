"""Replay memory R with importance-based eviction, and the SBD memory E.

Importance of a stored sample is a running estimate of how much a model
update lowers its loss::

    importance <- (1 - beta) * importance + beta * (loss_before - loss_after)

When R overflows, the least important sample is evicted. Ties go to the
class holding the most samples in R, then to the oldest insertion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sbd import SBDBatch


@dataclass
class ReplaySample:
    image: np.ndarray
    label: int
    importance: float
    inserted_at: int


def choose_eviction(importance: np.ndarray, labels: np.ndarray, inserted_at: np.ndarray) -> int:
    """Index of the sample to evict: min importance, then largest class, then oldest."""
    if len(importance) == 0:
        raise IndexError("cannot evict from an empty memory")
    cand = np.flatnonzero(importance == importance.min())
    if len(cand) > 1:
        classes, counts = np.unique(labels, return_counts=True)
        count_of = dict(zip(classes.tolist(), counts.tolist()))
        cand_counts = np.array([count_of[int(labels[i])] for i in cand])
        cand = cand[cand_counts == cand_counts.max()]
    return int(cand[np.argmin(inserted_at[cand])])


class ReplayMemory:
    """Fixed-capacity store of raw samples.

    Samples live in preallocated arrays; removal moves the last slot into the
    hole, so slot order is deterministic but not insertion order.
    """

    def __init__(self, capacity: int, image_shape: tuple[int, ...]):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.image_shape = tuple(image_shape)
        self.images = np.zeros((capacity + 1,) + self.image_shape, dtype=np.float32)
        self.labels = np.zeros(capacity + 1, dtype=np.int64)
        self.importance = np.zeros(capacity + 1, dtype=np.float64)
        self.inserted_at = np.zeros(capacity + 1, dtype=np.int64)
        self.size = 0
        self.counter = 0
        self.class_counts: dict[int, int] = {}

    def __len__(self) -> int:
        return self.size

    def view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        n = self.size
        return self.images[:n], self.labels[:n], self.importance[:n], self.inserted_at[:n]

    def samples(self) -> list[ReplaySample]:
        imgs, labels, imp, ins = self.view()
        return [ReplaySample(imgs[k], int(labels[k]), float(imp[k]), int(ins[k])) for k in range(self.size)]

    def mean_importance(self) -> float:
        """Exactly rounded mean, so it does not depend on slot order."""
        return math.fsum(self.importance[: self.size]) / self.size if self.size else 0.0

    def insert(self, image, label: int, importance: float | None = None) -> ReplaySample | None:
        """Add one sample; returns the evicted sample if the memory overflowed.

        New samples start at the current mean importance (0 for an empty
        memory) unless ``importance`` is given explicitly.
        """
        image = np.asarray(image, dtype=np.float32)
        if image.shape != self.image_shape:
            raise ValueError(f"image shape {image.shape} != memory shape {self.image_shape}")
        if label < 0:
            raise ValueError("label must be non-negative")
        if importance is None:
            importance = self.mean_importance()
        k = self.size
        self.images[k] = image
        self.labels[k] = label
        self.importance[k] = importance
        self.inserted_at[k] = self.counter
        self.counter += 1
        self.size += 1
        self.class_counts[int(label)] = self.class_counts.get(int(label), 0) + 1
        if self.size > self.capacity:
            return self.evict()
        return None

    def evict(self) -> ReplaySample:
        if self.size == 0:
            raise IndexError("cannot evict from an empty memory")
        _, labels, imp, ins = self.view()
        k = choose_eviction(imp, labels, ins)
        removed = ReplaySample(self.images[k].copy(), int(labels[k]), float(imp[k]), int(ins[k]))
        last = self.size - 1
        if k != last:
            self.images[k] = self.images[last]
            self.labels[k] = self.labels[last]
            self.importance[k] = self.importance[last]
            self.inserted_at[k] = self.inserted_at[last]
        self.size -= 1
        c = self.class_counts[removed.label] - 1
        if c:
            self.class_counts[removed.label] = c
        else:
            del self.class_counts[removed.label]
        return removed

    def update_importance(self, indices, loss_before, loss_after, beta: float = 0.1) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        before = np.asarray(loss_before, dtype=np.float64)
        after = np.asarray(loss_after, dtype=np.float64)
        if not (idx.shape == before.shape == after.shape):
            raise ValueError("indices and losses must be aligned")
        if not 0 < beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if np.any(idx < 0) or np.any(idx >= self.size):
            raise IndexError("replay index out of range")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("indices must be unique")
        self.importance[idx] = (1 - beta) * self.importance[idx] + beta * (before - after)

    def clone(self) -> ReplayMemory:
        other = ReplayMemory.__new__(ReplayMemory)
        other.__dict__.update({k: (v.copy() if hasattr(v, "copy") else v) for k, v in self.__dict__.items()})
        return other

    def save(self, path, importance_csv=None) -> None:
        """Write the stored images in the dataset format plus an importance table."""
        from .stream import Dataset, store_dataset

        imgs, labels, imp, ins = self.view()
        order = np.argsort(ins, kind="stable")
        num_classes = int(labels.max()) + 1 if self.size else 1
        store_dataset(Dataset(imgs[order], labels[order], num_classes, "replay"), path)
        if importance_csv is not None:
            with open(importance_csv, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["inserted_at", "label", "importance"])
                for k in order:
                    w.writerow([int(ins[k]), int(labels[k]), f"{imp[k]:.6f}"])


def memory_insert(r: ReplayMemory, sample, importance: float | None = None) -> ReplayMemory:
    image, label = sample
    r.insert(image, int(label), importance)
    return r


def importance_update(r: ReplayMemory, indices, loss_before, loss_after, beta: float = 0.1) -> ReplayMemory:
    r.update_importance(indices, loss_before, loss_after, beta)
    return r


def evict_least_important(r: ReplayMemory) -> tuple[ReplayMemory, ReplaySample]:
    return r, r.evict()


class SBDMemory:
    """Per-sample store of SBD feature maps.

    ``budget=None`` keeps every entry. With a budget, overflow evicts the
    lowest-importance entries (oldest first on ties).
    """

    def __init__(self, budget: int | None = None):
        if budget is not None and budget < 1:
            raise ValueError("SBD budget must be positive")
        self.budget = budget
        self.features: np.ndarray | None = None
        self.labels = np.zeros(0, dtype=np.int64)
        self.task_ids = np.zeros(0, dtype=np.int64)
        self.importance = np.zeros(0, dtype=np.float64)
        self.inserted_at = np.zeros(0, dtype=np.int64)
        self.counter = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...] | None:
        return None if self.features is None else self.features.shape[1:]

    def append(self, batch: SBDBatch, importance=None) -> None:
        n = len(batch)
        if n == 0:
            return
        if importance is None:
            fill = math.fsum(self.importance) / len(self) if len(self) else 0.0
            importance = np.full(n, fill)
        importance = np.asarray(importance, dtype=np.float64)
        if importance.shape != (n,):
            raise ValueError("one importance value per entry")
        feats = np.asarray(batch.features, dtype=np.float32)
        if self.features is None:
            self.features = feats.copy()
        else:
            if feats.shape[1:] != self.features.shape[1:]:
                raise ValueError(f"feature shape {feats.shape[1:]} != stored {self.features.shape[1:]}")
            self.features = np.concatenate([self.features, feats])
        self.labels = np.concatenate([self.labels, np.asarray(batch.labels, dtype=np.int64)])
        self.task_ids = np.concatenate([self.task_ids, np.full(n, batch.task_id, dtype=np.int64)])
        self.importance = np.concatenate([self.importance, importance])
        self.inserted_at = np.concatenate([self.inserted_at, np.arange(self.counter, self.counter + n)])
        self.counter += n
        self._enforce_budget()

    def _keep(self, mask: np.ndarray) -> None:
        self.features = self.features[mask]
        self.labels = self.labels[mask]
        self.task_ids = self.task_ids[mask]
        self.importance = self.importance[mask]
        self.inserted_at = self.inserted_at[mask]

    def _enforce_budget(self) -> None:
        if self.budget is not None and len(self) > self.budget:
            self.evict(len(self) - self.budget)

    def evict(self, count: int) -> np.ndarray:
        """Remove the ``count`` lowest-importance entries; returns their inserted_at stamps."""
        if not 0 <= count <= len(self):
            raise ValueError(f"cannot evict {count} of {len(self)} entries")
        excess = count
        order = np.lexsort((self.inserted_at, self.importance))
        mask = np.ones(len(self), dtype=bool)
        mask[order[:excess]] = False
        gone = self.inserted_at[~mask].copy()
        if excess:
            self._keep(mask)
        return gone

    def replace_task_entries(self, task_id: int, batches) -> None:
        """Drop every entry of ``task_id`` and insert the regenerated batches."""
        batches = list(batches)
        if any(b.task_id != task_id for b in batches):
            raise ValueError("replacement batches must carry the replaced task id")
        if self.features is not None:
            self._keep(self.task_ids != task_id)
        for b in batches:
            self.append(b)

    def update_importance(self, indices, loss_before, loss_after, beta: float = 0.1) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx >= len(self)):
            raise IndexError("SBD index out of range")
        delta = np.asarray(loss_before, dtype=np.float64) - np.asarray(loss_after, dtype=np.float64)
        self.importance[idx] = (1 - beta) * self.importance[idx] + beta * delta

    def num_elements(self) -> int:
        return 0 if self.features is None else int(self.features.size)


def sbd_append(e: SBDMemory, batch: SBDBatch, importance=None) -> SBDMemory:
    e.append(batch, importance)
    return e


def sbd_evict(e: SBDMemory, count: int | None = None) -> SBDMemory:
    """Evict ``count`` entries, or by default just enough to meet the budget."""
    if count is None:
        e._enforce_budget()
    else:
        e.evict(count)
    return e


def replace_task_entries(e: SBDMemory, task_id: int, batches) -> SBDMemory:
    e.replace_task_entries(task_id, batches)
    return e
