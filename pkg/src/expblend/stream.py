"""Datasets, the i-Blurry-n-m task splitter, and the SBDS binary format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"SBDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIQHHHH")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C] float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, H, W, C], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class TaskStream:
    tasks: list[list[tuple[np.ndarray, np.ndarray]]]
    task_indices: list[np.ndarray]  # dataset row of every sample, in stream order
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def task_classes(self, t: int) -> list[int]:
        return sorted({int(y) for _, labels in self.tasks[t] for y in labels})


def _batches(d: Dataset, idx: np.ndarray, batch_size: int):
    return [(d.images[idx[s:s + batch_size]], d.labels[idx[s:s + batch_size]]) for s in range(0, len(idx), batch_size)]


def iblurry_split(d: Dataset, T: int, n: int, m: int, batch_size: int, seed: int) -> TaskStream:
    """Split ``d`` into ``T`` tasks with ``n``% disjoint classes and blurry level ``m``.

    Disjoint classes are dealt round-robin over the tasks after a seeded
    shuffle. Every other class draws a major task uniformly; floor((100-m)%)
    of its samples go there and the rest are dealt round-robin over the other
    tasks, starting from a seeded offset, so off-task shares differ by at most
    one sample.
    """
    if T < 1:
        raise ValueError("need at least one task")
    if not (0 <= n <= 100 and 0 <= m <= 100):
        raise ValueError("n and m are percentages in [0, 100]")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    K = d.num_classes
    num_disjoint = (n * K) // 100
    if n > 0 and T > 1 and T > num_disjoint:
        raise ValueError(f"{T} tasks but only {num_disjoint} disjoint classes")

    rng = np.random.default_rng(seed)
    classes = rng.permutation(K)
    disjoint = classes[:num_disjoint]
    blurry = np.sort(classes[num_disjoint:])

    per_task: list[list[np.ndarray]] = [[] for _ in range(T)]
    disjoint_task: dict[int, int] = {}
    major_task: dict[int, int] = {}
    shares: dict[int, list[int]] = {}
    for k, c in enumerate(disjoint):
        disjoint_task[int(c)] = k % T
        per_task[k % T].append(np.flatnonzero(d.labels == c))
    for c in blurry:
        idx = rng.permutation(np.flatnonzero(d.labels == c))
        major = int(rng.integers(T))
        major_task[int(c)] = major
        if T == 1:
            per_task[0].append(idx)
            shares[int(c)] = [len(idx)]
            continue
        keep = ((100 - m) * len(idx)) // 100
        per_task[major].append(idx[:keep])
        others = [t for t in range(T) if t != major]
        start = int(rng.integers(len(others)))
        rest = idx[keep:]
        owner = [others[(start + r) % len(others)] for r in range(len(rest))]
        counts = [0] * T
        counts[major] = keep
        for t in others:
            sel = rest[[o == t for o in owner]] if len(rest) else rest
            per_task[t].append(sel)
            counts[t] = len(sel)
        shares[int(c)] = counts

    tasks, task_indices = [], []
    for t in range(T):
        idx = np.concatenate(per_task[t]) if per_task[t] else np.zeros(0, dtype=np.int64)
        idx = rng.permutation(idx)
        task_indices.append(idx)
        tasks.append(_batches(d, idx, batch_size))

    metadata = {
        "tasks": T,
        "n": n,
        "m": m,
        "batch_size": batch_size,
        "seed": seed,
        "disjoint_classes": {str(c): t for c, t in sorted(disjoint_task.items())},
        "blurry_major_task": {str(c): t for c, t in sorted(major_task.items())},
        "blurry_shares": {str(c): s for c, s in sorted(shares.items())},
        "task_sizes": [int(len(i)) for i in task_indices],
    }
    return TaskStream(tasks, task_indices, metadata)


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 1000
    height: int = 16
    width: int = 16
    channels: int = 1
    noise_std: float = 0.1

    def __post_init__(self):
        for name in ("num_classes", "samples_per_class", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free image of every class: a Gaussian bump plus an oriented grating.

    Bump centres sit on distinct cells of a ceil(sqrt(K))-square grid and the
    grating angle is ``pi * k / K``, so no two classes share either.
    """
    K, H, W, C = spec.num_classes, spec.height, spec.width, spec.channels
    side = math.ceil(math.sqrt(K))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sigma = 0.6 * min(H, W) / side
    freq = 2 * np.pi / max(4.0, min(H, W) / 3)
    protos = np.empty((K, H, W, C))
    for k in range(K):
        cy = (k // side + 0.5) * H / side
        cx = (k % side + 0.5) * W / side
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        theta = np.pi * k / K
        for ch in range(C):
            grating = np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + ch * np.pi / 3)
            protos[k, :, :, ch] = bump + 0.5 * grating
    return protos


_SPLIT_STREAM = {"train": 0, "test": 1}


def gen_synthetic(spec: SyntheticSpec, seed: int, split: str = "train", samples_per_class: int | None = None) -> Dataset:
    """Class-conditional procedural images with i.i.d. N(0, noise_std) pixel noise.

    Train and test draw from independent streams of the same seed.
    """
    if split not in _SPLIT_STREAM:
        raise ValueError(f"split must be one of {sorted(_SPLIT_STREAM)}")
    per_class = samples_per_class or spec.samples_per_class
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    protos = class_prototypes(spec)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    images = protos[labels] + rng.normal(0.0, spec.noise_std, size=(len(labels),) + protos.shape[1:]) if spec.noise_std else protos[labels]
    return Dataset(images.astype(np.float32), labels, spec.num_classes, split)


def store_dataset(d: Dataset, path) -> None:
    """``SBDS`` | u32 version | u64 N | u16 H, W, C, num_classes | float32 images | u16 labels."""
    N, H, W, C = d.images.shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, N, H, W, C, d.num_classes)
    body = np.ascontiguousarray(d.images, dtype="<f4").tobytes()
    Path(path).write_bytes(head + body + np.asarray(d.labels, dtype="<u2").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(buf)} bytes, need {_HEADER.size} (offset 0)")
    magic, version, N, H, W, C, K = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset 4")
    img_bytes = 4 * N * H * W * C
    expected = _HEADER.size + img_bytes + 2 * N
    if len(buf) < expected:
        raise DatasetFormatError(f"truncated body: file ends at offset {len(buf)}, expected {expected}")
    if len(buf) > expected:
        raise DatasetFormatError(f"trailing bytes after offset {expected}")
    images = np.frombuffer(buf, dtype="<f4", count=N * H * W * C, offset=_HEADER.size).reshape(N, H, W, C)
    labels = np.frombuffer(buf, dtype="<u2", count=N, offset=_HEADER.size + img_bytes).astype(np.int64)
    bad = np.flatnonzero(labels >= K)
    if len(bad):
        off = _HEADER.size + img_bytes + 2 * int(bad[0])
        raise DatasetFormatError(f"label {labels[bad[0]]} >= num_classes {K} at offset {off}")
    return Dataset(images.astype(np.float32), labels, K, split)
