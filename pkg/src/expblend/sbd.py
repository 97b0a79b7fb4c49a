"""Synthetic boundary data: attention-refined features plus batch-wise Laplace noise."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nets import EncoderParams, SAParams, encode, self_attention


@dataclass
class NoiseConfig:
    lam: float = 0.005
    rng_seed: int = 0
    per_channel: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass
class SBDBatch:
    features: np.ndarray  # [B, w, h, d], float32, never on a tape
    labels: np.ndarray
    task_id: int
    epoch_tag: int = 0

    def __post_init__(self):
        if self.features.shape[0] != len(self.labels):
            raise ValueError("features and labels disagree on batch size")
        if not np.all(np.isfinite(self.features)):
            raise T.NonFiniteError("SBD features must be finite")

    def __len__(self) -> int:
        return len(self.labels)


def laplace_scale(f_prime, lam: float, batch_size: int, per_channel: bool = False):
    """(max(f') - min(f')) / (lam * batch_size).

    The range is taken over the whole batch tensor. With ``per_channel`` the
    range is computed separately for each channel and an array of scales is
    returned instead of a float.
    """
    arr = f_prime.data if isinstance(f_prime, T.Tensor) else np.asarray(f_prime)
    if arr.size == 0:
        raise ValueError("cannot take the range of an empty tensor")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if per_channel:
        axes = tuple(range(arr.ndim - 1))
        spread = arr.max(axis=axes).astype(np.float64) - arr.min(axis=axes).astype(np.float64)
        return spread / lam / batch_size
    return (float(arr.max()) - float(arr.min())) / lam / batch_size


def sample_laplace(rng: np.random.Generator, scale, shape) -> np.ndarray:
    """I.i.d. Laplace(0, scale) draws by inverse CDF.

    ``u ~ U(-1/2, 1/2)`` and ``x = -scale * sign(u) * ln(1 - 2|u|)``; the
    single value ``u = -1/2`` (where the log diverges) is redrawn.
    ``scale`` may be a float or an array broadcastable to ``shape``.
    """
    scale_arr = np.asarray(scale, dtype=np.float64)
    if np.any(scale_arr < 0):
        raise ValueError("Laplace scale must be non-negative")
    u = rng.random(shape) - 0.5
    bad = u == -0.5
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum())) - 0.5
        bad = u == -0.5
    x = -scale_arr * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return np.asarray(x, dtype=T.default_dtype()) + 0.0  # folds -0.0 from zero scale


def refine(p_r: EncoderParams, sa: SAParams, images) -> np.ndarray:
    """f' = SA(P_R(images)), computed off the tape."""
    with T.no_grad():
        return self_attention(sa, encode(p_r, images)).data


def generate_sbd(
    p_r: EncoderParams,
    sa: SAParams,
    images,
    labels,
    cfg: NoiseConfig,
    rng: np.random.Generator | None = None,
    task_id: int = 0,
    epoch_tag: int = 0,
) -> SBDBatch:
    """E = f' + Lap(0, laplace_scale(f')) for one batch.

    ``rng`` defaults to a fresh generator seeded from ``cfg.rng_seed``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot generate SBD for an empty batch")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    f_prime = refine(p_r, sa, images)
    b = laplace_scale(f_prime, cfg.lam, len(labels), cfg.per_channel)
    noise = sample_laplace(rng, b, f_prime.shape)
    return SBDBatch((f_prime + noise).astype(np.float32), labels.copy(), task_id, epoch_tag)


# --------------------------------------------------------------------------
# SBXE store

SBD_MAGIC = b"SBXE"
SBD_VERSION = 1


class SBDFormatError(ValueError):
    pass


def save_sbd(path, features: np.ndarray, labels, task_ids) -> None:
    """``SBXE`` | u32 version | u64 count | per entry: u32 task, u16 label,
    u16x4 shape, float32 data. Per-sample features ``[w, h, d]`` are stored
    with a leading unit dimension."""
    features = np.asarray(features)
    n = features.shape[0]
    shape = (1,) + tuple(features.shape[1:])
    if len(shape) != 4:
        raise SBDFormatError("entries must be [w, h, d] feature maps")
    head = struct.pack("<4H", *shape)
    chunks = [SBD_MAGIC, struct.pack("<IQ", SBD_VERSION, n)]
    for k in range(n):
        chunks.append(struct.pack("<IH", int(task_ids[k]), int(labels[k])) + head)
        chunks.append(np.ascontiguousarray(features[k], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_sbd(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(features, labels, task_ids)``."""
    buf = Path(path).read_bytes()

    def take(offset: int, n: int) -> bytes:
        if offset + n > len(buf):
            raise SBDFormatError(f"truncated SBD store at offset {offset}")
        return buf[offset:offset + n]

    if take(0, 4) != SBD_MAGIC:
        raise SBDFormatError("bad magic at offset 0")
    version, n = struct.unpack("<IQ", take(4, 12))
    if version != SBD_VERSION:
        raise SBDFormatError(f"unsupported SBD store version {version} at offset 4")
    pos = 16
    feats, labels, tasks = [], [], []
    for _ in range(n):
        task, label, *shape = struct.unpack("<IH4H", take(pos, 14))
        pos += 14
        nbytes = 4 * int(np.prod(shape))
        feats.append(np.frombuffer(take(pos, nbytes), dtype="<f4").reshape(shape[1:]))
        labels.append(label)
        tasks.append(task)
        pos += nbytes
    if pos != len(buf):
        raise SBDFormatError(f"trailing bytes after offset {pos}")
    if not feats:
        return np.zeros((0,), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64)
    return (
        np.stack(feats).astype(np.float32),
        np.array(labels, dtype=np.int64),
        np.array(tasks, dtype=np.int64),
    )
