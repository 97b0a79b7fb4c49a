"""Encoder, self-attention layer, extractor and the two-path classifier.

The encoder output is a feature map ``f`` of shape ``[B, w, h, d]``. The
self-attention layer flattens the ``w*h`` positions and, for every query
position ``j``, mixes the value projections of all positions ``i``::

    A[b, j, i] = softmax_i( K(f_i) . Q(f_j) )
    f'[b, j]   = I( sum_i A[b, j, i] V(f_i) )

with ``K(f) = f W_K``, ``Q(f) = f W_Q`` and ``V``, ``I`` pointwise convs.
There is no residual path unless ``residual=True`` is requested.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Params(dict):
    """Ordered name -> Tensor mapping with cloning helpers."""

    def clone(self) -> Params:
        return Params((k, v.copy()) for k, v in self.items())

    def set_trainable(self, flag: bool) -> None:
        for t in self.values():
            t.requires_grad = flag

    def num_elements(self) -> int:
        return int(np.sum([t.size for t in self.values()]))


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n))


def _conv_out(n: int, k: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (n + 2 * pad - k) // stride + 1


@dataclass
class EncoderParams:
    """P_R: two stride-2 3x3 convolutions with bias and relu."""

    input_shape: tuple[int, int, int]
    params: Params
    trainable: bool = True

    @classmethod
    def init(cls, rng, input_shape=(16, 16, 1), channels=(8, 16)) -> EncoderParams:
        c_in = input_shape[2]
        c1, d = channels
        p = Params()
        p["conv1.w"] = _kaiming_uniform(rng, (3, 3, c_in, c1), 9 * c_in)
        p["conv1.b"] = _zeros(c1)
        p["conv2.w"] = _kaiming_uniform(rng, (3, 3, c1, d), 9 * c1)
        p["conv2.b"] = _zeros(d)
        enc = cls(tuple(input_shape), p)
        w, h, _ = enc.output_shape
        if w * h < 2:
            raise ShapeError(f"input {input_shape} yields a {w}x{h} map; attention needs >= 2 positions")
        enc.set_trainable(True)
        return enc

    @property
    def output_shape(self) -> tuple[int, int, int]:
        H, W, _ = self.input_shape
        d = self.params["conv2.w"].shape[3]
        return _conv_out(_conv_out(H)), _conv_out(_conv_out(W)), d

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.params.set_trainable(flag)


@dataclass
class SAParams:
    params: Params
    residual: bool = False
    trainable: bool = True

    @classmethod
    def init(cls, rng, d: int, residual: bool = False) -> SAParams:
        dk = max(1, d // 8)
        p = Params()
        p["w_k"] = _kaiming_uniform(rng, (d, dk), d)
        p["w_q"] = _kaiming_uniform(rng, (d, dk), d)
        p["v.w"] = _kaiming_uniform(rng, (d, d), d)
        p["v.b"] = _zeros(d)
        p["i.w"] = _kaiming_uniform(rng, (d, d), d)
        p["i.b"] = _zeros(d)
        sa = cls(p, residual)
        sa.set_trainable(True)
        return sa

    @property
    def d(self) -> int:
        return self.params["w_k"].shape[0]

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.params.set_trainable(flag)


@dataclass
class ExtractorParams:
    """P_E: identity by default, optionally a trainable pointwise conv."""

    kind: str = "identity"
    params: Params = field(default_factory=Params)

    @classmethod
    def init(cls, rng, d: int, kind: str = "identity") -> ExtractorParams:
        if kind == "identity":
            return cls("identity")
        if kind != "conv1x1":
            raise ValueError(f"unknown extractor kind {kind!r}")
        p = Params()
        p["w"] = _kaiming_uniform(rng, (d, d), d)
        p["b"] = _zeros(d)
        p.set_trainable(True)
        return cls(kind, p)

    @property
    def trainable(self) -> bool:
        return bool(self.params)

    def clone(self) -> ExtractorParams:
        return ExtractorParams(self.kind, self.params.clone())


@dataclass
class ModelState:
    """M = {F_R, F_E, C}. F_R and F_E share a shape; C is shared by both paths."""

    params: Params

    @classmethod
    def init(cls, rng, feature_dim: int, hidden: int = 64, num_classes: int = 10) -> ModelState:
        p = Params()
        p["f_r.w"] = _kaiming_uniform(rng, (feature_dim, hidden), feature_dim)
        p["f_r.b"] = _zeros(hidden)
        p["f_e.w"] = _kaiming_uniform(rng, (feature_dim, hidden), feature_dim)
        p["f_e.b"] = _zeros(hidden)
        p["c.w"] = _kaiming_uniform(rng, (hidden, num_classes), hidden)
        p["c.b"] = _zeros(num_classes)
        p.set_trainable(True)
        return cls(p)

    @property
    def num_classes(self) -> int:
        return self.params["c.w"].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.params["f_r.w"].shape[0]

    def clone(self) -> ModelState:
        return ModelState(self.params.clone())


# --------------------------------------------------------------------------
# Forward passes


def encode(p_r: EncoderParams, images) -> Tensor:
    x = T.as_tensor(images)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != tuple(p_r.input_shape):
        raise ShapeError(f"encoder expects [B, {', '.join(map(str, p_r.input_shape))}] images, got {x.shape}")
    p = p_r.params
    h = T.relu(T.bias_add(T.conv2d(x, p["conv1.w"], stride=2, padding=1), p["conv1.b"]))
    return T.relu(T.bias_add(T.conv2d(h, p["conv2.w"], stride=2, padding=1), p["conv2.b"]))


def _check_feature_map(f: Tensor, d: int) -> tuple[int, int, int, int]:
    if f.data.ndim != 4:
        raise ShapeError(f"feature map must be [B, w, h, d], got {f.shape}")
    B, w, h, c = f.shape
    if c != d:
        raise ShapeError(f"feature map has {c} channels, attention layer expects {d}")
    if w * h < 2:
        raise ShapeError("attention needs at least two spatial positions")
    return B, w, h, c


def attention_map(sa: SAParams, f: Tensor) -> Tensor:
    """``A[b, j, i]``: each query row ``j`` is a distribution over keys ``i``."""
    f = T.as_tensor(f)
    B, w, h, d = _check_feature_map(f, sa.d)
    flat = T.reshape(f, (B, w * h, d))
    k = T.matmul(flat, sa.params["w_k"])
    q = T.matmul(flat, sa.params["w_q"])
    return T.softmax(T.matmul(q, T.transpose(k)), axis=-1)


def self_attention(sa: SAParams, f) -> Tensor:
    f = T.as_tensor(f)
    B, w, h, d = _check_feature_map(f, sa.d)
    p = sa.params
    a = attention_map(sa, f)
    v = T.bias_add(T.conv1x1(T.reshape(f, (B, w * h, d)), p["v.w"]), p["v.b"])
    out = T.bias_add(T.conv1x1(T.matmul(a, v), p["i.w"]), p["i.b"])
    out = T.reshape(out, (B, w, h, d))
    if sa.residual:
        out = T.add(out, f)
    return out


def _check_path_input(m: ModelState, x: Tensor) -> None:
    if x.data.ndim != 4 or int(np.prod(x.shape[1:])) != m.feature_dim:
        raise ShapeError(f"classifier expects [B, w, h, d] with w*h*d = {m.feature_dim}, got {x.shape}")


def _head(m: ModelState, x: Tensor, branch: str) -> Tensor:
    p = m.params
    hidden = T.relu(T.bias_add(T.matmul(T.flatten(x), p[f"{branch}.w"]), p[f"{branch}.b"]))
    return T.bias_add(T.matmul(hidden, p["c.w"]), p["c.b"])


def classify_r_path(m: ModelState, f_prime) -> Tensor:
    """flatten(f') -> F_R -> C."""
    f_prime = T.as_tensor(f_prime)
    _check_path_input(m, f_prime)
    return _head(m, f_prime, "f_r")


def extract(p_e: ExtractorParams, e: Tensor) -> Tensor:
    if p_e.kind == "identity":
        return e
    return T.bias_add(T.conv1x1(e, p_e.params["w"]), p_e.params["b"])


def classify_e_path(m: ModelState, p_e: ExtractorParams, e) -> Tensor:
    """P_E(e) -> flatten -> F_E -> C."""
    e = T.as_tensor(e)
    _check_path_input(m, e)
    return _head(m, extract(p_e, e), "f_e")


def r_path_logits(m: ModelState, p_r: EncoderParams, sa: SAParams, images) -> Tensor:
    """Inference path: an image goes through P_R, SA, F_R and C."""
    return classify_r_path(m, self_attention(sa, encode(p_r, images)))


# --------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"SBXM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def named_parameters(p_r=None, sa=None, p_e=None, m=None) -> Iterator[tuple[str, Tensor]]:
    for prefix, holder in (("p_r", p_r), ("sa", sa), ("p_e", p_e), ("m", m)):
        if holder is None:
            continue
        for name, t in holder.params.items():
            yield f"{prefix}.{name}", t


def save_checkpoint(path, named: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``SBXM`` | u32 version | u32 count | entries.

    Each entry is ``u32 name_len, name (utf-8), u32 ndim, u32 dims...,
    float32 data`` with every integer and float little-endian.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named))]
    for name, t in named.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()

    def take(offset: int, n: int) -> bytes:
        if offset + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at offset {offset}")
        return buf[offset:offset + n]

    if take(0, 4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(4, 8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(pos, 4))
        name = take(pos + 4, n).decode("utf-8")
        pos += 4 + n
        (ndim,) = struct.unpack("<I", take(pos, 4))
        shape = struct.unpack(f"<{ndim}I", take(pos + 4, 4 * ndim))
        pos += 4 + 4 * ndim
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(pos, nbytes), dtype="<f4").reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return out


def restore(named: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into existing parameter tensors, checking names and shapes."""
    if set(named) != set(arrays):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for name, t in named.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {t.shape}")
        t.data = arrays[name].astype(t.data.dtype)
