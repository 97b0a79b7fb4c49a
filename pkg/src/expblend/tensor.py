"""Dense tensors, a recording tape, and reverse-mode gradients.

Layout is row-major NHWC throughout. Arithmetic defaults to float32;
``precision(np.float64)`` switches every newly created tensor to float64,
which is what the gradient checks run under.

Usage::

    with Tape() as tape:
        loss = cross_entropy(logits_fn(x), labels)
    grads = tape.backward(loss, wrt=params)
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.dtype(np.float32)
_TAPES: list[Tape | None] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (verification mode)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def copy(self) -> Tensor:
        return Tensor._wrap(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape


class Tape:
    """Records differentiable operations while active as a context manager."""

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._consumed = False

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, inputs, output, backward_fn) -> None:
        if self._consumed:
            raise TapeError("tape was already replayed; record on a fresh tape")
        self._records.append((inputs, output, backward_fn))

    def produced(self, t: Tensor) -> bool:
        return any(out is t for _, out, _ in self._records)

    def backward(
        self, loss: Tensor, wrt: Iterable[Tensor] | None = None
    ) -> dict[Tensor, np.ndarray]:
        """Replay the tape in reverse and return gradients of ``loss``.

        ``wrt`` selects which tensors to report; tensors that the loss does
        not depend on get a zero gradient. With ``wrt=None`` every
        requires-grad leaf seen by the tape is reported.
        """
        if self._consumed:
            raise TapeError("backward already called on this tape")
        if loss.data.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.produced(loss):
            raise TapeError("loss was not produced under this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        leaves: dict[int, Tensor] = {}
        produced = {id(out) for _, out, _ in self._records}
        for inputs, out, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward_fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._records.clear()

        if wrt is None:
            wrt = leaves.values()
        out: dict[Tensor, np.ndarray] = {}
        for t in wrt:
            g = grads.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else g
        for g in out.values():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient")
        return out


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (used for inference and SBD generation)."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None):
    return tape.backward(loss, wrt)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError("non-finite input to tensor operation")


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    out = Tensor._wrap(out_data, needs and tape is not None)
    if out.requires_grad:
        tape._record(inputs, out, backward_fn)
    return out


# --------------------------------------------------------------------------
# Primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: ``[n,k] @ [k,m]``, ``[B,n,k] @ [B,k,m]`` (batched), and
    ``[...,k] @ [k,m]`` (shared right operand, e.g. a 1x1 convolution).
    """
    A, Bm = a.data, b.data
    if A.ndim < 2 or Bm.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {A.shape} and {Bm.shape}")
    if A.shape[-1] != Bm.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {A.shape} @ {Bm.shape}")
    batched = Bm.ndim == 3
    if batched and (A.ndim != 3 or A.shape[0] != Bm.shape[0]):
        raise ShapeError(f"batched matmul needs equal batch dims: {A.shape} @ {Bm.shape}")
    if Bm.ndim > 3:
        raise ShapeError(f"matmul right operand must be 2-d or 3-d, got {Bm.shape}")
    _check_finite(A, Bm)
    out = A @ Bm

    def backward_fn(g):
        if batched:
            return g @ Bm.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g
        k, m = Bm.shape
        ga = g @ Bm.T
        gb = A.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NHWC input and HWIO kernel, no bias."""
    X, W = x.data, w.data
    if X.ndim != 4 or W.ndim != 4:
        raise ShapeError(f"conv2d expects [B,H,W,C] and [kh,kw,Cin,Cout], got {X.shape}, {W.shape}")
    if X.shape[3] != W.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input {X.shape[3]}, kernel {W.shape[2]}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d stride must be >=1 and padding >=0")
    B, H, Wd, C = X.shape
    kh, kw, _, co = W.shape
    Hp, Wp = H + 2 * padding, Wd + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    _check_finite(X, W)
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if padding:
        Xp = np.zeros((B, Hp, Wp, C), dtype=X.dtype)
        Xp[:, padding:padding + H, padding:padding + Wd, :] = X
    else:
        Xp = X
    # windows: [B, Ho, Wo, C, kh, kw] -> cols [B*Ho*Wo, kh*kw*C] in (i, j, c) order
    win = sliding_window_view(Xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    W2 = W.reshape(kh * kw * C, co)
    out = (cols @ W2).reshape(B, Ho, Wo, co)

    def backward_fn(g):
        g2 = g.reshape(B * Ho * Wo, co)
        gw = (cols.T @ g2).reshape(W.shape)
        gcols = (g2 @ W2.T).reshape(B, Ho, Wo, kh, kw, C)
        gxp = np.zeros(Xp.shape, dtype=X.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + H, padding:padding + Wd, :] if padding else gxp
        return gx, gw

    return _emit(out, (x, w), backward_fn)


def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Pointwise convolution over the channel axis of ``[B,H,W,C]`` (or ``[B,N,C]``)."""
    if x.data.ndim not in (3, 4) or w.data.ndim != 2:
        raise ShapeError(f"conv1x1 expects [B,...,C] and [C,Cout], got {x.shape}, {w.shape}")
    return matmul(x, w)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the last axis."""
    X, Bv = x.data, b.data
    if Bv.ndim != 1 or X.shape[-1] != Bv.shape[0]:
        raise ShapeError(f"bias of shape {Bv.shape} does not match last axis of {X.shape}")
    _check_finite(X, Bv)
    axes = tuple(range(X.ndim - 1))

    def backward_fn(g):
        return g, g.sum(axis=axes)

    return _emit(X + Bv, (x, b), backward_fn)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum of equal-shaped tensors, or tensor plus a Python scalar."""
    if not isinstance(b, Tensor):
        A = a.data
        _check_finite(A, np.asarray(b))
        return _emit(A + b, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    _check_finite(a.data, b.data)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    A, Bv = a.data, b.data
    _check_finite(A, Bv)
    return _emit(A * Bv, (a, b), lambda g: (g * Bv, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    X = x.data
    _check_finite(X, np.asarray(c))
    return _emit(X * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    X = x.data
    _check_finite(X)
    mask = X > 0
    return _emit(np.maximum(X, 0), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    X = x.data
    shape = tuple(shape)
    try:
        out = X.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {X.shape} to {shape}") from e
    return _emit(out, (x,), lambda g: (g.reshape(X.shape),))


def flatten(x: Tensor) -> Tensor:
    """``[B, ...] -> [B, prod(...)]``."""
    if x.data.ndim < 1:
        raise ShapeError("flatten needs a leading batch axis")
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    X = x.data
    if X.ndim < 2:
        raise ShapeError(f"transpose needs >=2 dims, got {X.shape}")
    return _emit(np.swapaxes(X, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    X = x.data
    _check_finite(X)
    z = X - X.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (x,), backward_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    X = x.data
    _check_finite(X)
    return _emit(np.asarray(X.sum(), dtype=X.dtype), (x,), lambda g: (np.full(X.shape, g, dtype=X.dtype),))


def _extreme(x: Tensor, pick) -> Tensor:
    X = x.data
    if X.size == 0:
        raise ShapeError("reduction over an empty tensor")
    _check_finite(X)
    flat = int(pick(X))
    val = X.reshape(-1)[flat]

    def backward_fn(g):
        gx = np.zeros(X.size, dtype=X.dtype)
        gx[flat] = g
        return (gx.reshape(X.shape),)

    return _emit(np.asarray(val, dtype=X.dtype), (x,), backward_fn)


def max(x: Tensor) -> Tensor:  # noqa: A001
    """Global maximum; the gradient goes to the first maximising element."""
    return _extreme(x, np.argmax)


def min(x: Tensor) -> Tensor:  # noqa: A001
    return _extreme(x, np.argmin)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise ShapeError(f"{y.shape[0]} labels for a batch of {batch}")
    if batch < 1:
        raise ShapeError("cross_entropy needs at least one sample")
    if np.any(y < 0) or np.any(y >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    return y


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    Z = logits.data
    if Z.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {Z.shape}")
    B, C = Z.shape
    y = _check_labels(labels, B, C)
    _check_finite(Z)
    logp = _log_softmax(Z)
    rows = np.arange(B)
    loss = np.asarray(-logp[rows, y].mean(), dtype=Z.dtype)

    def backward_fn(g):
        p = np.exp(logp)
        p[rows, y] -= 1
        return (p * (g / B),)

    return _emit(loss, (logits,), backward_fn)


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Unreduced cross-entropy on raw logits; not differentiable."""
    Z = np.asarray(logits)
    y = _check_labels(labels, Z.shape[0], Z.shape[1])
    return -_log_softmax(Z)[np.arange(Z.shape[0]), y]


# --------------------------------------------------------------------------
# Optimisation and checking


def sgd_step(params: Mapping[str, Tensor] | Iterable[Tensor], grads: Mapping[Tensor, np.ndarray], lr: float):
    """In-place ``p <- p - lr * g`` for every parameter; returns ``params``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    missing = [t for t in tensors if t not in grads]
    if missing:
        raise KeyError(f"no gradient for {len(missing)} parameter(s), first {missing[0]!r}")
    for p in tensors:
        g = grads[p]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p.data = p.data - lr * g
    return params


def finite_diff(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` is perturbed in place one element at a time and restored afterwards.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")

    def value() -> float:
        with no_grad():
            out = f(x)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    if not x.data.flags.c_contiguous:
        x.data = x.data.copy()
    flat = x.data.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value()
        flat[i] = orig - eps
        lo = value()
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return Tensor(grad.reshape(x.shape), dtype=x.data.dtype)
