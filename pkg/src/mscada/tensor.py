"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a tape of parent links recorded during the forward pass and
freed after ``backward``. Everything runs in 64-bit so that finite-difference
gradient checks are trustworthy.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

IGNORE_LABEL = 255

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class InvalidLabelError(ValueError):
    """Raised when a label map contains an out-of-range class index."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher passes, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _needs_tape(self) -> bool:
        return self.requires_grad or self._backward is not None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, free: bool = True) -> None:
        """Reverse-accumulate gradients from this scalar through the tape.

        Visits each node exactly once in reverse topological order; when
        ``free`` the tape links are dropped afterwards so activations can be
        reclaimed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if parent._needs_tape():
                        acc = grads.get(id(parent))
                        if acc is None:
                            # Own the buffer: closures may hand back views of
                            # g or g itself, which must not be mutated by a
                            # later in-place accumulation.
                            if pg is g or pg.base is not None or not pg.flags.writeable:
                                pg = pg.copy()
                            grads[id(parent)] = pg
                        else:
                            acc += pg
        if free:
            for node in topo:
                node._parents = ()
                node._backward = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], list] | None) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and backward is not None and any(p._needs_tape() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise suite -----------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b_arr = np.asarray(b, dtype=np.float64)
        out = a.data + b_arr

        def bwd(g):
            return [(a, _unbroadcast(g, a.shape))]

        return _make(out, (a,), bwd)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b_arr = np.asarray(b, dtype=np.float64)
        out = a.data * b_arr

        def bwd(g):
            return [(a, _unbroadcast(g * b_arr, a.shape))]

        return _make(out, (a,), bwd)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _make(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        return [(x, g * mask)]

    return _make(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return list(zip(tensors, parts))

    return _make(out, tensors, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return [(x, g.reshape(x.shape))]

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        return [(x, np.transpose(g, inv))]

    return _make(out, (x,), bwd)


def slice_(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return [(x, full)]

    return _make(np.ascontiguousarray(out), (x,), bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(gg, x.shape).copy())]

    return _make(out, (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            return [(x, np.broadcast_to(g / denom, x.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(gg / denom, x.shape).copy())]

    return _make(out, (x,), bwd)


def reduce_max_with_index(x: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Max and argmax along ``axis``; ties resolve to the lower index."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return [(x, full)]

    return _make(out, (x,), bwd), idx


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _make(out, (a, b), bwd)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 same-padding cross-correlation via im2col + matmul.

    x: (B, C, H, W); w: (F, C, kh, kw) with odd kh == kw. The spatial size is
    preserved, which keeps labels aligned with logits everywhere downstream.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d operands, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {w.shape}")
    pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((B, C, kh, kw, H, W), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + H, v:v + W]
    x2d = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * H * W, C * kh * kw)
    wmat = w.data.reshape(F, C * kh * kw)
    y2d = x2d @ wmat.T
    out = np.ascontiguousarray(y2d.reshape(B, H, W, F).transpose(0, 3, 1, 2))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (F,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {F} filters")
        out = out + bias.data[None, :, None, None]

    def bwd(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        dw = (g2d.T @ x2d).reshape(w.shape)
        dcols = (g2d @ wmat).reshape(B, H, W, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u:u + H, v:v + W] += dcols[:, :, u, v]
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        grads = [(x, dx), (w, dw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bwd)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(x, out * (g - dot))]

    return _make(out, (x,), bwd)


def log_softmax_data(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def masked_weighted_cross_entropy(logits: Tensor, labels: np.ndarray,
                                  weights) -> Tensor:
    """Mean over non-ignored pixels of weight * (-log softmax(logits)[label]).

    logits: (B, C, H, W); labels: (B, H, W) integer class indices with
    IGNORE_LABEL marking pixels excluded from the loss; weights: (B, H, W)
    per-pixel factors treated as constants. Ignored pixels contribute neither
    to the value nor to the gradient.
    """
    logits = as_tensor(logits)
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: logits must be 4-d, got {logits.shape}")
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidLabelError(f"labels must be integers, got dtype {labels.dtype}")
    B, C, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}")
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if w.shape != (B, H, W):
        raise ShapeError(f"cross_entropy: weights shape {w.shape} does not match labels {labels.shape}")
    valid = labels != IGNORE_LABEL
    bad = valid & ((labels < 0) | (labels >= C))
    if bad.any():
        raise InvalidLabelError(
            f"label value {int(labels[bad].flat[0])} outside [0, {C}) and not {IGNORE_LABEL}")
    n_valid = int(valid.sum())
    safe = np.where(valid, labels, 0)
    lsm = log_softmax_data(logits.data, axis=1)
    nll = -np.take_along_axis(lsm, safe[:, None], axis=1)[:, 0]
    total = float((w * nll * valid).sum())
    out = np.array(total / n_valid) if n_valid else np.array(0.0)

    def bwd(g):
        if n_valid == 0:
            return [(logits, np.zeros_like(logits.data))]
        probs = np.exp(lsm)
        onehot = np.zeros_like(logits.data)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        scale = (g * w * valid / n_valid)[:, None]
        return [(logits, scale * (probs - onehot))]

    return _make(out, (logits,), bwd)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor,
                   h: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    The denominator is floored at 1e-8 so near-zero entries do not blow up
    the ratio. ``f`` must return a scalar Tensor.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    x = as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if y.data.size != 1:
        raise ValueError(f"gradient_check requires scalar f, got shape {y.shape}")
    y.backward()
    g_auto = probe.grad.copy() if probe.grad is not None else np.zeros_like(x.data)
    g_num = np.zeros_like(x.data)
    flat = x.data.copy().reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(flat.reshape(x.shape))).data.item()
            flat[i] = orig - h
            fm = f(Tensor(flat.reshape(x.shape))).data.item()
            flat[i] = orig
            g_num.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(g_auto), np.abs(g_num)), 1e-8)
    return float((np.abs(g_auto - g_num) / denom).max())
