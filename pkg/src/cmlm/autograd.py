"""Dense tensors on numpy with a reverse-mode gradient tape.

Two precisions are supported: float32 for training, float64 for gradient
audits. Ops never change dtype; mixing dtypes in one op is an error.
Recording happens only inside a ``with Tape():`` block and only for ops
that touch at least one ``requires_grad`` tensor.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; message carries both shapes."""


class Tensor:
    """A shaped float array, optionally tracked for gradients.

    ``grad`` is populated by ``Tape.backward`` and accumulated across calls;
    set it to None to zero it.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def tensor(data, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward):
        self.out = out
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; execution order is a topological order.

    Backward walks the record once in reverse, so each node is visited
    exactly once. A tape is single-use: call ``backward`` once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1]._nodes.append(_Node(out, backward))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be 1-D and broadcast along the trailing axis."""
    _check_same_dtype(a, b, "add")
    trailing = b.data.ndim == 1 and a.data.ndim > 1 and a.shape[-1] == b.shape[0]
    if not trailing and a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g)
        if trailing:
            _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        else:
            _accum(b, g)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))

    def backward(g):
        _accum(a, g * np.asarray(c, dtype=a.dtype))

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; inputs are >=2-D with identical batch prefixes."""
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _record(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def backward(g):
        _accum(a, g * out.data)

    return _record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward(g):
        _accum(a, g / a.data)

    return _record(out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(out, (a,), backward)


# tanh-approximation constants, fixed so tests are reproducible
_GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        _accum(a, g * local)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype(a, gain, "layer_norm")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {a.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = (a.data - mu) * istd
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        gg = g * gain.data
        dx = istd * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        _accum(a, dx)

    return _record(out, (a, gain, bias), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scales by 1/keep at train time, identity at eval.

    Eval mode consumes no rng draws.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    factor = keep / np.asarray(1.0 - rate, dtype=a.dtype)
    out = Tensor(a.data * factor)

    def backward(g):
        _accum(a, g * factor)

    return _record(out, (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _record(out, (table,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along the first axis."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _record(out, (a,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-softmax picked at the target ids.

    logits: [R, V]; targets: [R] integer ids; returns [R].
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy wants [rows, vocab] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = np.arange(x.shape[0])
    out = Tensor(lse - x[rows, t])

    def backward(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, t] -= 1.0
        _accum(logits, p * g[:, None])

    return _record(out, (logits,), backward)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale rows to unit Euclidean norm along the last axis; zero rows are an error."""
    norms = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    if np.any(norms < 1e-12):
        raise ValueError("l2_normalize: zero-norm slice")
    y = a.data / norms
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, (g - y * dot) / norms)

    return _record(out, (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient upstream."""
    return Tensor(a.data, requires_grad=False)


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))

    def backward(g):
        _accum(a, np.full_like(a.data, g / a.size))

    return _record(out, (a,), backward)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

        def backward(g):
            _accum(a, np.full_like(a.data, g))

        return _record(out, (a,), backward)

    out = Tensor(a.data.sum(axis=axis))

    def backward_axis(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _record(out, (a,), backward_axis)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _record(out, tuple(parts), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _record(out, (a,), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


# ---------------------------------------------------------------------------
# finite-difference audit


def finite_diff_check(f, params: list[Tensor], step: float = 1e-5) -> float:
    """Compare tape gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic (dropout off or seed-frozen) and return a
    scalar Tensor. Returns the max relative error, where relative error is
    |a-b| / max(|a|, |b|, 1e-8). Raises on non-finite values or step <= 0.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in finite_diff_check")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(params).item()
            flat[i] = orig - step
            f_minus = f(params).item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError("non-finite perturbation value in finite_diff_check")
            fd = (f_plus - f_minus) / (2.0 * step)
            an_i = float(an.reshape(-1)[i])
            rel = abs(fd - an_i) / max(abs(fd), abs(an_i), 1e-8)
            if rel > worst:
                worst = rel
    return worst
