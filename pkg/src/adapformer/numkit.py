"""Dense float64 tensors with reverse-mode autodiff and Adam.

Every op accepts arbitrary leading batch axes; the trailing axes carry the
per-sample shapes used by the model (tokens N x D, matrices N x N, ...).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """An op received NaN or infinite input where that cannot be recovered."""


class _Mode:
    training = True
    grad_enabled = True


_mode = _Mode()


def set_training(flag: bool) -> None:
    """Global train/eval switch; dropout is active only while training."""
    _mode.training = bool(flag)


def is_training() -> bool:
    return _mode.training


@contextlib.contextmanager
def evaluation():
    prev = _mode.training
    _mode.training = False
    try:
        yield
    finally:
        _mode.training = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph recording (forward values are unchanged)."""
    prev = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    if _mode.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, 2.0 * g * a.data)

    return _make(a.data * a.data, (a,), backward, "square")


def abs_(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward, "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when rate is 0."""
    a = as_tensor(a)
    if not _mode.training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep) / keep

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward, "dropout")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        p, n = b.shape
        a2 = a.data.reshape(-1, p)

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                _accum(b, a2.T @ g2)

        return _make((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), backward, "matmul")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without implicit output or repeated subscripts.

    Every subscript of an operand must also appear in the other operand or in
    the output, which makes each gradient another einsum.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated subscript in {s!r}")
        missing = set(s) - set(other) - set(out_sub)
        if missing:
            raise ValueError(f"einsum: subscripts {sorted(missing)} are summed within one operand")
    data = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True))

    return _make(data, (a, b), backward, "einsum")


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError("transpose needs at least 2 axes")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.data.shape

    def backward(g):
        _accum(a, g.reshape(src))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def flatten(a, start: int = 0) -> Tensor:
    """Collapse axes ``start..`` into one."""
    a = as_tensor(a)
    start = start % max(a.ndim, 1)
    return reshape(a, a.shape[:start] + (-1,))


def gather_rows(a, index) -> Tensor:
    """``out[..., i, j, :] = a[..., index[..., i, j], :]``.

    ``a`` is (*batch, N, D) and ``index`` is an integer array (*batch, M, k).
    The backward pass scatter-adds into the selected rows only.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    batch = a.shape[:-2]
    if index.shape[:-2] != batch:
        raise ValueError(f"gather_rows: batch shape {index.shape[:-2]} != {batch}")
    n, d = a.shape[-2:]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError("gather_rows: index out of range")
    nb = int(np.prod(batch, dtype=np.intp))
    flat_a = a.data.reshape(nb, n, d)
    flat_i = index.reshape(nb, -1)
    rows = np.arange(nb)[:, None]
    data = flat_a[rows, flat_i].reshape(index.shape + (d,))

    def backward(g):
        ga = np.zeros((nb, n, d), dtype=DTYPE)
        np.add.at(ga, (rows, flat_i), g.reshape(nb, -1, d))
        _accum(a, ga.reshape(a.data.shape))

    return _make(data, (a,), backward, "gather_rows")


def take(a, j: int) -> Tensor:
    """``a[j]`` along the leading axis."""
    a = as_tensor(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[j] = g
        _accum(a, ga)

    return _make(a.data[j], (a,), backward, "take")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- fused row ops

def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax_rows: non-finite input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (a,), backward, "softmax")


def standardize_rows(a, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit population-std along the last axis; std floored at eps."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    floored = sigma < eps
    s = np.where(floored, eps, sigma)
    y = xc / s

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        # floored rows divide by a constant, so the std term drops out
        gy = np.where(floored, 0.0, (g * y).mean(axis=-1, keepdims=True))
        _accum(a, (g - gm - y * gy) / s)

    return _make(y, (a,), backward, "standardize")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Backpropagate a scalar loss.

    Leaf gradients accumulate into ``.grad``. When ``params`` is given the
    gradients for exactly those tensors are returned, zero-filled for any
    parameter the loss does not reach.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _topo_order(loss)
    for node in tape:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None  # intermediate buffers are not kept
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("adam_step: params, grads and state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
