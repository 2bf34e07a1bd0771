"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs is traced (a parameter, or the output of a recorded op).
Outside a tape every op is a plain numpy computation.

Reductions over attention axes (softmax normalisers and attention-weighted
sums) accumulate strictly left to right, so appending masked positions to a
sequence never changes the result bit-for-bit.
"""
from __future__ import annotations

import numbers
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's domain."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Gradients(dict):
    """Gradient arrays keyed by tensor identity."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return dict.__getitem__(self, id(t))

    def get(self, t: Tensor, default=None):
        return dict.get(self, id(t), default)

    def __contains__(self, t) -> bool:
        return dict.__contains__(self, id(t))

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient of ``t``, zeros when the loss does not depend on it."""
        g = dict.get(self, id(t))
        return np.zeros_like(t.data) if g is None else g


_active: list["Tape"] = []


class Tape:
    """Ordered record of traced operations.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, which is already a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._traced: set[int] = set()

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def is_traced(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._traced

    def record(self, inputs, output: Tensor, backward) -> None:
        self.nodes.append(_Node(inputs, output, backward))
        self._traced.add(id(output))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.is_traced(loss):
            raise ContractError("loss was not produced on this tape")
        grads = Gradients()
        dict.__setitem__(grads, id(loss), np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = dict.get(grads, id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self.is_traced(t):
                    continue
                key = id(t)
                prev = dict.get(grads, key)
                # never accumulate in place: backward rules may return views
                dict.__setitem__(grads, key, gi if prev is None else prev + gi)
        return grads


def _tape_for(*inputs: Tensor) -> Tape | None:
    if not _active:
        return None
    tape = _active[-1]
    for t in inputs:
        if tape.is_traced(t):
            return tape
    return None


def _op(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _tape_for(*inputs)
    if tape is not None:
        out.requires_grad = False
        tape.record(tuple(inputs), out, backward)
    return out


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes when ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if bd.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _op((a, b), ad @ bd, backward)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is out x in.

    Single-output maps reduce with an elementwise product and a row-wise sum,
    which keeps each row's result independent of how many rows are stacked.
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    xd, Wd = x.data, W.data
    if Wd.shape[0] == 1:
        out = np.sum(xd * Wd[0], axis=-1, keepdims=True)
    else:
        out = xd @ Wd.T
    inputs: tuple = (x, W)
    if b is not None:
        if b.shape != (Wd.shape[0],):
            raise DimensionError(f"bias shape {b.shape} does not match W {W.shape}")
        out = out + b.data
        inputs = (x, W, b)

    def backward(g):
        gx = g @ Wd
        gW = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _op(inputs, out, backward)


# ---------------------------------------------------------------- elementwise

def _binary_check(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b)
    sa, sb = a.shape, b.shape
    return _op((a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b)
    sa, sb = a.shape, b.shape
    return _op((a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check(a, b)
    ad, bd = a.data, b.data
    return _op(
        (a, b),
        ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _op((a,), a.data * s, lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def elementwise(kind: str, a, b) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "hadamard":
        return hadamard(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _op((x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _op((x,), y, lambda g: (g * (1.0 - y * y),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    neg_part = alpha * np.expm1(np.minimum(xd, 0.0))
    y = np.where(xd >= 0, xd, neg_part)
    dy = np.where(xd >= 0, 1.0, neg_part + alpha)
    return _op((x,), y, lambda g: (g * dy,))


def nonlinear(kind: str, x: Tensor) -> Tensor:
    fn = {"sigmoid": sigmoid, "elu": elu, "tanh": tanh}.get(kind)
    if fn is None:
        raise ValueError(f"unknown nonlinearity {kind!r}")
    return fn(x)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _op((x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise DimensionError(
                f"concat along axis {axis}: {ref.shape} and {t.shape} disagree off-axis"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _op(tensors, np.concatenate([t.data for t in tensors], axis=ax), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of {x.shape}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(idx)))
        start += n
    return out


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _op((x,), x.data[index], backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack needs equal shapes, got {shape} and {t.shape}")
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _op(tensors, np.stack([t.data for t in tensors], axis=axis), backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition."""
    x = as_tensor(x)
    y = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _op((x,), y, lambda g: (g.sum(axis=axis),))


def broadcast_mul(v: Tensor, X: Tensor) -> Tensor:
    """``v[:, None, :] * X`` for ``v`` [B x d] and ``X`` [B x N x d]."""
    v, X = as_tensor(v), as_tensor(X)
    if X.ndim != 3 or v.shape != (X.shape[0], X.shape[2]):
        raise DimensionError(f"broadcast_mul shapes {v.shape} and {X.shape} disagree")
    vd, Xd = v.data, X.data

    def backward(g):
        return np.einsum("bnd,bnd->bd", g, Xd), g * vd[:, None, :]

    return _op((v, X), vd[:, None, :] * Xd, backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _op((x,), np.sum(x.data), lambda g: (np.broadcast_to(g, shape).copy(),))
    y = np.sum(x.data, axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _op((x,), y, backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"row id out of range for table with {rows} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _op((table,), table.data[ids], backward)


# ---------------------------------------------------------------- attention

def _ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    # left-to-right accumulation: trailing zeros leave the total bitwise unchanged
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


def softmax(v: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (same shape, truthy = keep) removes positions from the
    distribution; masked entries come out exactly zero.
    """
    v = as_tensor(v)
    if v.ndim == 0 or v.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    x = v.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match {x.shape}")
        if not mask.any(axis=-1).all():
            raise DomainError("softmax row with every position masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / _ordered_sum(e, -1)[..., None]

    def backward(g):
        inner = _ordered_sum(g * y, -1)[..., None]
        return (y * (g - inner),)

    return _op((v,), y, backward)


def weighted_sum(w: Tensor, v: Tensor, ordered: bool = True) -> Tensor:
    """``sum_n w[..., n] * v[..., n, :]``.

    With ``ordered`` the sum accumulates in position order (padding-neutral);
    otherwise it is a batched matrix product.
    """
    w, v = as_tensor(w), as_tensor(v)
    if v.ndim != w.ndim + 1 or v.shape[:-1] != w.shape:
        raise DimensionError(f"weighted_sum shapes {w.shape} and {v.shape} disagree")
    wd, vd = w.data, v.data
    if ordered:
        y = _ordered_sum(wd[..., None] * vd, -2)
    else:
        y = (wd[..., None, :] @ vd)[..., 0, :]

    def backward(g):
        gw = (vd @ g[..., :, None])[..., 0]
        gv = wd[..., None] * g[..., None, :]
        return gw, gv

    return _op((w, v), y, backward)


# ---------------------------------------------------------------- losses

def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` [B x A]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shapes {logits.shape} and {targets.shape}")
    lp = log_softmax(logits.data)
    n = logits.shape[0]
    loss = -np.mean(lp[np.arange(n), targets])

    def backward(g):
        grad = np.exp(lp)
        grad[np.arange(n), targets] -= 1.0
        return (grad * (g / n),)

    return _op((logits,), np.asarray(loss), backward)


# ---------------------------------------------------------------- recurrence

def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_scan(
    x: Tensor,
    W: Tensor,
    U: Tensor,
    b: Tensor,
    mask=None,
    reverse: bool = False,
    recurrent_mask=None,
) -> Tensor:
    """Run one LSTM direction over ``x`` [B x S x in]; returns hidden states [B x S x h].

    Gate order in ``W`` [4h x in], ``U`` [4h x h], ``b`` [4h] is input,
    forget, output, candidate. Positions where ``mask`` is 0 leave the state
    untouched, so a forward scan carries its last real state through trailing
    padding and a reverse scan starts cleanly at each sequence's last token.
    ``recurrent_mask`` [B x h] scales the previous hidden state before the
    recurrent product (the same mask at every step).
    """
    x, W, U, b = as_tensor(x), as_tensor(W), as_tensor(U), as_tensor(b)
    B, S, _ = x.shape
    h4 = W.shape[0]
    h = h4 // 4
    if W.shape[1] != x.shape[2] or U.shape != (h4, h) or b.shape != (h4,):
        raise DimensionError(
            f"lstm shapes: x {x.shape}, W {W.shape}, U {U.shape}, b {b.shape}"
        )
    if S == 0:
        raise ContractError("lstm over an empty sequence")
    m = np.ones((B, S)) if mask is None else np.asarray(mask, dtype=np.float64)
    rm = None if recurrent_mask is None else np.asarray(recurrent_mask, dtype=np.float64)
    xd, Wd, Ud, bd = x.data, W.data, U.data, b.data
    WT, UT = Wd.T, Ud.T
    order = range(S - 1, -1, -1) if reverse else range(S)

    H = np.zeros((B, S, h))
    XW = xd @ WT
    cache = []
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    for t in order:
        mt = m[:, t:t + 1]
        h_in = h_prev if rm is None else h_prev * rm
        z = XW[:, t] + h_in @ UT + bd
        ifo = _sig(z[:, :3 * h])
        i, f, o = ifo[:, :h], ifo[:, h:2 * h], ifo[:, 2 * h:]
        g = np.tanh(z[:, 3 * h:])
        c_new = f * c_prev + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        c_t = mt * c_new + (1.0 - mt) * c_prev
        h_t = mt * h_new + (1.0 - mt) * h_prev
        cache.append((t, mt, h_in, c_prev, ifo, i, f, g, o, tc))
        H[:, t] = h_t
        h_prev, c_prev = h_t, c_t

    def backward(gH):
        dZ = np.zeros((B, S, h4))
        gU = np.zeros_like(Ud)
        dh_next = np.zeros((B, h))
        dc_next = np.zeros((B, h))
        for t, mt, h_in, cp, ifo, i, f, g, o, tc in reversed(cache):
            dh = gH[:, t] + dh_next
            dc = dc_next
            dh_new = mt * dh
            dc_new = mt * dc
            dh_prev = (1.0 - mt) * dh
            dc_prev = (1.0 - mt) * dc
            do = dh_new * tc
            dc_new = dc_new + dh_new * o * (1.0 - tc * tc)
            dc_prev = dc_prev + dc_new * f
            dz = np.empty((B, h4))
            dz[:, :h] = dc_new * g
            dz[:, h:2 * h] = dc_new * cp
            dz[:, 2 * h:3 * h] = do
            dz[:, :3 * h] *= ifo * (1.0 - ifo)
            dz[:, 3 * h:] = dc_new * i * (1.0 - g * g)
            dZ[:, t] = dz
            gU += dz.T @ h_in
            dh_in = dz @ Ud
            dh_prev = dh_prev + (dh_in if rm is None else dh_in * rm)
            dh_next, dc_next = dh_prev, dc_prev
        flat = dZ.reshape(B * S, h4)
        gW = flat.T @ xd.reshape(B * S, -1)
        return dZ @ Wd, gW, gU, flat.sum(axis=0)

    return _op((x, W, U, b), H, backward)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def total_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))
