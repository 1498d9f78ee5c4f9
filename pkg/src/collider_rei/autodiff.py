"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation whose inputs require gradients records its parents and a
local backward closure on the output tensor; the recording order (a global
counter) is the tape order. ``backward`` walks the reachable records in
reverse recording order, visiting each exactly once.

Broadcasting is limited to scalars and leading batch dimensions: an operand
of shape ``(d,)`` combines with ``(b, d)`` or ``(s, b, d)``, but ``(b, 1)``
does not combine with ``(b, d)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad, name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if not a:
        return b
    if not b:
        return a
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeMismatch(f"shapes {a} and {b} are not compatible (only leading-dimension broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if not shape:
        return np.asarray(g.sum())
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """(n, k) @ (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul needs (n, k) @ (k, m), got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def broadcast(a, shape) -> Tensor:
    """Repeat ``a`` along new leading dimensions to reach ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if _broadcast_shape(a.shape, shape) != shape:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}")
    sa = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, sa),))


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _record(out, (a,), lambda g: (g / (1.0 + np.exp(-ad)),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and structural ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def back(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes], dtype=int)) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def logsumexp(a, axis: int = 0) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with max-shift stabilization."""
    a = as_tensor(a)
    ax = axis % a.ndim
    m = a.data.max(axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    soft = e / s

    def back(g):
        return (np.expand_dims(g, ax) * soft,)

    return _record(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _record(out, (a,), lambda g: (g.reshape(sa),))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    sa = a.shape

    def back(g):
        full = np.zeros(sa)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeMismatch(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=ax)))


# ---------------------------------------------------------------------------
# backward pass


def _reachable(loss: Tensor) -> list:
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss._id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def grad(loss: Tensor, params) -> list:
    """Gradients of ``loss`` with respect to ``params`` (zeros where unreachable)."""
    for p in params:
        p.zero_grad()
    backward(loss)
    return [p.grad.copy() for p in params]


def gradcheck(fn, arrays, h: float = 1e-4) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a list of Tensors to a scalar Tensor and must be deterministic.
    The error for each input is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
    in Euclidean norm.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = grad(fn(leaves), leaves)
    worst = 0.0
    for i, base in enumerate(arrays):
        num = np.zeros_like(base)
        for idx in np.ndindex(*base.shape):
            vals = []
            for step in (h, -h):
                bumped = [a.copy() for a in arrays]
                bumped[i][idx] += step
                vals.append(fn([Tensor(a) for a in bumped]).item())
            num[idx] = (vals[0] - vals[1]) / (2 * h)
        den = max(np.linalg.norm(analytic[i]), np.linalg.norm(num), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic[i] - num) / den))
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(np.asarray(p, dtype=float)) for p in params],
                   [np.zeros_like(np.asarray(p, dtype=float)) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeMismatch("params, grads and state must have equal length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, g = np.asarray(p, dtype=float), np.asarray(g, dtype=float)
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeMismatch(f"Adam shapes differ: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """In-place Adam over a list of leaf Tensors."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        new, self.state = adam_step([p.data for p in self.params], [p.grad for p in self.params],
                                    self.state, self.lr, self.beta1, self.beta2, self.eps)
        for p, d in zip(self.params, new):
            p.data = d


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then little-endian float64 data

CHECKPOINT_FORMAT = "rei-params-v1"


def save_checkpoint(path, named: dict, seed=None, extra: dict | None = None) -> None:
    names = list(named)
    arrays = [np.asarray(named[n], dtype="<f8") for n in names]
    header = {"format": CHECKPOINT_FORMAT, "dtype": "<f8", "names": names,
              "shapes": [list(a.shape) for a in arrays], "seed": seed}
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Return ``(named_arrays, header)``."""
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    flat = np.frombuffer(raw[cut + 1:], dtype="<f8")
    out, pos = {}, 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape, dtype=int))
        out[name] = flat[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
    if pos != flat.size:
        raise ValueError(f"{path}: {flat.size - pos} trailing values")
    return out, header
