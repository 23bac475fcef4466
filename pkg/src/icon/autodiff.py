"""Reverse-mode automatic differentiation over numpy arrays.

A small taped engine: ``Tensor`` wraps an ndarray and records how it was
produced; ``backprop`` walks the tape in reverse topological order. The op
set is exactly what the package's losses need: affine maps, tanh, exp/log,
sqrt, powers, slicing/concat/reshape, sum/mean reductions, and a fused
stable log-softmax for the contrastive loss. Every op also accepts plain
ndarrays and then evaluates eagerly with no tape, so model code is written
once and used both for training (Tensor parameters) and inference (ndarray
parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericDomainError, UnsupportedOpError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes numpy broadcasting introduced for this operand."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the tape: value plus the backward rule that fills parent grads."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # refuse silent numpy ufunc application; only registered ops may touch a Tensor
        raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__!r} is not a registered primitive")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def __getattr__(self, name):
        if name.startswith("__") and name.endswith("__"):
            raise AttributeError(name)
        raise UnsupportedOpError(f"Tensor has no registered primitive {name!r}")


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _val(x):
    return x.value if _is_tensor(x) else np.asarray(x, dtype=np.float64)


def _acc(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64)
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    out = _val(a) + _val(b)
    if not (_is_tensor(a) or _is_tensor(b)):
        return out

    def backward(g):
        if _is_tensor(a):
            _acc(a, _unbroadcast(g, a.value.shape))
        if _is_tensor(b):
            _acc(b, _unbroadcast(g, b.value.shape))

    return Tensor(out, tuple(t for t in (a, b) if _is_tensor(t)), backward)


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    if not (_is_tensor(a) or _is_tensor(b)):
        return out

    def backward(g):
        if _is_tensor(a):
            _acc(a, _unbroadcast(g * bv, a.value.shape))
        if _is_tensor(b):
            _acc(b, _unbroadcast(g * av, b.value.shape))

    return Tensor(out, tuple(t for t in (a, b) if _is_tensor(t)), backward)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    if not (_is_tensor(a) or _is_tensor(b)):
        return out

    def backward(g):
        if _is_tensor(a):
            _acc(a, _unbroadcast(g / bv, a.value.shape))
        if _is_tensor(b):
            _acc(b, _unbroadcast(-g * av / (bv * bv), b.value.shape))

    return Tensor(out, tuple(t for t in (a, b) if _is_tensor(t)), backward)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    if not (_is_tensor(a) or _is_tensor(b)):
        return out

    def backward(g):
        if _is_tensor(a):
            _acc(a, g @ bv.T)
        if _is_tensor(b):
            _acc(b, av.T @ g)

    return Tensor(out, tuple(t for t in (a, b) if _is_tensor(t)), backward)


def power(a, p):
    if not isinstance(p, (int, float)):
        raise UnsupportedOpError("only scalar exponents are registered")
    av = _val(a)
    out = av ** p
    if not _is_tensor(a):
        return out

    def backward(g):
        _acc(a, g * p * av ** (p - 1))

    return Tensor(out, (a,), backward)


def tanh(a):
    av = _val(a)
    out = np.tanh(av)
    if not _is_tensor(a):
        return out

    def backward(g):
        _acc(a, g * (1.0 - out * out))

    return Tensor(out, (a,), backward)


def exp(a):
    av = _val(a)
    out = np.exp(av)
    if not _is_tensor(a):
        return out

    def backward(g):
        _acc(a, g * out)

    return Tensor(out, (a,), backward)


def log(a):
    av = _val(a)
    out = np.log(av)
    if not _is_tensor(a):
        return out

    def backward(g):
        _acc(a, g / av)

    return Tensor(out, (a,), backward)


def sqrt(a):
    av = _val(a)
    out = np.sqrt(av)
    if not _is_tensor(a):
        return out

    def backward(g):
        _acc(a, g * 0.5 / out)

    return Tensor(out, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not _is_tensor(a):
        return out

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, av.shape))

    return Tensor(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take(a, idx):
    av = _val(a)
    out = av[idx]
    if not _is_tensor(a):
        return out

    def backward(g):
        buf = np.zeros_like(av)
        np.add.at(buf, idx, g)
        _acc(a, buf)

    return Tensor(out, (a,), backward)


def reshape(a, shape):
    av = _val(a)
    out = av.reshape(shape)
    if not _is_tensor(a):
        return out

    def backward(g):
        _acc(a, np.asarray(g).reshape(av.shape))

    return Tensor(out, (a,), backward)


def concat(parts, axis=1):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(_is_tensor(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if _is_tensor(part):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(part, g[tuple(sl)])

    return Tensor(out, tuple(p for p in parts if _is_tensor(p)), backward)


def log_softmax(a, axis=1):
    """Numerically stable log-softmax; the fused primitive behind cross-entropy."""
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    if not _is_tensor(a):
        return out
    softmax = np.exp(out)

    def backward(g):
        _acc(a, g - softmax * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (a,), backward)


# ---------------------------------------------------------------------------
# tape evaluation


def backprop(out: Tensor) -> None:
    """Seed d(out)/d(out) = 1 and fill .grad on every reachable parent."""
    if out.value.ndim != 0 and out.value.size != 1:
        raise ContractError("backprop target must be scalar")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass(frozen=True)
class ParamLayout:
    """Name -> (offset, shape) table over one flat parameter array."""

    segments: dict
    size: int

    @classmethod
    def build(cls, spec: list[tuple[str, tuple[int, ...]]]) -> "ParamLayout":
        segments = {}
        offset = 0
        for name, shape in spec:
            if name in segments:
                raise ContractError(f"duplicate segment {name!r}")
            n = int(np.prod(shape)) if shape else 1
            segments[name] = (offset, tuple(shape))
            offset += n
        return cls(segments=segments, size=offset)

    def view(self, flat, name: str):
        """Shaped view of one segment; works on ndarrays and Tensors alike."""
        offset, shape = self.segments[name]
        n = int(np.prod(shape)) if shape else 1
        return reshape(take(flat, slice(offset, offset + n)), shape)


@dataclass
class ParamVector:
    """Flat float64 parameter array plus its layout table."""

    data: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.layout.size:
            raise ContractError("parameter array does not match layout size")

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.data, name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)


@dataclass(frozen=True)
class LossGrad:
    value: float
    grad: np.ndarray


def value_and_grad(loss_fn, params: np.ndarray, *args) -> LossGrad:
    """Evaluate loss_fn(params, *args) and its exact reverse-mode gradient.

    ``params`` is the flat parameter array; loss_fn receives it as the single
    leaf Tensor and must build the loss from registered primitives.
    """
    flat = np.asarray(params, dtype=np.float64).ravel()
    leaf = Tensor(flat)
    out = loss_fn(leaf, *args)
    if not _is_tensor(out):
        # loss did not touch the parameters
        return LossGrad(float(np.asarray(out)), np.zeros_like(flat))
    backprop(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(flat)
    return LossGrad(float(out.value), grad)


def grad_check(loss_fn, params: np.ndarray, *args,
               n_coords: int = 25, rng=None) -> float:
    """Worst relative error of the taped gradient vs central differences.

    Checks ``n_coords`` randomly chosen coordinates; below magnitude 1e-6
    the absolute error is reported instead of the relative one.
    """
    from .numerics import as_generator

    gen = as_generator(rng if rng is not None else 0)
    flat = np.asarray(params, dtype=np.float64).ravel()
    res = value_and_grad(loss_fn, flat, *args)
    coords = gen.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0
    for j in coords:
        h = 1e-6 * max(1.0, abs(flat[j]))
        fp = flat.copy()
        fp[j] += h
        fm = flat.copy()
        fm[j] -= h
        # every op also runs tape-free on plain arrays, so probe without a tape
        vp = float(np.asarray(loss_fn(fp, *args)))
        vm = float(np.asarray(loss_fn(fm, *args)))
        if not (np.isfinite(vp) and np.isfinite(vm)):
            raise NumericDomainError("loss non-finite during finite differencing")
        fd = (vp - vm) / (2.0 * h)
        ad = res.grad[j]
        scale = max(abs(fd), abs(ad))
        err = abs(ad - fd) if scale < 1e-6 else abs(ad - fd) / scale
        worst = max(worst, err)
    return worst
