"""Reverse-mode differentiation over dense float64 arrays.

Operations record themselves onto the active :class:`Tape` whenever one of
their operands requires a gradient.  ``Tape.backward`` then walks the
recorded nodes in reverse order and accumulates vector-Jacobian products.

    >>> with Tape() as tape:
    ...     x = Tensor(3.0, requires_grad=True)
    ...     y = x * x
    >>> tape.backward(y)[x]
    array(6.)
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


_TAPES: list["Tape"] = []


class _StopGradientLog:
    """Records stop-gradient outputs so that finite-difference oracles can
    replay them as frozen constants."""

    def __init__(self, mode: str, values: list | None = None):
        self.mode = mode
        self.values = [] if values is None else values
        self.pos = 0


_SG_LOG: _StopGradientLog | None = None


@contextlib.contextmanager
def stop_gradient_log(mode: str = "record", values: list | None = None):
    """Record (or replay) every ``stop_gradient`` output in call order."""
    global _SG_LOG
    prev = _SG_LOG
    _SG_LOG = _StopGradientLog(mode, values)
    try:
        yield _SG_LOG
    finally:
        if _SG_LOG.mode == "replay" and _SG_LOG.pos != len(_SG_LOG.values):
            _SG_LOG = prev
            raise RuntimeError("stop-gradient replay consumed a different number of values")
        _SG_LOG = prev


def replaying() -> bool:
    """True while stop-gradient values are being replayed by an oracle."""
    return _SG_LOG is not None and _SG_LOG.mode == "replay"


class Tensor:
    """A float64 array that may participate in differentiation."""

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive applications.

    Operands always precede the nodes that consume them because nodes are
    appended at the moment their output is computed.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output: Tensor, seed=None) -> dict:
        """Return a map ``leaf tensor -> adjoint`` for every leaf reached.

        ``output`` must be a scalar unless an explicit ``seed`` cotangent is
        given.  Leaves also get their ``.grad`` attribute overwritten.
        """
        if seed is None:
            if output.data.size != 1:
                raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
            seed = np.ones_like(output.data)
        adj = {id(output): np.asarray(seed, dtype=np.float64)}
        produced = set()
        seen: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(gi, inp.data.shape)
                k = id(inp)
                if k in adj:
                    adj[k] = adj[k] + gi
                else:
                    adj[k] = gi
                    seen[k] = inp
        if id(output) not in produced and output.requires_grad:
            seen[id(output)] = output
        out = {}
        for k, g in adj.items():
            t = seen.get(k)
            if t is None or k in produced:
                continue
            t.grad = g
            out[t] = g
        return out


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _emit(op: str, data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def _bshape(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def matmul(a, b) -> Tensor:
    """``numpy.matmul`` semantics for operands of rank >= 2 (batched)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        return (np.matmul(g, np.swapaxes(bd, -1, -2)),
                np.matmul(np.swapaxes(ad, -1, -2), g))
    return _emit("matmul", out, (a, b), vjp)


# -------------------------------------------------------------- elementwise

def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_np(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; the adjoint passes through where the input is
    inside the closed interval."""
    a = as_tensor(a)
    ad = a.data
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _emit("clamp", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def where(cond, a, b) -> Tensor:
    """Select by a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _emit("where", np.where(cond, a.data, b.data), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# --------------------------------------------------------------- reductions

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    return _emit("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) / n,))


def norm_l1(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape, sgn = a.shape, np.sign(a.data)
    return _emit("norm_l1", np.abs(a.data).sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) * sgn,))


def norm_l2(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape, ad = a.shape, a.data
    out = np.sqrt((ad * ad).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        n = _expand(out, shape, axis, keepdims)
        safe = np.where(n > 0, n, 1.0)
        return (_expand(g, shape, axis, keepdims) * np.where(n > 0, ad / safe, 0.0),)
    return _emit("norm_l2", out, (a,), vjp)


# ----------------------------------------------------------- structural ops

def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in items]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]
    return _emit("concat", out, items, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    try:
        out = np.stack([t.data for t in items], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in items]}") from None
    n = len(items)
    return _emit("stack", out, items,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def index_gather(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices receive summed adjoints."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"index_gather: index out of range for axis {axis} of shape {a.shape}")
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        if axis == 0:
            np.add.at(z, idx, g)
        else:
            zm = np.moveaxis(z, axis, 0)
            np.add.at(zm, idx, np.moveaxis(g, axis, 0))
        return (z,)
    return _emit("index_gather", np.take(a.data, idx, axis=axis), (a,), vjp)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)
    return _emit("getitem", a.data[key], (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _emit("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def stop_gradient(a) -> Tensor:
    """Identity forward, zero map backward.

    Inside :func:`stop_gradient_log` the outputs are recorded or replayed,
    which lets an oracle hold every detached quantity fixed.
    """
    a = as_tensor(a)
    value = a.data.copy()
    if _SG_LOG is not None:
        if _SG_LOG.mode == "record":
            _SG_LOG.values.append(value)
        else:
            if _SG_LOG.pos >= len(_SG_LOG.values):
                raise RuntimeError("stop-gradient replay ran out of recorded values")
            value = _SG_LOG.values[_SG_LOG.pos]
            _SG_LOG.pos += 1
    return Tensor(value)


def custom(op: str, inputs: Sequence, data, vjp: Callable) -> Tensor:
    """Record a fused operation with a hand-written adjoint.

    ``vjp(g)`` must return one cotangent (or ``None``) per input.
    """
    return _emit(op, data, [as_tensor(t) for t in inputs], vjp)


# ------------------------------------------------------- gradient checking

def check_gradients(f: Callable[[Tensor], Tensor], point, h: float = 1e-5,
                    coords=None) -> float:
    """Max over coordinates of ``|analytic - fd| / max(1, |fd|)``.

    Non-scalar outputs are summed.
    ``fd`` is the central difference with step ``h``.  Stop-gradient outputs
    from the base evaluation are replayed during the perturbed evaluations,
    so the oracle differentiates the function with detached branches frozen.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    point = np.array(point, dtype=np.float64)
    with stop_gradient_log("record") as rec, Tape() as tape:
        x = Tensor(point, requires_grad=True)
        y = f(x)
        grads = tape.backward(y, seed=np.ones_like(y.data))
    analytic = grads.get(x, np.zeros_like(point)).ravel()
    frozen = rec.values
    flat = point.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for step in (h, -h):
            p = flat.copy()
            p[i] += step
            with stop_gradient_log("replay", frozen):
                vals.append(float(np.sum(f(Tensor(p.reshape(point.shape))).data)))
        fd = (vals[0] - vals[1]) / (2 * h)
        err = abs(analytic[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def record(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name (``record("mul", x, x)``)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "sin": sin, "cos": cos, "exp": exp, "log": log, "sigmoid": sigmoid,
    "relu": relu, "clamp": clamp, "sum": sum_, "mean": mean, "abs": abs_,
    "norm_l1": norm_l1, "norm_l2": norm_l2, "concat": concat,
    "index_gather": index_gather, "stop_gradient": stop_gradient,
    "neg": neg, "pow": power, "sqrt": sqrt, "where": where, "stack": stack,
    "getitem": getitem, "reshape": reshape, "transpose": transpose,
}
