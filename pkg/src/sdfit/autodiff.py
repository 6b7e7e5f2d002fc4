"""Reverse-mode automatic differentiation on numpy arrays.

A `Tape` records vector-level operations (one node per array op, not per
scalar) so a full render of a ray batch costs O(number of ops) nodes.
Gradients flow back to leaf `Var`s created with ``requires=True``.

Non-finite values produced by e.g. division by zero or log of a
non-positive number are not raised here; they propagate to the loss value
where the fitting loop detects them and skips the step.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "no_grad",
    "as_var",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "absolute",
    "pow_const", "tanh", "sigmoid", "softplus", "relu",
    "minimum", "maximum", "clamp", "where_mask",
    "matmul", "vsum", "vmean", "cumsum", "concat", "gather", "reshape",
    "transpose", "scatter_rows", "detach", "backward", "fd_gradients",
    "rel_err",
]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Append-only list of recorded operations; also a context manager."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, out: "Var") -> None:
        """Accumulate d(out)/d(leaf) into every reachable leaf's .grad."""
        if out.data.size != 1:
            raise ValueError("backward expects a scalar output")
        out.grad = np.ones_like(out.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires:
                    continue
                if parent.grad is None:
                    # vjps may hand back g itself or a view of it; own a copy
                    # so later += accumulation cannot alias another gradient.
                    if pg is g or not pg.flags.owndata or not pg.flags.writeable:
                        pg = pg.copy()
                    parent.grad = pg
                else:
                    parent.grad += pg
            node.grad = None  # free intermediate grads as we go


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context that suspends recording even inside an active tape."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Var:
    """An array value on the tape. Leaves carry parameters; ops make nodes."""

    __slots__ = ("data", "grad", "requires", "_parents", "_vjp")

    def __init__(self, data, requires: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires = requires
        self._parents: tuple[Var, ...] = ()
        self._vjp = None

    @staticmethod
    def from_op(data: np.ndarray, parents: tuple["Var", ...], vjp) -> "Var":
        """Record a custom op. `vjp(g)` returns one grad per parent."""
        tape = active_tape()
        needs = tape is not None and any(p.requires for p in parents)
        out = Var(data, requires=needs)
        if needs:
            out._parents = parents
            out._vjp = vjp
            tape.nodes.append(out)
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_var(other))

    def __rsub__(self, other):
        return sub(as_var(other), self)

    def __mul__(self, other):
        return mul(self, as_var(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_var(other))

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires={self.requires})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives

def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)))


def div(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return Var.from_op(out, (a, b), vjp)


def neg(a: Var) -> Var:
    return Var.from_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Var) -> Var:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Var.from_op(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return Var.from_op(out, (a,), vjp)


def sqrt(a: Var) -> Var:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * (0.5 / out),)

    return Var.from_op(out, (a,), vjp)


def absolute(a: Var) -> Var:
    return Var.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def pow_const(a: Var, p: float) -> Var:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data ** p

    def vjp(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            return (g * p * a.data ** (p - 1.0),)

    return Var.from_op(out, (a,), vjp)


def tanh(a: Var) -> Var:
    out = np.tanh(a.data)
    return Var.from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Var) -> Var:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Var.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Var) -> Var:
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Var.from_op(out, (a,), lambda g: (g * sig,))


def relu(a: Var) -> Var:
    mask = a.data > 0
    return Var.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def minimum(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    take_a = a.data <= b.data  # ties route to the first argument
    return Var.from_op(
        np.minimum(a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * take_a, a.data.shape),
                   _unbroadcast(g * ~take_a, b.data.shape)))


def maximum(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    take_a = a.data >= b.data
    return Var.from_op(
        np.maximum(a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * take_a, a.data.shape),
                   _unbroadcast(g * ~take_a, b.data.shape)))


def clamp(a: Var, lo: float, hi: float) -> Var:
    inside = (a.data >= lo) & (a.data <= hi)
    return Var.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where_mask(mask: np.ndarray, a: Var, b: Var) -> Var:
    """Select by a constant boolean mask (mask itself carries no gradient)."""
    a, b = as_var(a), as_var(b)
    return Var.from_op(
        np.where(mask, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * mask, a.data.shape),
                   _unbroadcast(g * ~mask, b.data.shape)))


def matmul(a: Var, b: Var) -> Var:
    """2-D matrix product; covers the matvec needs of the MLP heads."""
    return Var.from_op(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g))


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return Var.from_op(out, (a,), vjp)


def vmean(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else (
        np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape),)

    return Var.from_op(out, (a,), vjp)


def cumsum(a: Var, axis: int) -> Var:
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Var.from_op(out, (a,), vjp)


def concat(vars_: list[Var], axis: int = 0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    sizes = [v.data.shape[axis] for v in vars_]
    out = np.concatenate([v.data for v in vars_], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var.from_op(out, tuple(vars_), vjp)


def gather(a: Var, idx: np.ndarray, axis: int = 0) -> Var:
    """Take along `axis` with an integer index array; backward scatter-adds."""
    idx = np.asarray(idx)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        acc = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(acc, idx, g)
        else:
            acc_m = np.moveaxis(acc, axis, 0)
            np.add.at(acc_m, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
        return (acc,)

    return Var.from_op(out, (a,), vjp)


def reshape(a: Var, shape) -> Var:
    return Var.from_op(a.data.reshape(shape), (a,),
                       lambda g: (g.reshape(a.data.shape),))


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    inv = tuple(np.argsort(axes))
    return Var.from_op(a.data.transpose(axes), (a,),
                       lambda g: (g.transpose(inv),))


def scatter_rows(a: Var, idx: np.ndarray, n_rows: int) -> Var:
    """Place rows of `a` at `idx` in a zero array of n_rows rows."""
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + a.data.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data
    return Var.from_op(out, (a,), lambda g: (g[idx],))


def _getitem(a: Var, idx) -> Var:
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int)) or p is None or p is Ellipsis
                for p in parts)

    def vjp(g):
        acc = np.zeros_like(a.data)
        if basic:  # basic indexing never repeats elements
            acc[idx] += g
        else:
            np.add.at(acc, idx, g)
        return (acc,)

    return Var.from_op(out, (a,), vjp)


def detach(a: Var) -> Var:
    return Var(a.data)


def backward(out: Var) -> None:
    tape = active_tape()
    if tape is None:
        raise RuntimeError("no active tape")
    tape.backward(out)


# ----------------------------------------------------------------- checking

def fd_gradients(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar f() w.r.t. each array, in place."""
    grads = []
    for x in arrays:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise relative error; differences below `floor` count as zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    return np.where(diff <= floor, 0.0, diff / denom)
