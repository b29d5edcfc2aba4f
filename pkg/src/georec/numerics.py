"""Dense tensors with a reverse-mode gradient tape.

Every model operation is built from the primitives in this module. A
:class:`Tape` records primitives while it is active; ``Tape.gradient``
replays the record backwards. Outside a tape the primitives are plain
numpy computations, which is what inference uses.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_(x * x)
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_tapes: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite entries in tensor of shape {self.shape}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swap_last(self)


class Tape:
    """Ordered record of primitive operations.

    Nodes are ``(output, parents, backward)``; ``backward`` maps the output
    gradient to one gradient (or None) per parent.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, parents, backward))

    def gradient(self, out: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if out.data.size != 1:
            raise ValueError("gradient needs a scalar output")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node_out, parents, backward in reversed(self.nodes):
            g = grads.get(id(node_out))
            if g is None:
                continue
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads[id(w)] if id(w) in grads else np.zeros_like(w.data) for w in wrt]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    # log σ(x) = -softplus(-x)
    y = -np.logaddexp(0.0, -x.data)
    return _emit(y, (x,), lambda g: (g * _sigmoid(-x.data),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree or be absent."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), backward)


def swap_last(x: Tensor) -> Tensor:
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# -- normalizations ----------------------------------------------------------

def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` is True where an entry is allowed."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    n = x.shape[-1]
    r = np.sqrt((x.data ** 2).mean(axis=-1, keepdims=True) + eps)
    if eps == 0.0:
        r = np.where(r == 0.0, 1.0, r)
    xhat = x.data / r
    y = xhat * gain.data

    def backward(g):
        gy = g * gain.data
        gx = gy / r - xhat * (gy * xhat).sum(axis=-1, keepdims=True) / (n * r)
        return gx, _unbroadcast(g * xhat, gain.shape)

    return _emit(y, (x, gain), backward)


# -- reductions, indexing ----------------------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    y = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(y), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def index(x: Tensor, key) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return _emit(x.data[key], (x,), backward)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D table; output shape is ``idx.shape + (d,)``."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _emit(table.data[idx], (table,), backward)


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[..., idx[...]]``: one entry per row along the last axis."""
    idx = np.asarray(idx)[..., None]
    y = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _emit(y, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def where_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; mask broadcasts against both."""
    a, b = _as_tensor(a), _as_tensor(b)
    m = np.asarray(mask, dtype=bool)

    def backward(g):
        return _unbroadcast(np.where(m, g, 0.0), a.shape), _unbroadcast(np.where(m, 0.0, g), b.shape)

    return _emit(np.where(m, a.data, b.data), (a, b), backward)


# -- gradient checking -------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f(x) is not finite")
    analytic = tape.gradient(out, [leaf])[0]
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x)).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_many(f: Callable[[Sequence[Tensor]], Tensor], xs: Sequence[np.ndarray],
                    eps: float = 1e-6, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` over several inputs at once.

    ``max_coords`` limits the number of perturbed coordinates per input,
    chosen by ``rng``; the analytic gradient is still computed in full.
    """
    xs = [np.array(x, dtype=np.float64) for x in xs]
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    with Tape() as tape:
        out = f(leaves)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f(x) is not finite")
    analytic = tape.gradient(out, leaves)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for k, x in enumerate(xs):
        flat = x.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f([Tensor(v) for v in xs]).data)
            flat[i] = orig - eps
            lo = float(f([Tensor(v) for v in xs]).data)
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


__all__ = [
    "Tensor", "Tape", "NonFiniteError", "add", "sub", "mul", "sigmoid", "log_sigmoid",
    "silu", "matmul", "swap_last", "transpose", "reshape", "row_softmax", "log_softmax",
    "rms_norm", "sum_", "mean", "index", "gather_rows", "pick", "concat", "where_rows",
    "grad_check", "grad_check_many",
]
