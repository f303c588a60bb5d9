"""Small reverse-mode autodiff over numpy arrays.

Tensors wrap read-only numpy arrays. Operations executed while a :class:`Tape`
is active are recorded in creation order, which is already a valid topological
order, so the reverse pass is a single backwards sweep over the record.

Only the primitives needed by the toy transformer are provided. Broadcasting
follows numpy; the backward pass sums gradients back to each input's shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import CapabilityError, DimensionError, NumericError

LAYERNORM_EPS = 1e-6

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "parents", "vjp", "name")

    def __init__(self, out, parents, vjp, name):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.name = name


class Tape:
    """Records primitive operations for one reverse pass.

    Use as a context manager; tensors passed to :meth:`watch` (or produced
    from watched tensors) are tracked.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def watch(self, t: Tensor) -> Tensor:
        self._tracked.add(id(t))
        self._keep.append(t)
        return t

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def _record(self, out, parents, vjp, name):
        if not any(self.is_tracked(p) for p in parents):
            return
        self._tracked.add(id(out))
        self.nodes.append(_Node(out, parents, vjp, name))

    def gradient(self, target: Tensor, sources):
        """Gradients of scalar ``target`` w.r.t. each tensor in ``sources``.

        ``sources`` may be a list of tensors or a mapping name -> tensor; the
        result mirrors its structure. Untouched sources get zero gradients.
        """
        if target.data.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if node.vjp is None:
                raise CapabilityError(f"primitive '{node.name}' has no reverse rule")
            contributions = node.vjp(g)
            for parent, pg in zip(node.parents, contributions):
                if pg is None or not self.is_tracked(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        def lookup(t):
            g = grads.get(id(t))
            if g is None:
                return np.zeros_like(t.data)
            return np.asarray(g, dtype=t.dtype).reshape(t.shape)

        if isinstance(sources, Mapping):
            return {k: lookup(v) for k, v in sources.items()}
        return [lookup(t) for t in sources]


def _record(out_arr, parents, vjp, name) -> Tensor:
    out = Tensor._wrap(out_arr)
    for tape in _ACTIVE_TAPES:
        tape._record(out, parents, vjp, name)
    return out


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape_of(x):
    return np.shape(_data(x))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    out = ad + bd
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    out = ad - bd
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    out = ad * bd
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul"
    )


def reciprocal(a) -> Tensor:
    ad = _data(a)
    out = 1.0 / ad
    return _record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    ad = _data(a)
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    ad = _data(a)
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def silu(a) -> Tensor:
    ad = _data(a)
    sig = 1.0 / (1.0 + np.exp(-ad))
    out = ad * sig
    return _record(out, (a,), lambda g: (g * (sig * (1.0 + ad * (1.0 - sig))),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    x = _data(a)
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), vjp, "gelu")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where mask is true, else ``b``; mask is a constant."""
    m = np.asarray(_data(mask), dtype=bool)
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)
    out = np.where(m, ad, bd)

    def vjp(g):
        return (_unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb))

    return _record(out, (a, b), vjp, "where")


def floor(a) -> Tensor:
    """Piecewise constant; recorded without a reverse rule on purpose."""
    return _record(np.floor(_data(a)), (a,), None, "floor")


# reductions and shape ----------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    shape = np.shape(ad)
    out = np.sum(ad, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    n = ad.size if axis is None else np.prod([ad.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    old = ad.shape
    return _record(ad.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    ad = _data(a)
    if axes is None:
        axes = tuple(reversed(range(ad.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(ad, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j) -> Tensor:
    axes = list(range(np.ndim(_data(a))))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, key) -> Tensor:
    ad = _data(a)
    out = ad[key]

    basic = _is_basic_index(key)

    def vjp(g):
        full = np.zeros_like(ad)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record(np.array(out), (a,), vjp, "getitem")


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in keys)


def gather_rows(a, index, axis=-2) -> Tensor:
    """Select rows along ``axis`` by an integer index array."""
    ad = _data(a)
    axis = axis % ad.ndim
    index = np.asarray(index, dtype=np.intp)
    out = np.take(ad, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(ad)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (a,), vjp, "gather")


def concat(tensors, axis=0) -> Tensor:
    arrs = [_data(t) for t in tensors]
    axis = axis % arrs[0].ndim
    sizes = [x.shape[axis] for x in arrs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate(arrs, axis=axis)

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp, "concat")


def split(a, sizes, axis=-1) -> list[Tensor]:
    starts = np.concatenate([[0], np.cumsum(sizes)])
    axis = axis % np.ndim(_data(a))
    out = []
    for s, e in zip(starts[:-1], starts[1:]):
        key = [slice(None)] * np.ndim(_data(a))
        key[axis] = slice(int(s), int(e))
        out.append(getitem(a, tuple(key)))
    return out


# linear algebra -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if np.ndim(ad) < 2 or np.ndim(bd) < 2:
        raise DimensionError("matmul needs at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    sa, sb = ad.shape, bd.shape

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, sa), _unbroadcast(gb, sb))

    return _record(out, (a, b), vjp, "matmul")


def softmax_lastdim(x) -> Tensor:
    xd = _data(x)
    if xd.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(xd).any():
        raise NumericError("NaN reached softmax")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), vjp, "softmax")


def layernorm(x, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, no affine parameters."""
    xd = _data(x)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (x,), vjp, "layernorm")


def conv1d(x, w, b=None) -> Tensor:
    """Same-padded 1-D convolution along the sequence axis.

    x: (..., L, Cin); w: (K, Cin, Cout) with odd K; b: (Cout,) or None.
    """
    xd, wd = _data(x), _data(w)
    K, cin, cout = wd.shape
    if K % 2 != 1:
        raise DimensionError("conv1d kernel size must be odd")
    if xd.shape[-1] != cin:
        raise DimensionError(f"conv1d expects {cin} input channels, got {xd.shape[-1]}")
    L = xd.shape[-2]
    pad = K // 2
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xd, widths)
    cols = np.stack([xp[..., k : k + L, :] for k in range(K)], axis=-2)
    cols = cols.reshape(xd.shape[:-1] + (K * cin,))
    wmat = wd.reshape(K * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + _data(b)

    def vjp(g):
        gw = (cols.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        gcols = (g @ wmat.T).reshape(xd.shape[:-1] + (K, cin))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(K):
            gxp[..., k : k + L, :] += gcols[..., k, :]
        gx = gxp[..., pad : pad + L, :]
        gb = None if b is None else g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, vjp, "conv1d")


def rope_angles(positions, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angles, shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise DimensionError("rotary embedding needs an even head dimension")
    i = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = base ** (-2.0 * i / head_dim)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def rope(x, angles: np.ndarray) -> Tensor:
    """Rotate consecutive pairs (2i, 2i+1) of the last axis by ``angles``.

    x: (..., L, head_dim); angles: (L, head_dim // 2), treated as constants.
    """
    xd = _data(x)
    if xd.shape[-1] % 2:
        raise DimensionError("rotary embedding needs an even head dimension")
    cos = np.cos(angles).astype(xd.dtype)
    sin = np.sin(angles).astype(xd.dtype)

    def rotate(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        r = np.empty_like(v)
        r[..., 0::2] = ev * cos - od * s
        r[..., 1::2] = ev * s + od * cos
        return r

    out = rotate(xd, sin)
    return _record(out, (x,), lambda g: (rotate(g, -sin),), "rope")


# differentiation entry points --------------------------------------------------------


def value_and_grad(fn: Callable, params: Mapping[str, np.ndarray], *args, **kwargs):
    """Evaluate ``fn(tensors, *args)`` and its gradient w.r.t. every entry of ``params``.

    ``fn`` receives a dict of watched tensors and must return a scalar tensor.
    """
    with Tape() as tape:
        tensors = {k: tape.watch(as_tensor(v)) for k, v in params.items()}
        out = fn(tensors, *args, **kwargs)
    return out, tape.gradient(out, tensors)


def grad(fn: Callable, params: Mapping[str, np.ndarray], *args, **kwargs) -> dict:
    return value_and_grad(fn, params, *args, **kwargs)[1]


def finite_difference(
    fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    name: str,
    indices: Iterable[tuple] | None = None,
    h: float = 1e-5,
) -> dict[tuple, float]:
    """Central differences of scalar ``fn`` for selected coordinates of one parameter."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    target = base[name]
    if indices is None:
        indices = list(np.ndindex(target.shape))
    out = {}
    for idx in indices:
        orig = target[idx]
        target[idx] = orig + h
        fp = float(fn(base))
        target[idx] = orig - h
        fm = float(fn(base))
        target[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
