"""Nestable forward-mode dual numbers over numpy arrays.

A :class:`Dual` carries a primal value and a stack of first-order
perturbations, ``der[k]`` being the derivative along seed direction ``k``.
Values and perturbations may themselves be duals of a lower *tag*, which is
how higher derivatives are obtained: perturbations of different tags never
interact, so nesting ``k`` levels yields exact mixed derivatives of order
``k``.

Shapes: ``der.shape == (K,) + val.shape``. The value axes take part in numpy
broadcasting, so a batch of sample points rides along in a trailing axis at
no extra Python cost.
"""
from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Dual",
    "new_tag",
    "seed",
    "primal",
    "partial",
    "is_dual",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "tanh",
    "absolute",
    "stack",
]

_tags = itertools.count(1)


def new_tag() -> int:
    """Return a fresh perturbation tag, higher than every tag issued before."""
    return next(_tags)


class Dual:
    __slots__ = ("val", "der", "tag")
    __array_ufunc__ = None  # ndarray <op> Dual defers to the reflected Dual op

    def __init__(self, val, der, tag: int):
        self.val = val
        self.der = der
        self.tag = tag

    @property
    def ndim(self) -> int:
        return _ndim(self.val)

    @property
    def shape(self) -> tuple:
        return _shape(self.val)

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.val[key], self.der[(slice(None),) + key], self.tag)

    def __repr__(self) -> str:
        return f"Dual(tag={self.tag}, val={self.val!r}, der={self.der!r})"

    def __neg__(self):
        return Dual(-self.val, -self.der, self.tag)

    def __pos__(self):
        return self

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -other)

    def __rsub__(self, other):
        return _add(-self, other)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _mul(self, _recip(other))

    def __rtruediv__(self, other):
        return _mul(other, _recip(self))

    def __pow__(self, n):
        if isinstance(n, Dual):
            return exp(n * log(self))
        if n == 1:
            return self
        if n == 2:
            return self * self
        if n == 3:
            return self * self * self
        return _chain(self, lambda v: v**n, lambda v: n * v ** (n - 1))

    def __rpow__(self, base):
        return exp(self * float(np.log(base)))

    def __abs__(self):
        return absolute(self)


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def _tag(x) -> int:
    return x.tag if isinstance(x, Dual) else 0


def _ndim(x) -> int:
    return _ndim(x.val) if isinstance(x, Dual) else np.ndim(x)


def _shape(x) -> tuple:
    return _shape(x.val) if isinstance(x, Dual) else np.shape(x)


def _insert_axes(x, pos: int, count: int):
    if count == 0:
        return x
    if isinstance(x, Dual):
        return Dual(_insert_axes(x.val, pos, count), _insert_axes(x.der, pos + 1, count), x.tag)
    x = np.asarray(x)
    return x.reshape(x.shape[:pos] + (1,) * count + x.shape[pos:])


def _swapaxes(x, a: int, b: int):
    if isinstance(x, Dual):
        return Dual(_swapaxes(x.val, a, b), _swapaxes(x.der, a + 1, b + 1), x.tag)
    return np.swapaxes(x, a, b)


def _broadcast(x, shape: tuple):
    if isinstance(x, Dual):
        x = _insert_axes(x, 0, len(shape) - x.ndim)
        if x.shape == tuple(shape):
            return x
        k = _shape(x.der)[0]
        return Dual(_broadcast(x.val, shape), _broadcast(x.der, (k,) + tuple(shape)), x.tag)
    x = np.asarray(x, dtype=float)
    if x.shape == tuple(shape):
        return x
    return np.broadcast_to(x, shape)


def _align(x, y):
    nx, ny = _ndim(x), _ndim(y)
    if nx < ny and isinstance(x, Dual):
        x = _insert_axes(x, 0, ny - nx)
    elif ny < nx and isinstance(y, Dual):
        y = _insert_axes(y, 0, nx - ny)
    return x, y


def _add(x, y):
    x, y = _align(x, y)
    tx, ty = _tag(x), _tag(y)
    if tx < ty:
        x, y, tx, ty = y, x, ty, tx
    if tx == ty:
        return Dual(x.val + y.val, x.der + y.der, tx)
    val = x.val + y
    shape = _shape(val)
    der = x.der
    if _shape(der)[1:] != shape:
        der = _broadcast(der, (_shape(der)[0],) + shape)
    return Dual(val, der, tx)


def _mul(x, y):
    x, y = _align(x, y)
    tx, ty = _tag(x), _tag(y)
    if tx == ty:
        return Dual(x.val * y.val, x.der * y.val + x.val * y.der, tx)
    if tx > ty:
        return Dual(x.val * y, x.der * y, tx)
    return Dual(y.val * x, y.der * x, ty)


def _recip(x):
    if not isinstance(x, Dual):
        return 1.0 / x
    inv = _recip(x.val)
    return Dual(inv, -(x.der * (inv * inv)), x.tag)


def _chain(x, f, fprime):
    if not isinstance(x, Dual):
        return f(x)
    return Dual(_chain(x.val, f, fprime), x.der * fprime(x.val), x.tag)


def primal(x):
    """Strip every perturbation level and return the plain numeric value."""
    while isinstance(x, Dual):
        x = x.val
    return x


def partial(x, tag: int, k: int):
    """Derivative stack of ``x`` with respect to the ``k`` directions of ``tag``.

    The result has a new leading axis of length ``k``; perturbations of
    other tags are preserved, so the result is still differentiable along
    them.
    """
    if not isinstance(x, Dual) or x.tag < tag:
        return np.zeros((k,) + _shape(x))
    if x.tag == tag:
        return x.der
    return Dual(partial(x.val, tag, k), _swapaxes(partial(x.der, tag, k), 0, 1), x.tag)


def seed(values, tag: int, directions) -> list:
    """Attach perturbation ``tag`` to a sequence of scalar or batched values.

    ``directions`` has shape ``(K, n)`` or ``(K, n) + batch``: entry
    ``[k, i]`` is the derivative of ``values[i]`` along direction ``k``.
    Values may already carry lower-tag perturbations.
    """
    directions = np.asarray(directions, dtype=float)
    k = directions.shape[0]
    out = []
    for i, v in enumerate(values):
        shape = _shape(v)
        d = directions[:, i]
        if d.ndim - 1 < len(shape):
            d = d.reshape((k,) + (1,) * (len(shape) - d.ndim + 1) + d.shape[1:])
        out.append(Dual(v, _broadcast(d, (k,) + shape), tag))
    return out


def exp(x):
    if not isinstance(x, Dual):
        return np.exp(x)
    e = exp(x.val)
    return Dual(e, x.der * e, x.tag)


def log(x):
    return _chain(x, np.log, _recip)


def sin(x):
    if not isinstance(x, Dual):
        return np.sin(x)
    return Dual(sin(x.val), x.der * cos(x.val), x.tag)


def cos(x):
    if not isinstance(x, Dual):
        return np.cos(x)
    return Dual(cos(x.val), -(x.der * sin(x.val)), x.tag)


def sqrt(x):
    if not isinstance(x, Dual):
        return np.sqrt(x)
    r = sqrt(x.val)
    return Dual(r, x.der * (0.5 * _recip(r)), x.tag)


def tanh(x):
    if not isinstance(x, Dual):
        return np.tanh(x)
    t = tanh(x.val)
    return Dual(t, x.der * (1.0 - t * t), x.tag)


def absolute(x):
    if not isinstance(x, Dual):
        return np.abs(x)
    return Dual(absolute(x.val), x.der * np.sign(primal(x)), x.tag)


def stack(items):
    """Stack scalars, arrays or duals along a new leading axis."""
    items = list(items)
    top = max(_tag(v) for v in items)
    shape = np.broadcast_shapes(*(_shape(v) for v in items))
    if top == 0:
        return np.stack([_broadcast(v, shape) for v in items])
    k = next(_shape(v.der)[0] for v in items if _tag(v) == top)
    vals, ders = [], []
    for v in items:
        if _tag(v) == top:
            v = _broadcast(v, shape)
            vals.append(v.val)
            ders.append(v.der)
        else:
            vals.append(_broadcast(v, shape))
            ders.append(np.zeros((k,) + shape))
    return Dual(stack(vals), _swapaxes(stack(ders), 0, 1), top)
