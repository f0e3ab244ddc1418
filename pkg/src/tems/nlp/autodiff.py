"""Vectorized forward-mode differentiation with dual arrays.

A :class:`Dual` carries a value array of shape ``S`` and a tangent array of
shape ``S + (k,)`` holding ``k`` directional derivatives at once. It plugs into
numpy through ``__array_ufunc__``/``__array_function__`` so model code written
with ordinary numpy operations (indexing along the last axis, arithmetic,
``np.exp``, ``np.stack``, ``@`` against constants, ...) is differentiated
without modification.
"""

from __future__ import annotations

import numpy as np


class UnsupportedOperation(TypeError):
    pass


def _val(a):
    return a.val if isinstance(a, Dual) else np.asarray(a, dtype=float)


def _bcast_der(der, shape):
    return np.broadcast_to(der, tuple(shape) + der.shape[-1:])


class Dual:
    __array_priority__ = 1000

    __slots__ = ("val", "der")

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def size(self):
        return self.val.size

    @property
    def n_dir(self):
        return self.der.shape[-1]

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, der.shape={self.der.shape})"

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        # an Ellipsis would otherwise swallow the tangent axis
        didx = idx + (slice(None),) if any(i is Ellipsis for i in idx) else idx
        return Dual(self.val[idx], self.der[didx])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        val = self.val.reshape(shape)
        return Dual(val, self.der.reshape(val.shape + (self.n_dir,)))

    def sum(self, axis=None):
        return np.sum(self, axis=axis)

    @property
    def T(self):
        return _transpose(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, o):
        return np.add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return np.subtract(self, o)

    def __rsub__(self, o):
        return np.subtract(o, self)

    def __mul__(self, o):
        return np.multiply(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return np.true_divide(self, o)

    def __rtruediv__(self, o):
        return np.true_divide(o, self)

    def __pow__(self, o):
        return np.power(self, o)

    def __rpow__(self, o):
        return np.power(o, self)

    def __neg__(self):
        return np.negative(self)

    def __pos__(self):
        return self

    def __abs__(self):
        return np.absolute(self)

    def __matmul__(self, o):
        return np.matmul(self, o)

    def __rmatmul__(self, o):
        return np.matmul(o, self)

    def __lt__(self, o):
        return self.val < _val(o)

    def __le__(self, o):
        return self.val <= _val(o)

    def __gt__(self, o):
        return self.val > _val(o)

    def __ge__(self, o):
        return self.val >= _val(o)

    def __float__(self):
        raise UnsupportedOperation("cannot convert a Dual to float")

    # -- numpy protocols ----------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            return NotImplemented
        rule = _UFUNCS.get(ufunc)
        if rule is None:
            raise UnsupportedOperation(f"ufunc {ufunc.__name__} is not differentiable here")
        return rule(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        rule = _FUNCTIONS.get(func)
        if rule is None:
            raise UnsupportedOperation(f"{func.__name__} is not supported on Dual arrays")
        return rule(*args, **kwargs)


def _transpose(a: Dual) -> Dual:
    axes = tuple(range(a.ndim))[::-1]
    return Dual(a.val.transpose(axes), a.der.transpose(axes + (a.ndim,)))


def _n_dir(*xs):
    for x in xs:
        if isinstance(x, Dual):
            return x.n_dir
    raise AssertionError


def _unary(fval, fdot):
    def rule(a):
        v = fval(a.val)
        return Dual(v, fdot(a.val, v)[..., None] * a.der)

    return rule


def _binary(fval, da_rule, db_rule):
    def rule(a, b):
        av, bv = _val(a), _val(b)
        v = fval(av, bv)
        der = None
        if isinstance(a, Dual):
            der = da_rule(av, bv, v)[..., None] * a.der
        if isinstance(b, Dual):
            t = db_rule(av, bv, v)[..., None] * b.der
            der = t if der is None else der + t
        return Dual(v, _bcast_der(der, v.shape))

    return rule


def _power(a, b):
    av, bv = _val(a), _val(b)
    v = np.power(av, bv)
    der = None
    if isinstance(a, Dual):
        der = (bv * np.power(av, bv - 1.0))[..., None] * a.der
    if isinstance(b, Dual):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(v == 0, 0.0, v * np.log(np.where(av > 0, av, 1.0)))[..., None] * b.der
        der = t if der is None else der + t
    return Dual(v, _bcast_der(der, v.shape))


def _select(cmp):
    def rule(a, b):
        av, bv = _val(a), _val(b)
        pick_a = cmp(av, bv)
        v = np.where(pick_a, av, bv)
        k = _n_dir(a, b)
        da = a.der if isinstance(a, Dual) else np.zeros(av.shape + (k,))
        db = b.der if isinstance(b, Dual) else np.zeros(bv.shape + (k,))
        der = np.where(pick_a[..., None], da, db)
        return Dual(v, _bcast_der(der, v.shape))

    return rule


def _matmul(a, b):
    av, bv = _val(a), _val(b)
    v = np.matmul(av, bv)
    der = None
    if isinstance(a, Dual):
        # each tangent slice multiplies through b
        t = np.moveaxis(np.matmul(np.moveaxis(a.der, -1, 0), bv), 0, -1)
        der = t
    if isinstance(b, Dual):
        if bv.ndim == 1:
            t = np.matmul(av, b.der)
        else:
            t = np.moveaxis(np.matmul(av, np.moveaxis(b.der, -1, 0)), 0, -1)
        der = t if der is None else der + t
    return Dual(v, der)


_UFUNCS = {
    np.add: _binary(np.add, lambda a, b, v: np.ones_like(v), lambda a, b, v: np.ones_like(v)),
    np.subtract: _binary(
        np.subtract, lambda a, b, v: np.ones_like(v), lambda a, b, v: -np.ones_like(v)
    ),
    np.multiply: _binary(
        np.multiply,
        lambda a, b, v: np.broadcast_to(b, v.shape),
        lambda a, b, v: np.broadcast_to(a, v.shape),
    ),
    np.true_divide: _binary(np.true_divide, lambda a, b, v: 1.0 / b, lambda a, b, v: -v / b),
    np.power: _power,
    np.maximum: _select(np.greater_equal),
    np.minimum: _select(np.less_equal),
    np.matmul: _matmul,
    np.negative: _unary(np.negative, lambda x, v: -np.ones_like(x)),
    np.positive: _unary(np.positive, lambda x, v: np.ones_like(x)),
    np.exp: _unary(np.exp, lambda x, v: v),
    np.expm1: _unary(np.expm1, lambda x, v: v + 1.0),
    np.log: _unary(np.log, lambda x, v: 1.0 / x),
    np.log1p: _unary(np.log1p, lambda x, v: 1.0 / (1.0 + x)),
    np.sqrt: _unary(np.sqrt, lambda x, v: 0.5 / v),
    np.square: _unary(np.square, lambda x, v: 2.0 * x),
    np.sin: _unary(np.sin, lambda x, v: np.cos(x)),
    np.cos: _unary(np.cos, lambda x, v: -np.sin(x)),
    np.tan: _unary(np.tan, lambda x, v: 1.0 + v * v),
    np.tanh: _unary(np.tanh, lambda x, v: 1.0 - v * v),
    np.sinh: _unary(np.sinh, lambda x, v: np.cosh(x)),
    np.cosh: _unary(np.cosh, lambda x, v: np.sinh(x)),
    np.arctan: _unary(np.arctan, lambda x, v: 1.0 / (1.0 + x * x)),
    np.absolute: _unary(np.absolute, lambda x, v: np.sign(x)),
}


def _as_dual(x, k):
    if isinstance(x, Dual):
        return x
    x = np.asarray(x, dtype=float)
    return Dual(x, np.zeros(x.shape + (k,)))


def _norm_axis(axis, ndim):
    return axis + ndim if axis < 0 else axis


def _stack(arrays, axis=0, **_):
    arrays = list(arrays)
    k = _n_dir(*arrays)
    ds = [_as_dual(a, k) for a in arrays]
    val = np.stack([d.val for d in ds], axis=axis)
    ax = _norm_axis(axis, val.ndim)
    return Dual(val, np.stack([_bcast_der(d.der, d.shape) for d in ds], axis=ax))


def _concatenate(arrays, axis=0, **_):
    arrays = list(arrays)
    k = _n_dir(*arrays)
    ds = [_as_dual(a, k) for a in arrays]
    val = np.concatenate([d.val for d in ds], axis=axis)
    ax = _norm_axis(axis, val.ndim)
    return Dual(val, np.concatenate([d.der for d in ds], axis=ax))


def _sum(a, axis=None, **_):
    if axis is None:
        return Dual(a.val.sum(), a.der.reshape(-1, a.n_dir).sum(axis=0))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
    return Dual(a.val.sum(axis=axes), a.der.sum(axis=axes))


def _where(cond, a, b):
    k = _n_dir(a, b)
    da, db = _as_dual(a, k), _as_dual(b, k)
    cond = np.asarray(cond)
    v = np.where(cond, da.val, db.val)
    der = np.where(cond[..., None], _bcast_der(da.der, da.shape), _bcast_der(db.der, db.shape))
    return Dual(v, _bcast_der(der, v.shape))


def _dot(a, b):
    return _matmul(a, b)


def _shape(a):
    return a.shape


def _broadcast_to(a, shape, **_):
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    return Dual(np.broadcast_to(a.val, shape), _bcast_der(a.der, shape))


def _atleast_1d(a):
    return a if a.ndim >= 1 else a.reshape(1)


def _clip(a, lo, hi, **_):
    return _select(np.less_equal)(_select(np.greater_equal)(a, lo), hi)


_FUNCTIONS = {
    np.stack: _stack,
    np.concatenate: _concatenate,
    np.sum: _sum,
    np.where: _where,
    np.dot: _dot,
    np.shape: _shape,
    np.broadcast_to: _broadcast_to,
    np.atleast_1d: _atleast_1d,
    np.clip: _clip,
}


def seed(*arrays):
    """Make dual inputs whose tangents are the unit directions.

    Each array's last axis is one argument vector; the directions are laid
    out contiguously across the arrays in order. Batch axes share directions.
    """
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    sizes = [a.shape[-1] for a in arrays]
    k = sum(sizes)
    out, off = [], 0
    for a, n in zip(arrays, sizes):
        der = np.zeros(a.shape + (k,))
        der[..., np.arange(n), off + np.arange(n)] = 1.0
        out.append(Dual(a, der))
        off += n
    return out


def jacobian(fn, *args):
    """Value and Jacobian of ``fn`` w.r.t. the trailing axes of ``args``.

    Returns ``(value, jac)`` with ``jac.shape == value.shape + (sum sizes,)``.
    Batch axes are evaluated in one pass.
    """
    duals = seed(*args)
    out = fn(*duals)
    if not isinstance(out, Dual):
        out = np.asarray(out, dtype=float)
        return out, np.zeros(out.shape + (duals[0].n_dir,))
    return out.val, out.der
