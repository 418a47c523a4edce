"""Forward-mode automatic differentiation with batched, nestable jets.

A :class:`Jet` is one scalar coordinate carried together with its
directional derivatives.  Its ``value`` may be a float, a numpy array of any
batch shape, or another :class:`Jet` (nesting gives higher derivatives), and
its ``tangent`` has the value's shape with one extra *leading* axis of length
``k``, the number of seed directions.

Vectors are plain Python lists of scalar carriers and matrices are lists of
rows.  Keeping the algebra at the scalar level means every operation is
elementwise, so batching over Monte Carlo samples is just numpy broadcasting.

Each seeding gets a fresh integer ``tag``.  When jets with different tags
meet, the one with the larger tag is the outer level and the other is treated
as a constant at that level, which keeps nested differentiation free of
perturbation confusion.
"""
from __future__ import annotations

import itertools
from functools import reduce

import numpy as np

_tags = itertools.count(1)


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a value or derivative."""

    def __init__(self, message, t=None, sample=None):
        super().__init__(message)
        self.t = t
        self.sample = sample


def shape(a):
    if isinstance(a, Jet):
        return shape(a.value)
    return np.shape(a)


def reshape(a, new_shape):
    if isinstance(a, Jet):
        return a.reshape(new_shape)
    return np.reshape(a, new_shape)


def _pad(t, rank):
    # insert singleton axes after the tangent axis so the primal part has `rank` dims
    sh = shape(t)
    missing = rank - (len(sh) - 1)
    if missing <= 0:
        return t
    return reshape(t, sh[:1] + (1,) * missing + sh[1:])


def primal(a):
    """Strip every jet level and return the underlying real value."""
    while isinstance(a, Jet):
        a = a.value
    return a


def _split(a, tag):
    """Return ``(value, tangent)`` of ``a`` at level ``tag``; constants get tangent ``None``."""
    if isinstance(a, Jet) and a.tag == tag:
        return a.value, a.tangent
    return a, None


def _top_tag(*args):
    tags = [a.tag for a in args if isinstance(a, Jet)]
    return max(tags) if tags else None


class Jet:
    __slots__ = ("value", "tangent", "tag")
    # keep numpy from broadcasting a Jet as an object scalar; use our reflected ops instead
    __array_ufunc__ = None

    def __init__(self, value, tangent, tag=0):
        if not isinstance(value, Jet):
            value = np.asarray(value, dtype=float)
        if not isinstance(tangent, Jet):
            tangent = np.asarray(tangent, dtype=float)
        vs, ts = shape(value), shape(tangent)
        if len(ts) != len(vs) + 1 or ts[1:] != vs:
            raise ValueError(f"tangent shape {ts} does not match value shape {vs} plus a seed axis")
        self.value = value
        self.tangent = tangent
        self.tag = tag

    @property
    def width(self):
        """Number of seed directions ``k``."""
        return shape(self.tangent)[0]

    @property
    def shape(self):
        return shape(self.value)

    def __repr__(self):
        return f"Jet(value={self.value!r}, tangent={self.tangent!r}, tag={self.tag})"

    def reshape(self, new_shape):
        new_shape = tuple(new_shape)
        return Jet(reshape(self.value, new_shape),
                   reshape(self.tangent, (self.width,) + new_shape), self.tag)

    def _other(self, other):
        # split `other` at this jet's level; None when `other` lives on an outer level
        if isinstance(other, Jet):
            if other.tag > self.tag:
                return None
            if other.tag == self.tag and other.width != self.width:
                raise ValueError(
                    f"cannot combine jets with {self.width} and {other.width} seed directions")
        return _split(other, self.tag)

    def _rank(self, ov):
        return len(np.broadcast_shapes(self.shape, shape(ov)))

    def __neg__(self):
        return Jet(-self.value, -self.tangent, self.tag)

    def __pos__(self):
        return self

    def __add__(self, other):
        split = self._other(other)
        if split is None:
            return other.__radd__(self)
        ov, ot = split
        r = self._rank(ov)
        t = _pad(self.tangent, r) if ot is None else _pad(self.tangent, r) + _pad(ot, r)
        if ot is None and r > len(self.shape):
            t = t + np.zeros(shape(ov))
        return Jet(self.value + ov, t, self.tag)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        split = self._other(other)
        if split is None:
            return other.__rmul__(self)
        ov, ot = split
        r = self._rank(ov)
        t = _pad(self.tangent, r) * ov
        if ot is not None:
            t = t + self.value * _pad(ot, r)
        return Jet(self.value * ov, t, self.tag)

    __rmul__ = __mul__

    def __truediv__(self, other):
        split = self._other(other)
        if split is None:
            return other.__rtruediv__(self)
        ov, ot = split
        r = self._rank(ov)
        v = self.value / ov
        t = _pad(self.tangent, r) / ov
        if ot is not None:
            t = t - v * _pad(ot, r) / ov
        return Jet(v, t, self.tag)

    def __rtruediv__(self, other):
        # `other` is a constant at this level
        v = other / self.value
        r = len(shape(v))
        return Jet(v, -v * _pad(self.tangent, r) / self.value, self.tag)

    def __pow__(self, p):
        if isinstance(p, Jet):
            raise TypeError("jet exponents are not supported")
        if p == 2:
            return self * self
        return Jet(self.value ** p, p * self.value ** (p - 1) * self.tangent, self.tag)


def _unary(fn, dfn):
    def op(a):
        if isinstance(a, Jet):
            return Jet(op(a.value), dfn(a.value) * a.tangent, a.tag)
        return fn(a)
    op.__name__ = fn.__name__
    return op


sin = _unary(np.sin, lambda v: cos(v))
cos = _unary(np.cos, lambda v: -sin(v))
exp = _unary(np.exp, lambda v: exp(v))
tanh = _unary(np.tanh, lambda v: 1.0 - tanh(v) ** 2)
sqrt = _unary(np.sqrt, lambda v: 0.5 / sqrt(v))
log = _unary(np.log, lambda v: 1.0 / v)


def where(mask, a, b):
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is a real boolean array."""
    tag = _top_tag(a, b)
    if tag is None:
        return np.where(mask, a, b)
    av, at = _split(a, tag)
    bv, bt = _split(b, tag)
    value = where(mask, av, bv)
    r = len(shape(value))
    k = (a if isinstance(a, Jet) and a.tag == tag else b).width
    zero = np.zeros((k,) + (1,) * r)
    at = zero if at is None else _pad(at, r)
    bt = zero if bt is None else _pad(bt, r)
    return Jet(value, where(mask, at, bt), tag)


# -- seeding and extraction ---------------------------------------------------

def seed(x, directions, tag=None):
    """Seed a vector ``x`` with an ``n x k`` matrix of directions.

    Returns a list of :class:`Jet` coordinates whose tangent rows are the rows
    of ``directions``.  Coordinates of ``x`` may be batched arrays or jets.
    """
    x = list(x)
    directions = np.asarray(directions, dtype=float)
    if directions.ndim < 2 or directions.shape[0] != len(x):
        raise ValueError(
            f"directions must have {len(x)} rows, got shape {directions.shape}")
    tag = next(_tags) if tag is None else tag
    out = []
    for xi, di in zip(x, directions):
        sh = shape(xi)
        di = di.reshape(di.shape[:1] + (1,) * (len(sh) - di.ndim + 1) + di.shape[1:])
        out.append(Jet(xi, np.broadcast_to(di, di.shape[:1] + tuple(sh)), tag))
    return out


def value_of(vec):
    """Values of a jet vector as a real array."""
    return np.asarray([primal(v) for v in vec], dtype=float)


def tangent_of(vec, tag=None):
    """Tangent matrix ``d x k`` (plus batch axes) of a jet vector at its outermost level."""
    tag = _top_tag(*vec) if tag is None else tag
    rows = []
    for v in vec:
        _, t = _split(v, tag)
        if t is None:
            k = next(w.width for w in vec if isinstance(w, Jet) and w.tag == tag)
            t = np.zeros((k,) + shape(v))
        rows.append(primal(t))
    return np.asarray(rows, dtype=float)


def as_vector(x):
    """Coerce ``x`` to a list of scalar carriers (coordinate-major)."""
    if isinstance(x, np.ndarray):
        return list(x.astype(float, copy=False))
    return [v if isinstance(v, Jet) else np.asarray(v, dtype=float) for v in x]


def _leaves(a):
    if isinstance(a, Jet):
        return _leaves(a.value) + _leaves(a.tangent)
    return [np.asarray(a)]


def check_finite(vec, what="value", t=None):
    """Raise :class:`NonFiniteError` if any value or derivative in ``vec`` is not finite."""
    for v in vec:
        for arr in _leaves(v):
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))
                sample = int(bad[0][-1]) if np.ndim(primal(v)) else None
                where_ = "" if t is None else f" at stage t={t}"
                raise NonFiniteError(f"non-finite {what}{where_}", t=t, sample=sample)


def value_and_jacobian(f, x):
    """Evaluate ``f`` at the carrier vector ``x`` and its Jacobian in one pass.

    Works when ``x`` itself holds jets; the returned value and Jacobian entries
    are then carriers one level down.
    """
    x = as_vector(x)
    tag = next(_tags)
    y = list(f(seed(x, np.eye(len(x)), tag)))
    values, jac = [], []
    for yi in y:
        v, t = _split(yi, tag)
        values.append(v)
        if t is None:
            jac.append([np.zeros(shape(v)) for _ in x])
        else:
            jac.append([t_row(t, j) for j in range(len(x))])
    return values, jac


def t_row(t, j):
    """The ``j``-th seed component of a tangent carrier."""
    return _take(t, 0, j)


def _take(a, axis, j):
    # index primal axis `axis`; nested tangents carry one more leading axis
    if isinstance(a, Jet):
        return Jet(_take(a.value, axis, j), _take(a.tangent, axis + 1, j), a.tag)
    return np.take(a, j, axis=axis)


def jacobian(f, x):
    """Exact forward-mode Jacobian ``[df_i/dx_j]`` of ``f`` at the real point ``x``."""
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        values, jac = value_and_jacobian(f, x)
    out = np.asarray([[primal(e) for e in row] for row in jac], dtype=float)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite Jacobian")
    if not all(np.all(np.isfinite(primal(v))) for v in values):
        raise NonFiniteError("non-finite function value")
    return out


# -- small dense linear algebra over carriers ---------------------------------

def _sum(terms):
    return reduce(lambda a, b: a + b, terms)


def dot(a, b):
    return _sum([ai * bi for ai, bi in zip(a, b)])


def matvec(A, v):
    return [dot(row, v) for row in A]


def rmatvec(A, v):
    """``A^T v``."""
    return [_sum([A[i][j] * v[i] for i in range(len(A))]) for j in range(len(A[0]))]


def matmul(A, B):
    return [[_sum([A[i][l] * B[l][j] for l in range(len(B))]) for j in range(len(B[0]))]
            for i in range(len(A))]


def matadd(A, B):
    return [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(A, B)]


def to_array(M):
    """Convert a (nested) list of real carriers to an array, batch axes last."""
    if isinstance(M, list):
        return np.asarray([to_array(e) for e in M], dtype=float)
    return np.asarray(primal(M), dtype=float)
