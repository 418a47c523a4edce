"""Markov policies as expression graphs closed under projected gradient steps.

A :class:`Policy` holds one node per time step.  Nodes are evaluated on
lists of scalar carriers, so a policy can be evaluated on real points,
batched arrays, or jets (for Jacobians of any order).  Evaluation always ends
with a Euclidean projection onto the control set.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import jets
from .jets import Jet, as_vector, primal

log = logging.getLogger(__name__)


# -- control sets -------------------------------------------------------------

class FullSpace:
    """``U = R^m``."""

    def project(self, u):
        return list(u)

    def distance(self, u):
        return np.zeros(np.shape(u)[1:])

    def normal_cone_distance(self, u, y):
        # N_U = {0} everywhere
        return np.sqrt(np.sum(np.asarray(y) ** 2, axis=0))

    def active(self, u):
        return np.zeros(np.shape(u), dtype=bool)

    def __repr__(self):
        return "FullSpace()"


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def project(self, u):
        out = []
        for ui, lo, hi in zip(u, self.lo, self.hi):
            pv = primal(ui)
            # clamped coordinates carry zero derivative
            out.append(jets.where(pv > hi, hi, jets.where(pv < lo, lo, ui)))
        return out

    def active(self, u):
        u = np.asarray(u, dtype=float)
        ex = (slice(None),) + (None,) * (u.ndim - 1)
        return (u <= self.lo[ex]) | (u >= self.hi[ex])

    def distance(self, u):
        u = np.asarray(u, dtype=float)
        ex = (slice(None),) + (None,) * (u.ndim - 1)
        return np.sqrt(np.sum((u - np.clip(u, self.lo[ex], self.hi[ex])) ** 2, axis=0))

    def normal_cone_distance(self, u, y):
        u, y = np.asarray(u, dtype=float), np.asarray(y, dtype=float)
        ex = (slice(None),) + (None,) * (u.ndim - 1)
        at_hi = u >= self.hi[ex]
        at_lo = u <= self.lo[ex]
        comp = np.where(at_hi & at_lo, 0.0,
                        np.where(at_hi, np.maximum(0.0, -y),
                                 np.where(at_lo, np.maximum(0.0, y), np.abs(y))))
        return np.sqrt(np.sum(comp ** 2, axis=0))


_INSIDE = 1.0 - 8 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    def project(self, u):
        d = [ui - ci for ui, ci in zip(u, self.center)]
        r2 = jets.dot(d, d)
        outside = primal(r2) > self.radius ** 2
        safe = jets.where(outside, r2, 1.0)
        # pull in by a few ulps so the rounded result still satisfies |u - c| <= r
        scale = jets.where(outside, (self.radius * _INSIDE) / jets.sqrt(safe), 1.0)
        return [ci + di * scale for ci, di in zip(self.center, d)]

    def _offset(self, u):
        u = np.asarray(u, dtype=float)
        ex = (slice(None),) + (None,) * (u.ndim - 1)
        d = u - self.center[ex]
        return d, np.sqrt(np.sum(d ** 2, axis=0))

    def active(self, u):
        _, r = self._offset(u)
        return np.broadcast_to(r >= self.radius * (1 - 1e-12), np.shape(u))

    def distance(self, u):
        _, r = self._offset(u)
        return np.maximum(0.0, r - self.radius)

    def normal_cone_distance(self, u, y):
        d, r = self._offset(u)
        y = np.asarray(y, dtype=float)
        on_boundary = r >= self.radius * (1 - 1e-12)
        unit = d / np.where(r > 0, r, 1.0)
        s = np.sum(y * unit, axis=0)
        radial = np.sqrt(np.sum((y - np.maximum(s, 0.0) * unit) ** 2, axis=0))
        return np.where(on_boundary, radial, np.sqrt(np.sum(y ** 2, axis=0)))


def project_point(U, u):
    """Euclidean projection of ``u`` onto the control set ``U``."""
    return U.project(as_vector(u))


# -- nodes --------------------------------------------------------------------

def _batch_shape(x):
    return np.shape(primal(x[0]))


class Linear:
    """``x -> A x + b``."""

    name = "linear"

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, dtype=float)

    def __call__(self, x):
        return [jets.dot([float(a) for a in row], x) + float(bi) for row, bi in zip(self.A, self.b)]


class Coordinate:
    """Select one state coordinate; index 0 is the ``p`` coordinate of the examples."""

    name = "coordinate"

    def __init__(self, index=0):
        self.index = int(index)

    def __call__(self, x):
        return [x[self.index] + 0.0]


class Constant:
    name = "constant"

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def __call__(self, x):
        sh = _batch_shape(x)
        return [np.full(sh, ci) for ci in self.c]


class Function:
    """Wrap any map evaluable on carrier lists."""

    def __init__(self, fn, name="function"):
        self.fn = fn
        self.name = name

    def __call__(self, x):
        return list(self.fn(x))


def example1_limit_node(m=(4.0, 4.0)):
    """Pointwise limit of the example-1 iteration, ``-G^T (f + m) / |G|^2``."""
    m1, m2 = (float(v) for v in m)

    def fn(x):
        p, q = x
        g2 = 1.0 + jets.cos(p)
        num = (jets.sin(p) + m1) + g2 * (m2 - jets.sin(q))
        return [-num / (1.0 + g2 * g2)]

    return Function(fn, "example1-limit")


@dataclass(frozen=True)
class GradientContext:
    """Everything the synthetic gradient needs at a bare point."""

    schedule: object
    field: object
    control_set: object = field(default_factory=FullSpace)


class GradStep:
    """Lazy node for ``Pi_U(prev_t(x) - alpha [grad J(prev)]_t(x))``."""

    name = "gradstep"

    def __init__(self, prev, t, alpha, context):
        self.prev = prev
        self.t = t
        self.alpha = float(alpha)
        self.context = context

    def apply(self, x, u):
        """Apply the step at ``x`` given ``u = prev_t(x)``."""
        if self.alpha == 0.0:
            return u
        from .adjoint import synthetic_gradient

        ctx = self.context
        g = synthetic_gradient(ctx.schedule, self.prev, ctx.field, self.t, x, u=u)
        return ctx.control_set.project([ui - self.alpha * gi for ui, gi in zip(u, g)])


@dataclass(frozen=True)
class Mesh:
    """Tensor grid over the box ``[lo, hi]`` with ``resolution`` nodes per axis."""

    lo: tuple
    hi: tuple
    resolution: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        res = np.atleast_1d(self.resolution)
        if res.size == 1:
            res = np.repeat(res, len(lo))
        res = tuple(int(r) for r in res)
        if not (len(lo) == len(hi) == len(res)):
            raise ValueError("mesh lo, hi and resolution must have equal length")
        if any(r < 2 for r in res) or any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("degenerate mesh: need hi > lo and at least 2 nodes per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def axes(self):
        return [np.linspace(a, b, r) for a, b, r in zip(self.lo, self.hi, self.resolution)]

    @property
    def spacing(self):
        return [(b - a) / (r - 1) for a, b, r in zip(self.lo, self.hi, self.resolution)]

    def points(self):
        """Node coordinates as a list of arrays with shape ``resolution``."""
        return list(np.meshgrid(*self.axes, indexing="ij"))


class GridSnapshot:
    """Multilinear interpolant of a policy step tabulated on a mesh.

    First derivatives come from interpolating the exact Jacobians stored at
    the nodes.  Points outside the mesh are clamped to its boundary and
    counted in ``diagnostics["clamped"]``.
    """

    name = "snapshot"

    def __init__(self, mesh, values, jacobians):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        self.jacobians = np.asarray(jacobians, dtype=float)
        self.diagnostics = {"clamped": 0}

    def _locate(self, x):
        idx, frac = [], []
        clamped = np.zeros(_batch_shape(x), dtype=bool)
        for xd, lo, h, r in zip(x, self.mesh.lo, self.mesh.spacing, self.mesh.resolution):
            s = (primal(xd) - lo) / h
            out = (s < 0) | (s > r - 1)
            clamped |= out
            sc = np.clip(s, 0, r - 1)
            i = np.minimum(np.floor(sc), r - 2).astype(int)
            idx.append(i)
            frac.append(jets.where(out, sc - i, (xd - lo) / h - i))
        return idx, frac, clamped

    def _interp(self, table, idx, frac):
        out = 0.0
        for corner in itertools.product((0, 1), repeat=len(idx)):
            w = 1.0
            for c, f in zip(corner, frac):
                w = w * (f if c else 1.0 - f)
            out = w * table[tuple(i + c for i, c in zip(idx, corner))] + out
        return out

    def __call__(self, x):
        tag = jets._top_tag(*x)
        if tag is None:
            idx, frac, clamped = self._locate(x)
            self.diagnostics["clamped"] += int(np.sum(clamped))
            return [self._interp(v, idx, frac) for v in self.values]
        inner = [jets._split(xi, tag)[0] for xi in x]
        u = self(inner)
        idx, frac, _ = self._locate(inner)
        k = next(xi.width for xi in x if isinstance(xi, Jet) and xi.tag == tag)
        # x - inner is a pure perturbation at level `tag`
        dx = []
        for xi, vi in zip(x, inner):
            t = jets._split(xi, tag)[1]
            sh = jets.shape(vi)
            dx.append(Jet(np.zeros(sh), np.zeros((k,) + sh) if t is None else t, tag))
        out = []
        for ui, rows in zip(u, self.jacobians):
            terms = [self._interp(rows[j], idx, frac) * dx[j] for j in range(len(x))]
            out.append(ui + jets._sum(terms))
        return out


# -- policies -----------------------------------------------------------------

class Policy:
    """A Markov policy ``{phi_t}``; ``nodes[t]`` defines ``phi_t`` before projection."""

    def __init__(self, nodes, control_set=None):
        self.nodes = tuple(nodes)
        self.control_set = FullSpace() if control_set is None else control_set

    @classmethod
    def constant_in_time(cls, node, T, control_set=None):
        return cls([node] * T, control_set)

    @property
    def horizon(self):
        return len(self.nodes)

    def __repr__(self):
        names = ", ".join(getattr(n, "name", type(n).__name__) for n in self.nodes)
        return f"Policy([{names}], {self.control_set!r})"

    def _unwind(self, t, x):
        # unwind chains of gradient steps iteratively so depth does not grow with K
        if not 0 <= t < self.horizon:
            raise IndexError(f"policy step {t} outside 0..{self.horizon - 1}")
        chain, pol = [], self
        while isinstance(pol.nodes[t], GradStep):
            chain.append(pol.nodes[t])
            pol = pol.nodes[t].prev
        u = pol.control_set.project(pol.nodes[t](x))
        yield u
        for node in reversed(chain):
            u = node.apply(x, u)
            yield u

    def eval(self, t, x):
        """``phi_t(x)`` as a list of control coordinates, projected onto ``U``."""
        u = None
        for u in self._unwind(t, as_vector(x)):
            pass
        jets.check_finite(u, "control", t=t)
        return u

    def history(self, t, x):
        """Values at ``x`` of every iterate in the gradient-step chain, oldest first.

        One pass over the chain, so all ``K + 1`` iterates cost as much as
        evaluating the last one.
        """
        out = list(self._unwind(t, as_vector(x)))
        jets.check_finite(out[-1], "control", t=t)
        return out

    def value_and_jac(self, t, x):
        return jets.value_and_jacobian(lambda z: self.eval(t, z), x)

    def jac(self, t, x):
        """``d phi_t / dx`` as an ``m x n`` nested list."""
        return self.value_and_jac(t, x)[1]

    def depth(self):
        """Number of stacked gradient steps at ``t = 0``."""
        d, node = 0, self.nodes[0]
        while isinstance(node, GradStep):
            d += 1
            node = node.prev.nodes[0]
        return d


def grad_step(policy, alpha, context):
    """Wrap every step of ``policy`` in a lazy projected gradient step."""
    if alpha < 0:
        raise ValueError("step size must be non-negative")
    nodes = [GradStep(policy, t, alpha, context) for t in range(policy.horizon)]
    return Policy(nodes, context.control_set)


def snapshot(policy, t, mesh):
    """Tabulate ``phi_t`` and its Jacobian on ``mesh`` as a :class:`GridSnapshot` node."""
    pts = mesh.points()
    u, jac = policy.value_and_jac(t, pts)
    return GridSnapshot(mesh, jets.to_array(u), jets.to_array(jac))


def snapshot_policy(policy, mesh):
    return Policy([snapshot(policy, t, mesh) for t in range(policy.horizon)],
                  policy.control_set)
