"""Costates, the lambda field, the synthetic gradient and optimality residuals.

Products of closed-loop Jacobians are taken in time order, latest step on the
left, so that ``p_t = q_t(x_t)^T p_{t+1}`` and the gradient is the exact
derivative of the objective along a one-step policy perturbation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jets
from .ensemble import objective, rollout
from .jets import as_vector, primal


# -- conditional target estimators --------------------------------------------

class ConstantField:
    """``E[t(x_0) | x_s = x] = c``; exact when the transport map is constant."""

    pointwise = True

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def conditional(self, s, x):
        sh = np.shape(primal(x[0]))
        return [np.full(sh, ci) for ci in self.c]

    def per_sample(self, ensemble, s):
        return np.broadcast_to(self.c, ensemble.targets.shape)


class PathwiseField:
    """Each sample uses its own ``t(x_0)``.

    At an arbitrary point this is only defined for conditioning time 0, where
    ``E[t(x_0) | x_0 = x] = t(x)`` holds exactly.
    """

    def __init__(self, target=None):
        self.target = target

    @property
    def pointwise(self):
        return self.target is not None

    def conditional(self, s, x):
        if s == 0 and self.target is not None:
            return self.target(x)
        raise ValueError(
            "the pathwise target field is only defined on ensemble samples for "
            f"conditioning time {s}; use a ConstantField or KnnField")

    def per_sample(self, ensemble, s):
        return ensemble.targets


class KnnField:
    """k-nearest-neighbour regression of ``t(x_0)`` on ``x_s``, fitted on an ensemble."""

    pointwise = True

    def __init__(self, k=16):
        if k < 1:
            raise ValueError("k must be a positive integer")
        self.k = int(k)
        self._trees = None
        self._targets = None

    def fit(self, ensemble):
        from scipy.spatial import cKDTree

        if ensemble.size < self.k:
            raise ValueError(f"KnnField(k={self.k}) needs at least {self.k} samples")
        fitted = KnnField(self.k)
        fitted._trees = [cKDTree(ensemble.states[s]) for s in range(ensemble.horizon)]
        fitted._targets = ensemble.targets
        return fitted

    def conditional(self, s, x):
        if self._trees is None:
            raise ValueError("KnnField has not been fitted")
        pts = np.stack([np.asarray(primal(xi), dtype=float) for xi in x], axis=-1)
        flat = pts.reshape(-1, len(x))
        _, idx = self._trees[s].query(flat, k=self.k)
        est = self._targets[idx.reshape(len(flat), -1)].mean(axis=1)
        return [est[:, i].reshape(pts.shape[:-1]) for i in range(est.shape[1])]

    def per_sample(self, ensemble, s):
        return np.stack(self.conditional(s, ensemble.coords(s)), axis=1)


# -- costates -----------------------------------------------------------------

def q_matrix(schedule, policy, t, x):
    """Closed-loop Jacobian ``df/dx + df/du dphi/dx`` at ``x``."""
    x = as_vector(x)
    u, dphi = policy.value_and_jac(t, x)
    fx, fu = schedule.jacobians(t, x, u)
    return jets.matadd(fx, jets.matmul(fu, dphi))


def _batched(M, N):
    # nested list of (N,) arrays -> (N, rows, cols)
    a = jets.to_array(M)
    return np.moveaxis(np.broadcast_to(a, a.shape[:2] + (N,)), -1, 0)


@dataclass(frozen=True, eq=False)
class AdjointTrace:
    """Closed-loop Jacobians and costates of an ensemble.

    ``q[t-1]`` is the ``(N, n, n)`` stack of ``q_t`` for ``t = 1..T-1`` and
    ``p[t-1]`` the ``(N, n)`` stack of ``p_t`` for ``t = 1..T``.  ``p_t``
    conditions on ``x_{conditioned_on[t-1]}``.
    """

    q: np.ndarray
    p: np.ndarray
    conditioned_on: tuple

    def closed_loop(self, t):
        if not 1 <= t <= self.q.shape[0]:
            raise IndexError(f"closed-loop index {t} outside 1..{self.q.shape[0]}")
        return self.q[t - 1]

    def costate(self, t):
        if not 1 <= t <= self.p.shape[0]:
            raise IndexError(f"costate index {t} outside 1..{self.p.shape[0]}")
        return self.p[t - 1]


def costates(ensemble, schedule, policy, field):
    """Pathwise costates ``p_t = (q_{T-1} ... q_t)^T (x_T - E[t(x_0) | x_{t-1}])``."""
    T, N = schedule.horizon, ensemble.size
    xT = ensemble.states[T]
    n = xT.shape[1]
    q = np.empty((T - 1, N, n, n))
    for t in range(1, T):
        q[t - 1] = _batched(q_matrix(schedule, policy, t, ensemble.coords(t)), N)
    p = np.empty((T,) + xT.shape)
    for t in range(1, T + 1):
        v = xT - field.per_sample(ensemble, t - 1)
        for s in range(T - 1, t - 1, -1):
            v = np.einsum("nij,ni->nj", q[s - 1], v)
        p[t - 1] = v
    return AdjointTrace(q, p, tuple(range(T)))


def lambda_field(schedule, policy, field, t, x, u=None):
    """Costate ``p_t`` as a function of the conditioning state ``x_{t-1} = x``.

    ``u`` may pass in ``phi_{t-1}(x)`` when the caller already has it.
    Evaluable on jets.
    """
    T = schedule.horizon
    if not 1 <= t <= T:
        raise IndexError(f"lambda index {t} outside 1..{T}")
    x = as_vector(x)
    if u is None:
        u = policy.eval(t - 1, x)
    xs = schedule.step(t - 1, x, u)
    qs = []
    for s in range(t, T):
        us, dphi = policy.value_and_jac(s, xs)
        fx, fu = schedule.jacobians(s, xs, us)
        qs.append(jets.matadd(fx, jets.matmul(fu, dphi)))
        xs = schedule.step(s, xs, us)
    v = [a - b for a, b in zip(xs, field.conditional(t - 1, x))]
    for q in reversed(qs):
        v = jets.rmatvec(q, v)
    return v


def synthetic_gradient(schedule, policy, field, t, x, u=None):
    """``[grad J(phi)]_t(x) = df_t/du(x, phi_t(x))^T lambda_{t+1}(x)``."""
    if not 0 <= t < schedule.horizon:
        raise IndexError(f"gradient index {t} outside 0..{schedule.horizon - 1}")
    x = as_vector(x)
    if u is None:
        u = policy.eval(t, x)
    fu = schedule.jac_u(t, x, u)
    return jets.rmatvec(fu, lambda_field(schedule, policy, field, t + 1, x, u=u))


# -- necessary-condition residuals --------------------------------------------

def _rms(a):
    return float(np.sqrt(np.mean(a ** 2)))


def stationarity_residual(trace, schedule, policy, ensemble, U):
    """Per ``t``, RMS distance from ``-df/du^T p_{t+1}`` to the normal cone at ``phi_t(x_t)``."""
    out = []
    for t in range(schedule.horizon):
        u = ensemble.controls[t].T
        fu = _batched(schedule.jac_u(t, ensemble.coords(t), list(u)), ensemble.size)
        g = np.einsum("nij,ni->jn", fu, trace.costate(t + 1))
        out.append(_rms(U.normal_cone_distance(u, -g)))
    return np.array(out)


def recurrence_residual(trace, schedule, policy, ensemble):
    """Per ``t = 1..T-1``, RMS of ``|p_t - df_t/dx^T p_{t+1}|``."""
    out = []
    for t in range(1, schedule.horizon):
        u = list(ensemble.controls[t].T)
        fx = _batched(schedule.jac_x(t, ensemble.coords(t), u), ensemble.size)
        r = trace.costate(t) - np.einsum("nij,ni->nj", fx, trace.costate(t + 1))
        out.append(_rms(np.sqrt(np.sum(r ** 2, axis=1))))
    return np.array(out)


# -- Gateaux differential -----------------------------------------------------

class _Perturbed:
    # phi with step tau replaced by phi_tau + eps (psi - phi_tau)
    def __init__(self, policy, tau, psi, eps):
        self.policy, self.tau, self.psi, self.eps = policy, tau, psi, eps
        self.horizon = policy.horizon

    def eval(self, t, x):
        u = self.policy.eval(t, x)
        if t != self.tau or self.eps == 0.0:
            return u
        return [ui + self.eps * (vi - ui) for ui, vi in zip(u, self.psi(x))]


def gateaux_fd(schedule, policy, target, x0s, tau, psi, eps_list=(1e-2, 5e-3, 2.5e-3)):
    """Finite-difference derivative of ``J(phi + eps (psi - phi) at step tau)`` at ``eps = 0+``.

    One-sided quotients at each ``eps`` are extrapolated to zero with the
    interpolating polynomial (Richardson).  ``J`` is the sample average over
    the fixed cloud ``x0s``.
    """
    eps = np.asarray(eps_list, dtype=float)
    if eps.size == 0 or np.any(eps <= 0) or np.any(eps > 1):
        raise ValueError("eps values must lie in (0, 1]")

    def J(e):
        return objective(rollout(schedule, _Perturbed(policy, tau, psi, e), x0s, target))

    j0 = J(0.0)
    quotients = np.array([(J(e) - j0) / e for e in eps])
    if eps.size == 1:
        return float(quotients[0])
    coef = np.polynomial.polynomial.polyfit(eps, quotients, eps.size - 1)
    return float(coef[0])


def gradient_inner_product(schedule, policy, field, target, x0s, tau, psi):
    """``E <[grad J]_tau(x_tau), psi(x_tau) - phi_tau(x_tau)>`` over the cloud ``x0s``."""
    ens = rollout(schedule, policy, x0s, target)
    x = ens.coords(tau)
    u = policy.eval(tau, x)
    g = synthetic_gradient(schedule, policy, field, tau, x, u=u)
    d = [vi - ui for vi, ui in zip(psi(x), u)]
    return float(np.mean(primal(jets.dot(g, d))))
