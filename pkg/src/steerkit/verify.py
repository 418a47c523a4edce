"""Independent oracles and self-check suites.

The example-1 formulas here are written directly in numpy and share no code
with :mod:`steerkit.dynamics` or :mod:`steerkit.policy`, so agreement between
the two is evidence rather than a tautology.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np


# -- example 1 oracles --------------------------------------------------------

def _drift(x):
    p, q = np.asarray(x[0], dtype=float), np.asarray(x[1], dtype=float)
    return np.sin(p), -np.sin(q)


def _gain(x):
    p = np.asarray(x[0], dtype=float)
    return np.ones_like(p), 1.0 + np.cos(p)


def _gain_sq(x):
    g1, g2 = _gain(x)
    return g1 ** 2 + g2 ** 2


@dataclass(frozen=True)
class Example1Params:
    m: tuple = (4.0, 4.0)
    alpha: float = 0.15
    phi0: Callable = staticmethod(lambda x: np.asarray(x[0], dtype=float))
    i: int = 0


def example1_limit(x, m=(4.0, 4.0)):
    """``-G(x)^T (f(x) + m) / |G(x)|^2``."""
    f1, f2 = _drift(x)
    g1, g2 = _gain(x)
    return -(g1 * (f1 + m[0]) + g2 * (f2 + m[1])) / _gain_sq(x)


def contraction_factor(x, alpha):
    """``1 - alpha |G(x)|^2``; the iteration contracts where its magnitude is below 1."""
    return 1.0 - alpha * _gain_sq(x)


def example1_closed_form(params, x):
    """The ``i``-th iterate in closed form at ``x`` (coordinate-major)."""
    c = contraction_factor(x, params.alpha) ** params.i
    return c * params.phi0(x) + example1_limit(x, params.m) * (1.0 - c)


# -- finite differences -------------------------------------------------------

def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of ``f: R^n -> R^m`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e), dtype=float) - np.asarray(f(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=1)


def fd_step_sweep(f, x, steps=(1e-4, 1e-5, 1e-6)):
    """FD Jacobians for a sweep of steps, with the spread between consecutive steps."""
    jacs = [fd_jacobian(f, x, h) for h in steps]
    spread = [float(np.max(np.abs(a - b))) for a, b in zip(jacs, jacs[1:])]
    return jacs, spread


# -- random smooth test systems -----------------------------------------------

def random_smooth_system(rng, n=2, m=2, T=3, scale=0.5):
    """A random ``T``-step smooth system and smooth policy evaluable on jets."""
    from . import jets
    from .dynamics import DynamicsSchedule, DynamicsStage
    from .policy import Function, Policy

    stages, nodes = [], []
    for t in range(T):
        A = np.eye(n) + scale * rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        C = rng.normal(size=(n, n))
        D = rng.normal(size=(n, m))

        def transition(x, u, A=A, B=B, C=C, D=D):
            lin = jets.matvec(A.tolist(), x)
            arg = [a + b for a, b in zip(jets.matvec(C.tolist(), x), jets.matvec(D.tolist(), u))]
            drive = jets.matvec(B.tolist(), u)
            return [li + 0.3 * jets.sin(ai) + di for li, ai, di in zip(lin, arg, drive)]

        stages.append(DynamicsStage(t, n, m, transition))
        K = scale * rng.normal(size=(m, n))
        W = rng.normal(size=(m, n))

        def phi(x, K=K, W=W):
            return [a + 0.2 * jets.tanh(b) for a, b in zip(jets.matvec(K.tolist(), x),
                                                         jets.matvec(W.tolist(), x))]

        nodes.append(Function(phi, "random-smooth"))
    return DynamicsSchedule(tuple(stages), "random-smooth"), Policy(nodes)


# -- suites -------------------------------------------------------------------

def _probe_grid(count=10, lo=-8.0, hi=8.0):
    g = np.linspace(lo, hi, count)
    P, Q = np.meshgrid(g, g, indexing="ij")
    return [P.ravel(), Q.ravel()]


def suite_jets_vs_fd():
    from . import jets
    from .dynamics import registry_get

    rng = np.random.default_rng(11)
    worst = 0.0
    for name in ("example1", "example2"):
        sch = registry_get(name, {})
        n, m = sch.state_dim, sch.control_dim
        for _ in range(20):
            z = rng.uniform(-3, 3, n + m)

            def f(v):
                return sch.step(0, list(v[:n]), list(v[n:]))
            exact = jets.jacobian(f, z)
            approx = fd_jacobian(lambda v: jets.to_array(f(v)), z)
            worst = max(worst, float(np.max(np.abs(exact - approx)) / max(1.0, np.max(np.abs(exact)))))
    return worst <= 1e-5, {"max_rel_error": worst}


def suite_example1_closed_form(iters=10):
    from .adjoint import PathwiseField
    from .dynamics import registry_get
    from .ensemble import Shift
    from .policy import Coordinate, GradientContext, Policy, grad_step

    m, alpha = (4.0, 4.0), 0.15
    sch = registry_get("example1", {"m": m})
    ctx = GradientContext(sch, PathwiseField(Shift(m)))
    x = _probe_grid()
    pol, worst = Policy([Coordinate(0)]), 0.0
    for i in range(iters + 1):
        got = pol.eval(0, x)[0]
        want = example1_closed_form(Example1Params(m, alpha, i=i), x)
        worst = max(worst, float(np.max(np.abs(got - want))))
        pol = grad_step(pol, alpha, ctx)
    return worst <= 1e-9, {"max_abs_error": worst, "iterations": iters}


def suite_example1_limit(iters=200):
    from .adjoint import PathwiseField
    from .dynamics import registry_get
    from .ensemble import Shift
    from .policy import Coordinate, GradientContext, Policy, grad_step

    m, alpha = (4.0, 4.0), 0.15
    sch = registry_get("example1", {"m": m})
    ctx = GradientContext(sch, PathwiseField(Shift(m)))
    x = _probe_grid(41)
    limit = example1_limit(x, m)
    phi0 = np.asarray(x[0])
    pol = Policy([Coordinate(0)])
    for _ in range(iters):
        pol = grad_step(pol, alpha, ctx)
    history = pol.history(0, x)
    bound_ok = True
    for i, u in enumerate(history[:51]):
        bound = np.abs(contraction_factor(x, alpha)) ** i * np.abs(phi0 - limit)
        bound_ok &= bool(np.all(np.abs(u[0] - limit) <= bound + 1e-12))
    err = float(np.max(np.abs(history[-1][0] - limit)))
    return err <= 1e-6 and bound_ok, {"max_abs_error": err, "contraction_bound_holds": bound_ok}


def suite_gradient_vs_gateaux(pairs=6, points=100):
    from .adjoint import ConstantField, gateaux_fd, gradient_inner_product
    from .dynamics import registry_get
    from .ensemble import Gaussian, Zero, sample_initial
    from .policy import GradientContext, Linear, Policy, grad_step

    sch = registry_get("example2", {})
    fld = ConstantField([0.0, 0.0])
    pols = [Policy.constant_in_time(Linear(-0.5 * np.eye(2)), 3)]
    for _ in range(3):
        pols.append(grad_step(pols[-1], 0.14, GradientContext(sch, fld)))
    x0 = sample_initial(Gaussian([0, 0], np.eye(2)), points, 3)
    rng = np.random.default_rng(5)
    worst = 0.0
    for j in range(pairs):
        pol = pols[j % len(pols)]
        tau = int(rng.integers(0, 3))
        psi = random_direction(rng, 2, 2)
        fd = gateaux_fd(sch, pol, Zero(), x0, tau, psi)
        ip = gradient_inner_product(sch, pol, fld, Zero(), x0, tau, psi)
        worst = max(worst, abs(fd - ip) / max(abs(fd), 1e-12))
    return worst <= 1e-3, {"max_rel_error": worst, "pairs": pairs}


def random_direction(rng, n, m):
    """A random smooth perturbation policy ``x -> M sin(x) + c``."""
    from . import jets

    M = rng.normal(size=(m, n))
    c = rng.normal(size=m)
    return lambda x: [jets.dot(M[i].tolist(), [jets.sin(v) for v in x]) + float(c[i]) for i in range(m)]


def suite_pathwise_recurrence(trajectories=200, systems=3):
    from .adjoint import PathwiseField, costates
    from .ensemble import Gaussian, Identity, rollout, sample_initial

    worst = 0.0
    for s in range(systems):
        rng = np.random.default_rng(100 + s)
        sch, pol = random_smooth_system(rng)
        x0 = sample_initial(Gaussian([0, 0], np.eye(2)), trajectories, s)
        ens = rollout(sch, pol, x0, Identity())
        tr = costates(ens, sch, pol, PathwiseField())
        for t in range(1, sch.horizon):
            rhs = np.einsum("nij,ni->nj", tr.closed_loop(t), tr.costate(t + 1))
            worst = max(worst, float(np.max(np.abs(tr.costate(t) - rhs))))
    return worst <= 1e-12, {"max_abs_error": worst}


def suite_stationarity_optimum(points=1000):
    from .adjoint import PathwiseField, costates, stationarity_residual
    from .dynamics import registry_get
    from .ensemble import Gaussian, Identity, Shift, rollout, sample_initial
    from .policy import FullSpace, Linear, Policy, example1_limit_node

    m = (4.0, 4.0)
    sch = registry_get("example1", {"m": m})
    pol = Policy([example1_limit_node(m)])
    x0 = sample_initial(Gaussian(m, np.eye(2)), points, 9)
    ens = rollout(sch, pol, x0, Shift(m))
    r1 = stationarity_residual(costates(ens, sch, pol, PathwiseField()), sch, pol, ens, FullSpace())
    sch2 = registry_get("integrator", {})
    pol2 = Policy([Linear(np.eye(2))])
    ens2 = rollout(sch2, pol2, x0, Identity())
    r2 = stationarity_residual(costates(ens2, sch2, pol2, PathwiseField()), sch2, pol2, ens2, FullSpace())
    ok = float(np.max(r1)) <= 1e-8 and float(np.max(r2)) == 0.0
    return ok, {"example1_limit": float(np.max(r1)), "integrator": float(np.max(r2))}


SUITES = {
    "jets_vs_fd": suite_jets_vs_fd,
    "example1_closed_form": suite_example1_closed_form,
    "example1_limit": suite_example1_limit,
    "gradient_vs_gateaux": suite_gradient_vs_gateaux,
    "pathwise_recurrence": suite_pathwise_recurrence,
    "stationarity_optimum": suite_stationarity_optimum,
}


def run_suites(names=None):
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; known: {sorted(SUITES)}")
    results = []
    for name in names:
        start = time.perf_counter()
        try:
            passed, detail = SUITES[name]()
        except Exception as exc:  # a crashing suite is a failed suite
            passed, detail = False, {"error": f"{type(exc).__name__}: {exc}"}
        detail["seconds"] = round(time.perf_counter() - start, 3)
        results.append({"name": name, "passed": bool(passed), "detail": detail})
    return results


# -- gradient check -----------------------------------------------------------

class _ScaledInputJacobian:
    # test hook: same transitions, input Jacobian scaled by `factor`
    def __init__(self, schedule, factor):
        self._schedule, self.factor = schedule, factor

    def __getattr__(self, name):
        return getattr(self._schedule, name)

    def jacobians(self, t, x, u):
        fx, fu = self._schedule.jacobians(t, x, u)
        return fx, [[self.factor * e for e in row] for row in fu]

    def jac_x(self, t, x, u):
        return self.jacobians(t, x, u)[0]

    def jac_u(self, t, x, u):
        return self.jacobians(t, x, u)[1]


def gradcheck(schedule, policy, field, target, x0s, directions=3, eps=(1e-2, 5e-3, 2.5e-3),
              seed=0, corrupt_input_jacobian=None):
    """Compare synthetic-gradient inner products with Gateaux finite differences.

    Returns a report with the maximum relative error and the worst case.
    """
    from .adjoint import gateaux_fd, gradient_inner_product

    grad_schedule = schedule
    if corrupt_input_jacobian is not None:
        grad_schedule = _ScaledInputJacobian(schedule, corrupt_input_jacobian)
    rng = np.random.default_rng(seed)
    rows = []
    for tau in range(schedule.horizon):
        for d in range(directions):
            psi = random_direction(rng, schedule.state_dim, schedule.control_dim)
            fd = gateaux_fd(schedule, policy, target, x0s, tau, psi, eps)
            ip = gradient_inner_product(grad_schedule, policy, field, target, x0s, tau, psi)
            rel = abs(fd - ip) / max(abs(fd), 1e-12)
            rows.append({"tau": tau, "direction": d, "finite_difference": fd,
                         "formula": ip, "rel_error": rel})
    worst = max(rows, key=lambda r: r["rel_error"])
    return {"max_rel_error": worst["rel_error"], "worst": worst, "checks": rows}
