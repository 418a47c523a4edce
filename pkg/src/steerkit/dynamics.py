"""Time-indexed transition maps and the registry of built-in systems."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import jets
from .jets import NonFiniteError, as_vector


@dataclass(frozen=True)
class DynamicsStage:
    """One transition ``x_{t+1} = transition(x_t, u_t)``.

    ``transition`` receives and returns lists of scalar carriers (floats,
    batched arrays or jets), so it must be written with operator arithmetic
    and the functions in :mod:`steerkit.jets`.
    """

    t: int
    state_dim: int
    control_dim: int
    transition: Callable[[Sequence, Sequence], Sequence]

    def __call__(self, x, u):
        out = list(self.transition(x, u))
        if len(out) != self.state_dim:
            raise ValueError(
                f"stage {self.t} returned {len(out)} coordinates, expected {self.state_dim}")
        return out


@dataclass(frozen=True)
class DynamicsSchedule:
    stages: tuple
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a schedule needs at least one stage")
        n, m = self.stages[0].state_dim, self.stages[0].control_dim
        for i, s in enumerate(self.stages):
            if s.t != i:
                raise ValueError(f"stage at position {i} is labelled t={s.t}")
            if (s.state_dim, s.control_dim) != (n, m):
                raise ValueError(f"stage {i} has inconsistent dimensions")

    @property
    def horizon(self):
        return len(self.stages)

    @property
    def state_dim(self):
        return self.stages[0].state_dim

    @property
    def control_dim(self):
        return self.stages[0].control_dim

    def _stage(self, t, x, u):
        if not 0 <= t < self.horizon:
            raise IndexError(f"stage index {t} outside 0..{self.horizon - 1}")
        if len(x) != self.state_dim or len(u) != self.control_dim:
            raise ValueError(
                f"expected x in R^{self.state_dim} and u in R^{self.control_dim}, "
                f"got {len(x)} and {len(u)}")
        return self.stages[t]

    def step(self, t, x, u):
        """``f_t(x, u)`` as a list of coordinates."""
        x, u = as_vector(x), as_vector(u)
        out = self._stage(t, x, u)(x, u)
        jets.check_finite(out, "state", t=t)
        return out

    def jacobians(self, t, x, u):
        """Return ``(df/dx, df/du)`` as nested lists, from one seeded pass."""
        x, u = as_vector(x), as_vector(u)
        stage = self._stage(t, x, u)
        n = self.state_dim
        _, jac = jets.value_and_jacobian(lambda z: stage(z[:n], z[n:]), x + u)
        jx = [row[:n] for row in jac]
        ju = [row[n:] for row in jac]
        jets.check_finite([e for row in jac for e in row], "Jacobian", t=t)
        return jx, ju

    def jac_x(self, t, x, u):
        return self.jacobians(t, x, u)[0]

    def jac_u(self, t, x, u):
        return self.jacobians(t, x, u)[1]


# -- registry -----------------------------------------------------------------

def _example1_stage(x, u):
    # x + f(x) + u G(x) with f = (sin p, -sin q) and G = (1, 1 + cos p)
    p, q = x
    (v,) = u
    return [p + jets.sin(p) + v, q - jets.sin(q) + v * (1.0 + jets.cos(p))]


def example1(m=(4.0, 4.0)):
    """One-step transport of a displaced Gaussian through a periodic drift.

    ``m`` is not used by the transition itself; it is kept in ``params`` so
    the initial law and transport map can default to it.  Growth bound:
    ``|f(x, u)| <= 2 + |x| + sqrt(5)|u|``.
    """
    m = tuple(float(v) for v in m)
    if len(m) != 2:
        raise ValueError("example1 mean shift m must have 2 components")
    stage = DynamicsStage(0, 2, 1, _example1_stage)
    return DynamicsSchedule((stage,), "example1", {"m": m})


def example2(beta=0.9, T=3):
    """Fully actuated damped system ``(p + q + u1, beta q + sin p + u2)``.

    Growth bound: ``|f(x, u)| <= (2 + |beta|)(1 + |x| + |u|)``.
    """
    beta = float(beta)

    def transition(x, u):
        p, q = x
        return [p + q + u[0], beta * q + jets.sin(p) + u[1]]

    stages = tuple(DynamicsStage(t, 2, 2, transition) for t in range(T))
    return DynamicsSchedule(stages, "example2", {"beta": beta, "T": T})


def integrator(dim=2, T=1):
    """``f(x, u) = u``; linear growth with constant 1."""
    dim = int(dim)

    def transition(x, u):
        return [ui + 0.0 * xi for ui, xi in zip(u, x)]

    stages = tuple(DynamicsStage(t, dim, dim, transition) for t in range(T))
    return DynamicsSchedule(stages, "integrator", {"dim": dim, "T": T})


REGISTRY = {
    "example1": (example1, {"m"}),
    "example2": (example2, {"beta", "T"}),
    "integrator": (integrator, {"dim", "T"}),
}


def registry_get(name, params=None):
    """Build a registered system, filling unspecified parameters with defaults."""
    params = dict(params or {})
    if name not in REGISTRY:
        raise ValueError(f"unknown system {name!r}; known: {sorted(REGISTRY)}")
    build, allowed = REGISTRY[name]
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"invalid parameter(s) {sorted(extra)} for system {name!r}")
    if "T" in params:
        T = params["T"]
        if isinstance(T, bool) or int(T) != T or T < 1:
            raise ValueError(f"horizon T must be a positive integer, got {T!r}")
        params["T"] = int(T)
    for key, value in params.items():
        if not np.all(np.isfinite(np.asarray(value, dtype=float))):
            raise ValueError(f"parameter {key!r} must be finite")
    return build(**params)


__all__ = ["DynamicsStage", "DynamicsSchedule", "NonFiniteError", "registry_get",
           "example1", "example2", "integrator", "REGISTRY"]
