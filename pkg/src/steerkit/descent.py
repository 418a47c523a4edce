"""Projected synthetic-gradient descent over Markov policies."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (ConstantField, KnnField, PathwiseField, costates,
                      recurrence_residual, stationarity_residual)
from .ensemble import objective, rollout, sample_initial
from .jets import NonFiniteError
from .policy import FullSpace, GradientContext, grad_step, snapshot_policy

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1


def derive_iteration_seed(seed, k):
    """Seed for iteration ``k``: a 64-bit bijective mix of ``(seed << 32) + k``.

    For a fixed ``seed`` distinct ``k < 2**32`` always give distinct seeds.
    """
    if not 0 <= k < 1 << 32:
        raise ValueError("iteration index must lie in [0, 2**32)")
    z = ((int(seed) << 32) + int(k)) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


@dataclass
class DescentConfig:
    schedule: object
    policy0: object
    initial_law: object
    target: object
    alpha: float
    iters: int
    samples: int = 100_000
    seed: int = 0
    control_set: object = field(default_factory=FullSpace)
    target_field: object = None
    snapshot_every: int | None = None
    mesh: object = None
    fixed_ensemble: bool = False
    residuals: bool = True

    def validate(self):
        if not self.alpha >= 0 or not np.isfinite(self.alpha):
            raise ValueError(f"alpha must be a non-negative finite number, got {self.alpha!r}")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.snapshot_every is not None:
            if self.snapshot_every < 1:
                raise ValueError("snapshot_every must be a positive integer")
            if self.mesh is None:
                raise ValueError("snapshot_every requires a mesh")
        if self.policy0.horizon != self.schedule.horizon:
            raise ValueError("initial policy and system have different horizons")
        self.resolve_field()

    def resolve_field(self):
        """The target field used for gradients, choosing one when unset."""
        fld, T = self.target_field, self.schedule.horizon
        if fld is None:
            if getattr(self.target, "is_constant", False):
                return ConstantField(self.target.constant(self.schedule.state_dim))
            if T == 1:
                return PathwiseField(self.target)
            raise ValueError(
                "a non-constant transport map with T > 1 needs an explicit target field "
                "(constant or knn)")
        if isinstance(fld, PathwiseField):
            if T > 1:
                raise ValueError(
                    "the pathwise target field cannot back gradient steps evaluated off-sample "
                    "when T > 1; use a constant or knn target field")
            if fld.target is None:
                return PathwiseField(self.target)
        return fld


@dataclass(frozen=True)
class IterationRecord:
    k: int
    objective: float
    stationarity: tuple
    recurrence: tuple
    wall_ms: float


@dataclass
class DescentLog:
    records: list
    policy: object

    @property
    def objectives(self):
        return [r.objective for r in self.records]


def run(config, on_iteration=None):
    """Run ``config.iters`` projected synthetic-gradient steps.

    The objective of every iterate ``k = 0..K`` is estimated on a fresh
    ensemble drawn with ``derive_iteration_seed(seed, k)`` (or the ``k = 0``
    seed throughout when ``fixed_ensemble`` is set).  ``on_iteration(record,
    policy, ensemble)`` is called after each estimate.
    """
    config.validate()
    base_field = config.resolve_field()
    sch, U = config.schedule, config.control_set
    if config.iters > 5 and sch.horizon > 1 and config.snapshot_every is None:
        log.warning("%d nested gradient steps without snapshots; evaluation cost grows "
                    "geometrically with the iteration count", config.iters)
    policy, records = config.policy0, []
    for k in range(config.iters + 1):
        start = time.perf_counter()
        seed_k = derive_iteration_seed(config.seed, 0 if config.fixed_ensemble else k)
        try:
            x0 = sample_initial(config.initial_law, config.samples, seed_k)
            ens = rollout(sch, policy, x0, config.target, seed=seed_k, law=config.initial_law)
            value = objective(ens)
            fld = base_field.fit(ens) if isinstance(base_field, KnnField) else base_field
            stat = rec = ()
            if config.residuals:
                trace = costates(ens, sch, policy, fld)
                stat = tuple(map(float, stationarity_residual(trace, sch, policy, ens, U)))
                rec = tuple(map(float, recurrence_residual(trace, sch, policy, ens)))
        except NonFiniteError as exc:
            err = NonFiniteError(f"iteration {k}: {exc}", t=exc.t, sample=exc.sample)
            err.iteration = k
            raise err from None
        wall = 1e3 * (time.perf_counter() - start)
        record = IterationRecord(k, value, stat, rec, wall)
        records.append(record)
        log.info("k=%d objective=%.6g (%.0f ms)", k, value, wall)
        if on_iteration is not None:
            on_iteration(record, policy, ens)
        if k < config.iters:
            policy = grad_step(policy, config.alpha, GradientContext(sch, fld, U))
            if config.snapshot_every and (k + 1) % config.snapshot_every == 0:
                policy = snapshot_policy(policy, config.mesh)
    return DescentLog(records, policy)
