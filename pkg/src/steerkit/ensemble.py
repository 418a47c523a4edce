"""Initial laws, transport maps, controlled rollouts and the objective estimate."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import jets
from .jets import NonFiniteError, primal

#: Rollouts are split into fixed-size chunks so results never depend on the worker count.
CHUNK = 16384


# -- initial laws ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True, eq=False)
class PointCloud:
    samples: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[0] == 0:
            raise ValueError("point cloud is empty")
        object.__setattr__(self, "samples", s)

    @property
    def dim(self):
        return self.samples.shape[1]


def standard_normal(seed, start, count, dim):
    """Standard normal draws for samples ``start .. start+count-1``.

    Sample ``i`` owns the Philox-4x64 counter blocks ``[i B, (i+1) B)`` under
    key ``seed``, where ``B = ceil(2 ceil(dim/2) / 4)``.  Each 64-bit word
    ``w`` becomes a uniform ``(w >> 11) * 2**-53`` and consecutive uniforms
    ``(a, b)`` pass through Box-Muller with ``u1 = 1 - a`` (so ``u1 > 0``):
    ``sqrt(-2 log u1) * (cos 2 pi b, sin 2 pi b)``.  The first ``dim`` of the
    resulting normals are kept.
    """
    pairs = math.ceil(dim / 2)
    blocks = math.ceil(2 * pairs / 4)
    words = np.random.Philox(key=int(seed), counter=int(start) * blocks).random_raw(count * blocks * 4)
    u = (words >> np.uint64(11)).astype(float) * 2.0 ** -53
    u = u.reshape(count, blocks * 4)[:, : 2 * pairs]
    u1, u2 = 1.0 - u[:, 0::2], u[:, 1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty((count, 2 * pairs))
    z[:, 0::2] = radius * np.cos(2 * np.pi * u2)
    z[:, 1::2] = radius * np.sin(2 * np.pi * u2)
    return z[:, :dim]


def sample_initial(law, N, seed=0):
    """Draw ``N`` initial states as an ``(N, n)`` array, reproducible for a fixed seed."""
    if N < 1:
        raise ValueError("sample count N must be at least 1")
    if isinstance(law, PointCloud):
        if N > law.samples.shape[0]:
            raise ValueError(f"point cloud holds {law.samples.shape[0]} samples, asked for {N}")
        return law.samples[:N].copy()
    z = standard_normal(seed, 0, N, law.dim)
    return law.mean + z @ law._chol.T


# -- transport maps -------------------------------------------------------------

class Shift:
    """``x -> x - c``."""

    is_constant = False

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def __call__(self, x):
        return [xi - ci for xi, ci in zip(x, self.c)]


class Zero:
    is_constant = True

    def __call__(self, x):
        return [np.zeros(np.shape(primal(xi))) for xi in x]

    def constant(self, dim):
        return np.zeros(dim)


class Identity:
    is_constant = False

    def __call__(self, x):
        return [xi + 0.0 for xi in x]


class Componentwise:
    is_constant = False

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x):
        return [self.fn(xi) for xi in x]


NAMED_TARGETS = {
    "zero": Zero,
    "identity": Identity,
    "tanh": lambda: Componentwise(jets.tanh),
    "sin": lambda: Componentwise(jets.sin),
}


def named_target(name):
    try:
        return NAMED_TARGETS[name]()
    except KeyError:
        raise ValueError(f"unknown target map {name!r}; known: {sorted(NAMED_TARGETS)}") from None


# -- rollouts -------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    controls: np.ndarray
    target: np.ndarray


@dataclass(frozen=True, eq=False)
class Ensemble:
    """``N`` trajectories stored as ``states (T+1, N, n)``, ``controls (T, N, m)``, ``targets (N, n)``."""

    states: np.ndarray
    controls: np.ndarray
    targets: np.ndarray
    seed: int | None = None
    law: object = None
    target: object = None

    @property
    def size(self):
        return self.states.shape[1]

    @property
    def horizon(self):
        return self.controls.shape[0]

    def trajectory(self, i):
        return Trajectory(self.states[:, i], self.controls[:, i], self.targets[i])

    def coords(self, t):
        """States at time ``t`` as a coordinate list (the carrier layout)."""
        return list(self.states[t].T)


def worker_count():
    """Worker cap from ``STEERKIT_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("STEERKIT_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _roll_chunk(schedule, policy, x0, offset):
    x = list(x0.T)
    states, controls = [x0], []
    for t in range(schedule.horizon):
        try:
            u = policy.eval(t, x)
            x = schedule.step(t, x, u)
        except NonFiniteError as exc:
            sample = None if exc.sample is None else offset + exc.sample
            raise NonFiniteError(f"{exc} (sample {sample})", t=t, sample=sample) from None
        controls.append(np.stack([np.broadcast_to(primal(ui), x0.shape[:1]) for ui in u], axis=1))
        states.append(np.stack([np.broadcast_to(primal(xi), x0.shape[:1]) for xi in x], axis=1))
    return np.stack(states), np.stack(controls)


def rollout(schedule, policy, x0s, target, seed=None, law=None):
    """Roll ``x0s`` (shape ``(N, n)``) forward under ``policy``."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if x0s.shape[1] != schedule.state_dim:
        raise ValueError(f"initial states have dimension {x0s.shape[1]}, system has {schedule.state_dim}")
    if policy.horizon != schedule.horizon:
        raise ValueError(f"policy horizon {policy.horizon} != system horizon {schedule.horizon}")
    starts = range(0, x0s.shape[0], CHUNK)
    jobs = [(x0s[s:s + CHUNK], s) for s in starts]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _roll_chunk(schedule, policy, *j), jobs))
    else:
        parts = [_roll_chunk(schedule, policy, *j) for j in jobs]
    states = np.concatenate([p[0] for p in parts], axis=1)
    controls = np.concatenate([p[1] for p in parts], axis=1)
    targets = np.stack([np.broadcast_to(primal(v), x0s.shape[:1]) for v in target(list(x0s.T))], axis=1)
    return Ensemble(states, controls, targets, seed, law, target)


def objective(ensemble):
    """Sample average of ``1/2 |x_T - t(x_0)|^2``."""
    err = ensemble.states[-1] - ensemble.targets
    value = 0.5 * float(np.mean(np.sum(err ** 2, axis=1)))
    if not math.isfinite(value):
        raise NonFiniteError("non-finite objective")
    return value
