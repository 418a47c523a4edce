"""Run configuration files (TOML) and their translation into library objects.

Every section is optional except ``[system]``; unknown keys anywhere are
rejected.  Defaults that depend on the system:

* ``initial_law``: ``N(m, I)`` for ``example1``, ``N(0, I)`` otherwise.
* ``target``: ``shift`` by ``m`` for ``example1``, ``zero`` otherwise.
* ``policy0``: ``coordinate-p`` for ``example1``, ``linear`` with
  ``A = -0.5 I`` otherwise.
"""
from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator,
                      model_validator)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dynamics, ensemble, policy
from .adjoint import ConstantField, KnnField, PathwiseField
from .descent import DescentConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    name: str
    params: dict = Field(default_factory=dict)


class InitialLawSection(_Section):
    type: Literal["gaussian", "points"] = "gaussian"
    mean: Optional[list[float]] = None
    cov: Optional[list[list[float]]] = None
    # for type = "points": a CSV file with one state per row (relative to the config)
    path: Optional[str] = None


class TargetSection(_Section):
    type: Literal["zero", "identity", "shift", "tanh", "sin"]
    params: dict = Field(default_factory=dict)


class ControlSetSection(_Section):
    type: Literal["full", "box", "ball"] = "full"
    params: dict = Field(default_factory=dict)


class PolicySection(_Section):
    type: Literal["linear", "coordinate-p", "constant", "example1-limit"]
    params: dict = Field(default_factory=dict)


class DescentSection(_Section):
    alpha: float
    iters: int = Field(ge=0)
    samples: int = Field(default=100_000, ge=1)
    seed: int = Field(default=0, ge=0)
    snapshot_every: Optional[int] = Field(default=None, ge=1)
    fixed_ensemble: bool = False
    target_field: Literal["auto", "constant", "pathwise", "knn"] = "auto"
    knn_k: int = Field(default=16, ge=1)
    residuals: bool = True

    @field_validator("alpha")
    @classmethod
    def _positive_alpha(cls, v):
        if not np.isfinite(v) or v <= 0:
            raise ValueError("step size must be a finite number > 0")
        return v


class MeshSection(_Section):
    lo: list[float]
    hi: list[float]
    resolution: list[int]


class OutputSection(_Section):
    dir: str = "out"
    emit_samples: bool = False
    # iterations whose state samples are written; all iterations when unset
    sample_iterations: Optional[list[int]] = None
    max_sample_rows: int = Field(default=1000, ge=1)
    mesh: Optional[MeshSection] = None
    # iterations whose policy is tabulated on the mesh; (0, K) when unset
    policy_iterations: Optional[list[int]] = None


class RunConfigFile(_Section):
    system: SystemSection
    initial_law: Optional[InitialLawSection] = None
    target: Optional[TargetSection] = None
    control_set: ControlSetSection = Field(default_factory=ControlSetSection)
    policy0: Optional[PolicySection] = None
    descent: DescentSection
    output: OutputSection = Field(default_factory=OutputSection)
    _base_dir: Path = PrivateAttr(default_factory=Path)

    @model_validator(mode="after")
    def _iterations_in_range(self):
        K = self.descent.iters
        for name in ("sample_iterations", "policy_iterations"):
            ks = getattr(self.output, name)
            if ks and any(k < 0 or k > K for k in ks):
                raise ValueError(f"output.{name} entries must lie in 0..{K}")
        return self


def _format_error(exc):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load(path):
    """Parse and schema-validate a config file, returning a :class:`RunConfigFile`."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        cfg = RunConfigFile.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None
    cfg._base_dir = path.parent
    return cfg


# -- translation ----------------------------------------------------------------

def _params(section, allowed, where):
    extra = set(section.params) - set(allowed)
    if extra:
        raise ConfigError(f"{where}.params: unknown key(s) {sorted(extra)}")
    return section.params


def build_schedule(cfg):
    try:
        return dynamics.registry_get(cfg.system.name, cfg.system.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"system: {exc}") from None


def _shift(sch):
    return np.asarray(sch.params.get("m", np.zeros(sch.state_dim)), dtype=float)


def build_initial_law(cfg, sch):
    sec, n = cfg.initial_law or InitialLawSection(), sch.state_dim
    try:
        if sec.type == "points":
            if sec.path is None:
                raise ValueError("type 'points' needs a path")
            samples = np.loadtxt(cfg._base_dir / sec.path, delimiter=",", ndmin=2)
            law = ensemble.PointCloud(samples)
        else:
            mean = _shift(sch) if sec.mean is None else np.asarray(sec.mean, dtype=float)
            cov = np.eye(n) if sec.cov is None else np.asarray(sec.cov, dtype=float)
            law = ensemble.Gaussian(mean, cov)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"initial_law: {exc}") from None
    if law.dim != n:
        raise ConfigError(f"initial_law: dimension {law.dim} does not match system state dimension {n}")
    return law


def build_target(cfg, sch):
    sec = cfg.target
    if sec is None:
        return ensemble.Shift(_shift(sch)) if sch.name == "example1" else ensemble.Zero()
    if sec.type == "shift":
        c = _params(sec, {"c"}, "target").get("c")
        c = _shift(sch) if c is None else np.asarray(c, dtype=float)
        if c.shape != (sch.state_dim,):
            raise ConfigError(f"target.params.c must have {sch.state_dim} components")
        return ensemble.Shift(c)
    _params(sec, (), "target")
    return ensemble.named_target(sec.type)


def build_control_set(cfg, sch):
    sec, m = cfg.control_set, sch.control_dim
    try:
        if sec.type == "box":
            p = _params(sec, {"lo", "hi"}, "control_set")
            U = policy.Box(np.broadcast_to(np.asarray(p["lo"], float), (m,)),
                           np.broadcast_to(np.asarray(p["hi"], float), (m,)))
        elif sec.type == "ball":
            p = _params(sec, {"center", "radius"}, "control_set")
            U = policy.Ball(np.broadcast_to(np.asarray(p.get("center", 0.0), float), (m,)), p["radius"])
        else:
            _params(sec, (), "control_set")
            U = policy.FullSpace()
    except KeyError as exc:
        raise ConfigError(f"control_set.params: missing {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"control_set: {exc}") from None
    return U


def build_policy0(cfg, sch, U):
    sec, n, m, T = cfg.policy0, sch.state_dim, sch.control_dim, sch.horizon
    if sec is None:
        if sch.name == "example1":
            sec = PolicySection(type="coordinate-p")
        else:
            sec = PolicySection(type="linear", params={"A": (-0.5 * np.eye(m, n)).tolist()})
    try:
        if sec.type == "linear":
            p = _params(sec, {"A", "b"}, "policy0")
            A = np.asarray(p["A"], dtype=float)
            if A.shape != (m, n):
                raise ValueError(f"A must have shape {(m, n)}, got {A.shape}")
            node = policy.Linear(A, p.get("b"))
        elif sec.type == "coordinate-p":
            node = policy.Coordinate(_params(sec, {"index"}, "policy0").get("index", 0))
            if m != 1:
                raise ValueError("coordinate-p needs a scalar control")
        elif sec.type == "constant":
            c = np.broadcast_to(np.asarray(_params(sec, {"c"}, "policy0")["c"], dtype=float), (m,))
            node = policy.Constant(c)
        else:
            if sch.name != "example1":
                raise ValueError("example1-limit is only defined for system example1")
            mm = _params(sec, {"m"}, "policy0").get("m", _shift(sch))
            node = policy.example1_limit_node(tuple(mm))
    except KeyError as exc:
        raise ConfigError(f"policy0.params: missing {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"policy0: {exc}") from None
    return policy.Policy.constant_in_time(node, T, U)


def build_field(cfg, target, sch):
    kind = cfg.descent.target_field
    if kind == "auto":
        return None
    if kind == "constant":
        if not getattr(target, "is_constant", False):
            raise ConfigError("descent.target_field: 'constant' needs a constant transport map")
        return ConstantField(target.constant(sch.state_dim))
    if kind == "pathwise":
        return PathwiseField(target)
    return KnnField(cfg.descent.knn_k)


def build_mesh(cfg, sch):
    sec = cfg.output.mesh
    if sec is None:
        return None
    try:
        mesh = policy.Mesh(tuple(sec.lo), tuple(sec.hi), tuple(sec.resolution))
    except ValueError as exc:
        raise ConfigError(f"output.mesh: {exc}") from None
    if len(mesh.lo) != sch.state_dim:
        raise ConfigError(f"output.mesh: needs {sch.state_dim} axes")
    return mesh


def build(cfg):
    """Translate a validated file into a :class:`DescentConfig` and the output mesh."""
    sch = build_schedule(cfg)
    law = build_initial_law(cfg, sch)
    target = build_target(cfg, sch)
    U = build_control_set(cfg, sch)
    pol0 = build_policy0(cfg, sch, U)
    mesh = build_mesh(cfg, sch)
    d = cfg.descent
    run_cfg = DescentConfig(
        schedule=sch, policy0=pol0, initial_law=law, target=target,
        alpha=d.alpha, iters=d.iters, samples=d.samples, seed=d.seed, control_set=U,
        target_field=build_field(cfg, target, sch), snapshot_every=d.snapshot_every,
        mesh=mesh, fixed_ensemble=d.fixed_ensemble, residuals=d.residuals)
    try:
        run_cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"descent: {exc}") from None
    if isinstance(law, ensemble.PointCloud) and law.samples.shape[0] < d.samples:
        raise ConfigError(f"descent.samples: point cloud holds only {law.samples.shape[0]} states")
    return run_cfg, mesh
