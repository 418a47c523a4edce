import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from steerkit.adjoint import ConstantField, KnnField, PathwiseField
from steerkit.descent import DescentConfig, derive_iteration_seed, run
from steerkit.dynamics import DynamicsSchedule, DynamicsStage, registry_get
from steerkit.ensemble import Gaussian, Identity, Shift, Zero
from steerkit.jets import NonFiniteError
from steerkit.policy import Coordinate, Linear, Mesh, Policy
from steerkit.verify import Example1Params, example1_closed_form


def ex2_config(**kw):
    base = dict(schedule=registry_get("example2", {}),
                policy0=Policy.constant_in_time(Linear(-0.5 * np.eye(2)), 3),
                initial_law=Gaussian([0, 0], np.eye(2)), target=Zero(), alpha=0.14, iters=3,
                samples=2000)
    base.update(kw)
    return DescentConfig(**base)


def ex1_config(**kw):
    base = dict(schedule=registry_get("example1", {"m": (4, 4)}), policy0=Policy([Coordinate(0)]),
                initial_law=Gaussian([4, 4], np.eye(2)), target=Shift([4, 4]), alpha=0.15, iters=10,
                samples=1000)
    base.update(kw)
    return DescentConfig(**base)


def test_zero_iterations_logs_initial_objective_only():
    cfg = ex2_config(iters=0)
    log = run(cfg)
    assert len(log.records) == 1 and log.records[0].k == 0
    assert log.policy is cfg.policy0


def test_log_has_k_plus_one_entries():
    log = run(ex2_config())
    assert [r.k for r in log.records] == [0, 1, 2, 3]
    assert all(len(r.stationarity) == 3 and len(r.recurrence) == 2 for r in log.records)


def test_run_is_deterministic():
    a, b = run(ex2_config()), run(ex2_config())
    assert a.objectives == b.objectives
    assert [r.stationarity for r in a.records] == [r.stationarity for r in b.records]


def test_example1_iterates_follow_closed_form():
    log = run(ex1_config(residuals=False))
    g = np.linspace(-8, 8, 10)
    P, Q = np.meshgrid(g, g, indexing="ij")
    x = [P.ravel(), Q.ravel()]
    want = example1_closed_form(Example1Params((4, 4), 0.15, i=10), x)
    assert np.max(np.abs(log.policy.eval(0, x)[0] - want)) <= 1e-9


def test_example1_objective_strictly_decreasing():
    log = run(ex1_config(iters=20, fixed_ensemble=True, residuals=False))
    assert np.all(np.diff(log.objectives) < 0)


def test_zero_step_with_fixed_ensemble_is_constant():
    log = run(ex2_config(alpha=0.0, fixed_ensemble=True))
    assert len(set(log.objectives)) == 1


def test_zero_step_with_fresh_ensembles_varies_only_by_sampling():
    log = run(ex2_config(alpha=0.0, samples=20000, residuals=False))
    obj = np.array(log.objectives)
    assert np.ptp(obj) > 0
    assert np.ptp(obj) < 0.1 * obj.mean()


def test_fresh_seed_per_iteration():
    seen = []
    run(ex2_config(iters=2, residuals=False), lambda rec, pol, ens: seen.append(ens.seed))
    assert seen == [derive_iteration_seed(0, k) for k in range(3)]


def test_fixed_ensemble_reuses_first_seed():
    seen = []
    run(ex2_config(iters=2, fixed_ensemble=True, residuals=False), lambda rec, pol, ens: seen.append(ens.seed))
    assert seen == [derive_iteration_seed(0, 0)] * 3


@pytest.mark.parametrize("kw", [dict(alpha=-0.1), dict(alpha=float("nan")), dict(iters=-1),
                                dict(samples=0), dict(snapshot_every=2),
                                dict(snapshot_every=0, mesh=Mesh((0, 0), (1, 1), (3, 3)))])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        run(ex2_config(**kw))


def test_horizon_mismatch_rejected():
    with pytest.raises(ValueError):
        run(ex2_config(policy0=Policy([Linear(np.eye(2))])))


def test_pathwise_field_rejected_for_multi_step_gradients():
    with pytest.raises(ValueError, match="pathwise"):
        run(ex2_config(target_field=PathwiseField()))


def test_non_constant_target_needs_field_when_multi_step():
    with pytest.raises(ValueError):
        run(ex2_config(target=Identity()))


def test_field_resolution():
    assert isinstance(ex2_config().resolve_field(), ConstantField)
    assert isinstance(ex1_config().resolve_field(), PathwiseField)
    assert ex1_config().resolve_field().target is not None


def test_knn_field_runs():
    log = run(ex2_config(target_field=KnnField(16), iters=1, samples=500))
    ref = run(ex2_config(iters=1, samples=500))
    assert np.allclose(log.objectives, ref.objectives, rtol=1e-12)


def test_snapshots_bound_depth():
    mesh = Mesh((-6.0, -6.0), (6.0, 6.0), (41, 41))
    log = run(ex2_config(iters=4, snapshot_every=2, mesh=mesh, residuals=False))
    assert log.policy.depth() == 0
    assert log.objectives[-1] < log.objectives[0]


def test_deep_unsnapshotted_run_warns(caplog):
    with caplog.at_level(logging.WARNING):
        run(ex2_config(iters=6, samples=20, residuals=False))
    assert any("snapshot" in r.message for r in caplog.records)


def test_non_finite_objective_reports_iteration():
    stage = DynamicsStage(0, 1, 1, lambda x, u: [x[0] * u[0] * 1e200])
    cfg = DescentConfig(DynamicsSchedule((stage,)), Policy([Linear([[1e200]])]),
                        Gaussian([0.0], [[1.0]]), Zero(), 0.1, 2, samples=10)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError, match="iteration 0") as err:
            run(cfg)
    assert err.value.iteration == 0


def test_seed_derivation_injective_and_stable():
    seeds = {derive_iteration_seed(42, k) for k in range(10_000)}
    assert len(seeds) == 10_000
    assert derive_iteration_seed(42, 7) == derive_iteration_seed(42, 7)


@given(st.integers(0, 2**31), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_seed_derivation_distinct_for_distinct_k(seed, k1, k2):
    if k1 != k2:
        assert derive_iteration_seed(seed, k1) != derive_iteration_seed(seed, k2)


def test_seed_derivation_range_checked():
    with pytest.raises(ValueError):
        derive_iteration_seed(0, 2**32)
