import json
import os

import numpy as np
import pytest

from steerkit import cli, config
from steerkit.ensemble import Gaussian, Shift, Zero
from steerkit.policy import Ball, Box, Coordinate, Linear

SMALL_EX2 = """
[system]
name = "example2"

[descent]
alpha = {alpha}
iters = 2
samples = 300
seed = 4

[output]
emit_samples = true
max_sample_rows = 25
mesh = {{ lo = [-1.0, -1.0], hi = [1.0, 1.0], resolution = [3, 4] }}
"""


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_log_samples_and_policy(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_EX2.format(alpha=0.14))
    code, _, _ = run_cli(["run", cfg, "--out", str(tmp_path / "o"), "-q"], capsys)
    assert code == 0
    lines = (tmp_path / "o" / "log.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert [r["k"] for r in recs] == [0, 1, 2]
    assert all(r["schema_version"] == cli.SCHEMA_VERSION for r in recs)
    names = {(res["name"], res["t"]) for res in recs[0]["residuals"]}
    assert names == {("stationarity", 0), ("stationarity", 1), ("stationarity", 2),
                     ("recurrence", 1), ("recurrence", 2)}
    assert recs[2]["objective"] < recs[0]["objective"]
    samples = (tmp_path / "o" / "samples_k1_t3.csv").read_text().splitlines()
    assert samples[0] == "sample_id,x1,x2" and len(samples) == 26
    policy = (tmp_path / "o" / "policy_k2.csv").read_text().splitlines()
    assert policy[0] == "x1,x2,t0_u1,t0_u2,t1_u1,t1_u2,t2_u1,t2_u2" and len(policy) == 13
    assert not (tmp_path / "o" / "policy_k1.csv").exists()
    timing = (tmp_path / "o" / "timing.jsonl").read_text().splitlines()
    assert len(timing) == 3 and "wall_ms" in json.loads(timing[0])


def test_log_floats_have_17_significant_digits(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_EX2.format(alpha=0.14))
    run_cli(["run", cfg, "--out", str(tmp_path / "o"), "-q"], capsys)
    line = (tmp_path / "o" / "log.jsonl").read_text().splitlines()[0]
    rec = json.loads(line)
    assert f'"objective":{format(rec["objective"], ".17g")}' in line


def test_run_outputs_byte_identical(tmp_path, capsys):
    cfg = write(tmp_path, SMALL_EX2.format(alpha=0.14))
    for d in ("a", "b"):
        assert run_cli(["run", cfg, "--out", str(tmp_path / d), "-q"], capsys)[0] == 0
    for name in sorted(os.listdir(tmp_path / "a")):
        if name != "timing.jsonl":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


@pytest.mark.parametrize("alpha", ["0.0", "-0.5"])
def test_non_positive_step_is_invalid(tmp_path, capsys, alpha):
    cfg = write(tmp_path, SMALL_EX2.format(alpha=alpha))
    code, _, err = run_cli(["run", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and "descent.alpha" in err


@pytest.mark.parametrize("text,field", [
    ('[system]\nname = "example2"\nbogus = 1\n[descent]\nalpha = 0.1\niters = 1\n', "system.bogus"),
    ('[system]\nname = "nope"\n[descent]\nalpha = 0.1\niters = 1\n', "unknown system"),
    ('[system]\nname = "example2"\n[descent]\nalpha = 0.1\n', "descent.iters"),
    ('[system]\nname = "example2"\n[descent]\nalpha = 0.1\niters = 1\nsamples = 0\n', "descent.samples"),
    ('[system]\nname = "example2"\n[policy0]\ntype = "linear"\nparams = { A = [[1.0]] }\n'
     '[descent]\nalpha = 0.1\niters = 1\n', "policy0"),
    ('[system]\nname = "example2"\n[target]\ntype = "identity"\n[descent]\nalpha = 0.1\niters = 1\n'
     'target_field = "pathwise"\n', "pathwise"),
    ('[system]\nname = "example2"\n[descent]\nalpha = 0.1\niters = 1\nsnapshot_every = 1\n', "mesh"),
    ('not toml [', "run.cfg"),
])
def test_invalid_configs_exit_2(tmp_path, capsys, text, field):
    code, _, err = run_cli(["run", write(tmp_path, text), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert field in err


def test_missing_config_file(tmp_path, capsys):
    assert run_cli(["run", str(tmp_path / "absent.cfg")], capsys)[0] == 2


def test_non_finite_run_exits_3_with_iteration(tmp_path, capsys):
    text = ('[system]\nname = "example2"\n[policy0]\ntype = "linear"\n'
            'params = { A = [[1e200, 0.0], [0.0, 1e200]] }\n[descent]\nalpha = 0.1\niters = 2\nsamples = 10\n')
    with np.errstate(over="ignore", invalid="ignore"):
        code, _, err = run_cli(["run", write(tmp_path, text), "--out", str(tmp_path / "o"), "-q"], capsys)
    assert code == 3
    assert "iteration 0" in err


def test_defaults_for_example1(tmp_path):
    cfg = config.load(write(tmp_path, '[system]\nname = "example1"\n[descent]\nalpha = 0.15\niters = 1\n'))
    run_cfg, mesh = config.build(cfg)
    assert isinstance(run_cfg.initial_law, Gaussian) and np.array_equal(run_cfg.initial_law.mean, [4, 4])
    assert isinstance(run_cfg.target, Shift) and np.array_equal(run_cfg.target.c, [4, 4])
    assert isinstance(run_cfg.policy0.nodes[0], Coordinate)
    assert run_cfg.samples == 100_000 and mesh is None


def test_defaults_for_example2(tmp_path):
    cfg = config.load(write(tmp_path, '[system]\nname = "example2"\n[descent]\nalpha = 0.14\niters = 3\n'))
    run_cfg, _ = config.build(cfg)
    assert isinstance(run_cfg.target, Zero)
    node = run_cfg.policy0.nodes[0]
    assert isinstance(node, Linear) and np.array_equal(node.A, -0.5 * np.eye(2))


def test_control_set_sections(tmp_path):
    base = '[system]\nname = "example2"\n[descent]\nalpha = 0.1\niters = 1\n'
    box = config.build(config.load(write(tmp_path, base + '[control_set]\ntype = "box"\n'
                                         'params = { lo = -1.0, hi = [1.0, 2.0] }\n')))[0]
    assert isinstance(box.control_set, Box) and np.array_equal(box.control_set.lo, [-1, -1])
    ball = config.build(config.load(write(tmp_path, base + '[control_set]\ntype = "ball"\n'
                                          'params = { radius = 2.0 }\n')))[0]
    assert isinstance(ball.control_set, Ball) and ball.policy0.control_set is ball.control_set


def test_point_cloud_initial_law(tmp_path, capsys):
    np.savetxt(tmp_path / "x0.csv", np.random.default_rng(0).normal(size=(40, 2)), delimiter=",")
    text = ('[system]\nname = "example2"\n[initial_law]\ntype = "points"\npath = "x0.csv"\n'
            '[descent]\nalpha = 0.1\niters = 1\nsamples = 40\n')
    assert run_cli(["run", write(tmp_path, text), "--out", str(tmp_path / "o"), "-q"], capsys)[0] == 0
    text = text.replace("samples = 40", "samples = 41")
    assert run_cli(["run", write(tmp_path, text), "--out", str(tmp_path / "o"), "-q"], capsys)[0] == 2


def test_shipped_configs_parse(configs_dir):
    for name in ("example1.cfg", "example2.cfg"):
        run_cfg, mesh = config.build(config.load(os.path.join(configs_dir, name)))
        assert mesh is not None
    run_cfg, mesh = config.build(config.load(os.path.join(configs_dir, "example2.cfg")))
    assert (run_cfg.alpha, run_cfg.iters, run_cfg.samples) == (0.14, 3, 100_000)
    run_cfg, mesh = config.build(config.load(os.path.join(configs_dir, "example1.cfg")))
    assert run_cfg.alpha == 0.15 and mesh.resolution == (161, 161)


def test_verify_single_suite(capsys):
    code, out, _ = run_cli(["verify", "--suite", "example1_closed_form"], capsys)
    report = json.loads(out)
    assert code == 0 and report["passed"]
    assert [s["name"] for s in report["suites"]] == ["example1_closed_form"]


def test_verify_lists_suites(capsys):
    code, out, _ = run_cli(["verify", "--list"], capsys)
    assert code == 0
    assert {"example1_closed_form", "gradient_vs_gateaux", "pathwise_recurrence"} <= set(out.split())


def test_verify_unknown_suite(capsys):
    assert run_cli(["verify", "--suite", "nope"], capsys)[0] == 2


def test_verify_failing_suite_exits_1(capsys, monkeypatch):
    from steerkit import verify
    monkeypatch.setitem(verify.SUITES, "always_fails", lambda: (False, {}))
    code, out, _ = run_cli(["verify", "--suite", "always_fails"], capsys)
    assert code == 1 and json.loads(out)["passed"] is False


def test_gradcheck_example2_passes(configs_dir, capsys):
    code, out, _ = run_cli(["gradcheck", os.path.join(configs_dir, "example2.cfg"), "--points", "50"], capsys)
    assert code == 0 and json.loads(out)["max_rel_error"] <= 1e-3


def test_gradcheck_corrupted_jacobian_fails_with_location(configs_dir, capsys):
    code, out, err = run_cli(["gradcheck", os.path.join(configs_dir, "example2.cfg"), "--points", "50",
                              "--scale-input-jacobian", "1.1"], capsys)
    assert code == 1
    assert "tau=" in err and "worst" in json.loads(out)


def test_gradcheck_zero_points_invalid(configs_dir, capsys):
    assert run_cli(["gradcheck", os.path.join(configs_dir, "example2.cfg"), "--points", "0"], capsys)[0] == 2


def test_gradcheck_bad_eps(configs_dir, capsys):
    assert run_cli(["gradcheck", os.path.join(configs_dir, "example2.cfg"), "--eps", "0,2"], capsys)[0] == 2


def test_dumps_formats():
    assert cli.dumps({"a": 0.1, "b": [1, True, None], "c": "x"}) == \
        '{"a":0.10000000000000001,"b":[1,true,null],"c":"x"}'
