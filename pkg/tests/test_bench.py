import json
import math
import struct

import numpy as np
import pytest

from ssmamp import rmt, solver
from ssmamp.bench import cli, harness, io, validate
from ssmamp.bench.config import DEFAULT_SWEEP, ConfigError, ExperimentConfig


def cfg_for(tmp_path, **kw):
    base = dict(k=200, trials=2, max_iters=8, tol=math.inf, output_dir=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


# --- file format ----------------------------------------------------------

def test_matrix_roundtrip_and_layout(tmp_path):
    arr = np.arange(6, dtype=float).reshape(2, 3) / 7
    path = tmp_path / "a.ssm"
    io.write_matrix(path, arr)
    raw = path.read_bytes()
    assert raw[:8] == b"SSMAMP01"
    assert struct.unpack("<II", raw[8:16]) == (2, 3)
    assert np.frombuffer(raw[16:], dtype="<f8")[4] == arr[1, 1]  # row-major
    np.testing.assert_array_equal(io.read_matrix(path), arr)
    io.write_vector(tmp_path / "v.ssm", arr[0])
    np.testing.assert_array_equal(io.read_vector(tmp_path / "v.ssm"), arr[0])
    with pytest.raises(io.InstanceIOError):
        io.read_vector(path)


def test_bad_files_name_their_path(tmp_path):
    bad = tmp_path / "bad.ssm"
    bad.write_bytes(b"NOTMAGIC" + struct.pack("<II", 1, 1) + b"\0" * 8)
    with pytest.raises(io.InstanceIOError, match="bad.ssm"):
        io.read_matrix(bad)
    short = tmp_path / "short.ssm"
    short.write_bytes(b"SSMAMP01" + struct.pack("<II", 2, 2) + b"\0" * 8)
    with pytest.raises(io.InstanceIOError, match="short.ssm"):
        io.read_matrix(short)
    with pytest.raises(io.InstanceIOError, match="missing.ssm"):
        io.read_matrix(tmp_path / "missing.ssm")


def test_generate_is_reproducible(tmp_path):
    cfg = cfg_for(tmp_path, trials=3, ensemble="row_orthogonal")
    dirs = harness.generate(cfg, tmp_path / "a")
    again = harness.generate(cfg, tmp_path / "b")
    assert len(dirs) == 3
    for d1, d2 in zip(dirs, again):
        for name in ("A.ssm", "y.ssm", "x.ssm", "noise.ssm"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed_rule"] == harness.SEED_RULE
    assert [e["trial"] for e in manifest["instances"]] == [0, 1, 2]
    inst, prior, meta = io.read_instance(dirs[1])
    ref, _ = harness.make_instance(cfg, 1)
    np.testing.assert_array_equal(inst.y, ref.y)
    assert prior == cfg.prior_spec() and meta["trial"] == 1


def test_generated_noise_matches_precision(tmp_path):
    cfg = cfg_for(tmp_path, k=4000, trials=1, xi=100.0)
    d = harness.generate(cfg, tmp_path / "g")[0]
    inst, _, _ = io.read_instance(d)
    noise = io.read_vector(d / "noise.ssm")
    np.testing.assert_allclose(inst.a.a @ inst.x_true + noise, inst.y, atol=1e-12)
    signal = np.mean((inst.a.a @ inst.x_true) ** 2)
    empirical_snr = signal / np.mean(noise**2)
    implied_snr = signal * cfg.xi
    assert abs(empirical_snr / implied_snr - 1) < 0.1


def test_row_orthogonality_checked_on_load(tmp_path):
    cfg = cfg_for(tmp_path, trials=1, ensemble="row_orthogonal")
    d = harness.generate(cfg, tmp_path / "g")[0]
    io.read_instance(d)
    a = io.read_matrix(d / "A.ssm")
    a[0, 0] += 1e-3
    io.write_matrix(d / "A.ssm", a)
    with pytest.raises(io.InstanceIOError, match="A.ssm"):
        io.read_instance(d)
    io.read_instance(d, check=False)


# --- configuration --------------------------------------------------------

def test_config_roundtrip_and_validation(tmp_path):
    cfg = cfg_for(tmp_path, check_iters=[1, 3])
    path = tmp_path / "c.json"
    cfg.save(path)
    assert ExperimentConfig.load(path) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "colour": "blue"})
    for bad in (dict(k=8), dict(trials=0), dict(alpha=0.001, k=16)):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)
    assert set(DEFAULT_SWEEP) == {"xi", "alpha", "rho"}


def test_solver_options_follow_config():
    opts = ExperimentConfig(path="generic", damping=0.2, max_iters=9).solver_options()
    assert (opts.path, opts.damping, opts.max_iters) == ("generic", 0.2, 9)


# --- experiments ----------------------------------------------------------

def test_zero_iteration_experiment_has_only_initial_record(tmp_path):
    cfg = cfg_for(tmp_path, trials=1, max_iters=0)
    report = harness.experiment(cfg)
    assert [r["t"] for r in report.rows] == [0]
    assert report.rows[0]["mse"] == pytest.approx(np.mean(harness.make_instance(cfg, 0)[0].x_true**2))


def test_report_is_recomputable_from_rows(tmp_path):
    cfg = cfg_for(tmp_path, trials=3, path="amp", check_iters=[1, 3])
    report = harness.experiment(cfg)
    out = tmp_path / "run"
    assert {p.name for p in out.iterdir()} >= {"config.json", "trajectories.csv",
                                               "aggregate.csv", "report.txt"}
    header = (out / "trajectories.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == harness.TRAJECTORY_COLUMNS
    again = harness.report_from_dir(out)
    for t, qs in report.aggregate.items():
        for q, (mean, sem, n) in qs.items():
            m2, s2, n2 = again.aggregate[t][q]
            assert n == n2
            assert mean == pytest.approx(m2, rel=1e-15, nan_ok=True)
            assert sem == pytest.approx(s2, rel=1e-12, nan_ok=True)
    provs = {r["provenance"] for r in report.aggregate_rows()}
    assert provs == {"empirical", "predicted", "identity"}


def test_parallel_and_serial_reports_agree(tmp_path):
    cfg = cfg_for(tmp_path, trials=3)
    a = harness.experiment(cfg, workers=1, write=False)
    b = harness.experiment(cfg, workers=3, write=False)
    assert [(r["trial"], r["t"], r["mse"]) for r in a.rows] == \
        [(r["trial"], r["t"], r["mse"]) for r in b.rows]


def test_experiment_reads_generated_instances(tmp_path):
    cfg = cfg_for(tmp_path, trials=2, ensemble="row_orthogonal", xi=1.0)
    harness.generate(cfg, tmp_path / "inst")
    a = harness.experiment(cfg, instances_dir=tmp_path / "inst", write=False)
    b = harness.experiment(cfg, write=False)
    # same data; the loaded matrix differs only in memory layout
    np.testing.assert_allclose([r["mse"] for r in a.rows], [r["mse"] for r in b.rows],
                               rtol=1e-12)


def test_divergence_is_recorded_not_fatal(tmp_path, monkeypatch):
    cfg = cfg_for(tmp_path, trials=2, ensemble="row_orthogonal", xi=10.0, max_iters=10)
    real = solver.default_v
    calls = {"n": 0}

    def failing_v(ens, chi):
        calls["n"] += 1
        return -1.0 if calls["n"] == 4 else real(ens, chi)

    monkeypatch.setattr(solver, "default_v", failing_v)
    report = harness.experiment(cfg, write=False)
    first, second = report.trials
    assert first.diverged and "v(t)" in first.trajectory.stop_reason
    assert len(first.trajectory.records) == 4
    assert not second.diverged and len(second.trajectory.records) == 11
    assert report.details["trials.diverged"] == 1
    assert any(line == "detail.trials.diverged = 1" for line in report.report_lines())


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv(harness.THREADS_ENV, "3")
    assert harness.pool_width() == 3
    monkeypatch.setenv(harness.THREADS_ENV, "many")
    with pytest.raises(ValueError):
        harness.pool_width()
    monkeypatch.delenv(harness.THREADS_ENV)
    assert harness.pool_width() == 1


def test_trial_seeds_are_independent_streams():
    a = np.random.default_rng(harness.trial_seed(0, 0)).standard_normal(4)
    b = np.random.default_rng(harness.trial_seed(0, 1)).standard_normal(4)
    assert not np.allclose(a, b)


# --- validation suite -----------------------------------------------------

def test_validation_suite_passes():
    lines, ok = validate.main_lines(validate.run_suite(k=300, iters=20))
    assert ok, "\n".join(lines)
    assert any(line.startswith("SKIP") for line in lines)


def test_perturbed_coefficient_fails_composition():
    ens = rmt.EnsembleSpec.iid_gaussian(0.5, 10.0)
    a = rmt.r_inverse_coeffs(ens, 30)
    assert validate.check_composition(ens, a).passed
    a[1] += 1e-3
    res = validate.check_composition(ens, a)
    assert res.passed is False and res.line().startswith("FAIL rmt")


# --- command line ---------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "cli")
    assert cli.main(["se", "--ensemble", "iid_gaussian", "--horizon", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("t,mse_pred") and len(lines) == 4
    assert cli.main(["gen", "--k", "64", "--trials", "2", "--out", out]) == 0
    assert cli.main(["run", "--k", "64", "--trials", "2", "--max-iters", "3", "--tol", "inf",
                     "--output-dir", out + "/r", "--instances", out, "--no-record-tap"]) in (0, 1)
    assert cli.main(["report", out + "/r"]) in (0, 1)
    assert cli.main(["validate"]) == 0
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--k", "not-a-number"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
    assert cli.main(["run", "--k", "4"]) == 2
    assert cli.main(["report", str(tmp_path / "nowhere")]) == 2


def test_cli_reads_config_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    ExperimentConfig(ensemble="row_orthogonal", xi=1.0).save(path)
    assert cli.main(["se", "--config", str(path), "--horizon", "2"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    se = harness.se_prediction(ExperimentConfig(ensemble="row_orthogonal", xi=1.0), 2)[0]
    assert float(rows[1].split(",")[1]) == se.mse[0]
