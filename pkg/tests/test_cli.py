import os

import numpy as np
import pytest

from globules.cli import ConfigValidationError, ExperimentConfig, main, run_experiment
from globules.core import Configuration, ModelParams
from globules.io import load_configuration, load_trajectory, save_configuration


def write_init(tmp_path, name="init.txt"):
    c = Configuration([[0, 0, 0], [2.2, 0, 0]], [1.0, 1.0])
    p = ModelParams(1.0, 0.5, 1.5, 6)
    path = tmp_path / name
    save_configuration(path, c, p)
    return str(path)


def test_simulate_deterministic_bytes(tmp_path):
    init = write_init(tmp_path)
    outs = []
    for name in ("a.txt", "b.txt"):
        out = str(tmp_path / name)
        rc = main([
            "simulate", "--init", init, "--T", "0.05", "--dt", "1e-3",
            "--seed", "5", "--ell", "6", "--out", out,
        ])
        assert rc == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]
    rc = main([
        "simulate", "--init", init, "--T", "0.05", "--dt", "1e-3",
        "--seed", "6", "--ell", "6", "--out", str(tmp_path / "c.txt"),
    ])
    assert rc == 0
    assert open(tmp_path / "c.txt", "rb").read() != outs[0]


def test_simulate_params_default_from_header(tmp_path):
    init = write_init(tmp_path)
    out = str(tmp_path / "t.txt")
    rc = main(["simulate", "--init", init, "--T", "0.02", "--dt", "1e-3",
               "--seed", "1", "--ell", "6", "--out", out])
    assert rc == 0
    traj = load_trajectory(out)
    assert traj.meta["sigma"] == 1.0 and traj.meta["r_plus"] == 1.5


def test_sample_stationary_feeds_simulate(tmp_path):
    conf_path = str(tmp_path / "stat.txt")
    rc = main([
        "sample-stationary", "--seed", "9", "--sweeps", "4000", "--ell", "3",
        "--sigma", "1.0", "--rminus", "0.5", "--rplus", "1.0",
        "--out", conf_path,
    ])
    assert rc == 0
    conf, info = load_configuration(conf_path)
    out = str(tmp_path / "traj.txt")
    rc = main(["simulate", "--init", conf_path, "--T", "0.02", "--dt", "1e-3",
               "--seed", "3", "--ell", "3", "--out", out])
    assert rc == 0
    traj = load_trajectory(out)
    assert traj.n_globules == len(conf)


def test_sample_stationary_hard_window(tmp_path):
    conf_path = str(tmp_path / "hard.txt")
    rc = main([
        "sample-stationary", "--seed", "9", "--sweeps", "4000", "--window", "1.5",
        "--sigma", "1.0", "--rminus", "0.4", "--rplus", "0.8", "--ell", "1",
        "--out", conf_path,
    ])
    assert rc == 0
    conf, _ = load_configuration(conf_path)
    if len(conf):
        assert (np.linalg.norm(conf.centers, axis=1) <= 1.5).all()


def test_missing_required_flag_exits_2(tmp_path):
    init = write_init(tmp_path)
    # r_plus removed from the header so the flag becomes mandatory
    text = open(init).read().splitlines()
    head = text[0].split()
    del head[4]
    bad = tmp_path / "bad.txt"
    bad.write_text(" ".join(head) + "\n" + "\n".join(text[1:]) + "\n")
    rc = main(["simulate", "--init", str(bad), "--T", "0.02", "--dt", "1e-3",
               "--seed", "1", "--ell", "6", "--out", str(tmp_path / "o.txt")])
    assert rc == 2


def test_disallowed_initial_exits_2(tmp_path):
    c = Configuration([[0, 0, 0], [1.0, 0, 0]], [1.0, 1.0])
    p = ModelParams(1.0, 0.5, 1.5, 6)
    path = tmp_path / "overlap.txt"
    save_configuration(path, c, p)
    rc = main(["simulate", "--init", str(path), "--T", "0.02", "--dt", "1e-3",
               "--seed", "1", "--ell", "6", "--out", str(tmp_path / "o.txt")])
    assert rc == 2


def test_diagnose_report(tmp_path):
    init = write_init(tmp_path)
    out = str(tmp_path / "traj.txt")
    main(["simulate", "--init", init, "--T", "1.0", "--dt", str(1.0 / 4096),
          "--seed", "2", "--ell", "6", "--out", out, "--stride", "16"])
    rep = str(tmp_path / "report.txt")
    rc = main(["diagnose", "--traj", out, "--m", "1", "--rho", "3.0", "--out", rep])
    assert rc == 0
    text = open(rep).read()
    assert "nesting_ok True" in text
    assert "modulus_0" in text


def test_config_validation_collects_all_problems(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(
        "[model]\nsigma = -1\nr_minus = 2.0\nr_plus = 1.0\nell = 3\n"
        "[run]\nT = 1.0\ndt = 0.3\nseed = -4\n"
    )
    with pytest.raises(ConfigValidationError) as err:
        ExperimentConfig(str(cfg))
    msg = str(err.value)
    assert "sigma" in msg and "r_minus" in msg and "T/dt" in msg and "seed" in msg


def test_run_experiment_pipeline(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "[model]\nsigma = 1.0\nr_minus = 0.5\nr_plus = 1.0\nell = 3\n"
        "[run]\nT = 0.0625\ndt = 0.00390625\nseed = 11\nn_trajectories = 2\n"
        "stride = 1\ninitial = sample\nsample_sweeps = 3000\n"
    )
    out = tmp_path / "artifacts"
    report = run_experiment(str(cfg), str(out))
    assert (out / "manifest.txt").exists()
    assert (out / "report.txt").exists()
    assert (out / "trajectory_000.txt").exists()
    assert (out / "trajectory_001.txt").exists()
    manifest = open(out / "manifest.txt").read()
    assert "config_hash" in manifest and "numpy_version" in manifest
    # identical rerun produces byte-identical trajectories
    out2 = tmp_path / "artifacts2"
    run_experiment(str(cfg), str(out2))
    for name in ("trajectory_000.txt", "trajectory_001.txt", "initial_000.txt"):
        assert open(out / name, "rb").read() == open(out2 / name, "rb").read()


def test_run_experiment_grid_refinement_guard(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "[model]\nsigma = 1.0\nr_minus = 0.5\nr_plus = 1.0\nell = 3\n"
        "[run]\nT = 1.0\ndt = 0.01\nseed = 1\n"
        "[diagnostics]\nm = 1\n"
    )
    with pytest.raises(ConfigValidationError, match="refine"):
        ExperimentConfig(str(cfg))


def test_scaling_chain_subcommand(tmp_path):
    out = tmp_path / "chain.txt"
    csv = tmp_path / "chain.csv"
    rc = main([
        "scaling-chain", "--ell", "4", "--sigma", "1.0", "--rminus", "0.4",
        "--rplus", "0.6", "--M", "2", "--eps-min", "0.005", "--eps-max", "0.05",
        "--neps", "4", "--samples", "150", "--burn-in", "3000", "--thin", "100",
        "--seed", "3", "--out", str(out), "--csv", str(csv),
    ])
    assert rc == 0
    assert "slope" in open(out).read()
    lines = open(csv).read().splitlines()
    assert lines[0] == "epsilon,p_hat,stderr,used" and len(lines) == 5


def test_scaling_modulus_subcommand(tmp_path):
    out = tmp_path / "mod.txt"
    rc = main([
        "scaling-modulus", "--ell", "40", "--sigma", "1.0", "--rminus", "0.5",
        "--rplus", "8.5", "--n-traj", "60", "--T", "1.0", "--dt", "0.00390625",
        "--delta", "0.0625", "--eps-min", "0.9", "--eps-max", "1.2", "--neps", "4",
        "--burn-in", "10", "--seed", "3", "--out", str(out),
    ])
    assert rc == 0
    text = open(out).read()
    assert "decay_negative True" in text


def test_reversibility_subcommand(tmp_path):
    out = tmp_path / "rev.txt"
    rc = main([
        "reversibility", "--ell", "4", "--sigma", "1.0", "--rminus", "0.5",
        "--rplus", "1.5", "--n", "3", "--trajectories", "40", "--dt", "0.002",
        "--stride", "50", "--times", "0.2,0.7", "--burn-in", "2000",
        "--thin", "150", "--seed", "3", "--out", str(out),
    ])
    assert rc == 0
    assert "all_within_3_stderr" in open(out).read()


def test_cli_run_subcommand(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "[model]\nsigma = 1.0\nr_minus = 0.5\nr_plus = 1.0\nell = 3\n"
        "[run]\nT = 0.03125\ndt = 0.00390625\nseed = 4\n"
    )
    rc = main(["run", str(cfg), "--out-dir", str(tmp_path / "art")])
    assert rc == 0
    rc = main(["run", str(tmp_path / "missing.cfg"), "--out-dir", str(tmp_path / "a2")])
    assert rc == 2
