"""Command-line entry points: seeded experiment orchestration wiring the
stationary sampler, the reflected dynamics and the diagnostics, plus direct
subcommands for each stage.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
Outputs are deterministic given the seed; per-trajectory noise streams are
derived from (seed, trajectory index), so results do not depend on
execution order.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import os
import sys

import numpy as np
import scipy

from . import __version__
from .core import Configuration, ModelParams, allowed
from .diagnostics import (
    ChainSearchOverflow,
    PathRegularityParams,
    functional_library,
    localization_sets,
    modulus_all,
    nice_path_membership,
    reversibility_statistic,
    scaling_fit_chain_probability,
    scaling_fit_modulus_tail,
)
from .dynamics import ProjectionError, SimulationAborted, StepSizeError, simulate
from .io import (
    format_report,
    load_configuration,
    save_configuration,
    save_csv,
    save_report,
    save_trajectory,
)
from .penalization import PenalizationSpec, QuadratureError
from .sampler import (
    WindowSpec,
    sample_hard_poisson,
    sample_penalized,
    sample_penalized_ensemble,
)

MODULUS_REFINEMENT = 16  # the record grid must refine delta by at least this


class ConfigValidationError(ValueError):
    """Collects every violated configuration constraint."""

    def __init__(self, problems):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = list(problems)


# ---------------------------------------------------------------------------
# experiment configuration (flat key-value file with sections)


class ExperimentConfig:
    """Parsed and cross-validated experiment file.

    Sections: [model] sigma, r_minus, r_plus, ell, external (optional path);
    [run] T, dt, seed, n_trajectories, stride, initial (path or 'sample'),
    sample_sweeps; [diagnostics] m, chain_M, rho, epsilon_scale (optional
    section).
    """

    def __init__(self, path):
        cp = configparser.ConfigParser()
        read = cp.read(path)
        problems = []
        if not read:
            raise ConfigValidationError([f"cannot read config file {path}"])

        def need(section, key, cast=float):
            if not cp.has_option(section, key):
                problems.append(f"missing [{section}] {key}")
                return None
            try:
                return cast(cp.get(section, key))
            except ValueError:
                problems.append(f"[{section}] {key} is not a valid {cast.__name__}")
                return None

        sigma = need("model", "sigma")
        r_minus = need("model", "r_minus")
        r_plus = need("model", "r_plus")
        ell = need("model", "ell", int)
        T = need("run", "T")
        dt = need("run", "dt")
        seed = need("run", "seed", int)
        self.n_trajectories = int(cp.get("run", "n_trajectories", fallback="1"))
        self.stride = int(cp.get("run", "stride", fallback="1"))
        self.initial = cp.get("run", "initial", fallback="sample")
        self.sample_sweeps = int(cp.get("run", "sample_sweeps", fallback="20000"))
        self.external_path = cp.get("model", "external", fallback="")

        self.diag_m = None
        if cp.has_section("diagnostics"):
            self.diag_m = int(cp.get("diagnostics", "m", fallback="1"))
            self.chain_M = int(cp.get("diagnostics", "chain_M", fallback="18"))
            self.rho = float(cp.get("diagnostics", "rho", fallback="2.0"))
            self.epsilon_scale = float(cp.get("diagnostics", "epsilon_scale", fallback="1.0"))

        if None not in (sigma, r_minus, r_plus, ell):
            if sigma <= 0:
                problems.append("sigma must be > 0")
            if not 0 < r_minus < r_plus:
                problems.append("need 0 < r_minus < r_plus")
            if ell < 1:
                problems.append("ell must be >= 1")
            elif r_plus > r_minus and math.exp(-ell) >= min(1.0, (r_plus - r_minus) / 4.0):
                problems.append("exp(-ell) must stay below min(1, (r_plus - r_minus)/4)")
        if None not in (T, dt):
            steps = T / dt
            if abs(steps - round(steps)) > 1e-9:
                problems.append("T/dt must be an integer")
            elif round(steps) % self.stride:
                problems.append("stride must divide the number of steps")
            if self.diag_m is not None:
                delta = 2.0 ** (-4 * self.diag_m)
                if dt * self.stride > delta / MODULUS_REFINEMENT + 1e-15:
                    problems.append(
                        f"record grid dt*stride={dt * self.stride:g} must refine "
                        f"delta(m)={delta:g} by at least {MODULUS_REFINEMENT}x"
                    )
        if seed is not None and seed < 0:
            problems.append("seed must be nonnegative")
        if problems:
            raise ConfigValidationError(problems)

        external = Configuration.empty()
        if self.external_path:
            external, _ = load_configuration(self.external_path)
        self.params = ModelParams(sigma, r_minus, r_plus, ell, external)
        self.spec = PenalizationSpec(ell, external)
        self.T, self.dt, self.seed = T, dt, seed
        with open(path, "rb") as fh:
            self.config_hash = hashlib.sha256(fh.read()).hexdigest()


def run_experiment(config_path, out_dir) -> dict:
    """Sampler -> dynamics -> diagnostics pipeline; deterministic artifact
    files under out_dir plus a manifest recording config hash, seed and
    versions."""
    cfg = ExperimentConfig(config_path)
    os.makedirs(out_dir, exist_ok=True)
    params, spec = cfg.params, cfg.spec

    report = {
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "n_trajectories": cfg.n_trajectories,
    }
    for k in range(cfg.n_trajectories):
        if cfg.initial == "sample":
            init = sample_penalized(params, spec, cfg.seed, sweeps=cfg.sample_sweeps, stream=1000 + k)
        else:
            init, _ = load_configuration(cfg.initial)
        save_configuration(os.path.join(out_dir, f"initial_{k:03d}.txt"), init, params)
        traj = simulate(
            init, cfg.T, cfg.dt, spec, params, cfg.seed,
            stream=k, record_stride=cfg.stride,
        )
        save_trajectory(os.path.join(out_dir, f"trajectory_{k:03d}.txt"), traj)
        report[f"trajectory_{k:03d}_halved_steps"] = traj.meta["halved_steps"]
        report[f"trajectory_{k:03d}_final_n"] = traj.n_globules
        if cfg.diag_m is not None:
            p = PathRegularityParams.from_scale(cfg.diag_m, M=cfg.chain_M,
                                                epsilon_scale=cfg.epsilon_scale)
            if p.delta <= cfg.T:
                w = modulus_all(traj, p.delta)
                report[f"trajectory_{k:03d}_max_modulus"] = format(w.max(), ".6g")
                loc = localization_sets(traj, p, cfg.rho, params)
                report[f"trajectory_{k:03d}_nesting_ok"] = loc.nesting_ok
                report[f"trajectory_{k:03d}_non_interaction_violations"] = len(
                    loc.non_interaction_violations
                )
                report[f"trajectory_{k:03d}_scheme_consistent"] = loc.scheme_consistent

    save_report(os.path.join(out_dir, "report.txt"), report)
    manifest = {
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "globules_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
    }
    save_report(os.path.join(out_dir, "manifest.txt"), manifest)
    return report


# ---------------------------------------------------------------------------
# subcommands


def _params_from_args(args, header=None) -> ModelParams:
    def pick(flag, key):
        v = getattr(args, flag)
        if v is None:
            if header is None or key not in header:
                raise ConfigValidationError([f"missing --{flag.replace('_', '-')}"])
            return header[key]
        return v

    external = Configuration.empty()
    if getattr(args, "external", None):
        external, _ = load_configuration(args.external)
    return ModelParams(
        pick("sigma", "sigma"), pick("rminus", "r_minus"), pick("rplus", "r_plus"),
        args.ell, external,
    )


def _cmd_simulate(args) -> int:
    init, header = load_configuration(args.init)
    params = _params_from_args(args, header)
    spec = PenalizationSpec(args.ell, params.external)
    if not allowed(init, params):
        raise ConfigValidationError(["initial configuration is not allowed"])
    traj = simulate(
        init, args.T, args.dt, spec, params, args.seed,
        stream=args.stream, record_stride=args.stride, debug=args.debug,
    )
    save_trajectory(args.out, traj, ledger_every=args.ledger_every)
    print(f"wrote {args.out}: {traj.n_globules} globules, "
          f"{len(traj.times) - 1} records, halved steps {traj.meta['halved_steps']}")
    return 0


def _cmd_sample_stationary(args) -> int:
    missing = [f for f in ("sigma", "rminus", "rplus") if getattr(args, f) is None]
    if missing:
        raise ConfigValidationError([f"missing --{f}" for f in missing])
    if args.window is not None:
        params = ModelParams(args.sigma, args.rminus, args.rplus, max(args.ell, 1))
        window = WindowSpec.ball(args.window, (args.rminus, args.rplus))
        external = Configuration.empty()
        if args.external:
            external, _ = load_configuration(args.external)
        conf = sample_hard_poisson(window, external, params, args.sweeps, args.seed)
    else:
        params = _params_from_args(args)
        spec = PenalizationSpec(args.ell, params.external)
        conf = sample_penalized(params, spec, args.seed, sweeps=args.sweeps)
        window = None
    save_configuration(args.out, conf, ModelParams(args.sigma, args.rminus, args.rplus, max(args.ell, 1)))
    print(f"wrote {args.out}: {len(conf)} globules")
    return 0


def _cmd_diagnose(args) -> int:
    from .io import load_trajectory

    traj = load_trajectory(args.traj)
    meta = traj.meta
    params = ModelParams(meta["sigma"], meta["r_minus"], meta["r_plus"], meta["ell"])
    p = PathRegularityParams.from_scale(args.m, M=args.chain_M, epsilon_scale=args.epsilon_scale)
    report = {
        "trajectory": args.traj,
        "n_globules": traj.n_globules,
        "delta": p.delta,
        "epsilon": p.epsilon,
        "chain_M": p.M,
    }
    w = modulus_all(traj, p.delta)
    for i, wi in enumerate(w):
        report[f"modulus_{i}"] = format(wi, ".9g")
    small, no_chain = nice_path_membership(traj, p)
    report["moduli_within_epsilon"] = small
    report["chain_free_checkpoints"] = no_chain
    loc = localization_sets(traj, p, args.rho, params)
    report["nesting_ok"] = loc.nesting_ok
    report["seed_inclusion_ok"] = loc.seed_ok
    report["non_interaction_violations"] = len(loc.non_interaction_violations)
    for i, (a, b, k) in enumerate(loc.non_interaction_violations[:50]):
        report[f"violation_{i}"] = f"{a} {b} {k}"
    report["scheme_consistent"] = loc.scheme_consistent
    save_report(args.out, report)
    print(format_report(report), end="")
    return 0


def _cmd_scaling_chain(args) -> int:
    params = ModelParams(args.sigma, args.rminus, args.rplus, args.ell)
    spec = PenalizationSpec(args.ell)
    eps = np.geomspace(args.eps_min, args.eps_max, args.neps)
    fit = scaling_fit_chain_probability(
        params, spec, eps, args.M,
        n_samples=args.samples, seed=args.seed, burn_in=args.burn_in, thin=args.thin,
    )
    report = {"M": args.M, "n_samples": fit.n_samples, "note": fit.note or "-"}
    if fit.ok:
        report.update(slope=format(fit.slope, ".6g"), intercept=format(fit.intercept, ".6g"),
                      r2=format(fit.r2, ".6g"), expected_slope=args.M - 1)
    save_report(args.out, report)
    if args.csv:
        save_csv(args.csv, ["epsilon", "p_hat", "stderr", "used"], fit.table)
    print(format_report(report), end="")
    return 0


def _cmd_scaling_modulus(args) -> int:
    params = ModelParams(args.sigma, args.rminus, args.rplus, args.ell)
    spec = PenalizationSpec(args.ell)
    ensemble = []
    for k in range(args.n_traj):
        init = sample_penalized(params, spec, args.seed, sweeps=args.burn_in, stream=2000 + k)
        ensemble.append(simulate(init, args.T, args.dt, spec, params, args.seed, stream=k))
    eps = np.geomspace(args.eps_min, args.eps_max, args.neps)
    fit = scaling_fit_modulus_tail(ensemble, args.delta, eps)
    report = {"delta": args.delta, "n_trajectories": args.n_traj, "note": fit.note or "-"}
    if fit.ok:
        report.update(slope=format(fit.slope, ".6g"), r2=format(fit.r2, ".6g"),
                      decay_negative=fit.slope < 0)
    save_report(args.out, report)
    if args.csv:
        save_csv(args.csv, ["eps_sq_over_delta", "p_hat", "stderr", "used"], fit.table)
    print(format_report(report), end="")
    return 0


def _cmd_reversibility(args) -> int:
    params = ModelParams(args.sigma, args.rminus, args.rplus, args.ell)
    spec = PenalizationSpec(args.ell)
    inits = sample_penalized_ensemble(
        params, spec, args.seed, args.trajectories,
        burn_in=args.burn_in, thin=args.thin, fixed_n=args.n,
    )
    ensemble = [
        simulate(init, 1.0, args.dt, spec, params, args.seed, stream=k,
                 record_stride=args.stride)
        for k, init in enumerate(inits)
    ]
    times = [float(t) for t in args.times.split(",")]
    report = {"trajectories": len(ensemble), "times": args.times}
    ok = True
    for f in functional_library():
        res = reversibility_statistic(ensemble, [f] * len(times), times)
        report[f"{f.__name__}_forward"] = format(res.forward, ".9g")
        report[f"{f.__name__}_backward"] = format(res.backward, ".9g")
        report[f"{f.__name__}_stderr"] = format(res.stderr, ".9g")
        report[f"{f.__name__}_zscore"] = format(res.zscore, ".4g")
        ok = ok and res.zscore <= 3.0
    report["all_within_3_stderr"] = ok
    save_report(args.out, report)
    print(format_report(report), end="")
    return 0


def _cmd_run(args) -> int:
    run_experiment(args.config, args.out_dir)
    print(f"experiment artifacts written to {args.out_dir}")
    return 0


def _add_model_flags(p, required=False):
    p.add_argument("--ell", type=int, default=1)
    p.add_argument("--sigma", type=float, default=None if not required else 1.0)
    p.add_argument("--rminus", type=float, default=None)
    p.add_argument("--rplus", type=float, default=None)
    p.add_argument("--external", default="")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="globules",
                                 description="hard-core Brownian globule simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate the reflected dynamics")
    p.add_argument("--init", required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--stream", type=int, default=0)
    p.add_argument("--ledger-every", type=int, default=1)
    p.add_argument("--debug", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sample-stationary", help="draw a stationary configuration")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sweeps", type=int, default=20000)
    p.add_argument("--window", type=float, default=None,
                   help="ball radius for the hard Poisson window (omit to sample the penalized measure)")
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample_stationary)

    p = sub.add_parser("diagnose", help="path regularity and localization report")
    p.add_argument("--traj", required=True)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--chain-M", type=int, default=18)
    p.add_argument("--rho", type=float, default=2.0)
    p.add_argument("--epsilon-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("scaling-chain", help="chain-probability scaling fit")
    _add_model_flags(p)
    p.add_argument("--M", type=int, default=2)
    p.add_argument("--eps-min", type=float, required=True)
    p.add_argument("--eps-max", type=float, required=True)
    p.add_argument("--neps", type=int, default=5)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--burn-in", type=int, default=10000)
    p.add_argument("--thin", type=int, default=50)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default="")
    p.set_defaults(func=_cmd_scaling_chain)

    p = sub.add_parser("scaling-modulus", help="modulus tail decay fit")
    _add_model_flags(p)
    p.add_argument("--n-traj", type=int, default=200)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--eps-min", type=float, required=True)
    p.add_argument("--eps-max", type=float, required=True)
    p.add_argument("--neps", type=int, default=5)
    p.add_argument("--burn-in", type=int, default=10000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default="")
    p.set_defaults(func=_cmd_scaling_modulus)

    p = sub.add_parser("reversibility", help="forward vs time-reversed functional estimates")
    _add_model_flags(p)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--trajectories", type=int, default=500)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--times", default="0.2,0.7")
    p.add_argument("--burn-in", type=int, default=10000)
    p.add_argument("--thin", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reversibility)

    p = sub.add_parser("run", help="config-driven sampler -> dynamics -> diagnostics pipeline")
    p.add_argument("config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_run)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (ProjectionError, StepSizeError, SimulationAborted, QuadratureError,
            ChainSearchOverflow) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
