"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`.  Every tolerance is pinned
here; statistical criteria use fixed seeds so the suite is deterministic on
one platform.
"""

import math

import numpy as np
import pytest
from scipy import stats

from globules.core import (
    Configuration,
    ModelParams,
    allowed_arrays,
    exterior_sphere_constant,
    to_flat,
)
from globules.diagnostics import (
    PathRegularityParams,
    brownian_modulus_tail,
    functional_library,
    localization_sets,
    modulus_all,
    reversibility_statistic,
    scaling_fit_chain_probability,
    scaling_fit_modulus_tail,
    transition_reversibility_zscores,
)
from globules.dynamics import (
    LocalTimeLedger,
    NoisePlan,
    ledger_min_increment,
    normal_reflection_step,
    project_to_allowed,
    simulate,
    step,
)
from globules.penalization import PenalizationSpec
from globules.sampler import (
    WindowSpec,
    partition_function_oracle,
    sample_hard_poisson,
    sample_penalized_ensemble,
)

from oracles import _feasible_mask, grid_projection_oracle


def report(num, label, ok, detail=""):
    print(f"[criterion {num:2d}] {label}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} failed: {detail}"


def ten_globule_grid():
    pts = [[2.3 * i, 2.3 * j, 0.0] for i in range(5) for j in range(2)]
    return Configuration(pts, [1.0] * 10)


@pytest.fixture(scope="module")
def hundred_runs():
    """100 trajectories, n = 10, T = 1, dt = 1e-4, sigma in {0.5, 1, 2}."""
    runs = []
    init = ten_globule_grid()
    spec = PenalizationSpec(25)
    k = 0
    for sigma, count in ((0.5, 34), (1.0, 33), (2.0, 33)):
        params = ModelParams(sigma, 0.5, 1.5, 25)
        for _ in range(count):
            runs.append(
                (
                    params,
                    simulate(init, 1.0, 1e-4, spec, params, seed=7001,
                             stream=k, record_stride=10),
                )
            )
            k += 1
    return runs


def test_criterion_01_hardcore_invariant(hundred_runs):
    bad_states = 0
    bad_radii = 0
    inline_violations = 0
    for params, traj in hundred_runs:
        r = traj.path[:, :, 3]
        if r.min() < params.r_minus or r.max() > params.r_plus:
            bad_radii += 1
        for kk in range(traj.path.shape[0]):
            if not allowed_arrays(traj.path[kk, :, :3], traj.path[kk, :, 3], params):
                bad_states += 1
        inline_violations += traj.meta["allowed_violations"]
    total = sum(t.path.shape[0] for _, t in hundred_runs)
    report(
        1, "hard-core invariant",
        bad_states == 0 and bad_radii == 0 and inline_violations == 0,
        f"{total} recorded states over 100 runs, violations={bad_states}, "
        f"radius breaches={bad_radii}, in-step violations={inline_violations}",
    )


def test_criterion_02_local_time_structure(hundred_runs):
    comp_violations = 0
    negative = 0
    decreasing = 0
    asym = 0
    touched_runs = 0
    for _, traj in hundred_runs:
        comp_violations += traj.meta["complementarity_violations"]
        final = traj.ledgers[-1]
        if final.total() > 0:
            touched_runs += 1
        if final.pair and min(final.pair.values()) < 0:
            negative += 1
        if final.cap_plus.min(initial=0.0) < 0 or final.cap_minus.min(initial=0.0) < 0:
            negative += 1
        m = final.pair_matrix()
        if not np.array_equal(m, m.T):
            asym += 1
        for a, b in zip(traj.ledgers[:-1], traj.ledgers[1:]):
            if ledger_min_increment(b, a) < 0.0:
                decreasing += 1
                break
    report(
        2, "local-time complementarity and structure",
        comp_violations == 0 and negative == 0 and decreasing == 0 and asym == 0
        and touched_runs > 0,
        f"complementarity violations={comp_violations}, negative={negative}, "
        f"non-monotone={decreasing}, asymmetric={asym}; "
        f"{touched_runs}/100 runs saw contacts",
    )


def test_criterion_03_oblique_direction_identity():
    worst = 0.0
    contact_steps = 0
    pts = [
        [0, 0, 0], [2.04, 0, 0], [-2.04, 0, 0],
        [0, 2.04, 0], [0, -2.04, 0], [0, 0, 2.04],
    ]
    init = Configuration(pts, [1.0] * 6)
    spec = PenalizationSpec(20)
    for k in range(10):
        sigma = (0.5, 1.0, 2.0)[k % 3]
        params = ModelParams(sigma, 0.5, 1.5, 20)
        traj = simulate(init, 0.5, 1e-3, spec, params, seed=8101, stream=k, debug=True)
        worst = max(worst, traj.meta["max_oblique_residual"])
        contact_steps += sum(v for v in traj.ledgers[-1].pair.values() if v > 0) > 0
    report(
        3, "oblique-direction identity",
        worst <= 1e-8 and contact_steps == 10,
        f"max least-squares residual over 10 debug runs = {worst:.3e}",
    )


def _touching_anchor(rng, n, params):
    """Near-contact chain, strictly feasible by a hair so it can seed the
    brute-force oracle walk."""
    sigma = params.sigma
    rlo, rhi = params.r_minus / sigma, params.r_plus / sigma
    radii = rng.uniform(rlo, rhi, n)
    centers = [np.zeros(3)]
    for i in range(1, n):
        while True:
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            cand = centers[-1] + u * sigma * (radii[i - 1] + radii[i]) * (1.0 + 1e-9)
            ok = all(
                np.linalg.norm(cand - centers[kk]) >= sigma * (radii[kk] + radii[i]) * (1.0 + 1e-9)
                for kk in range(i - 1)
            )
            if ok:
                centers.append(cand)
                break
    return np.array(centers), radii


def test_criterion_04_projection_oracle_equivalence():
    rng = np.random.default_rng(2024)
    sigmas = (0.5, 1.0, 2.0)
    worst = 0.0
    cases = 0
    for n, count in ((2, 200), (3, 50)):
        for c in range(count):
            params = ModelParams(sigmas[c % 3], 0.6, 1.6, 20)
            alpha = exterior_sphere_constant(params)
            anchor_c, anchor_r = _touching_anchor(rng, n, params)
            anchor_flat = to_flat(anchor_c, anchor_r)
            for _ in range(200):
                d = rng.normal(size=4 * n)
                d *= rng.uniform(0.2, 0.45) * alpha / np.linalg.norm(d)
                prop = anchor_flat + d
                if not _feasible_mask(prop[None, :], n, params)[0]:
                    break
            else:
                raise RuntimeError("could not build an infeasible proposal")
            m = prop.reshape(n, 4)
            raw = Configuration(m[:, :3], m[:, 3])
            proj, lam, _ = project_to_allowed(
                raw, params,
                anchor=Configuration(anchor_c, anchor_r),
            )
            got = to_flat(proj.centers, proj.radii)
            want = grid_projection_oracle(m[:, :3], m[:, 3], params, spacing0=0.3,
                                          lattice_target=3e-3, start=anchor_flat)
            worst = max(worst, float(np.linalg.norm(got - want)))
            assert all(v >= 0.0 for v in lam.values())
            cases += 1
    report(
        4, "projection oracle equivalence",
        worst <= 1e-6 and cases == 250,
        f"max |active-set - oracle| over 200+50 proposals = {worst:.3e}",
    )


def test_criterion_05_sigma_transform_consistency():
    params = ModelParams(1.0, 0.5, 1.5, 8)
    spec = PenalizationSpec(8)
    state_a = state_b = Configuration(
        [[0, 0, 0], [2.05, 0, 0], [-2.05, 0.1, 0]], [1.0, 1.0, 1.0]
    )
    plan = NoisePlan(4242, 3, 1e-3)
    led_a, led_b = LocalTimeLedger.zeros(3), LocalTimeLedger.zeros(3)
    worst = 0.0
    for k in range(10_000):
        inc = plan.increments(k)
        ra = step(state_a, 1e-3, inc, spec, params)
        rb = normal_reflection_step(state_b, 1e-3, inc, spec, params)
        state_a, state_b = ra.next, rb.next
        led_a.iadd(ra.dL)
        led_b.iadd(rb.dL)
        worst = max(
            worst,
            float(np.abs(state_a.centers - state_b.centers).max()),
            float(np.abs(state_a.radii - state_b.radii).max()),
        )
    ledger_diff = max(
        abs(led_a.get_pair(i, j) - led_b.get_pair(i, j))
        for i in range(3) for j in range(3) if i != j
    )
    ledger_diff = max(
        ledger_diff,
        float(np.abs(led_a.cap_plus - led_b.cap_plus).max()),
        float(np.abs(led_a.cap_minus - led_b.cap_minus).max()),
    )
    report(
        5, "sigma-transform consistency",
        worst <= 1e-12 and ledger_diff <= 1e-12 and led_a.total() > 0,
        f"max per-step state diff = {worst:.2e}, ledger diff = {ledger_diff:.2e}, "
        f"total pair local time = {led_a.total():.3f}",
    )


def test_criterion_06_single_globule_radius_law():
    # flat potential in the bulk: the radius is reflected Brownian motion on
    # [r_minus, r_plus]; 10^4 samples spaced ~2 relaxation times apart
    params = ModelParams(1.0, 0.5, 4.5, 60)
    spec = PenalizationSpec(60)
    dt = 1.0 / 256
    rng = np.random.default_rng(606)
    samples = []
    for k in range(125):
        r0 = rng.uniform(params.r_minus, params.r_plus)
        traj = simulate(
            Configuration([[0, 0, 0]], [r0]), 500.0, dt, spec, params,
            seed=909, stream=k, record_stride=1600,
        )
        samples.extend(traj.path[1:, 0, 3])
    samples = np.array(samples)
    res = stats.kstest(samples, stats.uniform(params.r_minus, 4.0).cdf)
    report(
        6, "single-globule radius law",
        len(samples) == 10_000 and res.pvalue > 0.01,
        f"KS D={res.statistic:.4f}, p={res.pvalue:.4f} on {len(samples)} samples",
    )


def test_criterion_07_stationary_sampler():
    params = ModelParams(1.0, 0.5, 1.0, 3)
    window = WindowSpec.ball(0.4, (0.5, 1.0))
    z = partition_function_oracle(window, Configuration.empty(), n_max=1)
    p0_oracle = math.exp(-window.volume4) / z

    _, chain = sample_hard_poisson(window, Configuration.empty(), params, 1, 31,
                                   return_chain=True)
    empties = []
    for _ in range(100_000):
        chain.sweep()
        empties.append(chain.state.n == 0)
    empties = np.array(empties[20_000:], dtype=float)
    batches = empties[: (len(empties) // 40) * 40].reshape(40, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(40)
    p0_hat = empties.mean()
    ok_p0 = abs(p0_hat - p0_oracle) <= 3 * se

    box = WindowSpec.box([-0.3, -0.15, -0.15], [0.3, 0.15, 0.15], (0.5, 1.0))
    _, chain2 = sample_hard_poisson(box, Configuration.empty(), params, 1, 37,
                                    return_chain=True)
    chain2.run(20_000)
    labels = []
    for _ in range(150_000):
        chain2.sweep()
        st = chain2.state
        if st.n == 0:
            labels.append(0)
        else:
            labels.append(1 + 2 * (st.centers[0, 0] > 0) + (st.radii[0] > 0.75))
    rows = transition_reversibility_zscores(labels, min_count=50)
    max_z = max(zz for *_, zz in rows)
    report(
        7, "stationary sampler correctness",
        ok_p0 and max_z <= 3.0 and len(rows) >= 4,
        f"P(N=0): hat={p0_hat:.4f} oracle={p0_oracle:.4f} (3se={3 * se:.4f}); "
        f"detailed-balance max z={max_z:.2f} over {len(rows)} bin pairs",
    )


def test_criterion_08_reversibility():
    params = ModelParams(1.0, 0.5, 1.5, 4)
    spec = PenalizationSpec(4)
    inits = sample_penalized_ensemble(
        params, spec, 5150, 500, burn_in=5_000, thin=400, fixed_n=3
    )
    ensemble = [
        simulate(init, 1.0, 5e-4, spec, params, seed=5151, stream=k, record_stride=100)
        for k, init in enumerate(inits)
    ]
    times = (0.2, 0.7)
    details = []
    ok = True
    for f in functional_library(R=2.0, width=0.5, gap_scale=0.5):
        res = reversibility_statistic(ensemble, [f, f], times)
        ok = ok and res.zscore <= 3.0 and res.stderr > 0.0
        details.append(f"{f.__name__}: fwd={res.forward:.4f} bwd={res.backward:.4f} "
                       f"z={res.zscore:.2f}")
    report(8, "reversibility (forward vs time-reversed)", ok, "; ".join(details))


@pytest.fixture(scope="module")
def chain_samples():
    params = ModelParams(1.0, 0.4, 0.6, 4)
    spec = PenalizationSpec(4)
    samples = sample_penalized_ensemble(params, spec, 2025, 3000,
                                        burn_in=30_000, thin=500)
    return params, spec, samples


def test_criterion_09_chain_probability_scaling(chain_samples):
    params, spec, samples = chain_samples
    fit2 = scaling_fit_chain_probability(
        params, spec, np.geomspace(0.002, 0.02, 6), 2, samples=samples
    )
    fit3 = scaling_fit_chain_probability(
        params, spec, np.geomspace(0.010, 0.100, 6), 3, samples=samples
    )
    ok = (
        fit2.ok and fit3.ok
        and abs(fit2.slope - 1.0) <= 0.3 and fit2.r2 >= 0.95
        and abs(fit3.slope - 2.0) <= 0.3 and fit3.r2 >= 0.95
    )
    report(
        9, "chain-probability scaling",
        ok,
        f"M=2: slope={fit2.slope:.3f} r2={fit2.r2:.4f}; "
        f"M=3: slope={fit3.slope:.3f} r2={fit3.r2:.4f} ({fit3.n_samples} samples)",
    )


def test_criterion_10_modulus_tail_decay():
    params = ModelParams(1.0, 0.5, 8.5, 40)
    spec = PenalizationSpec(40)
    delta = 1.0 / 16
    n_paths = 2500
    ensemble = [
        simulate(Configuration([[0, 0, 0]], [4.5]), 1.0, 1.0 / 256, spec, params,
                 seed=4242, stream=k)
        for k in range(n_paths)
    ]
    eps = np.linspace(0.95, 1.25, 6)
    fit = scaling_fit_modulus_tail(ensemble, delta, eps)
    w = np.array([modulus_all(t, delta)[0] for t in ensemble])
    p_oracle, se_oracle = brownian_modulus_tail(delta, eps, n_paths, 256, 1.0, 1.0,
                                                seed=777)
    max_z = 0.0
    for k, e in enumerate(eps):
        p_hat = (w > e).mean()
        se_hat = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / n_paths)
        z = abs(p_hat - p_oracle[k]) / math.sqrt(se_hat**2 + se_oracle[k] ** 2)
        max_z = max(max_z, z)
    ok = fit.ok and fit.slope < 0 and fit.r2 >= 0.9 and max_z <= 3.0
    report(
        10, "modulus tail decay",
        ok,
        f"slope={fit.slope:.3f} (negative), r2={fit.r2:.4f}, "
        f"Brownian-oracle max z={max_z:.2f}",
    )


def test_criterion_11_localization_consistency():
    params = ModelParams(1.0, 0.5, 1.0, 6)
    spec = PenalizationSpec(6)
    pts = [
        [0, 0, 0], [1.7, 0, 0], [0, 1.7, 0], [-1.7, 0, 0],
        [0, -1.7, 0], [0, 0, 1.7], [0, 0, -1.7], [1.7, 1.7, 0],
    ]
    init = Configuration(pts, [0.75] * 8)
    p = PathRegularityParams.from_scale(1, M=18)
    clean = 0
    for k in range(3):
        traj = simulate(init, 1.0, 1.0 / 4096, spec, params, seed=1111, stream=k,
                        record_stride=16)
        rep = localization_sets(traj, p, rho=3.0, params=params)
        if (rep.nesting_ok and rep.seed_ok and not rep.non_interaction_violations
                and rep.scheme_consistent):
            clean += 1

    # synthetically injected violation must be detected
    from globules.dynamics import TrajectoryRecord

    K = 32
    path = np.zeros((K + 1, 2, 4))
    path[:, :, 3] = 0.75
    path[:, 1, 0] = 2000.0
    path[20, 1, :3] = [1.6, 0, 0]
    fake = TrajectoryRecord(
        times=np.linspace(0, 1, K + 1), path=path,
        ledgers=[LocalTimeLedger.zeros(2) for _ in range(K + 1)], meta={},
    )
    detected = bool(
        localization_sets(fake, p, rho=1.0, params=params).non_interaction_violations
    )
    report(
        11, "localization consistency",
        clean == 3 and detected,
        f"clean runs: {clean}/3 nesting+non-interaction OK; "
        f"injected violation detected: {detected}",
    )


def test_criterion_12_determinism(tmp_path):
    from globules.cli import main
    from globules.io import save_configuration

    init = ten_globule_grid()
    params = ModelParams(1.0, 0.5, 1.5, 25)
    conf = tmp_path / "init.txt"
    save_configuration(conf, init, params)
    blobs = []
    for name in ("one.txt", "two.txt"):
        out = tmp_path / name
        rc = main([
            "simulate", "--init", str(conf), "--T", "0.05", "--dt", "1e-3",
            "--seed", "99", "--ell", "25", "--out", str(out),
        ])
        assert rc == 0
        blobs.append(out.read_bytes())
    identical = blobs[0] == blobs[1]
    report(12, "determinism", identical,
           f"byte-identical trajectory files: {identical}")
