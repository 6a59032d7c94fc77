"""Path functionals and statistical tests for simulated globule systems:
moduli of continuity, proximity chains, nice-path membership, localization
index sets, reversibility statistics and scaling-law fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Configuration, ModelParams
from .dynamics import TrajectoryRecord
from .penalization import PenalizationSpec
from .sampler import sample_penalized_ensemble

CHAIN_WORK_CAP = 10_000_000


class ChainSearchOverflow(RuntimeError):
    """Simple-path search exceeded its expansion budget."""


@dataclass(frozen=True)
class PathRegularityParams:
    """Regularity scheme parameters.  The single scale m fixes
    delta(m) = 2^-4m and the confinement level (1+3 r_plus) M 2^4m; the
    continuity exponent is 1/4, which makes M > 17 the summable choice."""

    delta: float
    epsilon: float
    M: int
    m: int = 0
    kappa: float = 0.25

    def __post_init__(self):
        if not (0 < self.delta <= 1):
            raise ValueError("delta must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.M < 2:
            raise ValueError("M must be >= 2")

    @classmethod
    def from_scale(cls, m: int, M: int = 18, epsilon_scale: float = 1.0) -> "PathRegularityParams":
        return cls(delta=2.0 ** (-4 * m), epsilon=epsilon_scale * 2.0 ** (-m), M=M, m=m)


def confinement_level(m: int, r_plus: float, M: int) -> float:
    """(1 + 3 r_plus) M 2^(4m), the scheme's confinement radius at scale m."""
    return (1.0 + 3.0 * r_plus) * M * 2.0 ** (4 * m)


def localization_threshold(k: int, m: int, rho: float, r_plus: float, M: int) -> float:
    """v_(k,m) = rho + (1 + 3 r_plus M) 2^(4m) - 3 r_plus M k."""
    return rho + (1.0 + 3.0 * r_plus * M) * 2.0 ** (4 * m) - 3.0 * r_plus * M * k


@dataclass(frozen=True)
class ChainReport:
    found: bool
    witness: Optional[tuple] = None


# ---------------------------------------------------------------------------
# moduli of continuity


def _modulus_from_path(path: np.ndarray, lag_max: int) -> np.ndarray:
    """Per-globule modulus over grid pairs with lag <= lag_max; path has
    shape (K+1, n, 4) with the radius in the last slot."""
    n = path.shape[1]
    out = np.zeros(n)
    for lag in range(1, lag_max + 1):
        d = path[lag:] - path[:-lag]
        sq = (d * d).sum(axis=-1)  # joint center+radius square displacement
        out = np.maximum(out, sq.max(axis=0))
    return np.sqrt(out)


def modulus_of_continuity(traj: TrajectoryRecord, i: int, delta: float) -> float:
    """sup over recorded grid pairs with |t-s| <= delta of
    sqrt(|X_i(t)-X_i(s)|^2 + (rX_i(t)-rX_i(s))^2)."""
    if not 0 <= i < traj.n_globules:
        raise IndexError(f"no globule {i}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    grid = traj.times[1] - traj.times[0]
    lag_max = int(np.floor(delta / grid + 1e-9))
    if lag_max < 1:
        return 0.0
    return float(_modulus_from_path(traj.path[:, i : i + 1, :], lag_max)[0])


def modulus_all(traj: TrajectoryRecord, delta: float) -> np.ndarray:
    """Per-globule delta-modulus, vectorized."""
    grid = traj.times[1] - traj.times[0]
    lag_max = int(np.floor(delta / grid + 1e-9))
    if lag_max < 1:
        return np.zeros(traj.n_globules)
    return _modulus_from_path(traj.path, lag_max)


# ---------------------------------------------------------------------------
# proximity chains


def _proximity_adjacency(c: Configuration, epsilon: float) -> np.ndarray:
    d = np.linalg.norm(c.centers[:, None, :] - c.centers[None, :, :], axis=-1)
    adj = d < (c.radii[:, None] + c.radii[None, :] + epsilon)
    np.fill_diagonal(adj, False)
    return adj


def _components(adj: np.ndarray) -> list:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in np.nonzero(adj[v])[0]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(int(w))
        comps.append(comp)
    return comps


def detect_chain(c: Configuration, epsilon: float, M: int,
                 work_cap: int = CHAIN_WORK_CAP) -> ChainReport:
    """Search for M distinct globules forming a path in the epsilon-proximity
    graph (edges where center distance < radii sum + epsilon).

    Exact simple-path DFS restricted to components of at least M vertices;
    the expansion budget guards the worst case.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    n = len(c)
    if n < M:
        return ChainReport(False)
    adj = _proximity_adjacency(c, epsilon)
    neighbors = [np.nonzero(adj[v])[0] for v in range(n)]
    work = 0
    for comp in _components(adj):
        if len(comp) < M:
            continue
        for start in comp:
            path = [start]
            on_path = {start}
            iters = [iter(neighbors[start])]
            while iters:
                work += 1
                if work > work_cap:
                    raise ChainSearchOverflow(f"exceeded {work_cap} expansions")
                try:
                    nxt = int(next(iters[-1]))
                except StopIteration:
                    iters.pop()
                    on_path.discard(path.pop())
                    continue
                if nxt in on_path:
                    continue
                path.append(nxt)
                on_path.add(nxt)
                if len(path) == M:
                    return ChainReport(True, tuple(path))
                iters.append(iter(neighbors[nxt]))
    return ChainReport(False)


# ---------------------------------------------------------------------------
# nice paths


def _checkpoint_indices(traj: TrajectoryRecord, delta: float) -> list:
    grid = traj.times[1] - traj.times[0]
    stride = delta / grid
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise ValueError("trajectory grid does not refine delta")
    stride = round(stride)
    total = traj.times.shape[0] - 1
    return list(range(0, total, stride))  # times delta*k strictly before T


def nice_path_membership(
    traj: TrajectoryRecord,
    p: PathRegularityParams,
    chain_epsilon: Optional[float] = None,
) -> tuple[bool, bool]:
    """(all globule moduli <= epsilon over windows delta,
        no epsilon-chain of M globules at any checkpoint time delta*k).

    chain_epsilon overrides the chain threshold when the scheme uses a
    different proximity scale than the modulus bound."""
    eps_chain = p.epsilon if chain_epsilon is None else chain_epsilon
    small = bool((modulus_all(traj, p.delta) <= p.epsilon).all())
    no_chain = True
    for k in _checkpoint_indices(traj, p.delta):
        if detect_chain(traj.state(k), eps_chain, p.M).found:
            no_chain = False
            break
    return small, no_chain


# ---------------------------------------------------------------------------
# localization index sets


@dataclass
class LocalizationReport:
    sets: list
    thresholds: list
    nesting_ok: bool
    seed_ok: bool
    nesting_violations: list
    non_interaction_violations: list
    scheme_consistent: bool
    clearance: float


def localization_sets(
    traj: TrajectoryRecord,
    p: PathRegularityParams,
    rho: float,
    params: ModelParams,
    chain_epsilon: Optional[float] = None,
) -> LocalizationReport:
    """Per-checkpoint index sets J_(k,m): globules within |X_i| <= v_(k,m)
    or chain-connected to that ball at scale 2^6 / 2^m, with the nesting
    chain, the seed inclusion {i: |X_i(0)| <= rho} and the non-interaction
    property verified and reported (violations are reported, not raised).
    """
    m, M, rp = p.m, p.M, params.r_plus
    delta = 2.0 ** (-4 * m)
    eps_chain = chain_epsilon if chain_epsilon is not None else 2.0**6 / 2.0**m
    margin = 2.0**5 / 2.0 ** (4 * m)

    ks = _checkpoint_indices(traj, delta)
    grid = traj.times[1] - traj.times[0]
    stride = round(delta / grid)

    sets, thresholds = [], []
    for k_idx, k0 in enumerate(ks):
        state = traj.state(k0)
        v = localization_threshold(k_idx, m, rho, rp, M)
        thresholds.append(v)
        inside = np.linalg.norm(state.centers, axis=-1) <= v
        members = set(np.nonzero(inside)[0].tolist())
        adj = _proximity_adjacency(state, eps_chain)
        for comp in _components(adj):
            if any(inside[v_] for v_ in comp):
                members.update(comp)
        sets.append(frozenset(int(i) for i in members))

    nesting_violations = []
    for k_idx in range(len(sets) - 1):
        if not sets[k_idx + 1] <= sets[k_idx]:
            nesting_violations.append(k_idx + 1)
    seed = {
        int(i)
        for i in np.nonzero(np.linalg.norm(traj.state(0).centers, axis=-1) <= rho)[0]
    }
    seed_ok = seed <= sets[-1] if sets else True

    non_interaction = []
    clearance = math.inf
    for k_idx, k0 in enumerate(ks):
        inside = sets[k_idx]
        outside = [j for j in range(traj.n_globules) if j not in inside]
        if not outside or not inside:
            continue
        seg = traj.path[k0 : k0 + stride + 1]
        ci = seg[:, list(inside), :3]
        cj = seg[:, outside, :3]
        ri = seg[:, list(inside), 3]
        rj = seg[:, outside, 3]
        d = np.linalg.norm(ci[:, :, None, :] - cj[:, None, :, :], axis=-1)
        gap = d - (ri[:, :, None] + rj[:, None, :])
        clearance = min(clearance, float(gap.min()))
        inside_list = list(inside)
        bad = {
            (inside_list[a_], outside[b_], k_idx)
            for _, a_, b_ in zip(*np.nonzero(gap <= margin))
        }
        non_interaction.extend(sorted(bad))

    v0 = localization_threshold(0, m, rho, rp, M)
    scheme_ok = v0 <= confinement_level(m, rp, M) - 2.0 * rp
    return LocalizationReport(
        sets=sets,
        thresholds=thresholds,
        nesting_ok=not nesting_violations,
        seed_ok=seed_ok,
        nesting_violations=nesting_violations,
        non_interaction_violations=non_interaction,
        scheme_consistent=bool(scheme_ok),
        clearance=clearance,
    )


# ---------------------------------------------------------------------------
# test functionals and the reversibility statistic


def smoothed_ball_count(R: float, width: float) -> Callable[[Configuration], float]:
    """Smoothed number of globule centers in B(0, R): each center
    contributes a C^1 ramp from 1 (inside R - width) to 0 (outside
    R + width)."""

    def f(c: Configuration) -> float:
        if len(c) == 0:
            return 0.0
        r = np.linalg.norm(c.centers, axis=-1)
        u = np.clip((R + width - r) / (2.0 * width), 0.0, 1.0)
        return float((u * u * (3.0 - 2.0 * u)).sum())

    f.__name__ = f"smoothed_ball_count_R{R:g}"
    return f


def smoothed_min_gap(scale: float) -> Callable[[Configuration], float]:
    """exp(-min pair gap / scale): bounded in (0, 1], continuous in the
    configuration; 0 by convention when fewer than two globules."""

    def f(c: Configuration) -> float:
        n = len(c)
        if n < 2:
            return 0.0
        d = np.linalg.norm(c.centers[:, None, :] - c.centers[None, :, :], axis=-1)
        g = d - (c.radii[:, None] + c.radii[None, :])
        np.fill_diagonal(g, np.inf)
        return float(np.exp(-g.min() / scale))

    f.__name__ = f"smoothed_min_gap_s{scale:g}"
    return f


def functional_library(R: float = 2.0, width: float = 0.5, gap_scale: float = 0.5) -> list:
    """The fixed family of bounded test functionals used by the
    reversibility check."""
    return [smoothed_ball_count(R, width), smoothed_min_gap(gap_scale)]


def _time_index(traj: TrajectoryRecord, t: float) -> int:
    k = int(np.argmin(np.abs(traj.times - t)))
    if abs(traj.times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} is not on the record grid")
    return k


@dataclass(frozen=True)
class ReversibilityResult:
    forward: float
    backward: float
    stderr: float
    n_trajectories: int

    @property
    def zscore(self) -> float:
        if self.stderr == 0.0:
            return 0.0
        return abs(self.forward - self.backward) / self.stderr


def reversibility_statistic(
    ensemble: Sequence[TrajectoryRecord],
    functionals: Sequence[Callable[[Configuration], float]],
    times: Sequence[float],
    min_ensemble: int = 30,
) -> ReversibilityResult:
    """Monte Carlo estimates of E[prod_i f_i(X(t_i))] and of the same
    product at times 1 - t_i, with the jackknife standard error of their
    difference.  Trajectories must live on [0, 1] and start from the
    stationary penalized measure for the two estimates to agree.
    """
    if len(ensemble) < min_ensemble:
        raise ValueError(
            f"ensemble of {len(ensemble)} is too small; use at least "
            f"{min_ensemble} stationary-start trajectories"
        )
    if len(functionals) != len(times):
        raise ValueError("need one time per functional")
    fw = np.empty(len(ensemble))
    bw = np.empty(len(ensemble))
    for b, traj in enumerate(ensemble):
        T = traj.times[-1]
        pf = pb = 1.0
        for f, t in zip(functionals, times):
            pf *= f(traj.state(_time_index(traj, t)))
            pb *= f(traj.state(_time_index(traj, T - t)))
        fw[b] = pf
        bw[b] = pb
    diff = fw - bw
    B = len(ensemble)
    jk = (diff.sum() - diff) / (B - 1)  # leave-one-out means
    se = math.sqrt((B - 1) / B * ((jk - jk.mean()) ** 2).sum())
    return ReversibilityResult(float(fw.mean()), float(bw.mean()), se, B)


# ---------------------------------------------------------------------------
# scaling-law fits


@dataclass
class ScalingFit:
    slope: Optional[float]
    intercept: Optional[float]
    r2: Optional[float]
    table: list  # rows (x, p_hat, stderr, used)
    n_samples: int
    note: str = ""

    @property
    def ok(self) -> bool:
        return self.slope is not None


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    A = np.vstack([x, np.ones_like(x)]).T
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    ss_tot = ((y - y.mean()) ** 2).sum()
    ss_res = ((y - A @ coef) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(r2)


def scaling_fit_chain_probability(
    params: ModelParams,
    spec: PenalizationSpec,
    epsilons: Sequence[float],
    M: int,
    n_samples: int = 2000,
    seed: int = 0,
    burn_in: int = 10_000,
    thin: int = 50,
    saturation: float = 0.5,
    samples: Optional[list] = None,
) -> ScalingFit:
    """Monte Carlo estimate of the probability that a penalized-measure
    sample contains an epsilon-chain of M globules, fitted as
    log P against log epsilon.  In the dilute small-epsilon regime the
    slope approaches M - 1.

    Saturated points (P above `saturation`) are excluded from the fit and
    flagged; with no chain detections at all, one-sided upper bounds are
    reported instead of a fit.  A precomputed ensemble can be passed in to
    share draws between calls.
    """
    eps = np.asarray(sorted(epsilons), dtype=float)
    if samples is None:
        samples = sample_penalized_ensemble(
            params, spec, seed, n_samples, burn_in=burn_in, thin=thin
        )
    N = len(samples)
    hits = np.zeros(eps.shape[0])
    for s in samples:
        for k, e in enumerate(eps):  # monotone: found at eps implies larger eps
            if detect_chain(s, e, M).found:
                hits[k:] += 1.0
                break
    p = hits / N
    se = np.sqrt(np.maximum(p * (1 - p), 1e-12) / N)
    used = (hits > 0) & (p <= saturation)
    table = [(float(e), float(pi), float(si), bool(u)) for e, pi, si, u in zip(eps, p, se, used)]
    if not hits.any():
        bound = 3.0 / N  # zero-count rule-of-three upper bound
        return ScalingFit(None, None, None, table, N,
                          note=f"no chains detected; one-sided P <= {bound:.2e} at every epsilon")
    if used.sum() < 2:
        return ScalingFit(None, None, None, table, N, note="fewer than 2 usable points")
    slope, intercept, r2 = _line_fit(np.log(eps[used]), np.log(p[used]))
    return ScalingFit(slope, intercept, r2, table, N)


def scaling_fit_modulus_tail(
    ensemble: Sequence[TrajectoryRecord],
    delta: float,
    epsilons: Sequence[float],
    p_range: tuple = (1e-3, 0.5),
) -> ScalingFit:
    """Fit of log P(some globule has delta-modulus above epsilon) against
    epsilon^2 / delta.  A negative slope is the Gaussian-type decay; the
    multiplicative constants are reported through the intercept but carry
    no asserted value."""
    eps = np.asarray(sorted(epsilons), dtype=float)
    w = np.array([modulus_all(traj, delta).max() for traj in ensemble])
    N = len(ensemble)
    p = np.array([(w > e).mean() for e in eps])
    se = np.sqrt(np.maximum(p * (1 - p), 1e-12) / N)
    used = (p >= p_range[0]) & (p <= p_range[1])
    x = eps**2 / delta
    table = [(float(xi), float(pi), float(si), bool(u)) for xi, pi, si, u in zip(x, p, se, used)]
    if used.sum() < 2:
        return ScalingFit(None, None, None, table, N, note="fewer than 2 points in the valid probability range")
    slope, intercept, r2 = _line_fit(x[used], np.log(p[used]))
    return ScalingFit(slope, intercept, r2, table, N)


def brownian_modulus_tail(
    delta: float,
    epsilons: Sequence[float],
    n_paths: int,
    n_steps: int,
    T: float,
    sigma: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Direct Monte Carlo of the grid modulus of a free globule path
    (3-D Brownian center, sigma-scaled Brownian radius): the independent
    oracle for the single-globule modulus tail.  Returns (p_hat, stderr)
    per epsilon."""
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 77]))
    dt = T / n_steps
    eps = np.asarray(sorted(epsilons), dtype=float)
    lag_max = int(np.floor(delta / dt + 1e-9))
    hits = np.zeros(eps.shape[0])
    chunk = max(1, int(2_000_000 // (4 * (n_steps + 1))))
    done = 0
    while done < n_paths:
        b = min(chunk, n_paths - done)
        inc = rng.standard_normal((b, n_steps, 4)) * math.sqrt(dt)
        inc[:, :, 3] *= sigma
        path = np.concatenate([np.zeros((b, 1, 4)), np.cumsum(inc, axis=1)], axis=1)
        w2 = np.zeros(b)
        for lag in range(1, lag_max + 1):
            d = path[:, lag:] - path[:, :-lag]
            w2 = np.maximum(w2, (d * d).sum(axis=-1).max(axis=1))
        w = np.sqrt(w2)
        hits += (w[:, None] > eps[None, :]).sum(axis=0)
        done += b
    p = hits / n_paths
    se = np.sqrt(np.maximum(p * (1 - p), 1e-12) / n_paths)
    return p, se


# ---------------------------------------------------------------------------
# empirical detailed balance of a reversible chain


def transition_reversibility_zscores(labels: Sequence, min_count: int = 20) -> list:
    """Pairwise flow z-scores of a discretized stationary chain: under
    detailed balance, C(a,b) is Binomial(C(a,b)+C(b,a), 1/2), so
    z = |C(a,b)-C(b,a)| / sqrt(C(a,b)+C(b,a)) is approximately standard
    normal.  Returns rows (a, b, count_ab, count_ba, z) for unordered pairs
    with enough transitions."""
    counts: dict = {}
    for a, b in zip(labels[:-1], labels[1:]):
        counts[(a, b)] = counts.get((a, b), 0) + 1
    rows = []
    seen = set()
    for (a, b), nab in counts.items():
        if a == b or (b, a) in seen:
            continue
        seen.add((a, b))
        nba = counts.get((b, a), 0)
        tot = nab + nba
        if tot < min_count:
            continue
        rows.append((a, b, nab, nba, abs(nab - nba) / math.sqrt(tot)))
    return rows
