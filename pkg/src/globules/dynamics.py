"""Projected Euler-Maruyama integration of the reflected globule system.

The oblique reflection in original coordinates becomes a normal reflection
once all radii are divided by sigma.  One step therefore (a) stretches the
state, (b) adds the drift and the Brownian increments (the stretched radius
noise has unit scale), (c) projects the proposal back onto the stretched
allowed set with an active-set least-distance solve, (d) converts the KKT
multipliers lambda_c of the projection into original-coordinate local-time
increments via

    dL_pair  = lambda_pair / sqrt(2 + 2 sigma^2)
    dL_cap+- = sigma * lambda_cap+-

and (e) unstretches.  The reflection the system feels in original
coordinates is then: center i gains sum_j (x_i-x_j)/(r_i+r_j) dL_ij and
radius i gains -sigma^2 sum_j dL_ij - dL_i+ + dL_i-.

The hard constraints of the dynamics are the internal pair overlaps and the
radius caps; external globules act through the smooth potential only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .core import (
    Configuration,
    DegenerateContactError,
    ModelParams,
    BoundaryContact,
    exterior_sphere_constant,
    pair_distances,
    to_flat,
    triu_pairs,
)
from .penalization import PenalizationSpec, psi_gradient_many, psi_gradient_nonzero

TOL_ACTIVE = 1e-9  # stretched units; constraints within this gap join the active set
MAX_ACTIVE_SET_ITERS = 50
KKT_TOL = 1e-13


class ProjectionError(RuntimeError):
    """Active-set projection failed; carries the offending proposal."""

    def __init__(self, message, proposal=None):
        super().__init__(message)
        self.proposal = proposal


class StepSizeError(RuntimeError):
    """Proposal displacement exceeded the exterior-sphere safety bound."""


class SimulationAborted(RuntimeError):
    """Carries the last good state and the failing step index."""

    def __init__(self, message, last_state: Configuration, step_index: int):
        super().__init__(message)
        self.last_state = last_state
        self.step_index = step_index


# ---------------------------------------------------------------------------
# local-time bookkeeping


@dataclass
class LocalTimeLedger:
    """Accumulated local times: sparse symmetric pair map plus per-globule
    caps.  Entries are nonnegative and nondecreasing along a trajectory."""

    pair: dict
    cap_plus: np.ndarray
    cap_minus: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LocalTimeLedger":
        return cls({}, np.zeros(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.cap_plus.shape[0]

    def get_pair(self, i: int, j: int) -> float:
        if i == j:
            return 0.0
        return self.pair.get((min(i, j), max(i, j)), 0.0)

    def add_pair(self, i: int, j: int, v: float) -> None:
        if i == j:
            raise ValueError("no self pair local time")
        k = (min(i, j), max(i, j))
        self.pair[k] = self.pair.get(k, 0.0) + v

    def iadd(self, other: "LocalTimeLedger") -> None:
        for k, v in other.pair.items():
            self.pair[k] = self.pair.get(k, 0.0) + v
        self.cap_plus += other.cap_plus
        self.cap_minus += other.cap_minus

    def copy(self) -> "LocalTimeLedger":
        return LocalTimeLedger(dict(self.pair), self.cap_plus.copy(), self.cap_minus.copy())

    def pair_matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n))
        for (i, j), v in self.pair.items():
            m[i, j] = m[j, i] = v
        return m

    def total(self) -> float:
        return sum(self.pair.values()) + float(self.cap_plus.sum() + self.cap_minus.sum())


def ledger_difference(late: LocalTimeLedger, early: LocalTimeLedger) -> LocalTimeLedger:
    out = late.copy()
    for k, v in early.pair.items():
        out.pair[k] = out.pair.get(k, 0.0) - v
    out.cap_plus = out.cap_plus - early.cap_plus
    out.cap_minus = out.cap_minus - early.cap_minus
    return out


def ledger_min_increment(late: LocalTimeLedger, early: LocalTimeLedger) -> float:
    """Most negative componentwise increment from early to late (>= 0 means
    the ledger is componentwise nondecreasing)."""
    d = ledger_difference(late, early)
    vals = list(d.pair.values()) + [d.cap_plus.min(initial=0.0), d.cap_minus.min(initial=0.0)]
    return float(min(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# driving noise


class DriveIncrements(NamedTuple):
    """Gaussian increments of one step: (n,3) center block with variance dt
    per component and (n,) radius block with variance dt (unit scale in
    stretched coordinates).  norm2, when present, caches the squared
    Euclidean length of the whole increment."""

    d_center: np.ndarray
    d_radius: np.ndarray
    norm2: Optional[float] = None


class NoisePlan:
    """Counter-based Gaussian increments, reproducible given
    (seed, stream, step index, globule index).

    Blocks of steps are generated from a Philox stream whose counter encodes
    the block index, so any step can be re-materialized without replaying
    the trajectory.  Bridge noise used for local step halving lives in a
    separately tagged counter range.
    """

    _TAG_MAIN = 0
    _TAG_BRIDGE = 1

    def __init__(self, seed: int, n: int, dt: float, stream: int = 0, block: int = 1024):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.n = int(n)
        self.dt = float(dt)
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.block = int(block)
        self._cache = (-1, None, None)

    def _scaled_block(self, b: int):
        if self._cache[0] == b:
            return self._cache[1], self._cache[2]
        bg = np.random.Philox(key=[self.seed, self.stream], counter=[0, 0, b, self._TAG_MAIN])
        arr = np.random.Generator(bg).standard_normal((self.block, self.n, 4))
        arr *= math.sqrt(self.dt)
        norm2 = np.einsum("bij,bij->b", arr, arr)
        self._cache = (b, arr, norm2)
        return arr, norm2

    def increments(self, step: int) -> DriveIncrements:
        blk, norm2 = self._scaled_block(step // self.block)
        row = blk[step % self.block]
        return DriveIncrements(row[:, :3], row[:, 3], float(norm2[step % self.block]))

    def bridge_normals(self, step: int, depth: int, node: int) -> np.ndarray:
        """Standard normals (n, 4) for splitting one increment in two."""
        bg = np.random.Philox(
            key=[self.seed, self.stream], counter=[node, depth, step, self._TAG_BRIDGE]
        )
        return np.random.Generator(bg).standard_normal((self.n, 4))


def split_increment(drive: DriveIncrements, dt: float, xi: np.ndarray) -> tuple[DriveIncrements, DriveIncrements]:
    """Brownian-bridge split of an increment over dt into two halves over
    dt/2 that sum to it."""
    s = math.sqrt(dt) / 2.0
    g1c = drive.d_center / 2.0 + s * xi[:, :3]
    g1r = drive.d_radius / 2.0 + s * xi[:, 3]
    first = DriveIncrements(g1c, g1r)
    second = DriveIncrements(drive.d_center - g1c, drive.d_radius - g1r)
    return first, second


# ---------------------------------------------------------------------------
# constraint geometry in stretched coordinates


def _pair_candidates(centers, radii, sigma, tol):
    """Pairs (i, j), i<j, with stretched gap <= tol (squared-distance test)."""
    n = radii.shape[0]
    if n < 2:
        return []
    iu, ju = triu_pairs(n)
    diff = centers[iu] - centers[ju]
    d2 = np.einsum("ij,ij->i", diff, diff)
    thr = sigma * (radii[iu] + radii[ju]) + tol
    hit = d2 <= thr * thr
    if not hit.any():
        return []
    return [("pair", int(i), int(j)) for i, j in zip(iu[hit], ju[hit])]


def _constraint_gaps(centers, radii, cons, sigma, rlo, rhi) -> np.ndarray:
    out = np.empty(len(cons))
    for k, c in enumerate(cons):
        if c[0] == "pair":
            _, i, j = c
            out[k] = np.linalg.norm(centers[i] - centers[j]) - sigma * (radii[i] + radii[j])
        elif c[0] == "cap+":
            out[k] = rhi - radii[c[1]]
        else:
            out[k] = radii[c[1]] - rlo
    return out


def _constraint_rows(centers, radii, cons, sigma) -> np.ndarray:
    """Stacked constraint gradients (m, 4n); pair rows have norm
    sqrt(2+2 sigma^2), cap rows have norm 1."""
    n = radii.shape[0]
    rows = np.zeros((len(cons), 4 * n))
    for k, c in enumerate(cons):
        if c[0] == "pair":
            _, i, j = c
            diff = centers[i] - centers[j]
            d = np.linalg.norm(diff)
            if d == 0.0:
                raise DegenerateContactError(
                    f"coincident centers for pair ({i}, {j}) during projection"
                )
            u = diff / d
            rows[k, 4 * i : 4 * i + 3] = u
            rows[k, 4 * j : 4 * j + 3] = -u
            rows[k, 4 * i + 3] = -sigma
            rows[k, 4 * j + 3] = -sigma
        elif c[0] == "cap+":
            rows[k, 4 * c[1] + 3] = -1.0
        else:
            rows[k, 4 * c[1] + 3] = 1.0
    return rows


def _solve_equality(raw_flat, cons, centers0, radii0, sigma, rlo, rhi, iters=80):
    """Newton iteration for the least-distance point with the given
    constraints active (g_c = 0), returning (centers, radii, mu) with
    projected = raw + J^T mu at the solution."""
    n = radii0.shape[0]
    centers, radii = centers0.copy(), radii0.copy()
    scale = max(1.0, np.abs(raw_flat).max())
    mu = np.zeros(len(cons))
    for _ in range(iters):
        g = _constraint_gaps(centers, radii, cons, sigma, rlo, rhi)
        J = _constraint_rows(centers, radii, cons, sigma)
        z = to_flat(centers, radii)
        A = J @ J.T
        rhs = -(g + J @ (raw_flat - z))
        try:
            mu = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            mu = np.linalg.lstsq(A, rhs, rcond=None)[0]
        z_new = raw_flat + J.T @ mu
        m = z_new.reshape(n, 4)
        centers, radii = m[:, :3].copy(), m[:, 3].copy()
        step_sz = np.abs(z_new - z).max()
        if step_sz < 1e-14 * scale:
            gf = _constraint_gaps(centers, radii, cons, sigma, rlo, rhi)
            if np.abs(gf).max() < KKT_TOL * scale:
                return centers, radii, mu
    raise ProjectionError(
        "equality-constrained least-distance solve did not converge",
        proposal=Configuration(centers0, radii0),
    )


def _candidate_set(centers, radii, sigma, rlo, rhi, tol):
    active = _pair_candidates(centers, radii, sigma, tol)
    hi = np.nonzero(rhi - radii <= tol)[0]
    lo = np.nonzero(radii - rlo <= tol)[0]
    active += [("cap+", int(i)) for i in hi]
    active += [("cap-", int(i)) for i in lo]
    return active


def _project_arrays(
    raw_centers, raw_radii, params,
    anchor_centers=None, anchor_radii=None,
    tol_active=TOL_ACTIVE, max_iters=MAX_ACTIVE_SET_ITERS,
):
    """Array-based core of project_to_allowed; returns
    (centers, radii, multipliers, iterations)."""
    sigma = params.sigma
    rlo, rhi = params.r_minus / sigma, params.r_plus / sigma

    if anchor_centers is not None:
        d2 = ((raw_centers - anchor_centers) ** 2).sum() + ((raw_radii - anchor_radii) ** 2).sum()
        bound = 0.5 * exterior_sphere_constant(params)
        if not d2 < bound * bound:
            raise StepSizeError(
                f"proposal displacement {math.sqrt(d2):.3e} exceeds safety bound {bound:.3e}"
            )

    active = _candidate_set(raw_centers, raw_radii, sigma, rlo, rhi, tol_active)
    if not active:
        return raw_centers, raw_radii, {}, 0

    raw_flat = to_flat(raw_centers, raw_radii)
    centers, radii = raw_centers.copy(), raw_radii.copy()
    pair_norm = math.sqrt(2.0 + 2.0 * sigma * sigma)
    dropped = set()
    for it in range(1, max_iters + 1):
        centers, radii, mu = _solve_equality(raw_flat, active, centers, radii, sigma, rlo, rhi)
        if len(mu) and mu.min() < 0.0:
            worst = int(np.argmin(mu))
            dropped.add(active[worst])
            del active[worst]
            if not active:
                centers, radii = raw_centers.copy(), raw_radii.copy()
                mu = np.zeros(0)
            else:
                continue
        # join violated constraints (and re-join previously dropped ones only
        # if strictly violated, which prevents add/drop chatter at the surface)
        fresh = []
        for c in _candidate_set(centers, radii, sigma, rlo, rhi, tol_active):
            if c in active:
                continue
            g = _constraint_gaps(centers, radii, [c], sigma, rlo, rhi)[0]
            if g < 0.0 or (c not in dropped and g <= tol_active):
                fresh.append(c)
        if fresh:
            active += fresh
            continue
        lam = {}
        for c, m in zip(active, mu):
            lam[c] = float(m) * (pair_norm if c[0] == "pair" else 1.0)
        return centers, radii, lam, it

    raise ProjectionError(
        f"active-set projection did not converge in {max_iters} iterations",
        proposal=Configuration(raw_centers, raw_radii),
    )


def project_to_allowed(
    raw: Configuration,
    params: ModelParams,
    anchor: Optional[Configuration] = None,
    tol_active: float = TOL_ACTIVE,
    max_iters: int = MAX_ACTIVE_SET_ITERS,
):
    """Project a stretched-coordinate proposal onto the stretched allowed
    set; returns (projected Configuration, multipliers, iterations).

    Multipliers are keyed by constraint and scaled so that
    projected = raw + sum_c lambda_c n_c with n_c the unit inward normals
    (KKT decomposition of the nearest-point projection).  The active-set
    loop repeatedly solves the equality-constrained least-distance problem,
    dropping the most negative multiplier and joining newly violated
    constraints, until feasible with all lambda >= 0.

    If anchor (the last feasible state) is given, the displacement
    |raw - anchor| must stay below half the exterior-sphere radius, which
    is the uniqueness zone of the projection.
    """
    centers, radii, lam, it = _project_arrays(
        raw.centers, raw.radii, params,
        anchor_centers=None if anchor is None else anchor.centers,
        anchor_radii=None if anchor is None else anchor.radii,
        tol_active=tol_active, max_iters=max_iters,
    )
    return Configuration(centers, radii), lam, it


# ---------------------------------------------------------------------------
# one Euler step


@dataclass
class StepResult:
    next: Configuration
    dL: LocalTimeLedger
    active_set: list
    projection_iters: int
    identity_residual: float = 0.0
    oblique_residual: float = 0.0
    complementarity_violations: int = 0
    halvings: int = 0


def drift(c: Configuration, spec: PenalizationSpec, params: ModelParams) -> np.ndarray:
    """Original-coordinate drift vector (4n,): centers get -1/2 grad_x psi,
    radii get -sigma^2/2 d_r psi."""
    gc, gr = psi_gradient_many(spec, c.centers, c.radii, params)
    return to_flat(-0.5 * gc, -0.5 * params.sigma**2 * gr)


def _polish_feasible(centers, radii, params, max_pass=12):
    """Nudge a projected state (original coordinates) so the hard-core
    predicate holds with exact float inequalities; displacements are at the
    rounding scale of the projection tolerance."""
    radii = np.clip(radii, params.r_minus, params.r_plus)
    n = radii.shape[0]
    if n < 2:
        return centers, radii
    iu, ju = triu_pairs(n)
    for _ in range(max_pass):
        d = pair_distances(centers, iu, ju)
        bad = np.nonzero(d < radii[iu] + radii[ju])[0]
        if bad.size == 0:
            return centers, radii
        centers = centers.copy()
        for k in bad:
            i, j = int(iu[k]), int(ju[k])
            dv = centers[i] - centers[j]
            dist = math.sqrt(dv @ dv)
            if dist == 0.0:
                raise DegenerateContactError(f"coincident centers {i}, {j} after projection")
            deficit = (radii[i] + radii[j]) - dist
            if deficit < 0.0:
                continue  # already fixed by an earlier push this pass
            # deficits at the projection tolerance can be below one ulp of the
            # coordinates; bump by a few spacings so the push is representable
            bump = 2.0 * np.spacing(max(dist, np.abs(centers[[i, j]]).max()))
            push = (0.5 * deficit + bump) * (dv / dist)
            centers[i] = centers[i] + push
            centers[j] = centers[j] - push
    raise ProjectionError("feasibility polish did not converge")


def _allowed_internal(centers, radii, params) -> bool:
    """Exact hard-core predicate of the dynamics: radii within caps and no
    internal overlap (external globules act through the potential only)."""
    if radii.min() < params.r_minus or radii.max() > params.r_plus:
        return False
    n = radii.shape[0]
    if n < 2:
        return True
    iu, ju = triu_pairs(n)
    return not bool((pair_distances(centers, iu, ju) < radii[iu] + radii[ju]).any())


def _reflection_directions(centers, radii, cons, sigma):
    """Original-coordinate oblique directions, one column per constraint:
    pair columns carry (x_i-x_j)/(r_i+r_j) on the centers and -sigma^2 on
    both radii; caps carry -+1 on the radius."""
    n = radii.shape[0]
    cols = np.zeros((4 * n, len(cons)))
    for k, c in enumerate(cons):
        if c[0] == "pair":
            _, i, j = c
            diff = centers[i] - centers[j]
            w = diff / (radii[i] + radii[j])
            cols[4 * i : 4 * i + 3, k] = w
            cols[4 * j : 4 * j + 3, k] = -w
            cols[4 * i + 3, k] = -sigma * sigma
            cols[4 * j + 3, k] = -sigma * sigma
        elif c[0] == "cap+":
            cols[4 * c[1] + 3, k] = -1.0
        else:
            cols[4 * c[1] + 3, k] = 1.0
    return cols


def _step_arrays(centers, radii, dt, drive, spec, params, debug, tol_active,
                 consts=None):
    """Array core of step(); returns (new_centers, new_radii, dL or None,
    active contacts, iterations, identity residual, oblique residual,
    complementarity violations)."""
    n = radii.shape[0]
    if n == 0:
        return centers, radii, None, (), 0, 0.0, 0.0, 0
    if consts is None:
        sigma = params.sigma
        consts = (sigma, params.r_minus / sigma, params.r_plus / sigma,
                  (0.5 * exterior_sphere_constant(params)) ** 2)
    sigma, rlo, rhi, bound2 = consts

    zr = radii / sigma
    grad = psi_gradient_nonzero(spec, centers, radii, params)
    if grad is None:
        prop_c = centers + drive.d_center
        prop_r = zr + drive.d_radius
        d2 = drive.norm2
        if d2 is None:
            d2 = float((drive.d_center**2).sum() + (drive.d_radius**2).sum())
    else:
        gc, gr = grad
        prop_c = centers + (-0.5 * gc) * dt + drive.d_center
        prop_r = zr + (-0.5 * sigma * gr) * dt + drive.d_radius
        d2 = float(((prop_c - centers) ** 2).sum() + ((prop_r - zr) ** 2).sum())

    # safety bound on the proposal displacement (uniqueness zone of the
    # nearest-point projection)
    if not d2 < bound2:
        raise StepSizeError(
            f"proposal displacement {math.sqrt(d2):.3e} exceeds safety bound "
            f"{math.sqrt(bound2):.3e}"
        )

    # single fused contact scan; the overwhelmingly common outcome is a free
    # Brownian step with no constraint anywhere near active
    contact = prop_r.max() >= rhi - tol_active or prop_r.min() <= rlo + tol_active
    if not contact and n > 1:
        iu, ju = triu_pairs(n)
        diff = prop_c[iu] - prop_c[ju]
        dd = np.einsum("ij,ij->i", diff, diff)
        thr = sigma * (prop_r[iu] + prop_r[ju]) + tol_active
        contact = bool((dd <= thr * thr).any())
    if not contact:
        # stretched gaps all exceed tol_active, so the unstretched state is
        # allowed with margin; only cap rounding from the radius rescale
        # needs clipping
        return prop_c, np.clip(prop_r * sigma, params.r_minus, params.r_plus), None, (), 0, 0.0, 0.0, 0

    pair_norm = math.sqrt(2.0 + 2.0 * sigma * sigma)
    proj_c, proj_r, lam, iters = _project_arrays(
        prop_c, prop_r, params, tol_active=tol_active
    )
    dL = LocalTimeLedger.zeros(n)
    for con, l in lam.items():
        if con[0] == "pair":
            dL.add_pair(con[1], con[2], l / pair_norm)
        elif con[0] == "cap+":
            dL.cap_plus[con[1]] += sigma * l
        else:
            dL.cap_minus[con[1]] += sigma * l

    new_c, new_r = _polish_feasible(proj_c, proj_r * sigma, params)

    active = []
    comp_viol = 0
    id_res = 0.0
    obl_res = 0.0
    if lam:
        cons = list(lam)
        gaps = _constraint_gaps(proj_c, proj_r, cons, sigma, rlo, rhi)
        rows = _constraint_rows(proj_c, proj_r, cons, sigma)
        for (con, l), g, row in zip(lam.items(), gaps, rows):
            kind = {"pair": "pair", "cap+": "cap_plus", "cap-": "cap_minus"}[con[0]]
            active.append(BoundaryContact(kind, con[1:], row, float(g)))
            if l > 0.0 and g > tol_active:
                comp_viol += 1
        if debug:
            disp = to_flat(new_c - prop_c, sigma * (proj_r - prop_r))
            dirs = _reflection_directions(new_c, new_r, cons, sigma)
            coef = np.array(
                [
                    dL.get_pair(c_[1], c_[2])
                    if c_[0] == "pair"
                    else (dL.cap_plus[c_[1]] if c_[0] == "cap+" else dL.cap_minus[c_[1]])
                    for c_ in cons
                ]
            )
            id_res = float(np.abs(disp - dirs @ coef).max())
            fit = np.linalg.lstsq(dirs, disp, rcond=None)[0]
            obl_res = float(np.abs(disp - dirs @ fit).max())
    return new_c, new_r, dL, active, iters, id_res, obl_res, comp_viol


def step(
    c: Configuration,
    dt: float,
    drive: DriveIncrements,
    spec: PenalizationSpec,
    params: ModelParams,
    debug: bool = False,
    tol_active: float = TOL_ACTIVE,
) -> StepResult:
    """One projected Euler step from an allowed configuration.

    Works in stretched coordinates (radii / sigma), converts the projection
    multipliers to original-coordinate local-time increments through the
    transform dictionary, and returns the unstretched next state.  In debug
    mode the oblique reconstruction identity and local-time complementarity
    are measured per step.
    """
    new_c, new_r, dL, active, iters, id_res, obl_res, comp = _step_arrays(
        c.centers, c.radii, dt, drive, spec, params, debug, tol_active
    )
    return StepResult(
        next=Configuration(new_c, new_r),
        dL=dL if dL is not None else LocalTimeLedger.zeros(len(c)),
        active_set=list(active),
        projection_iters=iters,
        identity_residual=id_res,
        oblique_residual=obl_res,
        complementarity_violations=comp,
    )


def normal_reflection_step(
    c: Configuration,
    dt: float,
    drive: DriveIncrements,
    spec: PenalizationSpec,
    params: ModelParams,
) -> StepResult:
    """Direct normal-reflection step in original coordinates; valid only for
    sigma = 1, where no stretch is needed.  Used as the consistency oracle
    for the stretched pipeline."""
    if params.sigma != 1.0:
        raise ValueError("normal_reflection_step requires sigma = 1")
    n = len(c)
    grad = psi_gradient_nonzero(spec, c.centers, c.radii, params)
    if grad is None:
        prop_c = c.centers + drive.d_center
        prop_r = c.radii + drive.d_radius
    else:
        gc, gr = grad
        prop_c = c.centers + (-0.5 * gc) * dt + drive.d_center
        prop_r = c.radii + (-0.5 * gr) * dt + drive.d_radius

    proj_c, proj_r, lam, iters = _project_arrays(
        prop_c, prop_r, params, anchor_centers=c.centers, anchor_radii=c.radii
    )
    dL = LocalTimeLedger.zeros(n)
    for con, l in lam.items():
        if con[0] == "pair":
            dL.add_pair(con[1], con[2], l / 2.0)
        elif con[0] == "cap+":
            dL.cap_plus[con[1]] += l
        else:
            dL.cap_minus[con[1]] += l
    new_c, new_r = _polish_feasible(proj_c, proj_r, params)
    return StepResult(
        next=Configuration(new_c, new_r),
        dL=dL,
        active_set=[],
        projection_iters=iters,
    )


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    """Recorded trajectory: time grid, states packed as (K+1, n, 4) with the
    radius in the last slot, cumulative ledger snapshots per grid point, and
    optionally the driving increments."""

    times: np.ndarray
    path: np.ndarray
    ledgers: list
    drive: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_globules(self) -> int:
        return self.path.shape[1]

    def state(self, k: int) -> Configuration:
        return Configuration(self.path[k, :, :3], self.path[k, :, 3])

    def centers(self, i: int) -> np.ndarray:
        return self.path[:, i, :3]

    def radii(self, i: int) -> np.ndarray:
        return self.path[:, i, 3]


def simulate(
    initial: Configuration,
    T: float,
    dt: float,
    spec: PenalizationSpec,
    params: ModelParams,
    seed: int,
    stream: int = 0,
    record_stride: int = 1,
    record_drive: bool = False,
    validate: bool = True,
    debug: bool = False,
    max_halvings: int = 4,
) -> TrajectoryRecord:
    """Iterate the projected Euler step over T/dt steps.

    Deterministic given (seed, stream).  On a projection failure the step is
    split in two Brownian-bridge halves, up to max_halvings deep, after
    which the run aborts carrying the last good state.  With validate on,
    the hard-core predicate (radii bounds and internal overlaps) is asserted
    for every computed state.
    """
    n_steps = round(T / dt)
    if not math.isclose(n_steps * dt, T, rel_tol=1e-9):
        raise ValueError("T/dt must be an integer")
    if record_stride < 1 or n_steps % record_stride:
        raise ValueError("record_stride must divide the number of steps")
    n = len(initial)
    if validate and n and not _allowed_internal(initial.centers, initial.radii, params):
        raise ValueError("initial configuration is not allowed")

    plan = NoisePlan(seed, n, dt, stream=stream)
    ledger = LocalTimeLedger.zeros(n)
    k_rec = n_steps // record_stride
    path = np.empty((k_rec + 1, n, 4))
    path[0, :, :3] = initial.centers
    path[0, :, 3] = initial.radii
    ledgers = [ledger.copy()]
    drv = (np.zeros((n_steps, n, 3)), np.zeros((n_steps, n))) if record_drive else None

    stats = {
        "halved_steps": 0,
        "max_projection_iters": 0,
        "max_identity_residual": 0.0,
        "max_oblique_residual": 0.0,
        "complementarity_violations": 0,
        "allowed_violations": 0,
    }

    sigma = params.sigma
    consts = (sigma, params.r_minus / sigma, params.r_plus / sigma,
              (0.5 * exterior_sphere_constant(params)) ** 2)
    retryable = (ProjectionError, StepSizeError, DegenerateContactError)

    def advance(cen, rad, drv_inc, dt_eff, depth, step_index, node):
        try:
            return [_step_arrays(cen, rad, dt_eff, drv_inc, spec, params, debug,
                                 TOL_ACTIVE, consts)]
        except retryable as exc:
            if depth >= max_halvings:
                raise SimulationAborted(
                    f"step {step_index} failed after {depth} halvings: {exc}",
                    last_state=Configuration(cen, rad),
                    step_index=step_index,
                ) from exc
            xi = plan.bridge_normals(step_index, depth, node)
            first, second = split_increment(drv_inc, dt_eff, xi)
            out = advance(cen, rad, first, dt_eff / 2.0, depth + 1, step_index, 2 * node)
            out += advance(out[-1][0], out[-1][1], second, dt_eff / 2.0, depth + 1,
                           step_index, 2 * node + 1)
            return out

    cen, rad = initial.centers, initial.radii
    for k in range(n_steps):
        inc = plan.increments(k)
        if record_drive:
            drv[0][k] = inc.d_center
            drv[1][k] = inc.d_radius
        try:
            results = [_step_arrays(cen, rad, dt, inc, spec, params, debug,
                                    TOL_ACTIVE, consts)]
        except retryable:
            results = advance(cen, rad, inc, dt, 0, k, 1)
            stats["halved_steps"] += 1
        for res in results:
            if res[2] is not None:
                ledger.iadd(res[2])
                stats["max_projection_iters"] = max(stats["max_projection_iters"], res[4])
                stats["max_identity_residual"] = max(stats["max_identity_residual"], res[5])
                stats["max_oblique_residual"] = max(stats["max_oblique_residual"], res[6])
                stats["complementarity_violations"] += res[7]
        cen, rad = results[-1][0], results[-1][1]
        recording = (k + 1) % record_stride == 0
        # free steps end with stretched gaps above tol_active, which implies
        # the predicate; re-check states that saw a projection, plus every
        # recorded state
        touched = any(res[2] is not None for res in results)
        if validate and n and (touched or recording) and not _allowed_internal(cen, rad, params):
            stats["allowed_violations"] += 1
        if recording:
            idx = (k + 1) // record_stride
            path[idx, :, :3] = cen
            path[idx, :, 3] = rad
            ledgers.append(ledger.copy())

    times = np.arange(k_rec + 1) * (dt * record_stride)
    meta = {
        "T": T,
        "dt": dt,
        "seed": seed,
        "stream": stream,
        "record_stride": record_stride,
        "sigma": params.sigma,
        "r_minus": params.r_minus,
        "r_plus": params.r_plus,
        "ell": params.ell,
        **stats,
    }
    return TrajectoryRecord(times=times, path=path, ledgers=ledgers, drive=drv, meta=meta)


def time_reverse(traj: TrajectoryRecord) -> TrajectoryRecord:
    """Reverse the time grid; ledger snapshots become increments counted
    from the end, so the reversed ledger over [0, t] equals the forward
    ledger over [T-t, T]."""
    final = traj.ledgers[-1]
    ledgers = [ledger_difference(final, lg) for lg in reversed(traj.ledgers)]
    drive = None
    if traj.drive is not None:
        drive = (-traj.drive[0][::-1].copy(), -traj.drive[1][::-1].copy())
    return TrajectoryRecord(
        times=traj.times.copy(),
        path=traj.path[::-1].copy(),
        ledgers=ledgers,
        drive=drive,
        meta={**traj.meta, "time_reversed": not traj.meta.get("time_reversed", False)},
    )
