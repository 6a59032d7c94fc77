"""Samplers for the hard-globule Poisson process and the penalized measures.

Both targets are densities against the unit-rate Poisson process on a
bounded window of R^3 x [r_minus, r_plus]:

  * hard Poisson:  f(x) prop. to  1{x allowed, also against the external
    configuration};
  * penalized:     f(x) prop. to  exp(-sum_i psi(x_i, r_i)) 1{x internally
    allowed}, on a ball window large enough that the truncated tail mass is
    negligible (external globules act through psi only).

The chain is Metropolis birth-death-move: births propose a uniform point of
the window, deaths a uniform present globule, moves a Gaussian perturbation
of one globule's center and radius.  Detailed balance against the target is
exact for each proposal kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Configuration, ModelParams
from .penalization import PenalizationSpec, QuadratureError, psi_many

P_BIRTH = 0.35
P_DEATH = 0.35
DEFAULT_BURN_IN = 10_000
DEFAULT_THIN = 100
TRUNCATION_MASS = 1e-9


@dataclass(frozen=True)
class WindowSpec:
    """Bounded sampling window: a ball B(0, R) or an axis-aligned box,
    with marks in radius_interval.

    A zero-width radius interval is the fixed-radius (degenerate-mark)
    case: the mark measure becomes a unit point mass instead of Lebesgue.
    """

    kind: str  # "ball" | "box"
    radius: float = 0.0
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (0.0, 0.0, 0.0)
    radius_interval: tuple = (0.0, 0.0)

    @classmethod
    def ball(cls, radius: float, radius_interval) -> "WindowSpec":
        return cls("ball", radius=float(radius), radius_interval=tuple(radius_interval))

    @classmethod
    def box(cls, lo, hi, radius_interval) -> "WindowSpec":
        return cls("box", lo=tuple(lo), hi=tuple(hi), radius_interval=tuple(radius_interval))

    @property
    def volume3(self) -> float:
        if self.kind == "ball":
            return 4.0 / 3.0 * math.pi * self.radius**3
        side = np.array(self.hi) - np.array(self.lo)
        return float(np.prod(side))

    @property
    def mark_width(self) -> float:
        return self.radius_interval[1] - self.radius_interval[0]

    @property
    def volume4(self) -> float:
        """Reference-measure mass of the window (3-volume for degenerate marks)."""
        w = self.mark_width
        return self.volume3 * (w if w > 0.0 else 1.0)

    def contains_centers(self, centers: np.ndarray) -> np.ndarray:
        if self.kind == "ball":
            return np.linalg.norm(centers, axis=-1) <= self.radius
        lo, hi = np.array(self.lo), np.array(self.hi)
        return np.all((centers >= lo) & (centers <= hi), axis=-1)

    def sample_center(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "box":
            lo, hi = np.array(self.lo), np.array(self.hi)
            return lo + rng.random(3) * (hi - lo)
        while True:  # rejection from the bounding cube, acceptance pi/6
            p = (rng.random(3) * 2.0 - 1.0) * self.radius
            if p @ p <= self.radius**2:
                return p

    def sample_radius(self, rng: np.random.Generator) -> float:
        a, b = self.radius_interval
        return a if b <= a else a + rng.random() * (b - a)


@dataclass
class SamplerState:
    """Mutable chain state: current configuration plus acceptance counters."""

    centers: np.ndarray
    radii: np.ndarray
    step_count: int = 0
    counters: dict = field(default_factory=lambda: {
        "birth_proposed": 0, "birth_accepted": 0,
        "death_proposed": 0, "death_accepted": 0,
        "move_proposed": 0, "move_accepted": 0,
    })

    @property
    def n(self) -> int:
        return self.radii.shape[0]

    def configuration(self) -> Configuration:
        return Configuration(self.centers, self.radii)


def _overlaps(center, radius, centers, radii, skip: int = -1) -> bool:
    """True if the globule (center, radius) overlaps any listed globule."""
    if radii.shape[0] == 0:
        return False
    d = np.linalg.norm(centers - center, axis=-1)
    gaps = d - (radii + radius)
    if 0 <= skip < radii.shape[0]:
        gaps[skip] = np.inf
    return bool((gaps < 0.0).any())


class BirthDeathMoveChain:
    """Metropolis birth-death-move chain for a point-process density on a
    window.  energy(center, radius) -> float is the per-globule potential
    (None means zero); hard_external adds the hard-core exclusion against
    the external configuration; fixed_n freezes the globule count and uses
    move proposals only."""

    def __init__(
        self,
        window: WindowSpec,
        params: ModelParams,
        rng: np.random.Generator,
        energy=None,
        hard_external: bool = True,
        fixed_n: Optional[int] = None,
        initial: Optional[Configuration] = None,
        move_center_scale: Optional[float] = None,
        move_radius_scale: Optional[float] = None,
    ):
        self.window = window
        self.params = params
        self.rng = rng
        self.energy = energy
        self.hard_external = hard_external
        self.fixed_n = fixed_n
        self.move_center_scale = (
            move_center_scale if move_center_scale is not None else 0.5 * params.r_minus
        )
        w = window.mark_width
        self.move_radius_scale = (
            move_radius_scale if move_radius_scale is not None else 0.25 * w
        )
        if initial is None:
            initial = Configuration.empty()
        self.state = SamplerState(initial.centers.copy(), initial.radii.copy())
        if fixed_n is not None and self.state.n != fixed_n:
            raise ValueError("fixed_n chain needs an initial configuration of that size")

    # -- helpers ----------------------------------------------------------

    def _energy_of(self, center, radius) -> float:
        return 0.0 if self.energy is None else float(self.energy(center, radius))

    def _feasible(self, center, radius, skip: int = -1) -> bool:
        st = self.state
        if _overlaps(center, radius, st.centers, st.radii, skip=skip):
            return False
        if self.hard_external and len(self.params.external) > 0:
            ext = self.params.external
            if _overlaps(center, radius, ext.centers, ext.radii):
                return False
        return True

    # -- proposals --------------------------------------------------------

    def _birth(self) -> None:
        st = self.state
        st.counters["birth_proposed"] += 1
        c = self.window.sample_center(self.rng)
        r = self.window.sample_radius(self.rng)
        if not self._feasible(c, r):
            return
        log_acc = -self._energy_of(c, r) + math.log(self.window.volume4 / (st.n + 1))
        if math.log(self.rng.random()) < log_acc:
            st.centers = np.vstack([st.centers, c[None, :]]) if st.n else c[None, :].copy()
            st.radii = np.append(st.radii, r)
            st.counters["birth_accepted"] += 1

    def _death(self) -> None:
        st = self.state
        st.counters["death_proposed"] += 1
        if st.n == 0:
            return
        idx = int(self.rng.integers(st.n))
        log_acc = self._energy_of(st.centers[idx], st.radii[idx]) + math.log(
            st.n / self.window.volume4
        )
        if math.log(self.rng.random()) < log_acc:
            st.centers = np.delete(st.centers, idx, axis=0)
            st.radii = np.delete(st.radii, idx)
            st.counters["death_accepted"] += 1

    def _move(self) -> None:
        st = self.state
        st.counters["move_proposed"] += 1
        if st.n == 0:
            return
        idx = int(self.rng.integers(st.n))
        c = st.centers[idx] + self.move_center_scale * self.rng.standard_normal(3)
        r = st.radii[idx] + (
            self.move_radius_scale * self.rng.standard_normal()
            if self.move_radius_scale > 0.0
            else 0.0
        )
        a, b = self.window.radius_interval
        if not (a <= r <= b or (b <= a and r == a)):
            return
        if not self.window.contains_centers(c[None, :])[0]:
            return
        if not self._feasible(c, r, skip=idx):
            return
        de = self._energy_of(c, r) - self._energy_of(st.centers[idx], st.radii[idx])
        if math.log(self.rng.random()) < -de:
            st.centers = st.centers.copy()
            st.centers[idx] = c
            st.radii = st.radii.copy()
            st.radii[idx] = r
            st.counters["move_accepted"] += 1

    def sweep(self) -> None:
        """One Metropolis proposal (birth 0.35, death 0.35, move 0.30)."""
        st = self.state
        if self.fixed_n is not None:
            self._move()
        else:
            u = self.rng.random()
            if u < P_BIRTH:
                self._birth()
            elif u < P_BIRTH + P_DEATH:
                self._death()
            else:
                self._move()
        st.step_count += 1

    def run(self, sweeps: int) -> None:
        for _ in range(sweeps):
            self.sweep()


def _chain_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, (int(stream) + 1) & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key))


def sample_hard_poisson(
    window: WindowSpec,
    external: Configuration,
    params: ModelParams,
    sweeps: int,
    rng_seed: int,
    stream: int = 0,
    return_chain: bool = False,
):
    """Draw one configuration approximately distributed as the hard-globule
    Poisson process in the window, conditioned on the external
    configuration.  The chain's detailed-balance target is exactly the
    density 1{allowed} against the unit-rate Poisson process on
    window x radius_interval."""
    params = ModelParams(params.sigma, params.r_minus, params.r_plus, params.ell, external)
    chain = BirthDeathMoveChain(window, params, _chain_rng(rng_seed, stream), hard_external=True)
    chain.run(sweeps)
    if return_chain:
        return chain.state.configuration(), chain
    return chain.state.configuration()


def center_truncation_radius(params: ModelParams, mass: float = TRUNCATION_MASS) -> float:
    """Smallest ball radius R such that the expected penalized-measure mass
    of globules beyond R is below `mass`.

    Beyond the transition band the radial profile is exactly 2s, so the
    expected number of globules outside B(0, R) is bounded by
    4 pi (r_plus - r_minus) exp(-2R)(R^2/2 + R/2 + 1/4), a closed form that
    can be inverted by bisection.
    """
    width = params.r_plus - params.r_minus

    def tail(R: float) -> float:
        return 4.0 * math.pi * width * math.exp(-2.0 * R) * (R * R / 2.0 + R / 2.0 + 0.25)

    lo = params.ell + math.exp(-params.ell)
    hi = lo + 5.0
    while tail(hi) > mass:
        hi += 5.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if tail(mid) > mass:
            lo = mid
        else:
            hi = mid
    return hi


def penalized_window(params: ModelParams) -> WindowSpec:
    """Truncated sampling window for the penalized measure.  The radius
    section is exactly [r_minus, r_plus]: the hard-core indicator already
    vanishes outside, so truncating there loses no mass."""
    R = center_truncation_radius(params)
    return WindowSpec.ball(R, (params.r_minus, params.r_plus))


def _psi_energy(spec: PenalizationSpec, params: ModelParams):
    def energy(center, radius):
        return psi_many(spec, center[None, :], np.array([radius]), params)[0]

    return energy


def random_allowed_configuration(
    n: int, region_radius: float, params: ModelParams, rng: np.random.Generator,
    max_tries: int = 100_000,
) -> Configuration:
    """Rejection-place n non-overlapping globules in B(0, region_radius)."""
    centers = np.zeros((0, 3))
    radii = np.zeros(0)
    mid = 0.5 * (params.r_minus + params.r_plus)
    for _ in range(max_tries):
        p = (rng.random(3) * 2.0 - 1.0) * region_radius
        if p @ p > region_radius**2:
            continue
        if _overlaps(p, mid, centers, radii):
            continue
        centers = np.vstack([centers, p[None, :]])
        radii = np.append(radii, mid)
        if radii.shape[0] == n:
            return Configuration(centers, radii)
    raise RuntimeError(f"could not place {n} globules in B(0, {region_radius})")


def sample_penalized(
    params: ModelParams,
    spec: PenalizationSpec,
    rng_seed: int,
    sweeps: int = DEFAULT_BURN_IN,
    stream: int = 0,
    fixed_n: Optional[int] = None,
    return_chain: bool = False,
):
    """Draw one configuration approximately distributed as the penalized
    measure: density exp(-sum psi) 1{internally allowed} against the
    unit-rate Poisson process on the truncated window.  With fixed_n the
    globule count is frozen (conditional measure at that count) and the
    chain uses move proposals only."""
    window = penalized_window(params)
    rng = _chain_rng(rng_seed, stream)
    initial = None
    if fixed_n is not None:
        initial = random_allowed_configuration(fixed_n, max(params.ell - params.r_plus, params.r_plus), params, rng)
    chain = BirthDeathMoveChain(
        window,
        params,
        rng,
        energy=_psi_energy(spec, params),
        hard_external=False,
        fixed_n=fixed_n,
        initial=initial,
    )
    chain.run(sweeps)
    if return_chain:
        return chain.state.configuration(), chain
    return chain.state.configuration()


def sample_penalized_ensemble(
    params: ModelParams,
    spec: PenalizationSpec,
    rng_seed: int,
    n_samples: int,
    burn_in: int = DEFAULT_BURN_IN,
    thin: int = DEFAULT_THIN,
    stream: int = 0,
    fixed_n: Optional[int] = None,
) -> list:
    """Thinned draws from one penalized chain (burn_in sweeps, then one
    configuration every `thin` sweeps)."""
    window = penalized_window(params)
    rng = _chain_rng(rng_seed, stream)
    initial = None
    if fixed_n is not None:
        initial = random_allowed_configuration(fixed_n, max(params.ell - params.r_plus, params.r_plus), params, rng)
    chain = BirthDeathMoveChain(
        window, params, rng,
        energy=_psi_energy(spec, params), hard_external=False,
        fixed_n=fixed_n, initial=initial,
    )
    chain.run(burn_in)
    out = []
    for _ in range(n_samples):
        chain.run(thin)
        out.append(chain.state.configuration())
    return out


# ---------------------------------------------------------------------------
# brute-force partition function for tiny windows


def _center_grid(window: WindowSpec, k: int):
    """Midpoint grid of the window region: (m,3) cell centers inside the
    region and the 3-volume weight per cell."""
    if window.kind == "ball":
        R = window.radius
        xs = (np.arange(k) + 0.5) / k * (2 * R) - R
        g = np.stack(np.meshgrid(xs, xs, xs, indexing="ij"), axis=-1).reshape(-1, 3)
        w = (2 * R / k) ** 3
        g = g[np.linalg.norm(g, axis=-1) <= R]
        return g, w
    lo, hi = np.array(window.lo), np.array(window.hi)
    axes = [(np.arange(k) + 0.5) / k * (hi[d] - lo[d]) + lo[d] for d in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    w = float(np.prod((hi - lo) / k))
    return g, w


def _max_feasible_radius(g: np.ndarray, window: WindowSpec, external: Configuration) -> np.ndarray:
    """Per center point, the largest mark not overlapping the external
    configuration (capped at the top of the radius interval)."""
    hi = np.full(g.shape[0], window.radius_interval[1])
    if len(external) > 0:
        d = np.linalg.norm(g[:, None, :] - external.centers[None, :, :], axis=-1)
        hi = np.minimum(hi, (d - external.radii[None, :]).min(axis=1))
    return hi


def _z_terms_on_grid(window: WindowSpec, external: Configuration, n_max: int, k3: int, kr: int,
                     pair_gap_max: Optional[float] = None):
    """Tensor midpoint evaluation of the n=1 and n=2 partition-function
    integrals.  Radius feasibility against the external configuration is a
    threshold per center, so the mark dimensions reduce to exact counting
    over the radius grid."""
    a, b = window.radius_interval
    g, w3 = _center_grid(window, k3)
    rho = _max_feasible_radius(g, window, external)

    if b <= a:  # degenerate marks: single fixed radius, point-mass weight
        rr = np.array([a])
        wr = 1.0
    else:
        rr = a + (np.arange(kr) + 0.5) * (b - a) / kr
        wr = (b - a) / kr

    def count_le(c):
        """Number of radius grid points <= c (vectorized in c)."""
        if b <= a:
            return (c >= a).astype(float)
        return np.clip(np.floor((c - a) / ((b - a) / kr) + 0.5), 0.0, kr)

    I1 = float(w3 * wr * count_le(rho).sum())
    if n_max < 2:
        return I1, 0.0

    # ordered pair sum over center cells u, v: for each radius of u, count
    # feasible radii of v with r_u + r_v <= pair distance
    m = g.shape[0]
    I2 = 0.0
    chunk = max(1, int(2e6 // max(m, 1)))
    for s in range(0, m, chunk):
        gu = g[s : s + chunk]
        d = np.linalg.norm(gu[:, None, :] - g[None, :, :], axis=-1)
        total = np.zeros(d.shape)
        for r_u in rr:
            cap = np.minimum(rho[None, :], d - r_u)
            if pair_gap_max is not None:
                # restrict to near-contact pairs: r_u + r_v >= d - pair_gap_max
                total += np.where(
                    rho[s : s + chunk][:, None] >= r_u,
                    count_le(cap) - count_le(np.minimum(cap, d - r_u - pair_gap_max)),
                    0.0,
                )
            else:
                total += np.where(rho[s : s + chunk][:, None] >= r_u, count_le(cap), 0.0)
        I2 += float(total.sum()) * (w3 * wr) ** 2
    return I1, I2


def partition_function_oracle(
    window: WindowSpec,
    external: Configuration,
    n_max: int = 2,
    rel_tol: float = 1e-3,
    pair_gap_max: Optional[float] = None,
    return_report: bool = False,
):
    """Deterministic tensor-grid evaluation of the partition function

        Z = exp(-|window|) (1 + sum_{n<=n_max} (1/n!) Int 1{allowed} dx dr)

    for n_max <= 2, refined until the successive relative change drops
    below rel_tol.  pair_gap_max optionally restricts the n=2 integral to
    pairs with surface gap at most that value (near-contact volume)."""
    if n_max > 2:
        raise ValueError("brute-force oracle supports n_max <= 2")
    v4 = window.volume4
    no_external = len(external) == 0
    if no_external and n_max <= 1:
        # every single placement is feasible: the n=1 integral is the
        # window mass itself, no grid needed
        z = math.exp(-v4) * (1.0 + v4)
        return (z, [z]) if return_report else z

    history = []
    z_prev = None
    # the n=1 term is cheap and boundary-limited, so it refines on a finer
    # grid than the pair term
    for k3_1, k3_2, kr in ((32, 8, 8), (64, 16, 16), (128, 24, 24), (192, 32, 48)):
        if no_external:
            I1 = v4
        else:
            I1, _ = _z_terms_on_grid(window, external, 1, k3_1, kr)
        I2 = 0.0
        if n_max >= 2:
            _, I2 = _z_terms_on_grid(window, external, 2, k3_2, kr, pair_gap_max=pair_gap_max)
        z = math.exp(-v4) * (1.0 + I1 + 0.5 * I2)
        history.append(z)
        if z_prev is not None and abs(z - z_prev) <= rel_tol * abs(z):
            if return_report:
                return z, history
            return z
        z_prev = z
    raise QuadratureError(
        f"partition-function grid refinement did not converge: {history}"
    )
