"""Confinement potential for the penalized globule dynamics.

The potential of one globule (x, r) against an external configuration y is

    psi(x, r) = psi1(|x|) + psi2(r) + sum_{j : |y_j| > ell} psi3(|x-y_j| / (r + ry_j))

with nonnegative C^2 profiles vanishing on (-inf, ell], [r_minus, r_plus]
and [1, +inf) respectively, and pinned outside transition bands of width
h = exp(-ell):

    psi1(s) = 2 s            for s >= ell + h
    psi2(s) = ell s          for s >= r_plus + h
    psi2(s) = ell (r_plus + r_minus - s)   for s <= r_minus - h
    psi3(s) = ell            for s <= 1 - h

Inside each band the profile is the unique quintic polynomial matching the
value and first two derivatives at both band endpoints, which keeps the
whole profile C^2 with closed-form derivatives.  The overlap ratio in psi3
uses original (unstretched) radii.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .core import Configuration, Globule, ModelParams


class QuadratureError(RuntimeError):
    """Raised when a quadrature fails to converge to the requested accuracy."""


# ---------------------------------------------------------------------------
# quintic bridges


@dataclass(frozen=True)
class QuinticBridge:
    """Quintic on [a, b] matching value and first two derivatives at both
    endpoints; evaluated in the normalized variable u = (s - a) / (b - a)."""

    a: float
    b: float
    coeffs: np.ndarray  # ascending powers of u

    @classmethod
    def fit(cls, a, b, p0, m0, s0, p1, m1, s1) -> "QuinticBridge":
        h = b - a
        basis = np.array(
            [
                [1, 0, 0, -10, 15, -6],     # value at a
                [0, 1, 0, -6, 8, -3],       # h * derivative at a
                [0, 0, 0.5, -1.5, 1.5, -0.5],  # h^2 * second derivative at a
                [0, 0, 0, 10, -15, 6],      # value at b
                [0, 0, 0, -4, 7, -3],       # h * derivative at b
                [0, 0, 0, 0.5, -1, 0.5],    # h^2 * second derivative at b
            ]
        )
        w = np.array([p0, m0 * h, s0 * h * h, p1, m1 * h, s1 * h * h])
        return cls(float(a), float(b), w @ basis)

    def value(self, s):
        u = (np.asarray(s) - self.a) / (self.b - self.a)
        out = np.zeros_like(u)
        for c in self.coeffs[::-1]:
            out = out * u + c
        return out

    def deriv(self, s):
        u = (np.asarray(s) - self.a) / (self.b - self.a)
        out = np.zeros_like(u)
        k = np.arange(1, 6)
        dc = self.coeffs[1:] * k
        for c in dc[::-1]:
            out = out * u + c
        return out / (self.b - self.a)


@dataclass(frozen=True)
class _Profile:
    """Piecewise scalar profile: sorted breakpoints with (value, deriv)
    callables per piece."""

    breaks: tuple
    pieces: tuple  # tuple of (value_fn, deriv_fn), len(breaks) + 1

    def _eval(self, s, which: int):
        scalar = np.ndim(s) == 0
        s = np.atleast_1d(np.asarray(s, dtype=float))
        idx = np.searchsorted(self.breaks, s, side="right")
        out = np.empty_like(s)
        for k, fns in enumerate(self.pieces):
            m = idx == k
            if m.any():
                out[m] = fns[which](s[m])
        return out[0].item() if scalar else out

    def value(self, s):
        return self._eval(s, 0)

    def deriv(self, s):
        return self._eval(s, 1)


def _zero(s):
    return np.zeros_like(s)


@lru_cache(maxsize=32)
def _profiles(ell: int, r_minus: float, r_plus: float):
    """The three scalar profiles for a given (ell, r_minus, r_plus)."""
    h = math.exp(-ell)
    if not h < min(1.0, (r_plus - r_minus) / 4.0):
        raise ValueError(
            f"transition width exp(-ell)={h:g} must be below "
            f"min(1, (r_plus-r_minus)/4)={min(1.0, (r_plus - r_minus) / 4.0):g}"
        )

    b1 = QuinticBridge.fit(ell, ell + h, 0, 0, 0, 2 * (ell + h), 2, 0)
    psi1 = _Profile(
        (ell, ell + h),
        (
            (_zero, _zero),
            (b1.value, b1.deriv),
            (lambda s: 2.0 * s, lambda s: np.full_like(s, 2.0)),
        ),
    )

    b2lo = QuinticBridge.fit(r_minus - h, r_minus, ell * (r_plus + h), -ell, 0, 0, 0, 0)
    b2hi = QuinticBridge.fit(r_plus, r_plus + h, 0, 0, 0, ell * (r_plus + h), ell, 0)
    psi2 = _Profile(
        (r_minus - h, r_minus, r_plus, r_plus + h),
        (
            (
                lambda s: ell * (r_plus + r_minus - s),
                lambda s: np.full_like(s, -float(ell)),
            ),
            (b2lo.value, b2lo.deriv),
            (_zero, _zero),
            (b2hi.value, b2hi.deriv),
            (lambda s: ell * s, lambda s: np.full_like(s, float(ell))),
        ),
    )

    b3 = QuinticBridge.fit(1.0 - h, 1.0, ell, 0, 0, 0, 0, 0)
    psi3 = _Profile(
        (1.0 - h, 1.0),
        (
            (lambda s: np.full_like(s, float(ell)), _zero),
            (b3.value, b3.deriv),
            (_zero, _zero),
        ),
    )
    return psi1, psi2, psi3


# ---------------------------------------------------------------------------
# the potential


@dataclass(frozen=True)
class PenalizationSpec:
    """Confinement level ell plus the external configuration; only the
    external globules beyond |y_j| > ell enter the overlap penalty."""

    ell: int
    external: Configuration = field(default_factory=Configuration.empty)

    def __post_init__(self):
        if int(self.ell) != self.ell or self.ell < 1:
            raise ValueError("ell must be an integer >= 1")
        object.__setattr__(self, "ell", int(self.ell))
        far = np.linalg.norm(self.external.centers, axis=-1) > self.ell
        fc = self.external.centers[far].copy()
        fr = self.external.radii[far].copy()
        fc.setflags(write=False)
        fr.setflags(write=False)
        object.__setattr__(self, "_far_centers", fc)
        object.__setattr__(self, "_far_radii", fr)

    @property
    def transition_width(self) -> float:
        return math.exp(-self.ell)


def psi_many(spec: PenalizationSpec, centers: np.ndarray, radii: np.ndarray,
             params: ModelParams) -> np.ndarray:
    """Vectorized potential of each globule in (centers, radii)."""
    p1, p2, p3 = _profiles(spec.ell, params.r_minus, params.r_plus)
    out = p1.value(np.linalg.norm(centers, axis=-1)) + p2.value(radii)
    yc, yr = spec._far_centers, spec._far_radii
    if yr.size:
        d = np.linalg.norm(centers[:, None, :] - yc[None, :, :], axis=-1)
        ratio = d / (radii[:, None] + yr[None, :])
        out = out + p3.value(ratio).sum(axis=1)
    return out


def psi(spec: PenalizationSpec, g: Globule, params: ModelParams) -> float:
    """Potential of a single globule; zero iff |x| <= ell, r in
    [r_minus, r_plus] and (x, r) does not overlap any external globule
    beyond radius ell."""
    return float(psi_many(spec, g.center[None, :], np.array([g.radius]), params)[0])


def psi_gradient_many(spec: PenalizationSpec, centers: np.ndarray, radii: np.ndarray,
                      params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exact gradient: ((n,3) center part, (n,) radius part)."""
    p1, p2, p3 = _profiles(spec.ell, params.r_minus, params.r_plus)
    norms = np.linalg.norm(centers, axis=-1)
    safe = np.where(norms > 0.0, norms, 1.0)
    gc = (p1.deriv(norms) / safe)[:, None] * centers
    gr = p2.deriv(radii)
    yc, yr = spec._far_centers, spec._far_radii
    if yr.size:
        diff = centers[:, None, :] - yc[None, :, :]
        d = np.linalg.norm(diff, axis=-1)
        rsum = radii[:, None] + yr[None, :]
        ratio = d / rsum
        dp3 = p3.deriv(ratio)
        dsafe = np.where(d > 0.0, d, 1.0)
        gc = gc + ((dp3 / (dsafe * rsum))[:, :, None] * diff).sum(axis=1)
        gr = gr - (dp3 * ratio / rsum).sum(axis=1)
    return gc, gr


def psi_gradient(spec: PenalizationSpec, g: Globule, params: ModelParams) -> tuple[np.ndarray, float]:
    """Exact gradient of psi with respect to (x, r) for one globule."""
    gc, gr = psi_gradient_many(spec, g.center[None, :], np.array([g.radius]), params)
    return gc[0], float(gr[0])


def psi_gradient_nonzero(spec: PenalizationSpec, centers: np.ndarray, radii: np.ndarray,
                         params: ModelParams):
    """psi_gradient_many with a cheap bulk gate: returns None when every
    globule sits inside the vanishing region of psi (the common case during
    a simulation step)."""
    if radii.min() >= params.r_minus and radii.max() <= params.r_plus:
        n2 = np.einsum("ij,ij->i", centers, centers)
        if n2.max() <= spec.ell * spec.ell:
            yr = spec._far_radii
            if yr.size == 0:
                return None
            yc = spec._far_centers
            diff = centers[:, None, :] - yc[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            rs = radii[:, None] + yr[None, :]
            if (d2 >= rs * rs).all():
                return None
    return psi_gradient_many(spec, centers, radii, params)


# ---------------------------------------------------------------------------
# plausibility of the integrability condition


def _quad(f, a, b, **kw) -> float:
    val, err = integrate.quad(f, a, b, limit=200, **kw)
    if err > 1e-8 * max(1.0, abs(val)):
        raise QuadratureError(f"quadrature on [{a}, {b}] did not converge (err={err:g})")
    return val


def integrability_increment(ell: int, params: ModelParams) -> float:
    """One term of the integrability diagnostic for an empty external
    configuration: integral of 1_{psi>0} exp(-psi) over R^3 x R.

    Separability of psi1(|x|) + psi2(r) reduces it to
    A * B - vol(B(0,ell)) * (r_plus - r_minus) with 1-D radial integrals.
    """
    p1, p2, _ = _profiles(ell, params.r_minus, params.r_plus)
    h = math.exp(-ell)
    rm, rp = params.r_minus, params.r_plus

    band1 = _quad(lambda s: s * s * np.exp(-p1.value(s)), ell, ell + h)
    c = ell + h
    tail1 = math.exp(-2 * c) * (c * c / 2 + c / 2 + 0.25)
    A = 4.0 * math.pi * (ell**3 / 3.0 + band1 + tail1)

    band_lo = _quad(lambda s: np.exp(-p2.value(s)), rm - h, rm)
    band_hi = _quad(lambda s: np.exp(-p2.value(s)), rp, rp + h)
    tail2 = math.exp(-ell * (rp + h)) / ell  # same mass on both linear tails
    B = (rp - rm) + band_lo + band_hi + 2.0 * tail2

    return A * B - (4.0 / 3.0) * math.pi * ell**3 * (rp - rm)


def integrability_check(spec: PenalizationSpec, params: ModelParams, ell_max: int) -> float:
    """Partial sum over ell <= ell_max of the integrability increments.

    Sanity diagnostic only: the increments should decrease, making the full
    series plausibly finite.  Supported for empty external configurations,
    where the integral factorizes into 1-D pieces.
    """
    if ell_max < 1:
        raise ValueError("ell_max must be >= 1")
    if len(spec.external) > 0:
        raise ValueError("integrability_check supports empty external configurations only")
    return sum(integrability_increment(l, params) for l in range(1, ell_max + 1))
