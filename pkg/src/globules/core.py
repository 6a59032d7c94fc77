"""Domain types and boundary geometry for hard-core globule configurations.

A globule is a sphere in R^3 with center x and radius r confined to
[r_minus, r_plus].  Configurations are finite ordered lists of globules;
a configuration is allowed when all radii are in range and no two globules
overlap (|x_i - x_j| >= r_i + r_j), including against a fixed external
configuration.

Configuration-space vectors are flat float arrays of length 4n ordered
(x_1, y_1, z_1, r_1, x_2, ...).  External globules never carry coordinates
in these vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Literal

import numpy as np


@lru_cache(maxsize=128)
def triu_pairs(n: int):
    """Cached upper-triangle index pair (iu, ju) for n globules."""
    return np.triu_indices(n, k=1)


def pair_distances(centers: np.ndarray, iu: np.ndarray, ju: np.ndarray) -> np.ndarray:
    """Euclidean distances for the listed index pairs.  Every exactness
    predicate in the package computes distances through this one routine so
    that float rounding is identical everywhere."""
    diff = centers[iu] - centers[ju]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


class DegenerateContactError(ValueError):
    """Raised when a pair operation meets coincident centers."""


@dataclass(frozen=True)
class Globule:
    """One globule: center in R^3 and scalar radius."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class Configuration:
    """Ordered finite list of globules; the index is the particle identity.

    Stored as arrays: centers (n, 3) and radii (n,).  Instances are
    immutable values, safe to share between threads.
    """

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.array(self.centers, dtype=float, copy=True).reshape(-1, 3)
        r = np.array(self.radii, dtype=float, copy=True).reshape(-1)
        if c.shape[0] != r.shape[0]:
            raise ValueError("centers and radii must have matching length")
        c.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    @classmethod
    def from_globules(cls, globules: Iterable[Globule]) -> "Configuration":
        gs = list(globules)
        if not gs:
            return cls.empty()
        return cls(np.array([g.center for g in gs]), np.array([g.radius for g in gs]))

    @classmethod
    def empty(cls) -> "Configuration":
        return cls(np.zeros((0, 3)), np.zeros(0))

    def __len__(self) -> int:
        return self.radii.shape[0]

    def globule(self, i: int) -> Globule:
        return Globule(self.centers[i], self.radii[i])

    def globules(self) -> list[Globule]:
        return [self.globule(i) for i in range(len(self))]

    def replace(self, centers=None, radii=None) -> "Configuration":
        return Configuration(
            self.centers if centers is None else centers,
            self.radii if radii is None else radii,
        )


@dataclass(frozen=True)
class ModelParams:
    """Model constants: radius scale sigma, radius bounds, penalization level
    ell and the fixed external configuration y (possibly empty).

    The external configuration participates in allowed() and in the overlap
    penalties but is immutable during simulation.
    """

    sigma: float
    r_minus: float
    r_plus: float
    ell: int = 1
    external: Configuration = field(default_factory=Configuration.empty)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not (0 < self.r_minus < self.r_plus):
            raise ValueError("need 0 < r_minus < r_plus")
        if int(self.ell) != self.ell or self.ell < 1:
            raise ValueError("ell must be an integer >= 1")
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "r_minus", float(self.r_minus))
        object.__setattr__(self, "r_plus", float(self.r_plus))
        object.__setattr__(self, "ell", int(self.ell))


@dataclass(frozen=True)
class BoundaryContact:
    """One constraint surface: a pair contact or a radius cap.

    normal is the unit inward normal in configuration space (length 4n);
    gap is the signed distance to the constraint surface (negative means
    violated).
    """

    kind: Literal["pair", "cap_plus", "cap_minus"]
    indices: tuple
    normal: np.ndarray
    gap: float


# ---------------------------------------------------------------------------
# flat configuration-space vectors


def to_flat(centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Pack (n,3) centers and (n,) radii into the flat 4n layout."""
    n = radii.shape[0]
    flat = np.empty(4 * n)
    flat.reshape(n, 4)[:, :3] = centers
    flat.reshape(n, 4)[:, 3] = radii
    return flat


def from_flat(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unpack a flat 4n vector into ((n,3) centers, (n,) radii)."""
    m = flat.reshape(-1, 4)
    return m[:, :3].copy(), m[:, 3].copy()


# ---------------------------------------------------------------------------
# the hard-core predicate


def pair_gaps(centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Matrix of |x_i-x_j| - (r_i+r_j) for all pairs (diagonal = +inf)."""
    n = radii.shape[0]
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    g = d - (radii[:, None] + radii[None, :])
    np.fill_diagonal(g, np.inf)
    return g


def allowed_arrays(centers: np.ndarray, radii: np.ndarray, params: ModelParams) -> bool:
    """allowed() on raw arrays; checks radii bounds, internal pairs and pairs
    against the external configuration."""
    if radii.size == 0:
        return True
    if radii.min() < params.r_minus or radii.max() > params.r_plus:
        return False
    n = radii.shape[0]
    if n > 1:
        iu, ju = triu_pairs(n)
        if (pair_distances(centers, iu, ju) < radii[iu] + radii[ju]).any():
            return False
    ext = params.external
    if len(ext) > 0:
        d = np.linalg.norm(centers[:, None, :] - ext.centers[None, :, :], axis=-1)
        if (d < radii[:, None] + ext.radii[None, :]).any():
            return False
    return True


def allowed(c: Configuration, params: ModelParams) -> bool:
    """True iff every radius lies in [r_minus, r_plus] and every pair,
    internal or against the external configuration, satisfies
    |x_i - x_j| >= r_i + r_j.  Total function, exact inequalities."""
    return allowed_arrays(c.centers, c.radii, params)


# ---------------------------------------------------------------------------
# the radius stretch


def sigma_stretch(c: Configuration, sigma: float) -> Configuration:
    """Divide every radius by sigma; centers unchanged."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return Configuration(c.centers, c.radii / sigma)


def sigma_unstretch(c: Configuration, sigma: float) -> Configuration:
    """Inverse of sigma_stretch (multiply radii by sigma)."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return Configuration(c.centers, c.radii * sigma)


# ---------------------------------------------------------------------------
# boundary geometry in stretched coordinates
#
# The stretched domain is the intersection of
#   D_ij   = { |x_i-x_j| >= sigma (r_i + r_j) }
#   D_i+   = { r_i <= r_plus / sigma }
#   D_i-   = { r_i >= r_minus / sigma }
# All normals below are unit inward normals of these smooth pieces.


def pair_gap_stretched(c: Configuration, i: int, j: int, sigma: float) -> float:
    d = float(np.linalg.norm(c.centers[i] - c.centers[j]))
    return d - sigma * (c.radii[i] + c.radii[j])


def pair_normal(c: Configuration, i: int, j: int, sigma: float) -> BoundaryContact:
    """Unit inward normal of D_ij at a stretched configuration.

    Center block i carries (x_i-x_j)/|x_i-x_j|, block j the opposite, both
    radius slots carry -sigma, everything scaled by 1/sqrt(2+2 sigma^2).
    On the contact surface |x_i-x_j| = sigma (r_i+r_j) this is exactly
    w / sqrt(2+2 sigma^2) with w_i = (x_i-x_j) / (sigma (r_i+r_j)).
    """
    if i == j:
        raise ValueError("pair_normal needs i != j")
    diff = c.centers[i] - c.centers[j]
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        raise DegenerateContactError(f"globules {i} and {j} have coincident centers")
    u = diff / d
    n = len(c)
    w = np.zeros(4 * n)
    w[4 * i : 4 * i + 3] = u
    w[4 * i + 3] = -sigma
    w[4 * j : 4 * j + 3] = -u
    w[4 * j + 3] = -sigma
    w /= np.sqrt(2.0 + 2.0 * sigma * sigma)
    gap = d - sigma * (c.radii[i] + c.radii[j])
    return BoundaryContact("pair", (i, j), w, gap)


def cap_contact(c: Configuration, i: int, params: ModelParams, kind: str) -> BoundaryContact:
    """Constant unit inward normal of a radius cap, in stretched coordinates."""
    n = len(c)
    w = np.zeros(4 * n)
    if kind == "cap_plus":
        w[4 * i + 3] = -1.0
        gap = params.r_plus / params.sigma - c.radii[i]
    elif kind == "cap_minus":
        w[4 * i + 3] = 1.0
        gap = c.radii[i] - params.r_minus / params.sigma
    else:
        raise ValueError(f"unknown cap kind {kind!r}")
    return BoundaryContact(kind, (i,), w, float(gap))


def cluster(c: Configuration, i: int, sigma: float, contact_tol: float) -> frozenset:
    """Transitive closure of the contact relation
    |x_k-x_l| <= sigma (r_k+r_l) + contact_tol starting at i (stretched
    coordinates).  Always contains i."""
    if contact_tol < 0:
        raise ValueError("contact_tol must be >= 0")
    n = len(c)
    d = np.linalg.norm(c.centers[:, None, :] - c.centers[None, :, :], axis=-1)
    touch = d <= sigma * (c.radii[:, None] + c.radii[None, :]) + contact_tol
    np.fill_diagonal(touch, False)
    seen = {i}
    stack = [i]
    while stack:
        k = stack.pop()
        for l in np.nonzero(touch[k])[0]:
            if l not in seen:
                seen.add(int(l))
                stack.append(int(l))
    return frozenset(seen)


def pushback_vector(c: Configuration, params: ModelParams, contact_tol: float) -> np.ndarray:
    """Compatibility vector v(x) at a stretched boundary configuration.

    v_i = x_i - mean of the centers of the cluster of i, and the radius slot
    is r_minus ((r_plus+r_minus)/2 - sigma r_i) / ((r_plus-r_minus)(sigma v 1)).
    For every active constraint, v . n >= beta0 |v| with beta0 given by
    compatibility_constant (checked in tests, not enforced here).
    """
    sigma = params.sigma
    n = len(c)
    v = np.zeros(4 * n)
    for i in range(n):
        ci = cluster(c, i, sigma, contact_tol)
        mean = c.centers[list(ci)].mean(axis=0)
        v[4 * i : 4 * i + 3] = c.centers[i] - mean
        v[4 * i + 3] = (
            params.r_minus
            * ((params.r_plus + params.r_minus) / 2.0 - sigma * c.radii[i])
            / ((params.r_plus - params.r_minus) * max(sigma, 1.0))
        )
    return v


def exterior_sphere_constant(params: ModelParams) -> float:
    """Uniform exterior-sphere radius of the pair constraints:
    r_minus sqrt(2 + 2 sigma^2).  Bounds the admissible step displacement
    of the projected integrator."""
    return params.r_minus * np.sqrt(2.0 + 2.0 * params.sigma**2)


def compatibility_constant(params: ModelParams, n: int) -> float:
    """Lower bound beta0 = r_minus / (4 r_plus (sigma v 1) n^(3/2)) for the
    pushback vector's alignment with every active normal."""
    return params.r_minus / (4.0 * params.r_plus * max(params.sigma, 1.0) * n**1.5)
