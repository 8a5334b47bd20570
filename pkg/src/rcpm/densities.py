"""Base and target densities on spheres and tori.

Every ``log_density`` is written against an array namespace so that the
same code is evaluated eagerly (numpy) and inside jitted losses (jax).
Densities are with respect to the Riemannian volume measure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy import integrate, special, stats

from rcpm._backend import acos, cost_ratio, logsumexp, namespace
from rcpm.manifold import Manifold, Sphere, manifold_from_json, torus


def _sphere_area(n: int) -> float:
    """Volume of the unit ``S^n``."""
    return 2 * math.pi ** ((n + 1) / 2) / math.gamma((n + 1) / 2)


class Density:
    """Interface: ``log_density(x)`` for batches ``(N, D)`` and ``sample(rng, n)``."""

    manifold: Manifold
    can_sample = True
    has_density = True

    def log_density(self, x):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Uniform(Density):
    manifold: Manifold

    def log_density(self, x):
        xp = namespace(x)
        return xp.full(x.shape[:-1], -math.log(self.manifold.volume))

    def sample(self, rng, n):
        return self.manifold.sample_uniform(rng, n)

    def to_json(self):
        return {"kind": "uniform"}


# ---------------------------------------------------------------------------
# wrapped Gaussians


def _truncated_tangent_normal(rng, f: Sphere, center, scale, n):
    """Tangent vectors ``v ~ N(0, scale^2 I)`` at ``center`` conditioned on ``|v| < pi``."""
    basis = np.asarray(f.tangent_basis(center))
    out = np.zeros((n, f.n + 1))
    todo = np.arange(n)
    while todo.size:
        z = rng.standard_normal((todo.size, f.n)) * scale
        ok = np.sum(z * z, axis=-1) < math.pi**2
        out[todo[ok]] = z[ok] @ basis.T
        todo = todo[~ok]
    return out


def sample_wrapped_gaussian(rng: np.random.Generator, manifold: Manifold, center, scale: float, n: int) -> np.ndarray:
    """``exp_center(v)`` with ``v`` an isotropic tangent Gaussian, per sphere factor.

    Each factor's tangent vector is conditioned on ``|v| < pi`` so that the
    exponential map is injective on the support and the density is smooth
    away from the antipode.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    center = np.asarray(center, dtype=float)
    if n == 0:
        return np.zeros((0, manifold.ambient_dim))
    parts = []
    for f, s in zip(manifold.factors, manifold.slices):
        v = _truncated_tangent_normal(rng, f, center[s], scale, n)
        parts.append(f.exp_map(np.broadcast_to(center[s], v.shape), v))
    return np.concatenate(parts, axis=-1)


def _log_mass_inside(n: int, scale: float) -> float:
    """``log P(|v| < pi)`` for ``v ~ N(0, scale^2 I_n)``."""
    return float(stats.chi2.logcdf((math.pi / scale) ** 2, n))


def wrapped_gaussian_log_density(manifold: Manifold, centers, scales, x):
    """Log-density of :func:`sample_wrapped_gaussian` at ``x``.

    ``centers`` has shape ``(k, D)`` and ``scales`` ``(k,)``; the result has
    one column per center.  On an ``S^n`` factor at geodesic radius ``r``
    from the center the exp-map volume change contributes ``(r / sin r)^(n - 1)``.
    """
    xp = namespace(x)
    centers = np.atleast_2d(centers)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (centers.shape[0],))
    total = 0.0
    for f, s in zip(manifold.factors, manifold.slices):
        c = xp.clip(x[..., s] @ centers[:, s].T, -1.0, 1.0)
        half_sq, ratio = cost_ratio(c)
        const = np.array([-0.5 * f.n * math.log(2 * math.pi * sc**2) - _log_mass_inside(f.n, sc) for sc in scales])
        logp = -half_sq / scales**2 + const
        if f.n > 1:
            logp = logp + (f.n - 1) * xp.log(xp.minimum(ratio, 1e300))
        total = total + logp
    return total


@dataclass(frozen=True, eq=False)
class WrappedGaussianMixture(Density):
    """Finite mixture of wrapped Gaussians with per-component scales."""

    manifold: Manifold
    centers: np.ndarray
    scales: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        k = centers.shape[0]
        scales = np.broadcast_to(np.asarray(self.scales, dtype=float), (k,)).copy()
        weights = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=float)
        if centers.shape[1] != self.manifold.ambient_dim:
            raise ValueError("centers do not match the manifold")
        if weights.shape != (k,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be a probability vector")
        if np.any(scales <= 0):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "centers", self.manifold.project(centers))
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "weights", weights)

    def log_density(self, x):
        keep = self.weights > 0
        logp = wrapped_gaussian_log_density(self.manifold, self.centers[keep], self.scales[keep], x)
        return logsumexp(logp + np.log(self.weights[keep]), axis=-1)

    def sample(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.zeros((n, self.manifold.ambient_dim))
        for k in range(len(self.weights)):
            idx = np.flatnonzero(comp == k)
            out[idx] = sample_wrapped_gaussian(rng, self.manifold, self.centers[k], self.scales[k], idx.size)
        return out

    def to_json(self):
        return {
            "kind": "wrapped_gaussian_mixture",
            "centers": self.centers.tolist(),
            "scales": self.scales.tolist(),
            "weights": self.weights.tolist(),
        }


TETRAHEDRON = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) / math.sqrt(3.0)


def four_mode_sphere(scale: float = 0.3) -> WrappedGaussianMixture:
    """Equal mixture of four wrapped Gaussians centred on a regular tetrahedron in ``S^2``."""
    return WrappedGaussianMixture(Sphere(2), TETRAHEDRON, scale)


# ---------------------------------------------------------------------------
# synthetic targets


@dataclass(frozen=True, eq=False)
class SphereCheckerboard(Density):
    """Uniform density on alternating cells of a 4 x 8 (colatitude x longitude) chart grid of ``S^2``.

    Active cells cover exactly half the sphere, so the density there is ``1 / (2 pi)``.
    """

    manifold: Manifold = field(default_factory=lambda: Sphere(2))
    rows: int = 4
    cols: int = 8

    def __post_init__(self):
        if self.manifold != Sphere(2):
            raise ValueError("the checkerboard is defined on S^2")

    @property
    def log_norm(self) -> float:
        edges = np.linspace(0.0, math.pi, self.rows + 1)
        band = 2 * math.pi * (np.cos(edges[:-1]) - np.cos(edges[1:]))
        n_active = [len([j for j in range(self.cols) if (i + j) % 2 == 0]) for i in range(self.rows)]
        return float(np.log(np.sum(band * np.array(n_active) / self.cols)))

    def active(self, x):
        xp = namespace(x)
        z = xp.clip(x[..., 2], -1.0, 1.0)
        theta = acos(z) if xp is not np else np.arccos(z)
        phi = xp.mod(xp.arctan2(x[..., 1], x[..., 0]), 2 * math.pi)
        i = xp.clip(xp.floor(theta / (math.pi / self.rows)), 0, self.rows - 1)
        j = xp.clip(xp.floor(phi / (2 * math.pi / self.cols)), 0, self.cols - 1)
        return xp.mod(i + j, 2) == 0

    def log_density(self, x):
        xp = namespace(x)
        return xp.where(self.active(x), -self.log_norm, -xp.inf)

    def sample(self, rng, n):
        out = np.zeros((0, 3))
        while out.shape[0] < n:
            cand = self.manifold.sample_uniform(rng, 2 * (n - out.shape[0]) + 16)
            out = np.concatenate([out, cand[self.active(cand)]])
        return out[:n]

    def to_json(self):
        return {"kind": "checkerboard", "rows": self.rows, "cols": self.cols}


TORUS_MODES = np.array([[4.18, 6.7], [4.18, 4.7], [4.18, 2.7]])


@dataclass(frozen=True, eq=False)
class Torus3Modal(Density):
    """``p(t1, t2) = (1/3) sum_i exp[cos(t1 - a_i1) + cos(t2 - a_i2)] / Z`` on ``T^2``.

    Each term integrates to ``(2 pi I_0(1))^2``, which is therefore also ``Z``.
    """

    manifold: Manifold = field(default_factory=lambda: torus(2))
    modes: np.ndarray = field(default_factory=lambda: TORUS_MODES.copy())
    concentration: float = 1.0

    def __post_init__(self):
        if self.manifold != torus(2):
            raise ValueError("the three-modal target is defined on T^2")

    @property
    def log_norm(self) -> float:
        return 2 * math.log(2 * math.pi * special.i0(self.concentration))

    def log_density(self, x):
        xp = namespace(x)
        k = self.concentration
        terms = [
            k * (x[..., 0] * math.cos(a1) + x[..., 1] * math.sin(a1) + x[..., 2] * math.cos(a2) + x[..., 3] * math.sin(a2))
            for a1, a2 in self.modes
        ]
        return logsumexp(xp.stack(terms, axis=-1), axis=-1) - math.log(len(terms)) - self.log_norm

    def sample(self, rng, n):
        comp = rng.integers(len(self.modes), size=n)
        t = rng.vonmises(self.modes[comp], self.concentration)
        return self.manifold.from_chart(np.mod(t, 2 * math.pi))

    def to_json(self):
        return {"kind": "torus_three_modal"}


# ---------------------------------------------------------------------------
# kernel density estimates


def _factor_kernel_mass(n: int, h: float) -> float:
    """``int_{S^n} exp(-d(x, p)^2 / (2 h^2)) dx`` (independent of ``p``)."""
    shell = _sphere_area(n - 1) if n > 1 else 2.0
    val, _ = integrate.quad(lambda r: math.exp(-0.5 * (r / h) ** 2) * math.sin(r) ** (n - 1), 0.0, math.pi, epsabs=0, epsrel=1e-13, limit=200)
    return shell * val


@dataclass(frozen=True, eq=False)
class KdeFromPoints(Density):
    """Gaussian kernel on the intrinsic distance, ``exp(-d^2 / 2h^2)``, averaged over data points.

    The kernel normaliser is a product of one-dimensional radial quadratures,
    one per sphere factor.
    """

    manifold: Manifold
    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("a KDE needs at least one point")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "points", self.manifold.project(pts))

    @cached_property
    def log_kernel_mass(self) -> float:
        return float(sum(math.log(_factor_kernel_mass(f.n, self.bandwidth)) for f in self.manifold.factors))

    def log_density(self, x):
        xp = namespace(x)
        pts = xp.asarray(self.points)
        cost = 0.0
        for s in self.manifold.slices:
            half_sq, _ = cost_ratio(xp.clip(x[..., s] @ pts[:, s].T, -1.0, 1.0))
            cost = cost + half_sq
        return logsumexp(-cost / self.bandwidth**2, axis=-1) - math.log(pts.shape[0]) - self.log_kernel_mass

    def sample(self, rng, n):
        # wrapped Gaussian proposal; accept with (sin r / r)^(n-1) per factor
        out = np.zeros((n, self.manifold.ambient_dim))
        todo = np.arange(n)
        while todo.size:
            idx = rng.integers(self.points.shape[0], size=todo.size)
            cand = np.zeros((todo.size, self.manifold.ambient_dim))
            accept = np.ones(todo.size)
            for f, s in zip(self.manifold.factors, self.manifold.slices):
                for k in np.unique(idx):
                    sel = np.flatnonzero(idx == k)
                    v = _truncated_tangent_normal(rng, f, self.points[k, s], self.bandwidth, sel.size)
                    cand[sel, s] = f.exp_map(np.broadcast_to(self.points[k, s], v.shape), v)
                    r = np.linalg.norm(v, axis=-1)
                    accept[sel] *= np.sinc(r / math.pi) ** (f.n - 1)
            ok = rng.random(todo.size) < accept
            out[todo[ok]] = cand[ok]
            todo = todo[~ok]
        return out

    def to_json(self):
        return {"kind": "kde", "points": self.points.tolist(), "bandwidth": self.bandwidth}


@dataclass(frozen=True, eq=False)
class EmpiricalPoints(Density):
    """A point cloud used as a data source: sampling resamples the points with replacement."""

    manifold: Manifold
    points: np.ndarray
    has_density = False

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("an empirical distribution needs at least one point")
        object.__setattr__(self, "points", self.manifold.project(pts))

    def log_density(self, x):
        raise ValueError("an empirical point cloud has no density; use a kde for evaluation")

    def sample(self, rng, n):
        return self.points[rng.integers(self.points.shape[0], size=n)]

    def to_json(self):
        return {"kind": "empirical", "points": self.points.tolist()}


def _load_points(data: dict) -> np.ndarray:
    if "points_file" in data:
        return np.loadtxt(data["points_file"], delimiter=",", ndmin=2)
    return np.asarray(data["points"], dtype=float)


def density_from_json(data: dict, manifold: Manifold | None = None) -> Density:
    """Build a density from its JSON description.

    ``manifold`` (or a ``"manifold"`` entry) is required for ``uniform``,
    ``wrapped_gaussian_mixture``, ``kde`` and ``empirical``; the named benchmark targets
    fix their own manifold.
    """
    kind = data.get("kind")
    if "manifold" in data:
        manifold = manifold_from_json(data["manifold"])
    if kind == "four_mode":
        return four_mode_sphere(float(data.get("scale", 0.3)))
    if kind == "checkerboard":
        return SphereCheckerboard(Sphere(2), int(data.get("rows", 4)), int(data.get("cols", 8)))
    if kind == "torus_three_modal":
        return Torus3Modal()
    if manifold is None:
        raise ValueError(f"density kind {kind!r} needs a manifold")
    if kind == "uniform":
        return Uniform(manifold)
    if kind == "wrapped_gaussian_mixture":
        return WrappedGaussianMixture(manifold, data["centers"], data["scales"], data.get("weights"))
    if kind == "kde":
        return KdeFromPoints(manifold, _load_points(data), float(data["bandwidth"]))
    if kind == "empirical":
        return EmpiricalPoints(manifold, _load_points(data))
    raise ValueError(f"unknown density kind {kind!r}")
