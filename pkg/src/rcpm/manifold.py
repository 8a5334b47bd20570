"""Closed-form geometry of spheres and finite products of spheres.

Points live in ambient coordinates: a point of ``S^n`` is a unit vector in
``R^(n+1)`` and a point of a product is the concatenation of its factors.
Every method accepts arrays with arbitrary leading batch axes and works on
both numpy and jax arrays; only the numpy path raises the geometric error
types (traced jax code cannot branch on values).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from rcpm._backend import acos, cost_ratio, namespace
from rcpm.errors import CutLocusError, DegenerateInputError

# Antipodal detection threshold on the inner product of two unit vectors.
CUT_LOCUS_TOL = 1e-9
_EXP_SERIES_SQNORM = 1e-12


def _exp_factor(xp, x, v):
    n2 = xp.sum(v * v, axis=-1, keepdims=True)
    small = n2 < _EXP_SERIES_SQNORM
    ns = xp.sqrt(xp.where(small, 1.0, n2))
    cos_n = xp.where(small, 1.0 - n2 / 2 + n2 * n2 / 24, xp.cos(ns))
    sinc_n = xp.where(small, 1.0 - n2 / 6 + n2 * n2 / 120, xp.sin(ns) / ns)
    out = x * cos_n + v * sinc_n
    return out / xp.sqrt(xp.sum(out * out, axis=-1, keepdims=True))


def _log_factor(xp, x, y):
    c = xp.clip(xp.sum(x * y, axis=-1, keepdims=True), -1.0, 1.0)
    _, ratio = cost_ratio(c)
    return ratio * (y - c * x)


def _angle_factor(xp, x, y):
    if xp is np:
        # 2 atan2(|x - y|, |x + y|) stays accurate for nearly equal and nearly antipodal points.
        return 2.0 * np.arctan2(np.linalg.norm(x - y, axis=-1), np.linalg.norm(x + y, axis=-1))
    return acos(xp.clip(xp.sum(x * y, axis=-1), -1.0, 1.0))


def _basis_factor(xp, x):
    """Oriented orthonormal tangent basis of one sphere factor, shape (..., D, n)."""
    dim = x.shape[-1]
    if dim == 2:
        return xp.stack([-x[..., 1], x[..., 0]], axis=-1)[..., None]
    eye = xp.eye(dim, dtype=x.dtype)
    if dim == 3:
        axis = eye[xp.argmin(xp.abs(x), axis=-1)]
        e1 = axis - xp.sum(axis * x, axis=-1, keepdims=True) * x
        e1 = e1 / xp.sqrt(xp.sum(e1 * e1, axis=-1, keepdims=True))
        e2 = xp.cross(x, e1)
        return xp.stack([e1, e2], axis=-1)
    order = xp.argsort(xp.abs(x), axis=-1)
    axes = xp.swapaxes(eye[order], -1, -2)
    q, r = xp.linalg.qr(xp.concatenate([x[..., None], axes], axis=-1)[..., : dim])
    q = q * xp.sign(xp.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    basis = q[..., :, 1:]
    flip = xp.sign(xp.linalg.det(xp.concatenate([x[..., None], basis], axis=-1)))
    return xp.concatenate([basis[..., :-1], basis[..., -1:] * flip[..., None, None]], axis=-1)


class Manifold:
    """Shared machinery for :class:`Sphere` and :class:`Product`.

    Subclasses expose ``factors``: the flattened tuple of sphere factors, each
    with an ambient slice given by ``slices``.
    """

    factors: tuple

    @property
    def slices(self) -> tuple[slice, ...]:
        out, start = [], 0
        for f in self.factors:
            out.append(slice(start, start + f.n + 1))
            start += f.n + 1
        return tuple(out)

    @property
    def dim(self) -> int:
        return sum(f.n for f in self.factors)

    @property
    def ambient_dim(self) -> int:
        return sum(f.n + 1 for f in self.factors)

    @property
    def diameter(self) -> float:
        return math.sqrt(len(self.factors)) * math.pi

    @property
    def volume(self) -> float:
        return math.prod(2 * math.pi ** ((f.n + 1) / 2) / math.gamma((f.n + 1) / 2) for f in self.factors)

    def _split(self, a):
        return [a[..., s] for s in self.slices]

    def _join(self, xp, parts):
        return parts[0] if len(parts) == 1 else xp.concatenate(parts, axis=-1)

    def exp_map(self, x, v):
        """Exponential map ``exp_x(v)``; factor-wise ``x cos|v| + v sin|v| / |v|``."""
        xp = namespace(x, v)
        x, v = self._asarray(xp, x), self._asarray(xp, v)
        return self._join(xp, [_exp_factor(xp, xf, vf) for xf, vf in zip(self._split(x), self._split(v))])

    def log_map(self, x, y):
        """Logarithm map ``log_x(y)``, the inverse of :meth:`exp_map`.

        Raises :class:`CutLocusError` (numpy inputs only) when a factor of
        ``y`` is antipodal to the matching factor of ``x``.
        """
        xp = namespace(x, y)
        x, y = self._asarray(xp, x), self._asarray(xp, y)
        if xp is np:
            self._check_cut_locus(x, y)
        return self._join(xp, [_log_factor(xp, xf, yf) for xf, yf in zip(self._split(x), self._split(y))])

    def distance(self, x, y):
        xp = namespace(x, y)
        x, y = self._asarray(xp, x), self._asarray(xp, y)
        sq = sum(_angle_factor(xp, xf, yf) ** 2 for xf, yf in zip(self._split(x), self._split(y)))
        return xp.sqrt(sq)

    def sq_distance_factors(self, x, y):
        """Squared intrinsic distance of each sphere factor, stacked on the last axis."""
        xp = namespace(x, y)
        x, y = self._asarray(xp, x), self._asarray(xp, y)
        return xp.stack([_angle_factor(xp, xf, yf) ** 2 for xf, yf in zip(self._split(x), self._split(y))], axis=-1)

    def cost(self, x, y):
        """Transport cost ``d(x, y)^2 / 2``."""
        xp = namespace(x, y)
        x, y = self._asarray(xp, x), self._asarray(xp, y)
        total = 0.0
        for xf, yf in zip(self._split(x), self._split(y)):
            half_sq, _ = cost_ratio(xp.clip(xp.sum(xf * yf, axis=-1), -1.0, 1.0))
            total = total + half_sq
        return total

    def tangent_basis(self, x):
        """Orthonormal, positively oriented basis of ``T_x M`` as columns, shape ``(..., D, d)``.

        For each sphere factor the basis ``e_1..e_n`` satisfies
        ``det[x, e_1, ..., e_n] = +1``; a product stacks factor bases
        block-diagonally.  Orientation makes the sign of a Jacobian
        determinant meaningful across points.
        """
        xp = namespace(x)
        x = self._asarray(xp, x)
        blocks = [_basis_factor(xp, xf) for xf in self._split(x)]
        if len(blocks) == 1:
            return blocks[0]
        batch = x.shape[:-1]
        cols = []
        for k, (s, b) in enumerate(zip(self.slices, blocks)):
            pad_lo = xp.zeros(batch + (s.start, b.shape[-1]), dtype=x.dtype)
            pad_hi = xp.zeros(batch + (self.ambient_dim - s.stop, b.shape[-1]), dtype=x.dtype)
            cols.append(xp.concatenate([pad_lo, b, pad_hi], axis=-2))
        return xp.concatenate(cols, axis=-1)

    def proj_tangent(self, x, u):
        """Orthogonal projection of an ambient vector onto ``T_x M``."""
        xp = namespace(x, u)
        x, u = self._asarray(xp, x), self._asarray(xp, u)
        parts = [uf - xp.sum(uf * xf, axis=-1, keepdims=True) * xf for xf, uf in zip(self._split(x), self._split(u))]
        return self._join(xp, parts)

    def project(self, raw):
        """Nearest manifold point: normalise each sphere factor slice."""
        xp = namespace(raw)
        raw = self._asarray(xp, raw)
        parts = []
        for rf in self._split(raw):
            norm = xp.sqrt(xp.sum(rf * rf, axis=-1, keepdims=True))
            if xp is np and np.any(norm < 1e-12):
                raise DegenerateInputError("cannot project a (near-)zero sphere factor onto the manifold")
            parts.append(rf / norm)
        return self._join(xp, parts)

    def sample_uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` points from the normalised volume measure, shape ``(n, D)``."""
        raw = rng.standard_normal((n, self.ambient_dim))
        if n == 0:
            return raw
        return self.project(raw)

    def is_on_manifold(self, x, atol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return all(np.all(np.abs(np.linalg.norm(xf, axis=-1) - 1.0) <= atol) for xf in self._split(x))

    # Chart coordinates: S^2 -> (colatitude, longitude), S^1 -> angle in [0, 2 pi).

    def to_chart(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cols = []
        for f, xf in zip(self.factors, self._split(x)):
            if f.n == 1:
                cols.append(np.mod(np.arctan2(xf[..., 1], xf[..., 0]), 2 * np.pi))
            elif f.n == 2:
                cols.append(np.arccos(np.clip(xf[..., 2], -1.0, 1.0)))
                cols.append(np.mod(np.arctan2(xf[..., 1], xf[..., 0]), 2 * np.pi))
            else:
                raise NotImplementedError("charts are only defined for S^1 and S^2 factors")
        return np.stack(cols, axis=-1)

    def from_chart(self, angles) -> np.ndarray:
        angles = np.asarray(angles, dtype=float)
        parts, k = [], 0
        for f in self.factors:
            if f.n == 1:
                a = angles[..., k]
                parts.append(np.stack([np.cos(a), np.sin(a)], axis=-1))
                k += 1
            elif f.n == 2:
                th, ph = angles[..., k], angles[..., k + 1]
                parts.append(np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1))
                k += 2
            else:
                raise NotImplementedError("charts are only defined for S^1 and S^2 factors")
        return np.concatenate(parts, axis=-1)

    def chart_grid(self, res: int):
        """Midpoint grid for quadrature.

        Each S^1 factor gets ``res`` nodes, each S^2 factor ``res`` colatitudes
        by ``2 res`` longitudes.  Returns ``(angles, points, weights)`` where the
        weights include the ``sin(colatitude)`` area element, so
        ``weights.sum()`` approximates the manifold volume.
        """
        axes, weights = [], []
        for f in self.factors:
            if f.n == 1:
                h = 2 * np.pi / res
                axes.append((np.arange(res) + 0.5) * h)
                weights.append(np.full(res, h))
            elif f.n == 2:
                h = np.pi / res
                th = (np.arange(res) + 0.5) * h
                ph = (np.arange(2 * res) + 0.5) * h
                axes.extend([th, ph])
                weights.extend([np.sin(th) * h, np.full(2 * res, h)])
            else:
                raise NotImplementedError("charts are only defined for S^1 and S^2 factors")
        mesh = np.meshgrid(*axes, indexing="ij")
        angles = np.stack([m.ravel() for m in mesh], axis=-1)
        w = np.ones(())
        for wk in weights:
            w = np.multiply.outer(w, wk)
        return angles, self.from_chart(angles), w.ravel()

    def _asarray(self, xp, a):
        if xp is np:
            a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.ambient_dim:
            raise ValueError(f"expected ambient dimension {self.ambient_dim}, got shape {a.shape}")
        return a

    def _check_cut_locus(self, x, y):
        for xf, yf in zip(self._split(x), self._split(y)):
            if np.any(np.sum(xf * yf, axis=-1) <= -1.0 + CUT_LOCUS_TOL):
                raise CutLocusError("log map requested at antipodal points")

    def to_json(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class Sphere(Manifold):
    """The unit sphere ``S^n`` embedded in ``R^(n+1)``."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sphere dimension must be >= 1")

    @property
    def factors(self):
        return (self,)

    def to_json(self):
        return {"kind": "sphere", "n": self.n}

    def __repr__(self):
        return f"Sphere({self.n})"


@dataclass(frozen=True)
class Product(Manifold):
    """Cartesian product of manifolds; nested products are flattened."""

    components: tuple

    def __post_init__(self):
        if len(self.components) == 0:
            raise ValueError("a product needs at least one factor")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def factors(self):
        return tuple(f for c in self.components for f in c.factors)

    def to_json(self):
        return {"kind": "product", "factors": [c.to_json() for c in self.components]}

    def __repr__(self):
        return "Product(" + ", ".join(map(repr, self.components)) + ")"


def torus(k: int = 2) -> Product:
    """The flat-metric torus ``(S^1)^k``."""
    return Product(tuple(Sphere(1) for _ in range(k)))


def manifold_from_json(data: dict) -> Manifold:
    kind = data.get("kind")
    if kind == "sphere":
        return Sphere(int(data["n"]))
    if kind == "product":
        return Product(tuple(manifold_from_json(f) for f in data["factors"]))
    raise ValueError(f"unknown manifold kind {kind!r}")
