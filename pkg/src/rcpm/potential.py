"""Discrete c-concave potentials and the multi-layer block potential built from them.

A discrete potential is ``phi(x) = min_i (c(x, y_i) + alpha_i)`` with
``c = d^2 / 2``; with ``gamma > 0`` the min becomes the soft-min
``-gamma log sum_i exp(-a_i / gamma)``.  Its Riemannian gradient is the
softmax-weighted average of ``-log_x(y_i)``.

The ``*_kernel`` functions operate on raw arrays (numpy or jax) and are the
single implementation used both by the public functions here and by the
jax training engine.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from rcpm._backend import cost_ratio, logsumexp, namespace, sigmoid
from rcpm.manifold import CUT_LOCUS_TOL, Manifold, manifold_from_json
from rcpm.errors import CutLocusError


def _is_hard(gamma, hard):
    # traced temperatures carry an explicit static flag
    return bool(gamma == 0) if hard is None else hard


def soft_min(values, gamma: float, axis: int = -1, hard: bool | None = None):
    """``-gamma log sum exp(-a / gamma)`` along ``axis``; the exact min when ``gamma == 0``."""
    xp = namespace(values)
    values = np.asarray(values, dtype=float) if xp is np else values
    if hard is None and gamma < 0:
        raise ValueError("gamma must be non-negative")
    if _is_hard(gamma, hard):
        return xp.min(values, axis=axis)
    return -gamma * logsumexp(-values / gamma, axis=axis)


def softmin_weights(values, gamma: float, axis: int = -1, hard: bool | None = None):
    """Gradient of :func:`soft_min` w.r.t. its inputs (a softmax of ``-a / gamma``).

    With ``gamma == 0`` this is the one-hot indicator of the first minimiser.
    """
    xp = namespace(values)
    values = np.asarray(values, dtype=float) if xp is np else values
    if _is_hard(gamma, hard):
        idx = xp.argmin(values, axis=axis)
        n = values.shape[axis]
        onehot = xp.eye(n, dtype=values.dtype)[idx]
        return xp.moveaxis(onehot, -1, axis)
    z = -values / gamma
    z = z - xp.max(z, axis=axis, keepdims=True)
    e = xp.exp(z)
    return e / xp.sum(e, axis=axis, keepdims=True)


def concave_relu(s, gamma2: float = 0.0):
    """``sigma(s) = min(0, s)``, softened to ``soft_min([0, s], gamma2)`` when ``gamma2 > 0``."""
    return _relu_and_slope(s, gamma2)[0]


def _relu_and_slope(s, gamma2, hard: bool | None = None):
    xp = namespace(s)
    s = np.asarray(s, dtype=float) if xp is np else s
    if _is_hard(gamma2, hard):
        neg = s < 0
        return xp.where(neg, s, 0.0), xp.where(neg, 1.0, 0.0)
    z = -s / gamma2
    # -gamma2 * softplus(z), written to avoid overflow for large |z|.
    val = -gamma2 * (xp.maximum(z, 0.0) + xp.log1p(xp.exp(-xp.abs(z))))
    return val, sigmoid(z)


# ---------------------------------------------------------------------------
# kernels


def layer_kernel(manifold: Manifold, points, alpha, gamma, x, hard: bool | None = None):
    """Value, Riemannian gradient and component weights of one discrete potential.

    ``points`` has shape ``(m, D)`` and is normalised per factor here, so
    ambient parameter gradients come out tangent.  ``x`` has shape ``(N, D)``.
    Returns ``(value (N,), grad (N, D), weights (N, m), min_cos (N,))`` where
    ``min_cos`` is the smallest factor inner product with any component that
    carries weight (cut-locus detection).  ``gamma`` may be a traced scalar,
    in which case ``hard`` must say whether it is zero.
    """
    xp = namespace(points, alpha, x)
    slices = manifold.slices
    cosines, ratios = [], []
    cost = 0.0
    unit = []
    for s in slices:
        yf = points[:, s]
        yf = yf / xp.sqrt(xp.sum(yf * yf, axis=-1, keepdims=True))
        unit.append(yf)
        c = xp.clip(x[:, s] @ yf.T, -1.0, 1.0)
        half_sq, ratio = cost_ratio(c)
        cost = cost + half_sq
        cosines.append(c)
        ratios.append(ratio)
    a = cost + alpha
    value = soft_min(a, gamma, axis=-1, hard=hard)
    w = softmin_weights(a, gamma, axis=-1, hard=hard)
    parts = []
    min_cos = None
    for s, yf, c, ratio in zip(slices, unit, cosines, ratios):
        # components with zero weight (hard min, underflow) must not inject 0 * inf
        live = w > 0
        wr = xp.where(live, w * ratio, 0.0)
        log_avg = wr @ yf - xp.sum(wr * c, axis=-1, keepdims=True) * x[:, s]
        parts.append(-log_avg)
        mc = xp.min(xp.where(live, c, 1.0), axis=-1)
        min_cos = mc if min_cos is None else xp.minimum(min_cos, mc)
    grad = parts[0] if len(parts) == 1 else xp.concatenate(parts, axis=-1)
    return value, grad, w, min_cos


def block_kernel(
    manifold: Manifold, layers, gammas, weight_logits, relu_gamma, identity_relu: bool, x, hards=None, relu_hard=None
):
    """Value and gradient of ``psi_K`` (optionally passed through the concave ReLU).

    ``psi_1 = phi_0`` and ``psi_k = (1 - w_{k-1}) phi_{k-1} + w_{k-1} sigma(psi_{k-1})``
    for ``k >= 2`` with ``w = sigmoid(weight_logits)``; the first mixing
    weight is fixed at zero.  ``layers`` is a sequence of ``(points, alpha)``.
    ``hards`` / ``relu_hard`` flag zero temperatures when those are traced.
    Returns ``(value, grad, min_cos)``.
    """
    xp = namespace(x)
    psi = gpsi = min_cos = None
    hards = [None] * len(layers) if hards is None else hards
    for k, ((points, alpha), gamma, hard) in enumerate(zip(layers, gammas, hards)):
        phi, gphi, _, mc = layer_kernel(manifold, points, alpha, gamma, x, hard)
        min_cos = mc if min_cos is None else xp.minimum(min_cos, mc)
        if k == 0:
            psi, gpsi = phi, gphi
            continue
        w = sigmoid(weight_logits[k - 1])
        s, ds = _relu_and_slope(psi, relu_gamma, relu_hard)
        psi = (1.0 - w) * phi + w * s
        gpsi = (1.0 - w) * gphi + w * ds[:, None] * gpsi
    if identity_relu:
        s, ds = _relu_and_slope(psi, relu_gamma, relu_hard)
        psi, gpsi = s, ds[:, None] * gpsi
    return psi, gpsi, min_cos


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True, eq=False)
class DiscretePotential:
    """``x -> min_gamma_i (c(x, y_i) + alpha_i)`` on ``manifold``.

    ``points`` are the ``y_i`` (shape ``(m, D)``), ``alpha`` the offsets.
    ``gamma == 0`` selects the hard minimum (lowest index wins ties).
    """

    manifold: Manifold
    points: np.ndarray
    alpha: np.ndarray
    gamma: float = 0.0

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if pts.shape[0] < 1 or pts.shape[1] != self.manifold.ambient_dim:
            raise ValueError(f"points must have shape (m, {self.manifold.ambient_dim}), got {pts.shape}")
        if alpha.shape != (pts.shape[0],):
            raise ValueError("alpha must have one entry per point")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def to_json(self) -> dict[str, Any]:
        return {
            "components": [{"y": p.tolist(), "alpha": float(a)} for p, a in zip(self.points, self.alpha)],
            "gamma": self.gamma,
        }

    @classmethod
    def from_json(cls, manifold: Manifold, data: dict) -> "DiscretePotential":
        comps = data["components"]
        return cls(manifold, np.array([c["y"] for c in comps]), np.array([c["alpha"] for c in comps]), data["gamma"])


@dataclass(frozen=True, eq=False)
class BlockPotential:
    """Convex combination / composition of ``K`` discrete potentials.

    ``weight_logits`` holds the ``K - 1`` unconstrained mixing parameters;
    :attr:`weights` maps them through a sigmoid and prepends the fixed
    ``w_0 = 0``.  ``identity_relu`` applies the concave ReLU to the final
    potential; ``relu_gamma`` softens every concave ReLU in the block
    (``0`` = hard).
    """

    layers: tuple
    weight_logits: np.ndarray = field(default=None)
    identity_relu: bool = False
    relu_gamma: float = 0.0

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a block needs at least one layer")
        if any(layer.manifold != layers[0].manifold for layer in layers):
            raise ValueError("all layers must live on the same manifold")
        logits = np.zeros(len(layers) - 1) if self.weight_logits is None else np.asarray(self.weight_logits, float)
        if logits.shape != (len(layers) - 1,):
            raise ValueError("weight_logits must have K - 1 entries")
        if self.relu_gamma < 0:
            raise ValueError("relu_gamma must be non-negative")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "weight_logits", logits)
        object.__setattr__(self, "relu_gamma", float(self.relu_gamma))

    @classmethod
    def single(cls, potential: DiscretePotential, identity_relu: bool = False, relu_gamma: float = 0.0):
        return cls((potential,), None, identity_relu, relu_gamma)

    @classmethod
    def with_weights(cls, layers, weights, identity_relu=False, relu_gamma=0.0):
        """Build from mixing weights ``w_0 .. w_{K-1}`` in ``[0, 1]`` (``w_0`` must be 0)."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(layers),) or weights[0] != 0.0:
            raise ValueError("weights must have K entries with weights[0] == 0")
        if np.any((weights < 0) | (weights > 1)):
            raise ValueError("weights must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            logits = np.log(weights[1:]) - np.log1p(-weights[1:])
        return cls(tuple(layers), logits, identity_relu, relu_gamma)

    @property
    def manifold(self) -> Manifold:
        return self.layers[0].manifold

    @property
    def K(self) -> int:
        return len(self.layers)

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([[0.0], sigmoid(self.weight_logits)])

    @property
    def gammas(self) -> tuple:
        return tuple(layer.gamma for layer in self.layers)

    def arrays(self):
        """Raw layer arrays ``[(points, alpha), ...]`` and the weight logits."""
        return [(layer.points, layer.alpha) for layer in self.layers], self.weight_logits

    def to_json(self) -> dict[str, Any]:
        return {
            "layers": [layer.to_json() for layer in self.layers],
            "weights": self.weights.tolist(),
            "weight_logits": self.weight_logits.tolist(),
            "identity_relu": self.identity_relu,
            "relu_gamma": self.relu_gamma,
        }

    @classmethod
    def from_json(cls, manifold: Manifold, data: dict) -> "BlockPotential":
        layers = tuple(DiscretePotential.from_json(manifold, d) for d in data["layers"])
        if "weight_logits" in data:
            return cls(layers, np.array(data["weight_logits"], dtype=float), data["identity_relu"], data["relu_gamma"])
        return cls.with_weights(layers, data["weights"], data["identity_relu"], data["relu_gamma"])


def potential_from_json(data: dict) -> DiscretePotential:
    return DiscretePotential.from_json(manifold_from_json(data["manifold"]), data)


# ---------------------------------------------------------------------------
# public evaluation


def _as_batch(manifold, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != manifold.ambient_dim:
        raise ValueError(f"expected points of dimension {manifold.ambient_dim}, got {x.shape}")
    return x, single


def _unbatch(a, single):
    return a[0] if single else a


def eval_potential(p: DiscretePotential, x):
    """Value of the discrete potential at one point ``(D,)`` or a batch ``(N, D)``."""
    xb, single = _as_batch(p.manifold, x)
    value, _, _, _ = layer_kernel(p.manifold, p.points, p.alpha, p.gamma, xb)
    return float(value[0]) if single else value


def active_index(p: DiscretePotential, x):
    """Index of the hard-min component active at ``x`` (lowest index on ties)."""
    xb, single = _as_batch(p.manifold, x)
    a = np.array(p.manifold.cost(xb[:, None, :], p.points[None, :, :])) + p.alpha
    idx = np.argmin(a, axis=-1)
    return int(idx[0]) if single else idx


def component_weights(p: DiscretePotential, x):
    """Convex weights of the components in the gradient at ``x``."""
    xb, single = _as_batch(p.manifold, x)
    _, _, w, _ = layer_kernel(p.manifold, p.points, p.alpha, p.gamma, xb)
    return _unbatch(w, single)


def _check_cut(min_cos, what):
    if np.any(min_cos <= -1.0 + CUT_LOCUS_TOL):
        raise CutLocusError(f"{what}: evaluation point is antipodal to a potential component")


def grad_potential(p: DiscretePotential, x):
    """Riemannian gradient ``sum_i w_i(x) (-log_x y_i)`` (``w`` one-hot for the hard min).

    Raises :class:`CutLocusError` if ``x`` is antipodal to a contributing component.
    """
    xb, single = _as_batch(p.manifold, x)
    with np.errstate(invalid="ignore"):  # nan at a cut locus is reported below
        _, grad, _, min_cos = layer_kernel(p.manifold, p.points, p.alpha, p.gamma, xb)
    _check_cut(min_cos, "grad_potential")
    return _unbatch(grad, single)


def eval_block_potential(b: BlockPotential, x):
    xb, single = _as_batch(b.manifold, x)
    layers, logits = b.arrays()
    value, _, _ = block_kernel(b.manifold, layers, b.gammas, logits, b.relu_gamma, b.identity_relu, xb)
    return float(value[0]) if single else value


def grad_block_potential(b: BlockPotential, x):
    """Riemannian gradient of the block potential (chain rule through the layer recursion)."""
    xb, single = _as_batch(b.manifold, x)
    layers, logits = b.arrays()
    with np.errstate(invalid="ignore"):
        _, grad, min_cos = block_kernel(b.manifold, layers, b.gammas, logits, b.relu_gamma, b.identity_relu, xb)
    _check_cut(min_cos, "grad_block_potential")
    return _unbatch(grad, single)
