"""Parameter gradients of flow losses and their finite-difference audit.

Parameters of a flow form a pytree: one ``(layers, weight_logits)`` pair per
block, where ``layers`` is a list of ``(points, alpha)``.  Gradients are
obtained by reverse-mode differentiation (jax) through the forward-mode
Jacobian used for the log-determinant.  :func:`grad_check` compares every
coordinate against central finite differences of the loss value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from rcpm.errors import InvalidBatchError, NonFiniteLossError
from rcpm.flow import Flow, flow_step
from rcpm.manifold import CUT_LOCUS_TOL
from rcpm.potential import BlockPotential, DiscretePotential


@dataclass(frozen=True, eq=False)
class LossSpec:
    """Which objective to differentiate.

    ``kind`` is ``"kl"`` (reverse KL, batch from the base), ``"nll"``
    (negative log-likelihood of data under a backward flow) or ``"custom"``,
    where ``fn(x, y, logdet)`` returns per-sample loss terms.
    """

    kind: str
    base: Any = None
    target: Any = None
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("kl", "nll", "custom"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "kl" and (self.base is None or self.target is None):
            raise ValueError("the KL loss needs a base and a target density")
        if self.kind == "nll" and self.base is None:
            raise ValueError("the NLL loss needs a base density")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("a custom loss needs fn")

    def terms(self, x, y, logdet):
        if self.kind == "kl":
            return self.base.log_density(x) - logdet - self.target.log_density(y)
        if self.kind == "nll":
            return -(self.base.log_density(y) + logdet)
        return self.fn(x, y, logdet)


def flow_params(f: Flow):
    """Parameter pytree of a flow (jax arrays)."""
    return f.params()


def flow_with_params(f: Flow, params) -> Flow:
    """Copy of ``f`` carrying new parameter values (points re-normalised per factor)."""
    m = f.manifold
    blocks = []
    for b, (layers, logits) in zip(f.blocks, params):
        new_layers = tuple(
            DiscretePotential(m, m.project(np.asarray(p)), np.asarray(a), old.gamma)
            for old, (p, a) in zip(b.layers, layers)
        )
        blocks.append(BlockPotential(new_layers, np.asarray(logits), b.identity_relu, b.relu_gamma))
    return Flow(tuple(blocks), f.direction, dict(f.meta))


def batch_loss(structs, spec: LossSpec, params, hypers, x, active=None):
    """Mean loss over the batch, excluding points that hit a cut locus.

    ``active`` masks blocks as in :func:`rcpm.flow.flow_step`.
    Returns ``(loss, (terms, valid))``.
    """
    y, logdet, _, min_cos = flow_step(structs, params, hypers, x, active)
    terms = spec.terms(x, y, logdet)
    valid = min_cos > -1.0 + CUT_LOCUS_TOL
    n = jnp.maximum(jnp.sum(valid), 1)
    return jnp.sum(jnp.where(valid, terms, 0.0)) / n, (terms, valid)


@lru_cache(maxsize=32)
def _value_and_grad(structs, spec):
    return jax.jit(jax.value_and_grad(lambda p, h, x, a: batch_loss(structs, spec, p, h, x, a), has_aux=True))


@lru_cache(maxsize=32)
def _value(structs, spec):
    return jax.jit(lambda p, h, x, a: batch_loss(structs, spec, p, h, x, a))


# ---------------------------------------------------------------------------
# gradients


@dataclass
class LayerGradient:
    d_y: np.ndarray
    d_alpha: np.ndarray


@dataclass
class BlockGradient:
    layers: list
    d_w: np.ndarray  # w.r.t. the K - 1 unconstrained mixing logits


@dataclass
class ParamGradient:
    """Loss gradient mirroring the flow's parameter tree.

    ``d_y`` are ambient gradients; :meth:`tangent` projects them onto the
    tangent spaces at the component points.
    """

    blocks: list

    @classmethod
    def from_tree(cls, tree) -> "ParamGradient":
        return cls(
            [
                BlockGradient([LayerGradient(np.array(gy), np.array(ga)) for gy, ga in layers], np.array(gw))
                for layers, gw in tree
            ]
        )

    def to_tree(self):
        return [([(lg.d_y, lg.d_alpha) for lg in b.layers], b.d_w) for b in self.blocks]

    def tangent(self, f: Flow) -> "ParamGradient":
        m = f.manifold
        out = []
        for b, gb in zip(f.blocks, self.blocks):
            layers = [LayerGradient(m.proj_tangent(lay.points, g.d_y), g.d_alpha.copy()) for lay, g in zip(b.layers, gb.layers)]
            out.append(BlockGradient(layers, gb.d_w.copy()))
        return ParamGradient(out)

    def flat(self) -> np.ndarray:
        return np.asarray(ravel_pytree(self.to_tree())[0])

    def is_zero(self) -> bool:
        return not np.any(self.flat())


def _check_batch(f: Flow, batch):
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidBatchError("loss evaluation needs a non-empty batch of points")
    if x.shape[1] != f.manifold.ambient_dim:
        raise InvalidBatchError(f"batch points must have dimension {f.manifold.ambient_dim}")
    return x


def _raise_nonfinite(terms, valid, x):
    terms, valid = np.asarray(terms), np.asarray(valid)
    bad = np.flatnonzero(valid & ~np.isfinite(terms))
    if bad.size:
        i = int(bad[0])
        raise NonFiniteLossError(f"non-finite loss term {terms[i]} at sample {i}", sample=x[i].tolist())


def loss_value(f: Flow, spec: LossSpec, batch) -> float:
    x = _check_batch(f, batch)
    loss, (terms, valid) = _value(f.structures, spec)(f.params(), f.hypers(), jnp.asarray(x), _all_active(f))
    _raise_nonfinite(terms, valid, x)
    return float(loss)


def loss_and_grad(f: Flow, spec: LossSpec, batch):
    """Monte-Carlo loss on ``batch`` and its :class:`ParamGradient`.

    Raises :class:`NonFiniteLossError` naming the first offending sample.
    """
    return _loss_and_grad(f, spec, _check_batch(f, batch), _all_active(f))


def _all_active(f: Flow):
    return jnp.ones(f.T, dtype=bool)


def _loss_and_grad(f: Flow, spec: LossSpec, x, active):
    (loss, (terms, valid)), grads = _value_and_grad(f.structures, spec)(f.params(), f.hypers(), jnp.asarray(x), active)
    _raise_nonfinite(terms, valid, x)
    return float(loss), ParamGradient.from_tree(grads)


def padded_flow(f: Flow, depth: int):
    """``f`` followed by masked copies of its last block, and the block mask.

    The masked blocks leave the composite map, its log-determinant and the
    gradients of the real blocks unchanged; they only let flows of different
    depths reuse one compiled program.
    """
    if depth < f.T:
        raise ValueError(f"cannot pad a {f.T}-block flow to {depth} blocks")
    extra = depth - f.T
    padded = Flow(f.blocks + (f.blocks[-1],) * extra, f.direction, dict(f.meta))
    return padded, jnp.asarray([True] * f.T + [False] * extra)


# ---------------------------------------------------------------------------
# finite-difference audit


@dataclass
class GradCheckReport:
    max_rel_error: dict
    worst: dict
    passed: bool
    rtol: float
    atol: float
    n_checked: int
    alpha_identically_zero: bool
    notes: list = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "max_rel_error": self.max_rel_error,
            "worst": self.worst,
            "passed": self.passed,
            "rtol": self.rtol,
            "atol": self.atol,
            "n_checked": self.n_checked,
            "alpha_identically_zero": self.alpha_identically_zero,
            "notes": self.notes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def _coordinate_labels(f: Flow):
    """``(class, location)`` for every entry of the flattened parameter vector."""
    labels = []
    for t, b in enumerate(f.blocks):
        for k, lay in enumerate(b.layers):
            for i in range(lay.m):
                for j in range(lay.points.shape[1]):
                    labels.append(("y", {"block": t, "layer": k, "component": i, "coord": j}))
            for i in range(lay.m):
                labels.append(("alpha", {"block": t, "layer": k, "component": i}))
        for k in range(b.K - 1):
            labels.append(("w", {"block": t, "logit": k}))
    return labels


@lru_cache(maxsize=32)
def _batched_values(structs, spec):
    """Loss values for a batch of flattened parameter vectors (shaped like ``template``)."""

    def many(thetas, template, hypers, x, active):
        _, unravel = ravel_pytree(template)
        return jax.vmap(lambda th: batch_loss(structs, spec, unravel(th), hypers, x, active)[0])(thetas)

    return jax.jit(many)


def fd_gradient(f: Flow, spec: LossSpec, batch, h: float = 1e-5, chunk: int = 64, pad_to: int | None = None) -> np.ndarray:
    """Central differences of the loss value along every raw parameter coordinate.

    ``pad_to`` evaluates the flow inside a masked stack of that many blocks
    (see :func:`padded_flow`); only the real coordinates are perturbed.
    """
    x = jnp.asarray(_check_batch(f, batch))
    g, active = padded_flow(f, pad_to or f.T)
    params, hypers = g.params(), g.hypers()
    theta, _ = ravel_pytree(params)
    many = _batched_values(g.structures, spec)

    n = ravel_pytree(f.params())[0].size  # real blocks come first in the flattening
    out = np.zeros(n)
    eye = np.eye(n, theta.size)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        pad = chunk - idx.size
        steps = np.concatenate([eye[idx], np.zeros((pad, theta.size))]) * h
        plus = np.asarray(many(theta[None, :] + steps, params, hypers, x, active))
        minus = np.asarray(many(theta[None, :] - steps, params, hypers, x, active))
        out[idx] = ((plus - minus) / (2 * h))[: idx.size]
    return out


def grad_check(
    f: Flow,
    spec: LossSpec,
    batch,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    h: float = 1e-5,
    analytic: ParamGradient | None = None,
    pad_to: int | None = None,
) -> GradCheckReport:
    """Compare the engine's gradient against central finite differences, coordinate by coordinate.

    The error of a coordinate is ``|g - fd| / max(|g|, |fd|, atol / rtol)``,
    i.e. relative with an absolute floor of ``atol``.  ``analytic`` replaces
    the engine gradient (used to test the checker itself).  ``pad_to`` runs
    both sides inside a masked stack of that many blocks, so checks of flows
    with different depths share compiled programs.
    """
    x = _check_batch(f, batch)
    notes = []
    if analytic is None:
        g_flow, active = padded_flow(f, pad_to or f.T)
        _, full = _loss_and_grad(g_flow, spec, x, active)
        analytic = ParamGradient(full.blocks[: f.T])
        if not ParamGradient(full.blocks[f.T :]).is_zero():
            notes.append("masked padding blocks received a non-zero gradient")
    g = analytic.flat()
    fd = fd_gradient(f, spec, x, h, pad_to=pad_to)
    err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), atol / rtol)
    labels = _coordinate_labels(f)
    max_err, worst = {}, {}
    for cls in ("y", "alpha", "w"):
        idx = [i for i, (c, _) in enumerate(labels) if c == cls]
        if not idx:
            continue
        k = idx[int(np.argmax(err[idx]))]
        max_err[cls] = float(err[k])
        worst[cls] = {**labels[k][1], "analytic": float(g[k]), "fd": float(fd[k])}
    alpha_idx = [i for i, (c, _) in enumerate(labels) if c == "alpha"]
    alpha_zero = bool(np.all(g[alpha_idx] == 0.0))
    # alpha only shifts piecewise-constant slopes when every min and every ReLU that sees it is hard
    hard = all(
        all(lay.gamma == 0 for lay in b.layers) and (b.relu_gamma == 0 or (b.K == 1 and not b.identity_relu))
        for b in f.blocks
    )
    if hard:
        notes.append("hard-min potentials: alpha gradients are expected to vanish identically")
        if not alpha_zero:
            notes.append("unexpected non-zero alpha gradient under hard min")
    passed = bool(max(max_err.values()) <= rtol) and (alpha_zero or not hard) and not any("masked" in n for n in notes)
    return GradCheckReport(max_err, worst, passed, rtol, atol, int(g.size), alpha_zero, notes)
