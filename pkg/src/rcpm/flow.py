"""Exponential-map flow blocks ``s(x) = exp_x(-grad phi(x))`` and their compositions.

Jacobians are taken in oriented orthonormal tangent bases at the input and
the output point, ``J_ab = <e'_a, Ds(x) e_b>``, using jax forward-mode
differentiation of the block map.  Everything that needs derivatives runs
through the jitted functions in this module; plain evaluation of a block
(``apply_block``) runs on numpy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from rcpm.errors import CutLocusError, SingularJacobianError
from rcpm.manifold import CUT_LOCUS_TOL, Manifold, manifold_from_json
from rcpm.potential import BlockPotential, DiscretePotential, _as_batch, _relu_and_slope, block_kernel, layer_kernel

# |det J| below this counts as singular.
SINGULAR_LOGDET = float(np.log(1e-300))
_CHUNK = 4096
_BUCKETS = (64, 512, _CHUNK)


@dataclass(frozen=True)
class BlockStructure:
    """Static (hashable) description of a block.

    Only the hard/soft nature of each temperature is static; the parameter
    arrays and the temperature values travel as traced inputs, so blocks
    that differ only in ``gamma`` share compiled code.
    """

    manifold: Manifold
    hards: tuple
    relu_hard: bool
    identity_relu: bool

    @classmethod
    def of(cls, b: BlockPotential) -> "BlockStructure":
        return cls(b.manifold, tuple(g == 0 for g in b.gammas), b.relu_gamma == 0, b.identity_relu)


def block_params(b: BlockPotential):
    layers, logits = b.arrays()
    return ([(jnp.asarray(p), jnp.asarray(a)) for p, a in layers], jnp.asarray(logits))


def block_hyper(b: BlockPotential):
    """Temperatures ``(gammas (K,), relu_gamma)`` of a block."""
    return (np.asarray(b.gammas, dtype=float), np.asarray(b.relu_gamma, dtype=float))


def _packed_grad(struct: BlockStructure, packed, hyper, x):
    """Block-potential gradient for layers stacked as ``(K, m, D)`` / ``(K, m)`` arrays.

    The layer recursion runs under ``lax.scan`` so the traced program does
    not grow with ``K``; the first step mixes with the fixed ``w_0 = 0``.
    Scan bodies are rematerialised in the backward pass, which keeps the
    stacked residuals (and both compile time and memory traffic) small.
    """
    points, alpha, logits = packed
    gammas, relu_gamma = hyper
    m, hard = struct.manifold, struct.hards[0]
    if points.shape[0] == 1:
        psi, gpsi, _, min_cos = layer_kernel(m, points[0], alpha[0], gammas[0], x, hard)
    else:
        w = jnp.concatenate([jnp.zeros(1, dtype=logits.dtype), jax.nn.sigmoid(logits)])

        def body(carry, layer):
            psi, gpsi, mc = carry
            p, a, wk, g = layer
            phi, gphi, _, mck = layer_kernel(m, p, a, g, x, hard)
            s, ds = _relu_and_slope(psi, relu_gamma, struct.relu_hard)
            return ((1.0 - wk) * phi + wk * s, (1.0 - wk) * gphi + wk * ds[:, None] * gpsi, jnp.minimum(mc, mck)), None

        n = x.shape[0]
        init = (jnp.zeros(n, x.dtype), jnp.zeros_like(x), jnp.ones(n, x.dtype))
        (psi, gpsi, min_cos), _ = jax.lax.scan(jax.checkpoint(body), init, (points, alpha, w, gammas))
    if struct.identity_relu:
        _, ds = _relu_and_slope(psi, relu_gamma, struct.relu_hard)
        gpsi = ds[:, None] * gpsi
    return gpsi, min_cos


def block_map_kernel(struct: BlockStructure, params, hyper, x):
    """``(s(x), min_cos)`` for a batch ``x`` of shape ``(N, D)``; numpy or jax.

    ``params`` is either ``(layers, weight_logits)`` or the stacked form
    ``(points, alpha, weight_logits)`` (jax only, uniform layers).
    """
    if len(params) == 3:
        grad, min_cos = _packed_grad(struct, params, hyper, x)
    else:
        layers, logits = params
        gammas, relu_gamma = hyper
        _, grad, min_cos = block_kernel(
            struct.manifold, layers, gammas, logits, relu_gamma, struct.identity_relu, x, struct.hards, struct.relu_hard
        )
    m = struct.manifold
    xp = jnp if isinstance(x, jax.Array) else np
    v = -grad
    moved = xp.any(v != 0, axis=-1, keepdims=True)
    # exp_x(0) = x bit-for-bit (the renormalisation inside exp_map may round)
    return xp.where(moved, m.exp_map(x, v), x), min_cos


def _slogdet(J):
    d = J.shape[-1]
    if d == 1:
        det = J[..., 0, 0]
    elif d == 2:
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    else:
        sign, logabs = jnp.linalg.slogdet(J)
        return sign, logabs
    return jnp.sign(det), jnp.log(jnp.abs(det))


def _pushforward_basis(struct, params, hyper, x):
    """``s(x)``, the images ``Ds(x) e_b`` of the tangent basis at ``x``, the basis and ``min_cos``."""
    basis = struct.manifold.tangent_basis(x)

    def push(e):
        return jax.jvp(lambda z: block_map_kernel(struct, params, hyper, z), (x,), (e,), has_aux=True)

    y, cols, min_cos = jax.vmap(push, in_axes=-1, out_axes=(None, -1, None))(basis)
    return y, cols, basis, min_cos


def block_step(struct: BlockStructure, params, hyper, x):
    """Push ``x`` through one block and return ``(y, sign det J, log|det J|, min_cos)``.

    Traceable jax function; the Jacobian comes from one forward-mode pass per
    tangent basis vector.
    """
    y, cols, basis, min_cos = _pushforward_basis(struct, params, hyper, x)
    J = jnp.einsum("nda,ndb->nab", struct.manifold.tangent_basis(y), cols)
    sign, logabs = _slogdet(J)
    # a block that fixes x and its tangent basis exactly is the identity there
    fixed = jnp.all(y == x, axis=-1) & jnp.all(cols == basis, axis=(-2, -1))
    return y, jnp.where(fixed, 1.0, sign), jnp.where(fixed, 0.0, logabs), min_cos


def _uniform_layers(struct: BlockStructure, params) -> bool:
    layers, _ = params
    return len(set(struct.hards)) == 1 and len({p.shape for p, _ in layers}) == 1


def pack_block(params):
    layers, logits = params
    return (jnp.stack([p for p, _ in layers]), jnp.stack([a for _, a in layers]), logits)


def flow_step(structs, params_list, hypers, x, active=None):
    """Push ``x`` through a sequence of blocks, accumulating log-determinants.

    Returns ``(y, log|det J|, sign det J, min_cos)`` of the composite map.
    Identically structured blocks are stacked and iterated with ``lax.scan``.
    ``active`` optionally masks blocks: a block with ``active == 0`` passes
    its input through unchanged and receives exactly zero gradient, so
    flows of different depths can share one compiled program.
    """
    n = x.shape[0]
    carry = (x, jnp.zeros(n, x.dtype), jnp.ones(n, x.dtype), jnp.ones(n, x.dtype))
    if active is None:
        active = jnp.ones(len(structs), dtype=bool)

    def advance(carry, struct, params, hyper, on):
        x, logabs, sign, min_cos = carry
        y, s, la, mc = block_step(struct, params, hyper, x)
        return (
            jnp.where(on, y, x),
            jnp.where(on, logabs + la, logabs),
            jnp.where(on, sign * s, sign),
            jnp.where(on, jnp.minimum(min_cos, mc), min_cos),
        )

    packable = all(_uniform_layers(s, p) for s, p in zip(structs, params_list))
    if packable and len(set(structs)) == 1 and len(structs) > 1:
        packed = [pack_block(p) for p in params_list]
        if len({tuple(a.shape for a in p) for p in packed}) == 1:
            stacked = jax.tree_util.tree_map(lambda *a: jnp.stack(a), *packed)
            stacked_hyper = jax.tree_util.tree_map(lambda *a: jnp.stack(a), *hypers)
            carry, _ = jax.lax.scan(
                jax.checkpoint(lambda c, ph: (advance(c, structs[0], *ph), None)),
                carry,
                (stacked, stacked_hyper, jnp.asarray(active)),
            )
            return carry
    for t, (struct, params, hyper) in enumerate(zip(structs, params_list, hypers)):
        params = pack_block(params) if _uniform_layers(struct, params) else params
        carry = advance(carry, struct, params, hyper, active[t])
    return carry


_flow_step_jit = jax.jit(flow_step, static_argnums=0)


@lru_cache(maxsize=64)
def _jacobian_fn(struct: BlockStructure):
    def jac(params, hyper, x):
        y, cols, _, min_cos = _pushforward_basis(struct, params, hyper, x)
        return jnp.einsum("nda,ndb->nab", struct.manifold.tangent_basis(y), cols), min_cos

    return jax.jit(jac)


def _chunked(fn, x, chunk=_CHUNK):
    """Apply a jitted batch function in fixed-size chunks (padding the last one)."""
    n = x.shape[0]
    if n == 0:
        return None
    outs = []
    for start in range(0, n, chunk):
        part = x[start : start + chunk]
        pad = min(chunk, n) - part.shape[0] if n > chunk else 0
        if pad:
            part = np.concatenate([part, np.repeat(part[-1:], pad, axis=0)])
        res = fn(jnp.asarray(part))
        res = [np.asarray(r) for r in res]
        outs.append([r[: r.shape[0] - pad] if pad else r for r in res])
    return [np.concatenate(col) for col in zip(*outs)]


# ---------------------------------------------------------------------------
# flows


@dataclass(frozen=True, eq=False)
class Flow:
    """Composition ``s = s_T o ... o s_1`` of exponential-map blocks.

    ``direction`` records how the flow is used: ``"forward"`` maps base
    samples to the target (reverse-KL training), ``"backward"`` maps data to
    the base (likelihood training).
    """

    blocks: tuple
    direction: str = "forward"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ValueError("a flow needs at least one block")
        if any(b.manifold != blocks[0].manifold for b in blocks):
            raise ValueError("all blocks must share one manifold")
        if self.direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        object.__setattr__(self, "blocks", blocks)

    @property
    def manifold(self) -> Manifold:
        return self.blocks[0].manifold

    @property
    def T(self) -> int:
        return len(self.blocks)

    @property
    def structures(self) -> tuple:
        return tuple(BlockStructure.of(b) for b in self.blocks)

    def params(self):
        return [block_params(b) for b in self.blocks]

    def hypers(self):
        return [block_hyper(b) for b in self.blocks]

    def to_json(self) -> dict[str, Any]:
        return {
            "manifold": self.manifold.to_json(),
            "blocks": [b.to_json() for b in self.blocks],
            "direction": self.direction,
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, data: dict) -> "Flow":
        m = manifold_from_json(data["manifold"])
        blocks = tuple(BlockPotential.from_json(m, b) for b in data["blocks"])
        return cls(blocks, data.get("direction", "forward"), dict(data.get("meta", {})))

    @classmethod
    def load(cls, path) -> "Flow":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def identity_block(manifold: Manifold) -> BlockPotential:
    """A block whose potential is identically zero: one component with ``alpha = 0`` behind a hard ReLU."""
    y = np.zeros(manifold.ambient_dim)
    for s in manifold.slices:
        y[s.start] = 1.0
    return BlockPotential.single(DiscretePotential(manifold, y[None], [0.0], 0.0), identity_relu=True)


def identity_flow(manifold: Manifold, T: int = 1, direction: str = "forward") -> Flow:
    return Flow(tuple(identity_block(manifold) for _ in range(T)), direction)


# ---------------------------------------------------------------------------
# public operations


def _raise_cut(min_cos, what):
    if np.any(np.asarray(min_cos) <= -1.0 + CUT_LOCUS_TOL):
        raise CutLocusError(f"{what}: point antipodal to a potential component")


def apply_block(b: BlockPotential, x):
    """``s(x) = exp_x(-grad phi(x))`` for one point or a batch."""
    xb, single = _as_batch(b.manifold, x)
    with np.errstate(invalid="ignore"):  # nan at a cut locus is reported below
        y, min_cos = block_map_kernel(BlockStructure.of(b), b.arrays(), (b.gammas, b.relu_gamma), xb)
    _raise_cut(min_cos, "apply_block")
    return y[0] if single else y


def apply_flow(f: Flow, x):
    """Apply blocks in order ``s_1`` first."""
    for b in f.blocks:
        x = apply_block(b, x)
    return x


def block_jacobian(b: BlockPotential, x):
    """``d x d`` Jacobian matrices of the block in tangent bases at ``x`` and ``s(x)``."""
    xb, single = _as_batch(b.manifold, x)
    fn = _jacobian_fn(BlockStructure.of(b))
    params, hyper = block_params(b), block_hyper(b)
    J, min_cos = _chunked(lambda z: fn(params, hyper, z), xb)
    _raise_cut(min_cos, "block_jacobian")
    return J[0] if single else J


@lru_cache(maxsize=64)
def _map_and_jacobian_fn(struct: BlockStructure):
    def fn(params, hyper, x):
        y, cols, _, min_cos = _pushforward_basis(struct, params, hyper, x)
        return y, jnp.einsum("nda,ndb->nab", struct.manifold.tangent_basis(y), cols), min_cos

    return jax.jit(fn)


class InverseResult(NamedTuple):
    points: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


def invert_block(
    b: BlockPotential, y, tol: float = 1e-11, max_iter: int = 60, seeds: int = 4096, rng_seed: int = 0
) -> InverseResult:
    """Solve ``s(x) = y`` by damped Riemannian Newton iterations.

    Each ``x`` starts at the seed point (one of ``seeds`` uniform points)
    whose image is closest to ``y``.  A step solves
    ``J dx = log_{s(x)} y`` in the tangent bases, moves along ``exp_x`` and
    is halved until the residual distance decreases.  Points whose residual
    stays above ``tol`` are flagged, not raised.
    """
    m = b.manifold
    yb, _ = _as_batch(m, y)
    fn = _map_and_jacobian_fn(BlockStructure.of(b))
    params, hyper = block_params(b), block_hyper(b)

    def evaluate(z):
        # pad to a few fixed sizes so shrinking active sets reuse compiled programs
        n = len(z)
        size = next((b for b in _BUCKETS if b >= n), _CHUNK)
        pad = -n % size
        if pad:
            z = np.concatenate([z, np.repeat(z[-1:], pad, axis=0)])
        return [col[:n] for col in _chunked(lambda w: fn(params, hyper, w), z)]

    def forward(z, rows):
        sz, J, _ = evaluate(z)
        r = m.log_map(sz, yb[rows])
        return sz, J, r, np.linalg.norm(r, axis=-1)

    all_rows = np.arange(len(yb))
    cand = m.sample_uniform(np.random.default_rng(rng_seed), seeds)
    img = evaluate(cand)[0]
    # nearest image by squared chord length (a matrix product), enough for a warm start
    half_sq = 0.5 * np.sum(img * img, axis=1)
    x = np.concatenate([cand[np.argmax(yb[s0 : s0 + 4096] @ img.T - half_sq, axis=1)] for s0 in range(0, len(yb), 4096)])
    sx, J, r, res = forward(x, all_rows)
    live = np.ones(len(yb), dtype=bool)  # cleared once a step fails every halving
    for _ in range(max_iter):
        rows = np.flatnonzero((res > tol) & live)
        if rows.size == 0:
            break
        rhs = np.einsum("nda,nd->na", m.tangent_basis(sx[rows]), r[rows])
        dx = np.linalg.solve(J[rows], rhs[..., None])[..., 0]
        v = np.einsum("nda,na->nd", m.tangent_basis(x[rows]), dx)
        scale = 1.0
        for _ in range(8):
            trial = m.exp_map(x[rows], scale * v)
            out = forward(trial, rows)
            accept = out[3] < res[rows]
            hit = rows[accept]
            x[hit], sx[hit], J[hit], r[hit], res[hit] = (o[accept] for o in (trial, *out))
            rows, v = rows[~accept], v[~accept]
            if rows.size == 0:
                break
            scale *= 0.5
        live[rows] = False
    return InverseResult(x, res, res <= tol)


def invert_flow(f: Flow, y, tol: float = 1e-11, max_iter: int = 100) -> InverseResult:
    """Invert the blocks in reverse order; ``converged`` requires every block to converge."""
    yb, _ = _as_batch(f.manifold, y)
    ok = np.ones(len(yb), dtype=bool)
    worst = np.zeros(len(yb))
    for b in reversed(f.blocks):
        inv = invert_block(b, yb, tol, max_iter)
        yb, ok, worst = inv.points, ok & inv.converged, np.maximum(worst, inv.residual)
    return InverseResult(yb, worst, ok)


def flow_forward(f: Flow, x, chunk: int = _CHUNK):
    """Batched ``(s(x), log|det J|, sign det J, min_cos)`` without error checks."""
    xb, _ = _as_batch(f.manifold, x)
    structs, params, hypers = f.structures, f.params(), f.hypers()
    return _chunked(lambda z: _flow_step_jit(structs, params, hypers, z), xb, chunk)


def _checked_logdet(f: Flow, x, what):
    xb, single = _as_batch(f.manifold, x)
    _, logabs, _, min_cos = flow_forward(f, xb)
    _raise_cut(min_cos, what)
    if np.any(logabs < SINGULAR_LOGDET):
        raise SingularJacobianError(f"{what}: |det J| < 1e-300")
    return float(logabs[0]) if single else logabs


def block_jacobian_logdet(b: BlockPotential, x):
    """``log|det J|`` of one block; raises :class:`SingularJacobianError` if ``|det J| < 1e-300``."""
    return _checked_logdet(Flow((b,)), x, "block_jacobian_logdet")


def flow_logdet(f: Flow, x):
    """Sum of block log-determinants along the running intermediate points."""
    return _checked_logdet(f, x, "flow_logdet")


def transport_geodesic(b: BlockPotential, x, steps: int):
    """Points ``exp_x(-l grad phi(x))`` for ``l = 0, 1/steps, ..., 1``; shape ``(steps + 1, D)``."""
    from rcpm.potential import grad_block_potential

    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=float)
    v = -grad_block_potential(b, x)
    ls = np.linspace(0.0, 1.0, steps + 1)
    if not np.any(v):
        return np.repeat(x[None], steps + 1, axis=0)
    pts = b.manifold.exp_map(np.broadcast_to(x, (steps + 1, x.size)), ls[:, None] * v[None])
    pts[0] = x
    return pts


class SampleResult(NamedTuple):
    points: np.ndarray
    log_density: np.ndarray
    rejected: int


@dataclass(frozen=True, eq=False)
class PushedDensity:
    """Density of a flow model built from a base density.

    For a ``backward`` flow, ``log_density(x) = log base(s(x)) + log|det J_s(x)|``.
    For a ``forward`` flow, ``log_density(y) = log base(x) - log|det J_s(x)|``
    with ``x = s^{-1}(y)`` found by :func:`invert_flow`; points where the
    inversion does not converge get ``nan``.
    """

    base: Any
    flow: Flow

    def log_density(self, x, cut: str = "raise"):
        """Log-density at ``x``.

        ``cut`` selects what happens where the map passes within the
        cut-locus tolerance of a component: ``"raise"`` a
        :class:`CutLocusError`, return ``"nan"``, or ``"evaluate"`` the
        (finite) formula anyway, e.g. for grid quadrature.
        """
        if cut not in ("raise", "nan", "evaluate"):
            raise ValueError("cut must be 'raise', 'nan' or 'evaluate'")
        xb, single = _as_batch(self.flow.manifold, x)
        if self.flow.direction == "backward":
            y, logabs, _, min_cos = flow_forward(self.flow, xb)
            out = np.asarray(self.base.log_density(y)) + logabs
        else:
            inv = invert_flow(self.flow, xb)
            _, logabs, _, min_cos = flow_forward(self.flow, inv.points)
            out = np.where(inv.converged, np.asarray(self.base.log_density(inv.points)) - logabs, np.nan)
        on_cut = min_cos <= -1.0 + CUT_LOCUS_TOL
        if cut == "raise":
            _raise_cut(min_cos, "log_density")
        elif cut == "nan":
            out = np.where(on_cut, np.nan, out)
        return float(out[0]) if single else out

    def sample(self, rng: np.random.Generator, n: int, max_rounds: int = 100) -> SampleResult:
        """Draw ``n`` samples; points hitting a cut locus are rejected and redrawn."""
        if self.flow.direction != "forward":
            raise ValueError("sampling needs a forward flow")
        D = self.flow.manifold.ambient_dim
        pts, lps, rejected = [np.zeros((0, D))], [np.zeros(0)], 0
        need = n
        for _ in range(max_rounds):
            if need <= 0:
                break
            x = self.base.sample(rng, need)
            y, logabs, _, min_cos = flow_forward(self.flow, x)
            ok = (min_cos > -1.0 + CUT_LOCUS_TOL) & np.isfinite(logabs)
            rejected += int(np.sum(~ok))
            pts.append(y[ok])
            lps.append(np.asarray(self.base.log_density(x))[ok] - logabs[ok])
            need -= int(np.sum(ok))
        if need > 0:
            raise RuntimeError(f"could not draw {n} valid samples in {max_rounds} rounds")
        return SampleResult(np.concatenate(pts)[:n], np.concatenate(lps)[:n], rejected)
