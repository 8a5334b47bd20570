"""Brute-force oracles for the theory behind RCPM flows.

Everything here works on grids and finite differences with plain numpy and
the closed-form ``arctan2`` distance; none of it goes through the jax
machinery it is meant to audit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from rcpm.flow import SINGULAR_LOGDET, Flow, PushedDensity, apply_block, apply_flow, flow_forward
from rcpm.manifold import CUT_LOCUS_TOL, Manifold, Sphere
from rcpm.potential import DiscretePotential, grad_potential

_CHUNK = 1 << 22  # pairwise entries per chunk


class _Report:
    def to_json(self) -> dict[str, Any]:
        return _plain(self.__dict__)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, _Report):
        return obj.to_json()
    return obj


def pairwise_cost(manifold: Manifold, x, y) -> np.ndarray:
    """``c(x_i, y_j) = d(x_i, y_j)^2 / 2`` for all pairs, shape ``(len(x), len(y))``."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    rows = max(1, _CHUNK // max(1, y.shape[0]))
    out = np.empty((x.shape[0], y.shape[0]))
    for s in range(0, x.shape[0], rows):
        out[s : s + rows] = 0.5 * manifold.distance(x[s : s + rows, None, :], y[None, :, :]) ** 2
    return out


def _min_plus(manifold, x, y, offsets):
    """``min_j c(x_i, y_j) + offsets_j`` without materialising the full matrix."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    out = np.empty(x.shape[0])
    rows = max(1, _CHUNK // max(1, y.shape[0]))
    for s in range(0, x.shape[0], rows):
        out[s : s + rows] = np.min(pairwise_cost(manifold, x[s : s + rows], y) + offsets[None, :], axis=1)
    return out


# ---------------------------------------------------------------------------
# grid functions and the c-transform


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values of a function at the nodes of a chart grid of ``manifold``.

    ``res`` is the resolution per chart dimension (``S^2`` uses ``res`` by
    ``2 res`` nodes); ``spacing`` is the largest geodesic node spacing.
    """

    manifold: Manifold
    res: int
    points: np.ndarray
    values: np.ndarray

    @classmethod
    def sample(cls, manifold: Manifold, res: int, fn) -> "GridFunction":
        if res < 1:
            raise ValueError("res must be positive")
        _, pts, _ = manifold.chart_grid(res)
        return cls(manifold, res, pts, np.asarray(fn(pts), dtype=float))

    @property
    def spacing(self) -> float:
        # S^1 nodes are 2 pi / res apart; S^2 midpoints are pi / res apart in both chart angles
        per = [2 * math.pi / self.res if f.n == 1 else math.pi / self.res for f in self.manifold.factors]
        return float(math.sqrt(sum(h * h for h in per)))

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.manifold, self.res, self.points, np.asarray(values, dtype=float))


def c_transform(g: GridFunction, at=None):
    """``psi^c(y) = min_x (c(x, y) - psi(x))`` with the minimum over the grid nodes ``x``.

    Evaluated at the grid nodes (returns a :class:`GridFunction`) or at the
    points ``at`` (returns an array).
    """
    if at is None:
        return g.with_values(_min_plus(g.manifold, g.points, g.points, -g.values))
    return _min_plus(g.manifold, np.atleast_2d(at), g.points, -g.values)


def discrete_lipschitz(g: GridFunction) -> float:
    """Largest ``|g(x) - g(y)| / d(x, y)`` over pairs of nearest-neighbour nodes."""
    d = np.sqrt(2 * pairwise_cost(g.manifold, g.points, g.points))
    np.fill_diagonal(d, np.inf)
    nn = np.argmin(d, axis=1)
    return float(np.max(np.abs(g.values - g.values[nn]) / d[np.arange(len(nn)), nn]))


@dataclass
class InvolutionReport(_Report):
    res: int
    defect: float
    bound: float
    spacing: float
    passed: bool


def involution_check(p: DiscretePotential, res: int, test_res: int | None = None) -> InvolutionReport:
    """``max |phi^cc - phi|`` with both transforms taken over a grid of ``res`` nodes.

    The defect is measured at the grid nodes, or on the chart grid of
    resolution ``test_res`` when given (the discretisation error between
    nodes).  The bound is ``2 |M| h`` with ``h`` the node spacing.
    """
    if p.gamma != 0:
        raise ValueError("the involution oracle needs a hard-min potential")
    m = p.manifold
    phi = GridFunction.sample(m, res, lambda x: _hard_value(p, x))
    phi_c = c_transform(phi)
    test = phi.points if test_res is None else m.chart_grid(test_res)[1]
    phi_cc = c_transform(phi_c, at=test)
    defect = float(np.max(np.abs(phi_cc - _hard_value(p, test))))
    bound = 2 * m.diameter * phi.spacing
    return InvolutionReport(res, defect, bound, phi.spacing, bool(defect <= bound))


def _hard_value(p: DiscretePotential, x):
    """``min_i c(x, y_i) + alpha_i`` via the independent distance formula."""
    return _min_plus(p.manifold, x, p.points, p.alpha)


# ---------------------------------------------------------------------------
# epsilon nets


def uniform_circle_net(m: int, phase: float = 0.0) -> np.ndarray:
    """``m`` equally spaced points of ``S^1``; covering radius ``pi / m``."""
    t = phase + 2 * math.pi * np.arange(m) / m
    return np.stack([np.cos(t), np.sin(t)], axis=-1)


def fibonacci_sphere_net(m: int) -> np.ndarray:
    """Fibonacci lattice of ``m`` points on ``S^2``."""
    i = np.arange(m) + 0.5
    z = 1 - 2 * i / m
    phi = math.pi * (3 - math.sqrt(5)) * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def covering_radius(manifold: Manifold, net, probe_res: int = 256) -> float:
    """Largest distance from a probe-grid node to its nearest net point."""
    _, probes, _ = manifold.chart_grid(probe_res)
    return float(np.sqrt(2 * np.max(_min_plus(manifold, probes, net, np.zeros(len(net))))))


def default_net(manifold: Manifold, m: int):
    """``(net, epsilon)``: equally spaced on ``S^1``, Fibonacci on ``S^2``."""
    if manifold == Sphere(1):
        return uniform_circle_net(m), math.pi / m
    if manifold == Sphere(2):
        net = fibonacci_sphere_net(m)
        return net, covering_radius(manifold, net)
    raise ValueError("nets are provided for S^1 and S^2")


def c_transform_of_potential(p: DiscretePotential, y, dense_res: int) -> np.ndarray:
    """``phi^c(y) = inf_x c(x, y) - phi(x)`` for a hard potential, refined around the grid minimiser.

    The infimum is first taken over a dense grid and then polished by a
    golden-section search on ``S^1``; the returned values never exceed the
    grid minimum.
    """
    m = p.manifold
    grid = GridFunction.sample(m, dense_res, lambda x: _hard_value(p, x))
    y = np.atleast_2d(y)
    cost = pairwise_cost(m, grid.points, y) - grid.values[:, None]
    best = np.min(cost, axis=0)
    if m != Sphere(1):
        return best
    # golden-section search on the bracket of width 2h around each grid argmin
    h = 2 * math.pi / dense_res
    t0 = (np.argmin(cost, axis=0) + 0.5) * h
    lo, hi = t0 - h, t0 + h
    ty = np.arctan2(y[:, 1], y[:, 0])

    def f(t):
        x = np.stack([np.cos(t), np.sin(t)], axis=-1)
        d = np.abs(np.angle(np.exp(1j * (t - ty))))
        return 0.5 * d * d - _hard_value(p, x)

    g = (math.sqrt(5) - 1) / 2
    a, b = hi - g * (hi - lo), lo + g * (hi - lo)
    fa, fb = f(a), f(b)
    for _ in range(60):
        left = fa < fb  # minimum lies in [lo, b]
        lo, hi = np.where(left, lo, a), np.where(left, b, hi)
        a, b = hi - g * (hi - lo), lo + g * (hi - lo)
        fa, fb = f(a), f(b)
    return np.minimum(best, f(0.5 * (lo + hi)))


@dataclass
class NetRow(_Report):
    m: int
    epsilon: float
    sup_error: float
    min_gap: float
    bound: float
    within_bound: bool
    above_target: bool


@dataclass
class EpsilonNetReport(_Report):
    rows: list
    slack: float
    monotone: bool
    passed: bool


def epsilon_net_approximation(
    target: DiscretePotential, net_sizes, dense_res: int = 8192, test_res: int = 4096, slack: float | None = None
) -> EpsilonNetReport:
    """Approximate a c-concave target by a discrete potential on an epsilon-net.

    For each net ``{y_i}`` of size ``m`` builds ``phi_eps(x) = min_i c(x, y_i) - phi^c(y_i)``
    and reports ``sup |phi_eps - phi|`` on a test grid, the smallest gap
    ``phi_eps - phi`` (non-negative in exact arithmetic) and the bound
    ``2 |M| eps``.  ``slack`` absorbs the error of the numerical c-transform
    (default: the Lipschitz bound ``|M| h`` of the dense grid).
    """
    if target.gamma != 0:
        raise ValueError("the target must be a hard-min potential")
    m_ = target.manifold
    _, test, _ = m_.chart_grid(test_res)
    exact = _hard_value(target, test)
    dense_h = GridFunction.sample(m_, dense_res, lambda x: np.zeros(len(x))).spacing
    slack = m_.diameter * dense_h if slack is None else slack
    rows = []
    for m in net_sizes:
        net, eps = default_net(m_, int(m))
        phi_c = c_transform_of_potential(target, net, dense_res)
        approx = _min_plus(m_, test, net, -phi_c)
        gap = approx - exact
        bound = 2 * m_.diameter * eps
        sup = float(np.max(np.abs(gap)))
        rows.append(NetRow(int(m), eps, sup, float(np.min(gap)), bound, sup <= bound + slack, float(np.min(gap)) >= -slack))
    sups = [r.sup_error for r in rows]
    monotone = all(b <= a + slack for a, b in zip(sups, sups[1:]))
    passed = monotone and all(r.within_bound and r.above_target for r in rows)
    return EpsilonNetReport(rows, slack, monotone, passed)


@dataclass
class GradientConvergenceReport(_Report):
    net_sizes: list
    max_error: list
    skip_fraction: float
    monotone: bool
    passed: bool


def gradient_convergence(
    target: DiscretePotential,
    net_sizes,
    n_points: int = 1000,
    margin: float = 1e-2,
    dense_res: int = 8192,
    rng: np.random.Generator | None = None,
) -> GradientConvergenceReport:
    """Compare ``grad phi_eps`` with ``grad phi`` at random smooth points of ``phi``.

    Points whose best and second-best pieces of ``phi`` are within
    ``margin`` are skipped (and counted).  No rate is asserted, only a
    non-increasing maximum error.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    m_ = target.manifold
    x = m_.sample_uniform(rng, n_points)
    pieces = np.sort(pairwise_cost(m_, x, target.points) + target.alpha[None, :], axis=1)
    keep = pieces[:, 1] - pieces[:, 0] > margin if target.m > 1 else np.ones(n_points, bool)
    x = x[keep]
    exact = grad_potential(target, x)
    errors = []
    for m in net_sizes:
        net, _ = default_net(m_, int(m))
        phi_c = c_transform_of_potential(target, net, dense_res)
        approx = grad_potential(DiscretePotential(m_, net, -phi_c, 0.0), x)
        errors.append(float(np.max(np.linalg.norm(approx - exact, axis=-1))))
    monotone = all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
    return GradientConvergenceReport(list(map(int, net_sizes)), errors, float(1 - keep.mean()), monotone, monotone)


# ---------------------------------------------------------------------------
# push-forward and Jacobian audits


def _bins(manifold: Manifold, res: int):
    """Chart-bin edges: ``S^1`` factors get ``res`` bins, ``S^2`` factors ``res x 2 res``."""
    edges = []
    for f in manifold.factors:
        if f.n == 1:
            edges.append(np.linspace(0, 2 * math.pi, res + 1))
        elif f.n == 2:
            edges.extend([np.linspace(0, math.pi, res + 1), np.linspace(0, 2 * math.pi, 2 * res + 1)])
        else:
            raise ValueError("binning is defined for S^1 and S^2 factors")
    return edges


def binned_target_mass(manifold: Manifold, log_density, res: int, sub: int = 4) -> np.ndarray:
    """Probability of every chart bin, by midpoint quadrature with ``sub`` nodes per bin side."""
    _, pts, w = manifold.chart_grid(res * sub)
    dens = np.exp(np.asarray(log_density(pts))) * w
    shape = []
    for f in manifold.factors:
        shape.extend([res * sub] if f.n == 1 else [res * sub, 2 * res * sub])
    grid = dens.reshape(shape)
    for axis in range(len(shape)):
        grid = grid.reshape(grid.shape[:axis] + (grid.shape[axis] // sub, sub) + grid.shape[axis + 1 :]).sum(axis=axis + 1)
    return grid / grid.sum()


def histogram(manifold: Manifold, points, res: int) -> np.ndarray:
    counts, _ = np.histogramdd(manifold.to_chart(points), bins=_bins(manifold, res))
    return counts / max(1, len(points))


def multinomial_tv_noise(probs, n: int, reps: int = 200, seed: int = 0):
    """Mean and standard deviation of the TV distance between ``probs`` and an ``n``-sample histogram."""
    p = np.asarray(probs, dtype=float).ravel()
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    tv = np.array([0.5 * np.abs(rng.multinomial(n, p) / n - p).sum() for _ in range(reps)])
    return float(tv.mean()), float(tv.std(ddof=1))


@dataclass
class PushforwardReport(_Report):
    tv: float
    n_samples: int
    res: int
    rejected: int
    noise_mean: float
    noise_sd: float


def pushforward_check(f: Flow, base, target, res: int = 32, n: int = 100_000, seed: int = 0) -> PushforwardReport:
    """Total-variation distance between the binned push-forward of ``base`` and the binned target.

    Also reports the multinomial noise level of an ``n``-sample histogram of
    the target itself, the floor below which TV cannot be resolved.
    """
    if n < 100_000:
        raise ValueError("the push-forward check needs at least 1e5 samples")
    rng = np.random.default_rng(seed)
    res_ = PushedDensity(base, f).sample(rng, n)
    p = histogram(f.manifold, res_.points, res)
    q = binned_target_mass(f.manifold, target.log_density, res)
    noise_mean, noise_sd = multinomial_tv_noise(q, n, seed=seed)
    return PushforwardReport(float(0.5 * np.abs(p - q).sum()), n, res, res_.rejected, noise_mean, noise_sd)


@dataclass
class LogdetAudit(_Report):
    n: int
    min_logdet: float
    max_logdet: float
    all_positive: bool
    n_nonpositive: int
    n_singular: int
    n_cutlocus: int
    first_offender: list | None
    notes: list = field(default_factory=list)


def logdet_positivity_audit(f: Flow, n: int = 100_000, seed: int = 0) -> LogdetAudit:
    """Sign and magnitude of ``det J`` of the composite map at ``n`` uniform points."""
    rng = np.random.default_rng(seed)
    x = f.manifold.sample_uniform(rng, n)
    _, logabs, sign, min_cos = flow_forward(f, x)
    cut = min_cos <= -1.0 + CUT_LOCUS_TOL
    singular = ~np.isfinite(logabs) | (logabs < SINGULAR_LOGDET)
    bad = (sign <= 0) | singular | cut
    notes = []
    if any(lay.gamma == 0 and lay.m > 1 for b in f.blocks for lay in b.layers):
        notes.append("hard-min potentials give piecewise-constant transport with degenerate Jacobians")
    if singular.any():
        notes.append(f"{int(singular.sum())} points with |det J| < 1e-300 (non-smooth or collapsing map)")
    finite = logabs[np.isfinite(logabs)]
    idx = np.flatnonzero(bad)
    return LogdetAudit(
        n,
        float(finite.min()) if finite.size else float("-inf"),
        float(finite.max()) if finite.size else float("-inf"),
        not bool(bad.any()),
        int(np.sum(sign <= 0)),
        int(singular.sum()),
        int(cut.sum()),
        x[idx[0]].tolist() if idx.size else None,
        notes,
    )


def fd_jacobian(manifold: Manifold, fn, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a manifold map in the tangent bases at ``x`` and ``fn(x)``.

    Steps are geodesic, ``exp_x(+-h e_b)``; output differences are taken as
    ``log_y`` of the perturbed images and projected on the basis at ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = fn(x[None])[0]
    E, Ey = manifold.tangent_basis(x), manifold.tangent_basis(y)
    cols = []
    for b in range(E.shape[-1]):
        step = h * E[:, b]
        plus = fn(manifold.exp_map(x, step)[None])[0]
        minus = fn(manifold.exp_map(x, -step)[None])[0]
        diff = manifold.log_map(y, plus) - manifold.log_map(y, minus)
        cols.append(Ey.T @ diff / (2 * h))
    return np.stack(cols, axis=-1)


def fd_block_jacobian(b, x, h: float = 1e-5) -> np.ndarray:
    return fd_jacobian(b.manifold, lambda z: apply_block(b, z), x, h)


def fd_flow_logdet(f: Flow, x, h: float = 1e-5) -> float:
    """``log|det J|`` of the composite map from one finite-difference Jacobian."""
    J = fd_jacobian(f.manifold, lambda z: apply_flow(f, z), x, h)
    return float(np.linalg.slogdet(J)[1])


def smooth_margin(p: DiscretePotential, x) -> np.ndarray:
    """Gap between the best and second-best pieces of a hard potential (``inf`` for ``m = 1``)."""
    x = np.atleast_2d(x)
    if p.m == 1:
        return np.full(len(x), np.inf)
    pieces = np.sort(pairwise_cost(p.manifold, x, p.points) + p.alpha[None, :], axis=1)
    return pieces[:, 1] - pieces[:, 0]


__all__ = [
    "GridFunction",
    "c_transform",
    "c_transform_of_potential",
    "covering_radius",
    "discrete_lipschitz",
    "epsilon_net_approximation",
    "fd_block_jacobian",
    "fd_flow_logdet",
    "fd_jacobian",
    "fibonacci_sphere_net",
    "gradient_convergence",
    "involution_check",
    "logdet_positivity_audit",
    "multinomial_tv_noise",
    "pushforward_check",
    "smooth_margin",
    "uniform_circle_net",
]
