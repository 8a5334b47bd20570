"""Training of RCPM flows by reverse KL or maximum likelihood.

The optimiser is Adam on the ambient parameters.  Gradients of the
component locations are projected onto the tangent spaces before the
moment updates, and points are retracted onto the manifold (per-factor
normalisation) after every step.  Mixing logits and offsets are updated as
plain Euclidean parameters.
"""
from __future__ import annotations

import dataclasses
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from rcpm.densities import Density, density_from_json
from rcpm.diffengine import LossSpec, batch_loss, flow_with_params, loss_value
from rcpm.errors import ConfigError, InvalidBatchError, NonFiniteLossError
from rcpm.flow import Flow, PushedDensity, flow_forward
from rcpm.manifold import CUT_LOCUS_TOL, Manifold, manifold_from_json
from rcpm.potential import BlockPotential, DiscretePotential

# Ranges of the reference hyper-parameter sweep; leaving them only warns.
SWEEP_RANGES = {
    "lr": (1e-6, 1e-1),
    "components": (50, 1000),
    "alpha_min": (1e-5, 10.0),
    "alpha_range": (1e-3, 1.0),
}
SWEEP_CHOICES = {
    "beta1": (0.1, 0.3, 0.5, 0.7, 0.9),
    "beta2": (0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999),
    "gamma": (0.01, 0.05, 0.1, 0.5),
    "relu_gamma": (None, 0.01, 0.05, 0.1, 0.5),
}


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one training run.

    ``relu_gamma`` is the temperature of the concave ReLU: ``None`` disables
    the identity-initialisation ReLU (inner ReLUs of multi-layer blocks are
    then hard), a number enables it with that softness (``0`` = hard, which
    makes the initial flow exactly the identity when ``alpha_min >= 0``).
    """

    manifold: dict
    target: dict
    base: dict = field(default_factory=lambda: {"kind": "uniform"})
    loss: str = "kl"
    blocks: int = 5
    layers: int = 1
    components: int = 100
    gamma: float = 0.1
    relu_gamma: float | None = None
    alpha_min: float = 0.1
    alpha_range: float = 0.5
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_final: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    steps: int = 1000
    seed: int = 0
    eval_samples: int = 100_000
    eval_seed: int = 12345

    def __post_init__(self):
        problems = []
        if self.loss not in ("kl", "nll"):
            problems.append(f"loss must be 'kl' or 'nll', got {self.loss!r}")
        for name in ("blocks", "layers", "components", "batch_size"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                problems.append(f"{name} must be a positive integer")
        for name in ("steps", "eval_samples", "seed", "eval_seed"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                problems.append(f"{name} must be a non-negative integer")
        if self.gamma < 0:
            problems.append("gamma must be non-negative")
        if self.relu_gamma is not None and self.relu_gamma < 0:
            problems.append("relu_gamma must be non-negative or null")
        if self.alpha_range < 0:
            problems.append("alpha_range must be non-negative")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            problems.append("lr_schedule must be 'constant' or 'cosine'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            problems.append("eps must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = sorted(n for n in ("manifold", "target") if n not in data)
        if missing:
            raise ConfigError(f"missing config keys: {', '.join(missing)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(data)

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def sweep_warnings(self) -> list[str]:
        """Settings outside the reference sweep (guidance, not constraints)."""
        out = []
        for name, (lo, hi) in SWEEP_RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                out.append(f"{name}={v} is outside the sweep range [{lo}, {hi}]")
        for name, choices in SWEEP_CHOICES.items():
            v = getattr(self, name)
            if v not in choices:
                out.append(f"{name}={v} is not one of the sweep values {list(choices)}")
        return out

    def build(self):
        """``(manifold, base, target)`` densities described by the config."""
        try:
            m = manifold_from_json(self.manifold)
            base = density_from_json(self.base, m)
            target = density_from_json(self.target, m)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid density or manifold description: {exc}") from None
        for name, d in (("base", base), ("target", target)):
            if d.manifold != m:
                raise ConfigError(f"the {name} density lives on {d.manifold}, not {m}")
        if not base.has_density:
            raise ConfigError("the base needs a log-density")
        if self.loss == "kl" and not target.has_density:
            raise ConfigError("reverse-KL training needs a target log-density")
        return m, base, target


# ---------------------------------------------------------------------------
# initialisation


def init_flow(config: TrainConfig, manifold: Manifold, rng: np.random.Generator) -> Flow:
    """Random flow: uniform component locations, ``alpha ~ U[alpha_min, alpha_min + alpha_range]``.

    Mixing logits start at zero (``w_k = 1/2``).
    """
    identity = config.relu_gamma is not None
    relu_gamma = 0.0 if config.relu_gamma is None else config.relu_gamma
    blocks = []
    for _ in range(config.blocks):
        layers = tuple(
            DiscretePotential(
                manifold,
                manifold.sample_uniform(rng, config.components),
                rng.uniform(config.alpha_min, config.alpha_min + config.alpha_range, config.components),
                config.gamma,
            )
            for _ in range(config.layers)
        )
        blocks.append(BlockPotential(layers, np.zeros(config.layers - 1), identity, relu_gamma))
    direction = "forward" if config.loss == "kl" else "backward"
    return Flow(tuple(blocks), direction)


def loss_spec(config: TrainConfig, base: Density, target: Density) -> LossSpec:
    return LossSpec("kl", base, target) if config.loss == "kl" else LossSpec("nll", base)


# ---------------------------------------------------------------------------
# optimiser


class AdamState(NamedTuple):
    step: Any
    mu: Any
    nu: Any


def _factor_ops(manifold: Manifold):
    slices = manifold.slices

    def proj(p, g):
        parts = [g[:, s] - jnp.sum(g[:, s] * p[:, s], axis=-1, keepdims=True) * p[:, s] for s in slices]
        return jnp.concatenate(parts, axis=-1)

    def retract(p):
        parts = [p[:, s] / jnp.sqrt(jnp.sum(p[:, s] * p[:, s], axis=-1, keepdims=True)) for s in slices]
        return jnp.concatenate(parts, axis=-1)

    return proj, retract


def _map_points(fn, params, *others):
    """Apply ``fn(points, *other_points)`` to the location arrays of a parameter tree."""
    return [
        ([(fn(p, *[o[b][0][k][0] for o in others]), a) for k, (p, a) in enumerate(layers)], logits)
        for b, (layers, logits) in enumerate(params)
    ]


@lru_cache(maxsize=16)
def _train_step(structs, spec, manifold, beta1, beta2, eps):
    proj, retract = _factor_ops(manifold)
    grad_fn = jax.value_and_grad(lambda p, h, x: batch_loss(structs, spec, p, h, x), has_aux=True)
    tm = jax.tree_util.tree_map

    def step(params, state, hypers, x, lr):
        (loss, (_, valid)), grads = grad_fn(params, hypers, x)
        grads = _map_points(lambda g, p: proj(p, g), grads, params)
        finite = jnp.isfinite(loss) & jax.tree_util.tree_reduce(
            lambda acc, g: acc & jnp.all(jnp.isfinite(g)), grads, jnp.asarray(True)
        )
        t = state.step + 1
        mu = tm(lambda m, g: beta1 * m + (1 - beta1) * g, state.mu, grads)
        nu = tm(lambda v, g: beta2 * v + (1 - beta2) * g * g, state.nu, grads)
        c1, c2 = 1 - beta1**t, 1 - beta2**t
        moved = tm(lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, mu, nu)
        moved = _map_points(retract, moved)
        keep = lambda new, old: tm(lambda a, b: jnp.where(finite, a, b), new, old)  # noqa: E731
        new_state = AdamState(jnp.where(finite, t, state.step), keep(mu, state.mu), keep(nu, state.nu))
        return keep(moved, params), new_state, loss, finite, jnp.sum(~valid)

    return jax.jit(step)


def learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "constant" or config.steps == 0:
        return config.lr
    frac = step / config.steps
    return config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + math.cos(math.pi * frac))


class TraceRow(NamedTuple):
    step: int
    loss: float
    wallclock: float
    skipped: bool
    rejected: int


@dataclass
class EvalReport:
    """Held-out metrics of a trained model.

    ``kl_direction`` is ``"reverse"`` (``KL(model || target)``, forward
    flows) or ``"forward"`` (``KL(target || model)``, backward flows).
    """

    kl_nats: float
    kl_stderr: float
    ess_percent: float
    n_eval: int
    rejected_cutlocus: int
    wallclock_per_iter: float
    kl_direction: str = "reverse"
    notes: list = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


@dataclass
class TrainResult:
    flow: Flow
    report: EvalReport
    trace: list
    warnings: list


def train(config: TrainConfig, base: Density | None = None, target: Density | None = None, progress=None) -> TrainResult:
    """Run Adam for ``config.steps`` steps and evaluate the result.

    Deterministic given the config.  A step whose gradient is not finite is
    skipped and marked in the trace; a non-finite loss aborts with
    :class:`NonFiniteLossError` carrying the step index.  ``progress``, if
    given, is called as ``progress(step, loss)`` after every step.
    """
    manifold, cfg_base, cfg_target = config.build()
    base = cfg_base if base is None else base
    target = cfg_target if target is None else target
    found = config.sweep_warnings()
    for msg in found:
        warnings.warn(msg, stacklevel=2)

    rng = np.random.default_rng(config.seed)
    flow = init_flow(config, manifold, rng)
    spec = loss_spec(config, base, target)
    source = base if config.loss == "kl" else target
    params, hypers = flow.params(), flow.hypers()
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    state = AdamState(jnp.asarray(0), zeros, zeros)
    step_fn = _train_step(flow.structures, spec, manifold, config.beta1, config.beta2, config.eps)

    trace = []
    start = time.perf_counter()
    for step in range(config.steps):
        x = jnp.asarray(source.sample(rng, config.batch_size))
        params, state, loss, finite, rejected = step_fn(params, state, hypers, x, learning_rate(config, step))
        loss = float(loss)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss} at step {step}", step=step)
        trace.append(TraceRow(step, loss, time.perf_counter() - start, not bool(finite), int(rejected)))
        if progress is not None:
            progress(step, loss)
    elapsed = time.perf_counter() - start

    meta = {"config": config.to_json(), "package": "rcpm"}
    trained = dataclasses.replace(flow_with_params(flow, params), meta=meta)
    report = evaluate(trained, base, target, config.eval_samples, config.eval_seed)
    report.wallclock_per_iter = elapsed / config.steps if config.steps else 0.0
    skipped = sum(r.skipped for r in trace)
    if skipped:
        report.notes.append(f"{skipped} steps skipped on non-finite gradients")
    return TrainResult(trained, report, trace, found)


# ---------------------------------------------------------------------------
# losses and metrics


def reverse_kl_loss(f: Flow, base: Density, target: Density, batch) -> float:
    """``mean[log base(x) - log|det J(x)| - log target(s(x))]`` over base samples."""
    return loss_value(f, LossSpec("kl", base, target), batch)


def nll_loss(f: Flow, base: Density, data_batch) -> float:
    """``-mean[log base(s(x)) + log|det J(x)|]`` over data; ``f`` maps data to the base."""
    x = np.asarray(data_batch, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidBatchError("the likelihood needs a non-empty data batch")
    return loss_value(f, LossSpec("nll", base), x)


def ess_from_log_weights(logw) -> float:
    """``100 (sum w)^2 / (n sum w^2)`` from log importance weights."""
    logw = np.asarray(logw, dtype=float)
    if logw.size == 0:
        raise ValueError("ESS needs at least one weight")
    a = logw - np.max(logw)
    w = np.exp(a)
    return float(100.0 * np.sum(w) ** 2 / (logw.size * np.sum(w * w)))


def _forward_eval(f: Flow, base: Density, target: Density, n: int, rng):
    """Log weights ``log target(y) - log model(y)`` at ``y = s(x)``, ``x ~ base``."""
    res = PushedDensity(base, f).sample(rng, n)
    logw = np.asarray(target.log_density(res.points)) - res.log_density
    return logw, res.rejected


def _backward_eval(f: Flow, base: Density, target: Density, n: int, rng):
    """Log weights ``log model(x) - log target(x)`` at ``x ~ target``."""
    x = target.sample(rng, n)
    y, logabs, _, min_cos = flow_forward(f, x)
    ok = min_cos > -1.0 + CUT_LOCUS_TOL
    model = np.asarray(base.log_density(y[ok])) + logabs[ok]
    return model - np.asarray(target.log_density(x[ok])), int(np.sum(~ok))


def evaluate(f: Flow, base: Density, target: Density, n: int = 100_000, seed: int = 12345) -> EvalReport:
    """KL estimate with its Monte-Carlo standard error, and the ESS.

    Forward flows report ``KL(model || target)`` and the ESS of the weights
    ``target / model`` on model samples.  Backward flows report
    ``KL(target || model)`` on target samples and the ESS of ``model / target``.
    """
    if n < 1:
        raise ValueError("evaluation needs at least one sample")
    rng = np.random.default_rng(seed)
    if f.direction == "forward":
        logw, rejected = _forward_eval(f, base, target, n, rng)
        kl_terms, direction = -logw, "reverse"
    else:
        if not (target.can_sample and target.has_density):
            raise ValueError("evaluating a backward flow needs a target that can be sampled and evaluated")
        logw, rejected = _backward_eval(f, base, target, n, rng)
        kl_terms, direction = -logw, "forward"
    kl = float(np.mean(kl_terms))
    se = float(np.std(kl_terms, ddof=1) / math.sqrt(kl_terms.size)) if kl_terms.size > 1 else float("nan")
    return EvalReport(kl, se, ess_from_log_weights(logw), int(kl_terms.size), rejected, 0.0, direction)


def ess(f: Flow, base: Density, target: Density, n: int, seed: int = 0) -> float:
    """Effective sample size (percent) of ``target / model`` weights over ``n`` model samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    logw, _ = _forward_eval(f, base, target, n, np.random.default_rng(seed))
    return ess_from_log_weights(logw)


def kde_log_density(points, bandwidth: float, x, manifold: Manifold | None = None):
    """Gaussian-kernel density estimate on the intrinsic distance (see :class:`~rcpm.densities.KdeFromPoints`)."""
    from rcpm.densities import KdeFromPoints
    from rcpm.manifold import Sphere

    points = np.atleast_2d(np.asarray(points, dtype=float))
    manifold = Sphere(points.shape[1] - 1) if manifold is None else manifold
    x = np.asarray(x, dtype=float)
    out = KdeFromPoints(manifold, points, bandwidth).log_density(np.atleast_2d(x))
    return float(out[0]) if x.ndim == 1 else out
