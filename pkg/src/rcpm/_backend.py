"""Array-namespace dispatch and the inverse-cosine kernels shared by numpy and jax code.

Geometry and potential code is written once against an ``xp`` namespace and
runs either eagerly on numpy arrays (public API, oracles) or traced under
jax (training, Jacobians).  Only the inverse cosine needs a dedicated jax
implementation: XLA's float64 ``acos`` is an order of magnitude slower than
the range-reduced series below on CPU.
"""
import math

import jax
import jax.numpy as jnp
import numpy as np

# cos(theta) within this distance of 1 switches to Taylor series in t = 1 - c.
_SERIES_T = 1e-4

# asin(z) = sum_n binom(2n, n) / (4^n (2n + 1)) z^(2n+1); |z| <= 1/2 after range
# reduction, so 26 terms put the truncation error below 1e-17.
_ASIN_COEFFS = tuple(math.comb(2 * n, n) / (4.0**n * (2 * n + 1)) for n in range(26))


def namespace(*arrays):
    """Return ``jax.numpy`` if any argument is a jax array or tracer, else numpy."""
    for a in arrays:
        if isinstance(a, jax.Array):
            return jnp
    return np


def _asin_half(z):
    u = z * z
    acc = jnp.full_like(u, _ASIN_COEFFS[-1])
    for a in _ASIN_COEFFS[-2::-1]:
        acc = acc * u + a
    return z * acc


@jax.custom_jvp
def acos(c):
    """Inverse cosine for jax arrays, accurate to ~1e-15 on [-1, 1]."""
    hi = c > 0.5
    lo = c < -0.5
    z_hi = jnp.sqrt(jnp.maximum(0.5 * (1.0 - c), 0.0))
    z_lo = jnp.sqrt(jnp.maximum(0.5 * (1.0 + c), 0.0))
    a = _asin_half(jnp.where(hi, z_hi, jnp.where(lo, z_lo, c)))
    return jnp.where(hi, 2.0 * a, jnp.where(lo, jnp.pi - 2.0 * a, 0.5 * jnp.pi - a))


@acos.defjvp
def _acos_jvp(primals, tangents):
    (c,), (dc,) = primals, tangents
    return acos(c), -dc * jax.lax.rsqrt(1.0 - c * c)


def _cost_ratio_np(c):
    c = np.clip(c, -1.0, 1.0)
    t = 1.0 - c
    small = t < _SERIES_T
    cs = np.where(small, 0.5, c)
    th = np.arccos(cs)
    with np.errstate(divide="ignore"):
        ratio = th / np.sqrt(1.0 - cs * cs)
    half_sq = np.where(small, t + t * t / 6 + 2 * t**3 / 45, 0.5 * th * th)
    ratio = np.where(small, 1 + t / 3 + 2 * t * t / 15 + 2 * t**3 / 35, ratio)
    return half_sq, ratio


@jax.custom_jvp
def _cost_ratio_jax(c):
    t = 1.0 - c
    small = t < _SERIES_T
    cs = jnp.where(small, 0.5, c)
    th = acos(cs)
    half_sq = jnp.where(small, t + t * t / 6 + 2 * t**3 / 45, 0.5 * th * th)
    ratio = jnp.where(small, 1 + t / 3 + 2 * t * t / 15 + 2 * t**3 / 35, th * jax.lax.rsqrt(1.0 - cs * cs))
    return half_sq, ratio


@_cost_ratio_jax.defjvp
def _cost_ratio_jvp(primals, tangents):
    (c,), (dc,) = primals, tangents
    half_sq, ratio = _cost_ratio_jax(c)
    t = 1.0 - c
    small = t < _SERIES_T
    cs = jnp.where(small, 0.5, c)
    rs = jnp.where(small, 1.0, ratio)
    # d/dc [theta / sin theta] = (c * ratio - 1) / (1 - c^2)
    slope = jnp.where(small, -(1 / 3 + 4 * t / 15 + 6 * t * t / 35), (cs * rs - 1.0) / (1.0 - cs * cs))
    return (half_sq, ratio), (-ratio * dc, slope * dc)


def cost_ratio(c):
    """Map cosines ``c = <x, y>`` of unit vectors to ``(theta^2 / 2, theta / sin theta)``.

    ``theta = arccos(c)`` is the great-circle angle.  The first output is the
    transport cost of one sphere factor, the second the scalar in
    ``log_x(y) = (theta / sin theta) (y - c x)``.  Both are smooth at ``c = 1``;
    the ratio diverges at the antipode ``c = -1``.
    """
    if namespace(c) is jnp:
        return _cost_ratio_jax(c)
    return _cost_ratio_np(np.asarray(c, dtype=float))


def sigmoid(z):
    xp = namespace(z)
    if xp is jnp:
        return jax.nn.sigmoid(z)
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logsumexp(a, axis=-1):
    xp = namespace(a)
    if xp is jnp:
        return jax.scipy.special.logsumexp(a, axis=axis)
    from scipy.special import logsumexp as _lse

    return _lse(a, axis=axis)
