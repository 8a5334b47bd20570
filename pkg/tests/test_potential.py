import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rcpm.errors import CutLocusError
from rcpm.manifold import Sphere, torus
from rcpm.potential import (
    BlockPotential,
    DiscretePotential,
    active_index,
    component_weights,
    concave_relu,
    eval_block_potential,
    eval_potential,
    grad_block_potential,
    grad_potential,
    potential_from_json,
    soft_min,
    softmin_weights,
)


def _random_potential(m, k, gamma, rng, spread=0.5):
    return DiscretePotential(m, m.sample_uniform(rng, k), rng.uniform(0, spread, k), gamma)


def _fd_grad(m, fn, x, h=1e-6):
    """Central differences of ``fn`` along the tangent basis at ``x``, mapped back to ambient coordinates."""
    E = m.tangent_basis(x)
    g = [(fn(m.exp_map(x, h * E[:, a])) - fn(m.exp_map(x, -h * E[:, a]))) / (2 * h) for a in range(m.dim)]
    return E @ np.array(g)


# soft-min


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)),
    st.sampled_from([1e-6, 1e-3, 0.1, 1.0, 10.0]),
)
def test_soft_min_bounds(a, gamma):
    v = soft_min(a, gamma)
    tol = 1e-12 * (1 + np.max(np.abs(a)))
    assert np.min(a) - gamma * math.log(a.size) - tol <= v <= np.min(a) + tol


def test_soft_min_hard_limit_and_weights():
    a = np.array([3.0, 1.0, 2.0, 1.0])
    assert soft_min(a, 0.0) == 1.0
    assert np.array_equal(softmin_weights(a, 0.0), [0, 1, 0, 0])
    w = softmin_weights(a, 0.5)
    assert math.isclose(w.sum(), 1.0) and w[1] == w[3] > w[2] > w[0]


def test_soft_min_extreme_values_stay_finite():
    a = np.array([1e4, -1e4, 0.0])
    assert soft_min(a, 1e-3) == pytest.approx(-1e4)
    assert np.all(np.isfinite(softmin_weights(a, 1e-3)))


def test_soft_min_rejects_negative_gamma():
    with pytest.raises(ValueError):
        soft_min(np.ones(3), -0.1)


def test_concave_relu():
    s = np.array([-2.0, -1e-3, 0.0, 1.0])
    assert np.array_equal(concave_relu(s), [-2.0, -1e-3, 0.0, 0.0])
    soft = concave_relu(s, 0.1)
    assert np.all(soft <= np.minimum(s, 0) + 1e-15)
    assert np.all(soft >= np.minimum(s, 0) - 0.1 * math.log(2) - 1e-15)


# discrete potentials


@pytest.mark.parametrize("m", [Sphere(1), Sphere(2), torus(2)], ids=repr)
@pytest.mark.parametrize("gamma", [0.0, 0.1])
def test_value_matches_brute_force(m, gamma):
    rng = np.random.default_rng(0)
    p = _random_potential(m, 7, gamma, rng)
    x = m.sample_uniform(rng, 200)
    pieces = 0.5 * m.distance(x[:, None], p.points[None]) ** 2 + p.alpha
    assert np.allclose(eval_potential(p, x), soft_min(pieces, gamma), atol=1e-12)


@pytest.mark.parametrize("m", [Sphere(1), Sphere(2), torus(2)], ids=repr)
def test_soft_gradient_matches_finite_differences(m):
    rng = np.random.default_rng(1)
    p = _random_potential(m, 6, 0.2, rng)
    for x in m.sample_uniform(rng, 20):
        fd = _fd_grad(m, lambda z: eval_potential(p, z), x)
        assert np.allclose(grad_potential(p, x), fd, atol=1e-7)


def test_gradient_is_weighted_sum_of_logs():
    m = Sphere(2)
    rng = np.random.default_rng(2)
    p = _random_potential(m, 5, 0.3, rng)
    x = m.sample_uniform(rng, 50)
    w = component_weights(p, x)
    expect = -np.einsum("ni,nid->nd", w, m.log_map(x[:, None], p.points[None]))
    assert np.allclose(grad_potential(p, x), expect, atol=1e-12)


def test_hard_gradient_points_away_from_active_component():
    m = Sphere(2)
    rng = np.random.default_rng(3)
    p = _random_potential(m, 5, 0.0, rng)
    x = m.sample_uniform(rng, 100)
    idx = active_index(p, x)
    assert np.allclose(grad_potential(p, x), -m.log_map(x, p.points[idx]), atol=1e-12)


def test_ties_pick_lowest_index():
    m = Sphere(1)
    p = DiscretePotential(m, [[0.0, 1.0], [0.0, -1.0]], [0.0, 0.0], 0.0)
    assert active_index(p, np.array([1.0, 0.0])) == 0


def test_cut_locus_raises():
    m = Sphere(2)
    p = DiscretePotential(m, [[0.0, 0.0, 1.0]], [0.0], 0.1)
    with pytest.raises(CutLocusError):
        grad_potential(p, np.array([0.0, 0.0, -1.0]))


def test_constructor_validates():
    m = Sphere(2)
    with pytest.raises(ValueError):
        DiscretePotential(m, [[1.0, 0.0]], [0.0])
    with pytest.raises(ValueError):
        DiscretePotential(m, [[1.0, 0.0, 0.0]], [0.0, 1.0])
    with pytest.raises(ValueError):
        DiscretePotential(m, [[1.0, 0.0, 0.0]], [0.0], -1.0)


def test_potential_json_round_trip():
    m = torus(2)
    p = _random_potential(m, 4, 0.1, np.random.default_rng(4))
    q = potential_from_json({"manifold": m.to_json(), **p.to_json()})
    assert np.array_equal(q.points, p.points) and np.array_equal(q.alpha, p.alpha) and q.gamma == p.gamma


# blocks


def _recursive_value(b, x):
    """Direct evaluation of ``psi_k = (1 - w_k) phi_k + w_k sigma(psi_{k-1})``."""
    psi = None
    for w, layer in zip(b.weights, b.layers):
        phi = eval_potential(layer, x)
        psi = phi if psi is None else (1 - w) * phi + w * concave_relu(psi, b.relu_gamma)
    return concave_relu(psi, b.relu_gamma) if b.identity_relu else psi


@pytest.mark.parametrize("identity_relu", [False, True])
def test_block_value_matches_recursion(identity_relu):
    m = Sphere(2)
    rng = np.random.default_rng(5)
    layers = [_random_potential(m, 5, 0.1, rng) for _ in range(3)]
    b = BlockPotential.with_weights(layers, [0.0, 0.3, 0.7], identity_relu, 0.05)
    x = m.sample_uniform(rng, 100)
    assert np.allclose(eval_block_potential(b, x), _recursive_value(b, x), atol=1e-12)


def test_block_gradient_matches_finite_differences():
    m = torus(2)
    rng = np.random.default_rng(6)
    layers = [_random_potential(m, 4, 0.2, rng) for _ in range(3)]
    b = BlockPotential(layers, rng.normal(size=2), True, 0.1)
    for x in m.sample_uniform(rng, 10):
        fd = _fd_grad(m, lambda z: eval_block_potential(b, z), x)
        assert np.allclose(grad_block_potential(b, x), fd, atol=1e-7)


def test_block_weights_and_validation():
    m = Sphere(1)
    layers = [_random_potential(m, 2, 0.1, np.random.default_rng(7)) for _ in range(2)]
    b = BlockPotential.with_weights(layers, [0.0, 0.25])
    assert np.allclose(b.weights, [0.0, 0.25])
    with pytest.raises(ValueError):
        BlockPotential.with_weights(layers, [0.5, 0.25])
    with pytest.raises(ValueError):
        BlockPotential(layers, np.zeros(3))
    with pytest.raises(ValueError):
        BlockPotential((), None)


def test_block_json_round_trip():
    m = Sphere(2)
    rng = np.random.default_rng(8)
    b = BlockPotential([_random_potential(m, 3, 0.1, rng) for _ in range(2)], [0.4], True, 0.05)
    c = BlockPotential.from_json(m, b.to_json())
    x = m.sample_uniform(rng, 20)
    assert np.array_equal(eval_block_potential(b, x), eval_block_potential(c, x))


def test_hard_relu_block_with_positive_alpha_is_zero():
    m = Sphere(2)
    rng = np.random.default_rng(9)
    # alpha_min - gamma log m > 0 keeps the soft min positive
    p = DiscretePotential(m, m.sample_uniform(rng, 5), rng.uniform(0.2, 0.5, 5), 0.1)
    b = BlockPotential.single(p, identity_relu=True, relu_gamma=0.0)
    x = m.sample_uniform(rng, 50)
    assert np.all(eval_block_potential(b, x) == 0) and np.all(grad_block_potential(b, x) == 0)
