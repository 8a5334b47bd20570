import math

import numpy as np
import pytest

from rcpm.densities import Torus3Modal, Uniform
from rcpm.flow import Flow, identity_flow
from rcpm.manifold import Sphere, torus
from rcpm.potential import BlockPotential, DiscretePotential
from rcpm.verify import (
    GridFunction,
    c_transform,
    covering_radius,
    default_net,
    discrete_lipschitz,
    epsilon_net_approximation,
    fibonacci_sphere_net,
    gradient_convergence,
    involution_check,
    logdet_positivity_audit,
    pairwise_cost,
    pushforward_check,
    smooth_margin,
)

S1 = Sphere(1)


def _target(k=5, seed=0, offset=0.0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 2 * math.pi, k)
    return DiscretePotential(S1, np.stack([np.cos(t), np.sin(t)], -1), rng.uniform(0, 1, k) + offset, 0.0)


# grid c-transform


def test_pairwise_cost_is_half_squared_angle():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0], [-1.0, 0.0], [math.cos(0.3), -math.sin(0.3)]])
    assert np.allclose(pairwise_cost(S1, a, b), [[math.pi**2 / 8, math.pi**2 / 2, 0.045]], atol=1e-15)


def test_c_transform_of_zero_is_zero():
    g = GridFunction.sample(S1, 256, lambda x: np.zeros(len(x)))
    assert np.array_equal(c_transform(g).values, np.zeros(256))


def test_c_transform_of_a_cost_vanishes_at_its_centre():
    y0 = np.array([[math.cos(1.0), math.sin(1.0)]])
    for res in (64, 512):
        g = GridFunction.sample(S1, res, lambda x: pairwise_cost(S1, x, y0)[:, 0])
        val = c_transform(g, at=y0)[0]
        assert -1e-15 <= val <= 1e-15


@pytest.mark.parametrize("res", [128, 512])
def test_c_transform_is_diameter_lipschitz(res):
    rng = np.random.default_rng(1)
    g = GridFunction.sample(S1, res, lambda x: rng.uniform(-1, 1, len(x)))
    assert discrete_lipschitz(c_transform(g)) <= math.pi + g.spacing


# involution


def test_involution_single_piece_within_bound():
    p = DiscretePotential(S1, [[1.0, 0.0]], [0.2], 0.0)
    rep = involution_check(p, 512)
    assert rep.bound == pytest.approx(2 * math.pi * 2 * math.pi / 512)
    assert rep.passed and rep.defect <= rep.bound


def test_involution_defect_halves_under_refinement():
    p = _target()
    coarse, fine = involution_check(p, 512), involution_check(p, 1024)
    assert coarse.passed and fine.passed
    assert fine.defect <= coarse.defect + 1e-12
    assert fine.defect <= 0.5 * coarse.defect + 1e-12


def test_involution_ignores_constant_offsets():
    a, b = involution_check(_target(), 512), involution_check(_target(offset=3.0), 512)
    assert a.defect == pytest.approx(b.defect, abs=1e-12)


def test_involution_needs_hard_min():
    with pytest.raises(ValueError):
        involution_check(DiscretePotential(S1, [[1.0, 0.0]], [0.0], 0.1), 64)


# epsilon nets


def test_nets_and_covering_radius():
    net, eps = default_net(S1, 64)
    assert eps == pytest.approx(math.pi / 64)
    # probes are a grid, so they can miss the exact midpoints by one probe spacing
    assert eps - 2 * math.pi / 4096 <= covering_radius(S1, net, 4096) <= eps + 1e-12
    net2 = fibonacci_sphere_net(500)
    assert Sphere(2).is_on_manifold(net2)
    assert 0.05 < default_net(Sphere(2), 500)[1] < 0.15
    with pytest.raises(ValueError):
        default_net(torus(2), 16)


def test_epsilon_net_table():
    rep = epsilon_net_approximation(_target(), [16, 64, 256, 1024])
    assert rep.passed and rep.monotone
    for row in rep.rows:
        assert row.sup_error <= 2 * math.pi * row.epsilon + rep.slack
        assert row.min_gap >= -rep.slack


@pytest.mark.xfail(strict=True, reason="the net error is first order in epsilon, about 2.4e-3 at m=1024")
def test_epsilon_net_error_below_1e3_at_1024():
    assert epsilon_net_approximation(_target(), [1024]).rows[0].sup_error < 1e-3


def test_epsilon_net_is_exact_when_target_lies_on_the_net():
    net = default_net(S1, 64)[0]
    p = DiscretePotential(S1, net[[3, 20, 41]], [0.1, 0.4, 0.0], 0.0)
    assert epsilon_net_approximation(p, [64]).rows[0].sup_error < 1e-12


def test_gradient_convergence_is_monotone():
    rep = gradient_convergence(_target(), [16, 64, 256, 1024])
    assert rep.passed and rep.skip_fraction < 0.05
    assert rep.max_error[-1] < rep.max_error[0]


def test_smooth_margin():
    p = DiscretePotential(S1, [[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0], 0.0)
    assert smooth_margin(p, [[0.0, 1.0]])[0] == pytest.approx(0.0, abs=1e-15)
    assert smooth_margin(p, [[1.0, 0.0]])[0] == pytest.approx(math.pi**2 / 2)


# push-forward


@pytest.fixture(scope="module")
def identity_pushforward():
    m = Sphere(2)
    return pushforward_check(identity_flow(m), Uniform(m), Uniform(m), res=32, n=100_000)


def test_identity_pushforward_within_noise(identity_pushforward):
    rep = identity_pushforward
    assert rep.rejected == 0
    assert rep.tv <= rep.noise_mean + 3 * rep.noise_sd


@pytest.mark.xfail(strict=True, reason="multinomial noise over 32 x 64 bins at 1e5 samples is about 0.055")
def test_identity_pushforward_below_002(identity_pushforward):
    assert identity_pushforward.tv <= 0.02


@pytest.mark.xfail(strict=True, reason="the exact TV between uniform and the three-mode torus target is 0.289")
def test_identity_against_multimodal_negative_control():
    m = torus(2)
    assert pushforward_check(identity_flow(m), Uniform(m), Torus3Modal(), res=32, n=100_000).tv >= 0.3


def test_identity_against_multimodal_is_far_above_noise():
    m = torus(2)
    rep = pushforward_check(identity_flow(m), Uniform(m), Torus3Modal(), res=32, n=100_000)
    assert rep.tv > 0.25 and rep.tv > rep.noise_mean + 20 * rep.noise_sd


def test_pushforward_needs_enough_samples():
    with pytest.raises(ValueError):
        pushforward_check(identity_flow(S1), Uniform(S1), Uniform(S1), n=1000)


# Jacobian audit


def test_identity_logdet_audit():
    rep = logdet_positivity_audit(identity_flow(Sphere(2), T=2), n=10_000)
    assert rep.min_logdet == rep.max_logdet == 0.0
    assert rep.all_positive and rep.first_offender is None and not rep.notes


def test_hard_min_flow_is_flagged():
    m = Sphere(2)
    rng = np.random.default_rng(2)
    p = DiscretePotential(m, m.sample_uniform(rng, 10), rng.uniform(0, 0.5, 10), 0.0)
    rep = logdet_positivity_audit(Flow((BlockPotential.single(p),)), n=10_000)
    assert not rep.all_positive and rep.n_singular > 0 and rep.first_offender is not None
    assert any("hard-min" in note for note in rep.notes)
