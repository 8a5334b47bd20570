import dataclasses

import numpy as np
import pytest

from rcpm.densities import Uniform
from rcpm.errors import CutLocusError
from rcpm.flow import (
    Flow,
    PushedDensity,
    apply_block,
    apply_flow,
    block_jacobian,
    block_jacobian_logdet,
    flow_forward,
    flow_logdet,
    identity_block,
    identity_flow,
    invert_flow,
    transport_geodesic,
)
from rcpm.manifold import Sphere, torus
from rcpm.potential import BlockPotential, DiscretePotential, grad_block_potential
from rcpm.verify import fd_block_jacobian, fd_flow_logdet


def _block(m, rng, k=8, gamma=0.2, layers=1, relu=True):
    pots = [DiscretePotential(m, m.sample_uniform(rng, k), rng.uniform(0.1, 0.6, k), gamma) for _ in range(layers)]
    return BlockPotential(pots, rng.normal(size=layers - 1), relu, 0.05)


def _flow(m, T=3, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return Flow(tuple(_block(m, rng, **kw) for _ in range(T)))


@pytest.mark.parametrize("m", [Sphere(1), Sphere(2), torus(2)], ids=repr)
def test_block_map_is_exp_of_minus_gradient(m):
    rng = np.random.default_rng(1)
    b = _block(m, rng, layers=2)
    x = m.sample_uniform(rng, 100)
    assert np.allclose(apply_block(b, x), m.exp_map(x, -grad_block_potential(b, x)), atol=1e-12)
    assert m.is_on_manifold(apply_block(b, x))


@pytest.mark.parametrize("m", [Sphere(1), Sphere(2), torus(2)], ids=repr)
def test_block_jacobian_matches_finite_differences(m):
    rng = np.random.default_rng(2)
    b = _block(m, rng, layers=2)
    x = m.sample_uniform(rng, 10)
    J = block_jacobian(b, x)
    for xi, Ji in zip(x, J):
        assert np.allclose(Ji, fd_block_jacobian(b, xi), atol=1e-6)


def test_flow_logdet_matches_finite_differences():
    m = Sphere(2)
    f = _flow(m, T=3, seed=3)
    x = m.sample_uniform(np.random.default_rng(4), 10)
    ld = flow_logdet(f, x)
    assert np.allclose(ld, [fd_flow_logdet(f, xi) for xi in x], atol=1e-6)


def test_logdet_is_sum_over_blocks():
    m = torus(2)
    f = _flow(m, T=3, seed=5)
    x = m.sample_uniform(np.random.default_rng(6), 50)
    total, z = 0.0, x
    for b in f.blocks:
        total = total + block_jacobian_logdet(b, z)
        z = apply_block(b, z)
    assert np.allclose(flow_logdet(f, x), total, atol=1e-12)
    assert np.allclose(apply_flow(f, x), z, atol=1e-14)


@pytest.mark.parametrize("m", [Sphere(1), Sphere(2), torus(2)], ids=repr)
def test_identity_flow_is_exact(m):
    f = identity_flow(m, T=3)
    x = m.sample_uniform(np.random.default_rng(7), 1000)
    y, logabs, sign, _ = flow_forward(f, x)
    assert np.array_equal(y, x)
    assert np.all(logabs == 0.0) and np.all(sign == 1.0)


def test_flow_json_round_trip(tmp_path):
    m = Sphere(2)
    f = dataclasses.replace(_flow(m, T=2, seed=8, layers=2), direction="backward", meta={"k": 1})
    path = tmp_path / "model.json"
    path.write_text(f.dumps())
    g = Flow.load(path)
    assert g.dumps() == f.dumps()
    x = m.sample_uniform(np.random.default_rng(9), 20)
    assert np.array_equal(apply_flow(g, x), apply_flow(f, x))


def test_flow_validation():
    with pytest.raises(ValueError):
        Flow(())
    with pytest.raises(ValueError):
        Flow((identity_block(Sphere(2)), identity_block(torus(2))))
    with pytest.raises(ValueError):
        Flow((identity_block(Sphere(2)),), direction="sideways")


def test_cut_locus_is_reported():
    m = Sphere(2)
    b = BlockPotential.single(DiscretePotential(m, [[0.0, 0.0, 1.0]], [0.0], 0.1))
    with pytest.raises(CutLocusError):
        apply_block(b, np.array([0.0, 0.0, -1.0]))


@pytest.mark.parametrize("m", [Sphere(2), torus(2)], ids=repr)
def test_inverse_recovers_points(m):
    f = _flow(m, T=2, seed=10)
    x = m.sample_uniform(np.random.default_rng(11), 500)
    y, _, _, min_cos = flow_forward(f, x)
    x, y = x[min_cos > -1 + 1e-6], y[min_cos > -1 + 1e-6]
    inv = invert_flow(f, y)
    assert inv.converged.all()
    assert np.max(m.distance(inv.points, x)) < 1e-8


def test_pushed_density_integrates_to_one_both_directions():
    m = Sphere(2)
    base = Uniform(m)
    _, pts, w = m.chart_grid(64)
    for direction in ("forward", "backward"):
        f = dataclasses.replace(_flow(m, T=2, seed=12), direction=direction)
        dens = np.exp(PushedDensity(base, f).log_density(pts))
        assert abs(np.sum(dens * w) - 1) < 1e-2


def test_forward_sample_log_density_matches_pointwise():
    m = torus(2)
    f = _flow(m, T=2, seed=13)
    res = PushedDensity(Uniform(m), f).sample(np.random.default_rng(14), 200)
    assert res.points.shape == (200, 4) and res.rejected == 0
    assert np.allclose(res.log_density, PushedDensity(Uniform(m), f).log_density(res.points), atol=1e-8)


def test_sampling_needs_forward_flow():
    f = dataclasses.replace(identity_flow(Sphere(2)), direction="backward")
    with pytest.raises(ValueError):
        PushedDensity(Uniform(Sphere(2)), f).sample(np.random.default_rng(0), 5)


def test_transport_geodesic_endpoints():
    m = Sphere(2)
    b = _block(m, np.random.default_rng(15))
    x = m.sample_uniform(np.random.default_rng(16), 1)[0]
    line = transport_geodesic(b, x, 5)
    assert line.shape == (6, 3)
    assert np.array_equal(line[0], x)
    assert np.allclose(line[-1], apply_block(b, x), atol=1e-12)
    steps = m.distance(line[:-1], line[1:])
    assert np.allclose(steps, steps[0], atol=1e-12)
    with pytest.raises(ValueError):
        transport_geodesic(b, x, 0)


def test_identity_geodesic_is_constant():
    x = np.array([0.0, 0.6, 0.8])
    line = transport_geodesic(identity_block(Sphere(2)), x, 4)
    assert np.array_equal(line, np.repeat(x[None], 5, axis=0))
