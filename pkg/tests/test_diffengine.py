import numpy as np
import pytest

from rcpm.densities import Uniform, four_mode_sphere
from rcpm.diffengine import (
    LossSpec,
    ParamGradient,
    fd_gradient,
    flow_with_params,
    grad_check,
    loss_and_grad,
    loss_value,
    padded_flow,
)
from rcpm.errors import InvalidBatchError, NonFiniteLossError
from rcpm.flow import Flow, flow_forward
from rcpm.manifold import Sphere, torus
from rcpm.potential import BlockPotential, DiscretePotential


def _flow(m, T=2, K=1, k=10, gamma=0.5, relu_gamma=0.05, identity_relu=False, seed=0, direction="forward"):
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(T):
        layers = [DiscretePotential(m, m.sample_uniform(rng, k), rng.uniform(0.1, 0.6, k), gamma) for _ in range(K)]
        blocks.append(BlockPotential(layers, rng.normal(size=K - 1), identity_relu, relu_gamma))
    return Flow(tuple(blocks), direction)


def test_kl_loss_value_matches_direct_formula():
    m = Sphere(2)
    f = _flow(m)
    base, target = Uniform(m), four_mode_sphere()
    x = m.sample_uniform(np.random.default_rng(1), 64)
    y, logabs, _, _ = flow_forward(f, x)
    direct = np.mean(base.log_density(x) - logabs - target.log_density(y))
    assert np.isclose(loss_value(f, LossSpec("kl", base, target), x), direct, atol=1e-12)


def test_nll_loss_value_matches_direct_formula():
    m = torus(2)
    f = _flow(m, direction="backward")
    x = m.sample_uniform(np.random.default_rng(2), 64)
    y, logabs, _, _ = flow_forward(f, x)
    direct = -np.mean(Uniform(m).log_density(y) + logabs)
    assert np.isclose(loss_value(f, LossSpec("nll", Uniform(m)), x), direct, atol=1e-12)


@pytest.mark.parametrize("K", [1, 2])
def test_gradient_matches_finite_differences(K):
    m = Sphere(2)
    f = _flow(m, K=K, k=6)
    spec = LossSpec("kl", Uniform(m), four_mode_sphere())
    report = grad_check(f, spec, m.sample_uniform(np.random.default_rng(3), 32))
    assert report.passed, report.dumps()
    assert set(report.max_rel_error) == ({"y", "alpha"} if K == 1 else {"y", "alpha", "w"})


def test_custom_loss_gradient():
    m = torus(2)
    f = _flow(m, k=5)
    target = m.sample_uniform(np.random.default_rng(4), 1)[0]
    spec = LossSpec("custom", fn=lambda x, y, logdet: 0.5 * ((y - target) ** 2).sum(-1) + 0.1 * logdet)
    report = grad_check(f, spec, m.sample_uniform(np.random.default_rng(5), 16))
    assert report.passed, report.dumps()


def test_checker_catches_a_wrong_gradient():
    m = Sphere(2)
    f = _flow(m, T=1, k=5)
    spec = LossSpec("kl", Uniform(m), four_mode_sphere())
    x = m.sample_uniform(np.random.default_rng(6), 16)
    _, g = loss_and_grad(f, spec, x)
    g.blocks[0].layers[0].d_alpha[2] *= 1.01
    report = grad_check(f, spec, x, analytic=g)
    assert not report.passed
    assert report.worst["alpha"]["component"] == 2


def test_hard_min_alpha_gradients_vanish():
    m = Sphere(2)
    f = _flow(m, T=2, k=8, gamma=0.0, relu_gamma=0.0, identity_relu=True)
    spec = LossSpec("kl", Uniform(m), four_mode_sphere())
    _, g = loss_and_grad(f, spec, m.sample_uniform(np.random.default_rng(7), 64))
    assert all(np.all(lg.d_alpha == 0) for b in g.blocks for lg in b.layers)


def test_padding_leaves_gradients_unchanged():
    m = Sphere(2)
    f = _flow(m, T=2, k=6)
    spec = LossSpec("kl", Uniform(m), four_mode_sphere())
    x = m.sample_uniform(np.random.default_rng(8), 32)
    report = grad_check(f, spec, x, pad_to=4)
    assert report.passed and not report.notes
    fd_plain, fd_padded = fd_gradient(f, spec, x), fd_gradient(f, spec, x, pad_to=4)
    assert np.allclose(fd_plain, fd_padded, atol=1e-12)
    g, mask = padded_flow(f, 4)
    assert g.T == 4 and mask.tolist() == [True, True, False, False]
    with pytest.raises(ValueError):
        padded_flow(f, 1)


def test_tangent_projection_of_point_gradients():
    m = Sphere(2)
    f = _flow(m, T=1, k=4)
    _, g = loss_and_grad(f, LossSpec("kl", Uniform(m), four_mode_sphere()), m.sample_uniform(np.random.default_rng(9), 8))
    t = g.tangent(f)
    pts = f.blocks[0].layers[0].points
    assert np.allclose(np.einsum("kd,kd->k", t.blocks[0].layers[0].d_y, pts), 0, atol=1e-14)
    assert isinstance(ParamGradient.from_tree(g.to_tree()), ParamGradient)


def test_flow_with_params_round_trip():
    m = torus(2)
    f = _flow(m, K=2)
    g = flow_with_params(f, f.params())
    for a, b in zip(ParamGradient.from_tree(g.params()).flat(), ParamGradient.from_tree(f.params()).flat()):
        assert abs(a - b) < 1e-15


def test_invalid_batches():
    m = Sphere(2)
    f = _flow(m, T=1)
    spec = LossSpec("kl", Uniform(m), four_mode_sphere())
    with pytest.raises(InvalidBatchError):
        loss_value(f, spec, np.zeros((0, 3)))
    with pytest.raises(InvalidBatchError):
        loss_value(f, spec, np.zeros((4, 2)))


def test_non_finite_loss_names_sample():
    m = Sphere(2)
    f = _flow(m, T=1)
    spec = LossSpec("custom", fn=lambda x, y, logdet: 1.0 / (x[:, 0] - x[0, 0]))
    x = m.sample_uniform(np.random.default_rng(10), 8)
    with pytest.raises(NonFiniteLossError) as err:
        loss_value(f, spec, x)
    assert err.value.sample == x[0].tolist()


def test_loss_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("kl", Uniform(Sphere(2)))
    with pytest.raises(ValueError):
        LossSpec("nll")
    with pytest.raises(ValueError):
        LossSpec("custom")
    with pytest.raises(ValueError):
        LossSpec("mse")


def test_loss_ignoring_the_flow_has_zero_gradient():
    m = torus(2)
    f = _flow(m, K=3)
    spec = LossSpec("custom", fn=lambda x, y, logdet: (x**2).sum(-1))
    _, g = loss_and_grad(f, spec, m.sample_uniform(np.random.default_rng(11), 16))
    assert g.is_zero()


def test_identity_initialised_flow_against_its_base():
    m = Sphere(2)
    rng = np.random.default_rng(12)
    blocks = [
        BlockPotential.single(DiscretePotential(m, m.sample_uniform(rng, 8), rng.uniform(0.1, 0.6, 8), 0.1), True, 0.0)
        for _ in range(2)
    ]
    f = Flow(tuple(blocks))
    loss, g = loss_and_grad(f, LossSpec("kl", Uniform(m), Uniform(m)), m.sample_uniform(rng, 64))
    assert loss == 0.0
    assert all(np.all(lg.d_alpha == 0) for b in g.blocks for lg in b.layers)
