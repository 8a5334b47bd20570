import math

import numpy as np
import pytest
from scipy.special import i0

from rcpm.densities import (
    EmpiricalPoints,
    KdeFromPoints,
    SphereCheckerboard,
    Torus3Modal,
    Uniform,
    WrappedGaussianMixture,
    density_from_json,
    four_mode_sphere,
)
from rcpm.manifold import Sphere, torus
from rcpm.verify import binned_target_mass, histogram, multinomial_tv_noise


def _densities():
    rng = np.random.default_rng(0)
    s2, t2 = Sphere(2), torus(2)
    return {
        "uniform_s2": Uniform(s2),
        "uniform_t2": Uniform(t2),
        "four_mode": four_mode_sphere(),
        "checkerboard": SphereCheckerboard(),
        "torus3": Torus3Modal(),
        "wgm_s1": WrappedGaussianMixture(Sphere(1), [[1.0, 0.0], [0.0, -1.0]], [0.4, 0.8], [0.3, 0.7]),
        "wgm_t2": WrappedGaussianMixture(t2, t2.sample_uniform(rng, 2), 0.5),
        "kde_s2": KdeFromPoints(s2, s2.sample_uniform(rng, 30), 0.3),
        "kde_t2": KdeFromPoints(t2, t2.sample_uniform(rng, 30), 0.4),
    }


@pytest.mark.parametrize("name", list(_densities()))
def test_normalised_by_quadrature(name):
    d = _densities()[name]
    _, pts, w = d.manifold.chart_grid(200 if d.manifold.dim == 2 else 2000)
    total = np.sum(np.exp(d.log_density(pts)) * w)
    # the checkerboard is discontinuous, so its midpoint rule converges slowly
    assert abs(total - 1) < (2e-2 if name == "checkerboard" else 1e-3)


@pytest.mark.parametrize("name", ["four_mode", "torus3", "wgm_t2", "kde_s2", "checkerboard"])
def test_samples_follow_density(name):
    d = _densities()[name]
    n = 100_000
    x = d.sample(np.random.default_rng(1), n)
    assert x.shape == (n, d.manifold.ambient_dim) and d.manifold.is_on_manifold(x, atol=1e-10)
    q = binned_target_mass(d.manifold, d.log_density, 8)
    tv = 0.5 * np.abs(histogram(d.manifold, x, 8) - q).sum()
    mean, sd = multinomial_tv_noise(q, n)
    assert tv < mean + 5 * sd + (5e-3 if name == "checkerboard" else 0.0)


def test_checkerboard_values():
    d = SphereCheckerboard()
    lp = d.log_density(d.manifold.chart_grid(64)[1])
    assert set(np.round(np.exp(lp[np.isfinite(lp)]), 12)) == {round(1 / (2 * math.pi), 12)}
    assert np.mean(np.isfinite(lp)) == pytest.approx(0.5, abs=0.01)


def test_torus_three_modal_closed_form():
    d = Torus3Modal()
    t = np.array([[0.3, 5.0]])
    x = d.manifold.from_chart(t)
    modes = np.array([[4.18, 6.7], [4.18, 4.7], [4.18, 2.7]])
    expect = np.mean(np.exp(np.cos(t[0, 0] - modes[:, 0]) + np.cos(t[0, 1] - modes[:, 1]))) / (2 * math.pi * i0(1)) ** 2
    assert math.isclose(float(np.exp(d.log_density(x))[0]), expect, rel_tol=1e-12)


def test_wrapped_gaussian_small_scale_is_euclidean():
    m = Sphere(2)
    c = np.array([0.0, 0.0, 1.0])
    d = WrappedGaussianMixture(m, c[None], 0.05)
    x = m.exp_map(c, np.array([0.03, 0.0, 0.0]))
    expect = math.exp(-0.5 * (0.03 / 0.05) ** 2) / (2 * math.pi * 0.05**2)
    assert math.isclose(float(np.exp(d.log_density(x[None]))[0]), expect, rel_tol=1e-3)


def test_wrapped_gaussian_validation():
    with pytest.raises(ValueError):
        WrappedGaussianMixture(Sphere(2), [[0.0, 0.0, 1.0]], -1.0)
    with pytest.raises(ValueError):
        WrappedGaussianMixture(Sphere(2), [[0.0, 0.0, 1.0]], 1.0, [0.5, 0.5])


@pytest.mark.parametrize("name", list(_densities()))
def test_json_round_trip(name):
    d = _densities()[name]
    e = density_from_json(d.to_json(), d.manifold)
    x = d.manifold.sample_uniform(np.random.default_rng(2), 50)
    assert np.allclose(e.log_density(x), d.log_density(x), atol=1e-12, equal_nan=True)


def test_empirical_points(tmp_path):
    m = Sphere(2)
    pts = m.sample_uniform(np.random.default_rng(3), 10)
    path = tmp_path / "pts.csv"
    np.savetxt(path, pts, delimiter=",")
    d = density_from_json({"kind": "empirical", "points_file": str(path)}, m)
    assert isinstance(d, EmpiricalPoints) and not d.has_density
    s = d.sample(np.random.default_rng(4), 100)
    assert all(np.any(np.all(np.isclose(p, d.points), axis=1)) for p in s)
    with pytest.raises(ValueError):
        d.log_density(s)


def test_density_from_json_errors():
    with pytest.raises(ValueError):
        density_from_json({"kind": "uniform"})
    with pytest.raises(ValueError):
        density_from_json({"kind": "nonsense"}, Sphere(2))
    with pytest.raises(ValueError):
        KdeFromPoints(Sphere(2), [[0.0, 0.0, 1.0]], 0.0)
