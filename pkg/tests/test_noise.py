import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochstokes.fem import project_divfree, taylor_hood
from stochstokes.mesh import build_torus_mesh
from stochstokes.noise import (
    FemNoise,
    NoiseModel,
    aggregate,
    driver_table,
    eval_noise,
    growth_constant,
    helmholtz_split_fem,
    make_driver,
)

TWO_PI = 2 * math.pi


def test_aggregation_sums_exactly():
    d = make_driver(1, 1.0, 64)
    fine = d.increments()
    lvl3 = d.increments(level=3)
    assert lvl3.shape == (8,)
    # tree order: merging a level at a time equals merging all at once
    assert np.array_equal(aggregate(aggregate(fine, 1), 2), lvl3)
    assert np.array_equal(d.increments(8), lvl3)
    assert math.isclose(fine.sum(), lvl3.sum(), rel_tol=1e-14)


@given(levels=st.integers(0, 6), seed=st.integers(0, 2**63), sample=st.integers(0, 1000))
def test_path_consistency_all_levels(levels, seed, sample):
    d = make_driver(seed, 0.5, 64, sample)
    coarse = d.increments(level=levels)
    for l1 in range(levels + 1):
        assert np.array_equal(aggregate(d.increments(level=l1), levels - l1), coarse)
    assert d.path(64 >> levels)[-1] == pytest.approx(d.path()[-1], abs=1e-13)


def test_driver_is_reproducible_and_sample_keyed():
    a, b = make_driver(5, 1.0, 32, 3), make_driver(5, 1.0, 32, 3)
    assert np.array_equal(a.fine, b.fine) and a.checksum() == b.checksum()
    assert not np.array_equal(a.fine, make_driver(5, 1.0, 32, 4).fine)
    assert not np.array_equal(a.fine, make_driver(6, 1.0, 32, 3).fine)
    assert not a.fine.flags.writeable


def test_driver_table_rows():
    t = driver_table(2, 1.0, 16, [0, 3])
    assert np.array_equal(t[1], make_driver(2, 1.0, 16, 3).fine)


@pytest.mark.parametrize("M", [0, 3, 48])
def test_bad_step_counts(M):
    with pytest.raises(ValueError):
        make_driver(0, 1.0, M)


def test_bad_time_and_levels():
    with pytest.raises(ValueError):
        make_driver(0, 0.0, 8)
    with pytest.raises(ValueError):
        make_driver(0, 1.0, 8).increments(3)
    with pytest.raises(ValueError):
        aggregate(np.ones(6), 2)


def test_clt_bands_over_ten_thousand_seeds():
    # one increment per seed, k = 1/4
    k = 0.25
    dw = np.array([make_driver(s, 1.0, 4).fine[0] for s in range(10_000)])
    assert abs(np.mean(dw / math.sqrt(k))) <= 3 / math.sqrt(1e4)
    assert abs(np.mean(dw**2 / k) - 1) <= 3 * math.sqrt(2) / math.sqrt(1e4)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel("white")
    with pytest.raises(ValueError):
        NoiseModel(zeta=lambda x, y: x, grad_zeta=None)
    assert NoiseModel(sigma0=0, sigma1=0).is_zero
    assert not NoiseModel("gradient-augmented", 0, 0, c=1.0).is_zero
    assert NoiseModel(sigma1=0.3).lipschitz == 0.3


def _mesh(n=4):
    return build_torus_mesh(1.0, n)


def test_zero_profile_gives_zero_at_zero():
    m = _mesh()
    B = eval_noise(NoiseModel(sigma0=0.0, sigma1=0.7), np.zeros(taylor_hood(m).nvel), m)
    assert not B.any()


@given(seed=st.integers(0, 2**31), s1=st.floats(-2, 2))
def test_affine_lipschitz_identity(seed, s1):
    m = _mesh()
    model = NoiseModel(sigma0=0.5, sigma1=s1)
    th = taylor_hood(m)
    rng = np.random.default_rng(seed)
    v, w = rng.standard_normal((2, th.nvel))
    d = eval_noise(model, v, m) - eval_noise(model, w, m)
    nrm = lambda x: math.sqrt(x @ (th.mass_vel @ x))
    assert nrm(d) == pytest.approx(abs(s1) * nrm(v - w), rel=1e-10, abs=1e-12)


def test_leray_family_is_divergence_free():
    m = _mesh()
    th = taylor_hood(m)
    model = NoiseModel("leray-projected", 0.5, 0.5)
    u = np.random.default_rng(0).standard_normal(th.nvel)
    B = eval_noise(model, u, m)
    assert np.abs(th.div @ B).max() <= 1e-10


def test_growth_constant():
    m = _mesh(8)
    # ||g||^2 = 1/2 + 1/2 for the default profiles on the unit box
    assert growth_constant(NoiseModel(sigma0=2.0, sigma1=0.1), m) == pytest.approx(2.0, rel=1e-6)
    assert growth_constant(NoiseModel(sigma0=0.0, sigma1=0.3), m) == pytest.approx(0.3)


def test_batched_noise_matches_columns():
    m = _mesh()
    fn = FemNoise(NoiseModel(sigma1=0.25), m)
    U = np.random.default_rng(1).standard_normal((taylor_hood(m).nvel, 3))
    B = fn(U)
    assert np.allclose(B[:, 1], fn(U[:, 1]), atol=0)


# -- discrete Helmholtz split ----------------------------------------------------


def test_weakly_divergence_free_field_is_untouched():
    m = _mesh()
    th = taylor_hood(m)
    u = project_divfree(m, np.random.default_rng(2).standard_normal(th.nvel)).velocity
    sp_ = helmholtz_split_fem(m, u)
    assert np.abs(sp_.xi).max() <= 1e-10
    assert np.abs(sp_.eta - u).max() <= 1e-10


def test_constant_field_has_zero_potential():
    m = _mesh()
    n2 = taylor_hood(m).n2
    f = np.concatenate([np.full(n2, 1.5), np.full(n2, -0.5)])
    sp_ = helmholtz_split_fem(m, f)
    assert np.abs(sp_.xi).max() <= 1e-12
    assert np.abs(sp_.eta - f).max() <= 1e-12


def test_remainder_is_orthogonal_to_p1_gradients():
    m = _mesh()
    th = taylor_hood(m)
    qt = th.quad
    f = np.random.default_rng(3).standard_normal(th.nvel)
    sp_ = helmholtz_split_fem(m, f)
    # (f - grad xi, grad psi) with (f, grad psi) from direct quadrature
    v = qt.velocity(f)
    f_dot_grad = qt.p1_dx.T @ (qt.weights * v[0]) + qt.p1_dy.T @ (qt.weights * v[1])
    defect = f_dot_grad - th.stiff_p1 @ sp_.xi
    assert np.abs(defect).max() <= 1e-10
    assert np.abs(sp_.xi).max() > 0.01
    assert sp_.residual <= 1e-11


def test_potential_of_gradient_converges():
    zeta = lambda x, y: np.cos(TWO_PI * x) * np.cos(TWO_PI * y) / TWO_PI
    grad = lambda x, y: (-np.sin(TWO_PI * x) * np.cos(TWO_PI * y), -np.cos(TWO_PI * x) * np.sin(TWO_PI * y))
    errs = []
    for n in (8, 16, 32):
        m = _mesh(n)
        th = taylor_hood(m)
        x = np.vstack([m.vertices, m.edge_midpoints])
        gx, gy = grad(x[:, 0], x[:, 1])
        sp_ = helmholtz_split_fem(m, np.concatenate([gx, gy]))
        d = sp_.xi - zeta(m.vertices[:, 0], m.vertices[:, 1])
        errs.append(math.sqrt(d @ (th.mass_p1 @ d)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates.min() >= 1.5
