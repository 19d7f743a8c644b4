import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochstokes.fem import taylor_hood
from stochstokes.harness import (
    CSV_HEADER,
    Comparator,
    ConfigError,
    ErrorReport,
    ExperimentConfig,
    ExperimentFailure,
    RunSpec,
    converge_time,
    estimate_errors,
    evaluate_bands,
    fit_rate,
    jackknife_power_mean,
    pathwise_stats,
    power_mean,
    summary_json,
)
from stochstokes.mesh import build_torus_mesh
from stochstokes.noise import make_driver
from stochstokes.schemes import run_trajectory
from stochstokes.spectral import SpectralField, eval_on_mesh, from_function, l2_norm, spectral_grid

TWO_PI = 2 * math.pi
tg = lambda x, y: (np.sin(TWO_PI * x) * np.cos(TWO_PI * y), -np.cos(TWO_PI * x) * np.sin(TWO_PI * y))

SMALL = dict(nu=0.02, T=0.5, M_list=(4, 8, 16), M_ref=64, N_modes=8, samples=6, chunk=4)


# -- rate fits -----------------------------------------------------------------------


def test_fit_exact_half_order():
    ks = [2.0**-j for j in range(4, 9)]
    fit = fit_rate([(k, 3.0 * k**0.5) for k in ks])
    assert fit.slope == pytest.approx(0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12) and fit.points == 5


def test_fit_second_order():
    fit = fit_rate([(h, h**2) for h in (0.5, 0.25, 0.125)])
    assert fit.slope == pytest.approx(2.0, abs=1e-12)


def test_fit_guards():
    with pytest.raises(ValueError):
        fit_rate([(1.0, 1.0), (0.5, 0.7)])
    with pytest.raises(ValueError):
        fit_rate([(1.0, 1.0), (0.5, 0.0), (0.25, 0.1)])
    with pytest.raises(ValueError):
        fit_rate([(1.0, 1.0), (-0.5, 0.5), (0.25, 0.1)])


def test_fit_r2_of_noisy_data():
    # a kink away from a straight line lowers R^2 below one
    fit = fit_rate([(1, 1), (2, 4), (4, 4), (8, 64)])
    assert 0 < fit.r2 < 1


# -- moments ---------------------------------------------------------------------------


@given(
    x=st.lists(st.floats(1e-6, 1e3), min_size=2, max_size=30),
    q=st.floats(2, 8),
    dq=st.floats(0.1, 4),
)
def test_power_mean_is_monotone_in_q(x, q, dq):
    x = np.array(x)
    a, b = power_mean(x, q), power_mean(x, q + dq)
    assert a <= b * (1 + 1e-12)
    assert b <= x.max() * (1 + 1e-12)
    assert a >= np.mean(x) * (1 - 1e-12)


def test_power_mean_of_constant_sample_is_exact():
    x = np.full(7, 0.3)
    for q in (2, 4, 8, 16):
        assert power_mean(x, q) == 0.3
    assert power_mean(np.zeros(3), 2) == 0.0


def test_power_mean_does_not_overflow():
    x = np.array([1e200, 2e200])
    assert power_mean(x, 8) == pytest.approx(((1 + 2**8) / 2) ** (1 / 8) * 1e200, rel=1e-12)


def test_jackknife_against_explicit_deletion():
    x = np.random.default_rng(0).exponential(size=25)
    q = 4
    est, se = jackknife_power_mean(x, q)
    loo = np.array([np.mean(np.delete(x, i) ** q) ** (1 / q) for i in range(x.size)])
    S = x.size
    ref = math.sqrt((S - 1) / S * np.sum((loo - loo.mean()) ** 2))
    assert est == pytest.approx(np.mean(x**q) ** (1 / q), rel=1e-12)
    assert se == pytest.approx(ref, rel=1e-10)
    assert jackknife_power_mean(x[:1], q)[1] == 0.0


# -- pathwise statistics --------------------------------------------------------------


def test_pathwise_constant_is_flat_for_exact_rate():
    Z = np.random.default_rng(1).exponential(size=100)
    errs = {k: 2.0 * k**0.25 * Z for k in (1 / 8, 1 / 16, 1 / 32, 1 / 64)}
    out = pathwise_stats(errs, 0.25)
    assert out["p95_ratio"] == pytest.approx(1.0, abs=1e-12) and out["stable"]
    row = out["table"][1 / 8]
    assert row["q5"] <= row["q50"] <= row["q95"]
    assert row["q50"] == pytest.approx(2.0 * np.quantile(Z, 0.5), rel=1e-12)


def test_pathwise_detects_wrong_rate():
    Z = np.ones(10)
    errs = {k: Z for k in (1 / 8, 1 / 128)}  # no decay at all
    out = pathwise_stats(errs, 0.5)
    assert out["p95_ratio"] == pytest.approx(4.0) and not out["stable"]


def test_pathwise_guards():
    with pytest.raises(ValueError):
        pathwise_stats({0.1: np.ones(3), 0.05: np.ones(3)}, 0.0)
    with pytest.raises(ValueError):
        pathwise_stats({0.1: np.ones(3)}, 0.25)


# -- configuration ----------------------------------------------------------------------

CONFIG = """
[model]
nu = 0.02
T = 0.5
u0 = taylor-green

[noise]
family = affine
sigma0 = 0.5
sigma1 = 0.5

[discretization]
M_list = 4, 8, 16
M_ref = 64
N_modes = 8

[experiment]
samples = 6
q_list = 2 4
seed = 7
time_slope = 0.3 0.7
"""


def test_config_parsing():
    cfg = ExperimentConfig.from_text(CONFIG)
    assert cfg.nu == 0.02 and cfg.M_list == (4, 8, 16) and cfg.q_list == (2.0, 4.0)
    assert cfg.seed == 7 and cfg.band("time_slope") == (0.3, 0.7)
    assert cfg.band("r2_min") == (0.95,)
    assert cfg.replace(samples=3).samples == 3


@pytest.mark.parametrize(
    "text",
    [
        "[model]\nviscosity = 1\n",
        "[solver]\nnu = 1\n",
        "[model]\nnu = fast\n",
        "[model]\nnu = -1\n",
        "[noise]\nfamily = gradient\n",
        "[discretization]\nM_list = 3 6\n",
        "[discretization]\nM_list = 4\nM_ref = 100\n",
        "[discretization]\nN_modes = 7\n",
        "[experiment]\nsamples = 1\n",
        "[experiment]\nq_list = 1\n",
        "[experiment]\ngamma1 = 0\n",
        "[discretization]\nscheme = implicit\n",
        "[model]\nu0 = vortex\n",
        "no section header",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_single_sample_allowed_without_noise():
    cfg = ExperimentConfig.from_text("[noise]\nsigma0 = 0\nsigma1 = 0\n[experiment]\nsamples = 1\n")
    assert cfg.samples == 1


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "absent.ini")


# -- comparator -----------------------------------------------------------------------------


def test_comparator_matches_direct_quadrature():
    m = build_torus_mesh(1.0, 4)
    th = taylor_hood(m)
    qt = th.quad
    g = spectral_grid(1.0, 8)
    f = from_function(tg, 1.0, 8)
    pfield = from_function(lambda x, y: np.cos(TWO_PI * x) * np.sin(4 * math.pi * y), 1.0, 8, vector=False, divfree=False)
    mask = (np.abs(f.coeffs).sum(axis=0) + np.abs(pfield.coeffs[0])) > 0
    iy, ix = np.nonzero(mask)
    cmp_ = Comparator(m, g, iy, ix)
    rng = np.random.default_rng(2)
    u = rng.standard_normal((th.nvel, 3))
    p = rng.standard_normal((th.n1, 3))
    uhat = np.repeat(f.coeffs[None, :, iy, ix][:, :, None, :], 3, axis=0)
    phat = np.repeat(pfield.coeffs[None, 0, iy, ix][:, None, :], 3, axis=0)

    ref_vals = eval_on_mesh(f, m)
    p_vals = eval_on_mesh(pfield, m)[0]
    for s in range(3):
        v = qt.velocity(u[:, s])
        direct = qt.integrate(((ref_vals - v) ** 2).sum(axis=0))
        assert cmp_.velocity_sq(uhat, u)[s] == pytest.approx(direct, rel=1e-10)
        direct_p = qt.integrate((p_vals - qt.scalar(p[:, s])) ** 2)
        assert cmp_.scalar_sq(phat, p)[s] == pytest.approx(direct_p, rel=1e-10)
    # gradients: spectral derivatives against FE shape-function derivatives
    n2 = th.n2
    dfx = eval_on_mesh(SpectralField(1j * g.kx * f.coeffs, 1.0), m)
    dfy = eval_on_mesh(SpectralField(1j * g.ky * f.coeffs, 1.0), m)
    grad = cmp_.gradient_sq(uhat, u)
    for s in range(3):
        total = 0.0
        for comp in range(2):
            c = u[comp * n2 : (comp + 1) * n2, s]
            total += qt.integrate((dfx[comp] - qt.p2_dx @ c) ** 2 + (dfy[comp] - qt.p2_dy @ c) ** 2)
        assert grad[s] == pytest.approx(total, rel=1e-10)


# -- engine -------------------------------------------------------------------------------


def test_spectral_errors_match_independent_trajectories():
    cfg = ExperimentConfig(**SMALL)
    rep = estimate_errors(cfg, [RunSpec("standard", 8, None, 64)])
    res = rep.resolutions[0]
    g = spectral_grid(1.0, 8)
    for s in range(cfg.samples):
        drv = make_driver(cfg.seed, cfg.T, 64, s)
        coarse = run_trajectory(cfg.scheme_config("standard", 8), drv, g, checkpoints=range(1, 9))
        fine = run_trajectory(cfg.scheme_config("standard", 64), drv, g, checkpoints=range(8, 65, 8))
        err = max(float(l2_norm(fine.snapshots[8 * n] - coarse.snapshots[n], 1.0)) for n in range(1, 9))
        assert res.max_err[s] == pytest.approx(err, rel=1e-10)
        eP = float(l2_norm(fine.P[None] - coarse.P[None], 1.0))
        assert res.err_P[s] == pytest.approx(eP, rel=1e-9, abs=1e-14)
    assert rep.checksums[0] == make_driver(cfg.seed, cfg.T, 64, 0).checksum()


def test_deterministic_single_sample_moments_coincide():
    cfg = ExperimentConfig(**{**SMALL, "sigma0": 0.0, "sigma1": 0.0, "samples": 1})
    rep = estimate_errors(cfg)
    for r in rep.resolutions:
        vals = {r.moments[q]["err_vel_maxL2"] for q in cfg.q_list}
        assert len(vals) == 1 and r.moments[2.0]["se"] == 0.0


def test_reports_are_reproducible():
    cfg = ExperimentConfig(**SMALL)
    a = estimate_errors(cfg).to_csv()
    assert a == estimate_errors(cfg).to_csv()
    assert a == estimate_errors(cfg.replace(workers=2)).to_csv()
    assert a != estimate_errors(cfg.replace(seed=1)).to_csv()


def test_chunking_does_not_change_results():
    cfg = ExperimentConfig(**SMALL)
    a = estimate_errors(cfg).resolutions
    b = estimate_errors(cfg.replace(chunk=1)).resolutions
    for x, y in zip(a, b):
        assert np.allclose(x.max_err, y.max_err, rtol=1e-12, atol=0)


def test_csv_layout():
    cfg = ExperimentConfig(**SMALL)
    rep = estimate_errors(cfg)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == CSV_HEADER
    assert len(rows) == 1 + len(cfg.M_list) * len(cfg.q_list)
    for row in rows[1:]:
        rec = dict(zip(CSV_HEADER, row))
        assert int(rec["samples"]) + int(rec["flagged"]) == cfg.samples
        assert rec["n"] == "" and rec["h"] == ""
    assert summary_json(rep).startswith("{")


def test_fem_runs_carry_mesh_size_and_divergence():
    cfg = ExperimentConfig(**{**SMALL, "n_list": (4,), "M_list": (8,), "samples": 2})
    rep = estimate_errors(cfg)
    r = rep.resolutions[0]
    assert r.n == 4 and r.h == pytest.approx(math.sqrt(2) / 4)
    assert r.max_divergence <= 1e-10 and r.max_err.size == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_is_flagged_and_fails():
    cfg = ExperimentConfig(**{**SMALL, "sigma1": 1e6, "T": 1.0})
    with pytest.raises(ExperimentFailure):
        estimate_errors(cfg)


def test_converge_time_fits_and_bands():
    cfg = ExperimentConfig(**SMALL)
    rep = converge_time(cfg)
    assert {"velocity_q2", "weakH1_q2", "P_q2", "R_q2"} <= set(rep.fits)
    assert set(rep.extra["stability"]) == {4, 8, 16}
    names = [c[0] for c in evaluate_bands(rep, "converge-time")]
    assert names[0] == "velocity slope q=2" and "stability variation" in names


def test_compare_noise_bands_from_ratios():
    cfg = ExperimentConfig(**SMALL)
    rep = ErrorReport(cfg, [], [])
    rep.extra = {
        "ratios": {"standard": {"err_P": 2.0}, "modified": {"err_P": 1.0}},
        "r_energy": {"modified": {64: 1.0, 128: 1.05}},
    }
    assert all(ok for _, ok, _ in evaluate_bands(rep, "compare-noise"))
    rep.extra["ratios"]["standard"]["err_P"] = 1.0
    rep.extra["r_energy"]["modified"][128] = 1.5
    oks = [ok for _, ok, _ in evaluate_bands(rep, "compare-noise")]
    assert oks == [False, True, False]
