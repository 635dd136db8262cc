import math
from dataclasses import replace

import numpy as np
import pytest

from atomphoton import experiments as exp
from atomphoton.config import RunConfig, load_anchors
from atomphoton.experiments import (
    Anchors, CalibrationError, ChainConfig, fit_linear_weighted, scan_bell_vs_tau, scan_retrieval_g2_vs_tau,
    sweep_visibility_vs_pas,
)
from atomphoton.measurement import BELL_BOUND_G2, visibility_from_g2
from atomphoton.source import DetectorParams, MemoryParams, SourceParams, chain_counts


@pytest.fixture(scope="module")
def cfg() -> ChainConfig:
    return RunConfig.load().chain()


# -- weighted fit -------------------------------------------------------------------

def test_fit_two_points_interpolates():
    f = fit_linear_weighted([1.0, 3.0], [2.0, 8.0], [0.1, 0.2])
    assert f.slope == pytest.approx(3.0) and f.intercept == pytest.approx(-1.0)
    assert f.chi2 == pytest.approx(0.0, abs=1e-20)


def test_fit_constant_data():
    f = fit_linear_weighted(np.arange(5.0), np.full(5, 4.2))
    assert f.slope == pytest.approx(0.0, abs=1e-14)
    assert f.intercept == pytest.approx(4.2)


def test_fit_noisy_line_within_error():
    rng = np.random.default_rng(3)
    x = np.linspace(0, 0.02, 15)
    sigma = np.full_like(x, 0.01)
    pulls = []
    for _ in range(200):
        f = fit_linear_weighted(x, 1 - 25 * x + rng.normal(0, sigma), sigma)
        pulls.append((f.slope + 25) / f.slope_err)
    pulls = np.array(pulls)
    assert abs(pulls.mean()) < 0.3
    assert 0.8 < pulls.std() < 1.2


def test_fit_covariance_closed_form():
    # unit weights: var(slope) = 1 / sum((x - mean)^2)
    x = np.array([0.0, 1.0, 2.0, 4.0])
    f = fit_linear_weighted(x, 2 * x + 1, np.ones(4))
    assert f.slope_err**2 == pytest.approx(1 / ((x - x.mean()) ** 2).sum())


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_linear_weighted([1.0], [1.0])
    with pytest.raises(ValueError):
        fit_linear_weighted([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        fit_linear_weighted([1.0, 2.0], [1.0, 2.0], [0.0, 1.0])


# -- calibration ----------------------------------------------------------------------

def test_shipped_anchors_match_constant():
    assert load_anchors() == exp.REFERENCE_ANCHORS


def test_decay_constant_by_brute_force_scan():
    T, prod = exp.fit_retrieval(exp.REFERENCE_ANCHORS)
    grid = np.linspace(10, 25, 150001)
    ratio = np.exp(-(20.5**2 - 0.5**2) / grid**2)
    T_scan = grid[np.argmin(np.abs(ratio - 0.022 / 0.122))]
    assert T == pytest.approx(T_scan, abs=2e-4)
    assert T == pytest.approx(15.7, abs=0.05)
    assert prod * math.exp(-(0.5 / T) ** 2) == pytest.approx(0.122, rel=1e-12)


def test_identical_retrieval_anchors_infeasible():
    a = replace(exp.REFERENCE_ANCHORS, retrieval=((0.5, 0.1, 0.01), (20.5, 0.1, 0.01)))
    with pytest.raises(CalibrationError):
        exp.calibrate(a)


def test_g2_anchor_above_noiseless_value_infeasible():
    a = replace(exp.REFERENCE_ANCHORS, g2=((0.5, 80.0, 1.0), (20.5, 9.8, 0.7)))
    with pytest.raises(CalibrationError):
        exp.calibrate(a)


def test_anchor_counts_enforced():
    with pytest.raises(ValueError):
        Anchors(retrieval=((0.5, 0.1, 0.01),), g2=((0.5, 38, 1), (20.5, 9.8, 0.7)), bell=((0.5, 2.6, 0.03),),
                visibility_intercept=0.95)


@pytest.mark.slow
def test_calibration_reproduces_shipped_defaults():
    cal = exp.calibrate(exp.REFERENCE_ANCHORS)
    shipped = RunConfig.load()
    for got, key in [(cal.memory.T, "T"), (cal.memory.eta_r0, "eta_r0"), (cal.memory.dephase_T, "dephase_T"),
                     (cal.detector.background_S, "background_S"),
                     (cal.detector.background_S_rate, "background_S_rate"), (cal.mode_overlap, "mode_overlap")]:
        assert got == pytest.approx(shipped[key], rel=1e-6), key
    assert cal.intrinsic_visibility == pytest.approx(0.95, abs=0.01)
    assert max(abs(r) for r in cal.residuals["retrieval"]) < 1e-3
    assert max(abs(r) for r in cal.residuals["g2"]) < 0.01 * 9.8
    assert all(abs(r) < 0.15 for r in cal.residuals["bell"])


# -- visibility sweep -------------------------------------------------------------------

def test_ideal_source_small_rate_fit():
    ideal = ChainConfig(SourceParams(), MemoryParams(), DetectorParams(eta_AS=0.08, eta_S=0.2))
    r = sweep_visibility_vs_pas(ideal, grid=np.linspace(1e-4, 1e-3, 4))
    assert r.fit["intercept"] == pytest.approx(1.0, abs=1e-3)
    assert r.fit["slope"] == pytest.approx(-25.0, abs=0.5)


def test_visibility_sweep_grid_validation(cfg):
    for grid in ([], [0.0, 1e-3], [1e-3, 0.5], [2e-3, 1e-3]):
        with pytest.raises(ValueError):
            sweep_visibility_vs_pas(cfg, grid=grid)


def test_visibility_sweep_single_point_and_provenance(cfg):
    r = sweep_visibility_vs_pas(cfg, grid=[2e-3])
    assert len(r.columns["V"]) == 1 and r.fit == {}
    assert r.provenance["mode"] == "analytic" and r.provenance["seed"] is None
    assert r.values("V")[0] == pytest.approx(0.95 - 25 * 2e-3, abs=0.01)


def test_analytic_sweep_is_seed_independent(cfg):
    a = sweep_visibility_vs_pas(cfg, grid=[1e-3, 4e-3], seed=1)
    b = sweep_visibility_vs_pas(cfg, grid=[1e-3, 4e-3], seed=2)
    np.testing.assert_array_equal(a.values("V"), b.values("V"))
    np.testing.assert_array_equal(a.errors("V"), b.errors("V"))


def test_sampled_sweep_agrees_with_analytic(cfg):
    grid = [2e-3, 1e-2]
    a = sweep_visibility_vs_pas(cfg, grid=grid, trials=200000)
    s = sweep_visibility_vs_pas(cfg, grid=grid, mode="sampled", trials=200000, seed=5)
    assert s.provenance == {"mode": "sampled", "seed": 5, "trials": 200000, "tau_us": 0.5}
    assert np.all(np.abs(s.values("V") - a.values("V")) < 3 * s.errors("V"))
    again = sweep_visibility_vs_pas(cfg, grid=grid, mode="sampled", trials=200000, seed=5)
    np.testing.assert_array_equal(again.values("V"), s.values("V"))


def test_sweep_grid_must_increase():
    with pytest.raises(ValueError):
        exp.SweepResult("bell", "tau_us", [1.0, 1.0], {})


def test_fringe_agrees_with_g2_relation(cfg):
    # with unit intrinsic visibility and no dephasing, V and (g2 - 1)/(g2 + 1) coincide up to multi-pair terms
    clean = replace(cfg, source=replace(cfg.source, mode_overlap=1.0), memory=replace(cfg.memory, dephase_T=1e9))
    settings = [(exp.FRINGE_THETA_AS, t) for t in exp.FRINGE_THETA_S] + [exp.G2_SETTING]
    for tau in (0.5, 10.0, 20.5, 25.0):
        counts = chain_counts(clean, tau, settings)
        v = exp.fringe_from_counts(counts[:-1], analytic=True).value
        g = counts[-1].g2("AS+", "S-")
        assert v == pytest.approx(visibility_from_g2(g).value, rel=0.02)


# -- Bell and decay scans ------------------------------------------------------------------

def test_bell_scan_monotone_and_flags(cfg):
    r = scan_bell_vs_tau(cfg)
    s = r.values("S")
    assert len(s) == 10
    assert np.all(np.diff(s) <= 1e-12)
    assert r.fit["above_classical"][0] and not r.fit["above_classical"][-1]
    assert r.fit["above_classical_2sigma"] == [bool(x - 2 >= 2 * e) for x, e in zip(s, r.errors("S"))]
    z = r.values("sigma_violation")
    np.testing.assert_allclose(z, (s - 2) / r.errors("S"))


def test_bell_fully_dephased_limit():
    cfg = ChainConfig(SourceParams(0.002, 0.002), MemoryParams(T=1e6, dephase_T=1e-3),
                      DetectorParams(eta_AS=1.0, eta_S=1.0), n_max=3)
    s = scan_bell_vs_tau(cfg, taus=[10.0]).values("S")[0]
    assert s <= 2.0
    assert s == pytest.approx(math.sqrt(2), abs=0.02)


def test_bell_rejects_negative_tau(cfg):
    with pytest.raises(ValueError):
        scan_bell_vs_tau(cfg, taus=[-1.0, 1.0])


def test_decay_scan(cfg):
    r = scan_retrieval_g2_vs_tau(cfg)
    eta, g2 = r.values("eta_retrieve"), r.values("g2")
    i0, i1 = list(r.grid).index(0.5), list(r.grid).index(20.5)
    assert eta[i0] == pytest.approx(0.122, abs=1e-3)
    assert eta[i1] == pytest.approx(0.022, abs=1e-3)
    assert g2[i0] == pytest.approx(38.0, rel=0.01)
    assert 8.3 <= g2[i1] <= 11.3
    assert np.all(np.diff(eta) <= 0) and np.all(np.diff(g2) <= 0)
    assert 20.5 < r.fit["tau_g2_bell_bound"] < 30.0
    t = r.fit["tau_g2_bell_bound"]
    assert exp.matched_g2(cfg.source, cfg.memory, cfg.detector, t, cfg.n_max).value == pytest.approx(BELL_BOUND_G2)


def test_decay_scan_sampled_matches_analytic_estimator(cfg):
    taus = [0.5, 20.5]
    s = scan_retrieval_g2_vs_tau(cfg, taus=taus, mode="sampled", trials=10**6, seed=3)
    at_rate = cfg.with_chi(2e-3 / cfg.detector.eta_AS)
    for k, tau in enumerate(taus):
        (c,) = chain_counts(at_rate, tau, [exp.G2_SETTING])
        exact_eta = exp.heralded_efficiency(c).value
        exact_g2 = c.g2("AS+", "S-").value
        assert abs(s.values("eta_retrieve")[k] - exact_eta) < 3 * s.errors("eta_retrieve")[k]
        assert abs(s.values("g2")[k] - exact_g2) < 3 * s.errors("g2")[k]
