"""Acceptance criteria, one test per criterion at the stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from atomphoton import experiments as exp
from atomphoton.config import RunConfig
from atomphoton.measurement import (
    BELL_BOUND_G2, Estimate, bell_settings_rad, chsh_S, g2_from_visibility, violation_significance, visibility_from_g2,
)
from atomphoton.montecarlo import RngSpec, run_experiment, sample_trials
from atomphoton.source import (
    ChainConfig, DetectorParams, GeometryParams, MemoryParams, SourceParams, chain_counts, chain_distributions,
    crosstalk_g2, mode_match, stokes_efficiency,
)

CHI_VALUES = (0.005, 0.01, 0.025, 0.05)
TSIRELSON = 2 * math.sqrt(2)


@pytest.fixture(scope="module")
def calibrated() -> ChainConfig:
    return RunConfig.load().chain()


@pytest.mark.acceptance(1, "matched g2 follows 1 + 1/chi within 3%")
def test_correlation_law(calibrated):
    start = time.perf_counter()
    det = replace(calibrated.detector, background_S=0.0, background_S_rate=0.0)
    src, mem = calibrated.source, calibrated.memory
    assert stokes_efficiency(0.5, mem, det) == pytest.approx(0.122, rel=1e-6)
    for chi in CHI_VALUES:
        g2 = crosstalk_g2(replace(src, chi_L=chi, chi_R=chi), mem, det, 0.5, n_max=6, matched=True).value
        assert g2 == pytest.approx(1 + 1 / chi, rel=0.03), chi
    assert time.perf_counter() - start < 10.0


@pytest.mark.acceptance(2, "visibility / g2 relation is an exact inverse pair")
def test_visibility_g2_identity():
    for g2 in np.linspace(1.0, 100.0, 2001):
        assert g2_from_visibility(visibility_from_g2(g2)).value == pytest.approx(g2, abs=1e-12 * max(1.0, g2))
    for v in np.linspace(0.0, 99 / 101, 2001):
        assert visibility_from_g2(g2_from_visibility(v)).value == pytest.approx(v, abs=1e-12)
    assert visibility_from_g2(38.0).value == pytest.approx(0.949, abs=1e-3)


@pytest.mark.acceptance(3, "visibility versus p_AS: intercept, slope, crossing, sampled agreement")
def test_visibility_sweep(calibrated):
    start = time.perf_counter()
    a = exp.sweep_visibility_vs_pas(calibrated, trials=10**6)
    analytic_seconds = time.perf_counter() - start
    fit = a.fit
    assert fit["intercept"] == pytest.approx(0.95, abs=0.02)
    assert fit["slope"] == pytest.approx(-25.0, abs=2.0)
    assert 1.0e-2 <= fit["crossing_p_AS"] <= 1.4e-2
    s = exp.sweep_visibility_vs_pas(calibrated, mode="sampled", trials=10**6, seed=2024)
    assert np.all(np.abs(s.values("V") - a.values("V")) <= 3 * s.errors("V"))
    assert analytic_seconds < 120.0
    assert time.perf_counter() - start < 120.0


@pytest.mark.acceptance(4, "no cross-talk between unmatched modes")
def test_no_crosstalk(calibrated):
    for chi in CHI_VALUES:
        src = replace(calibrated.source, chi_L=chi, chi_R=chi)
        for tau in (0.5, 20.5):
            unmatched = crosstalk_g2(src, calibrated.memory, calibrated.detector, tau, n_max=6).value
            matched = crosstalk_g2(src, calibrated.memory, calibrated.detector, tau, n_max=6, matched=True).value
            assert unmatched == pytest.approx(1.0, abs=1e-6)
            assert matched > 5.0


@pytest.mark.acceptance(5, "phase matching of the retrieved mode")
def test_mode_matching(calibrated):
    for geo in (GeometryParams(), calibrated.geometry):
        for arm in ("L", "R"):
            m = mode_match(geo, arm)
            assert m.counter_propagating
            assert m.residual < 1e-12


def random_chain(rng: np.random.Generator, n_max: int, near_ideal: bool = False) -> ChainConfig:
    """Random chain; ``near_ideal`` draws from the strongly violating corner."""
    if near_ideal:
        src = SourceParams(rng.uniform(1e-4, 0.02), rng.uniform(1e-4, 0.02), 0.0, 0.0, rng.uniform(0, 0.1),
                           rng.uniform(0.95, 1))
        mem = MemoryParams(rng.uniform(0.5, 1), "gaussian", rng.uniform(10, 50), 10 ** rng.uniform(3, 6))
        det = DetectorParams(rng.uniform(0.05, 1), rng.uniform(0.05, 1), 0.0, rng.uniform(0, 1e-5), 0.0)
        return ChainConfig(src, mem, det, n_max=n_max)
    src = SourceParams(rng.uniform(0, 0.3), rng.uniform(0, 0.3), rng.uniform(-math.pi, math.pi),
                       rng.uniform(-math.pi, math.pi), rng.uniform(0, 1), rng.uniform(0, 1))
    mem = MemoryParams(rng.uniform(0, 1), str(rng.choice(["gaussian", "exponential"])), rng.uniform(1, 50),
                       10 ** rng.uniform(0, 3))
    det = DetectorParams(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1e-2), rng.uniform(0, 1e-2),
                         rng.uniform(0, 1e-3))
    return ChainConfig(src, mem, det, n_max=n_max)


@pytest.mark.acceptance(6, "Bell parameter bands, monotone decay, Tsirelson bound")
def test_bell_bands(calibrated):
    start = time.perf_counter()
    r = exp.scan_bell_vs_tau(calibrated)
    s = dict(zip(r.grid.tolist(), r.values("S")))
    assert 2.45 <= s[0.5] <= 2.75
    assert 2.02 <= s[20.5] <= 2.32
    assert r.grid[0] == 0.5 and r.grid[-1] == 25.0
    assert np.all(np.diff(r.values("S")) <= 1e-12)

    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(1000):
        cfg = random_chain(rng, n_max=2, near_ideal=k % 2 == 1)
        tau = rng.uniform(0, 5) if k % 2 else rng.uniform(0, 30)
        a1, a2, b1, b2 = rng.uniform(0, math.pi, 4)
        random_settings = [(a1, b1), (a1, b2), (a2, b1), (a2, b2)]
        for settings in (random_settings, bell_settings_rad()):
            try:
                es = [c.correlation() for c in chain_counts(cfg, tau, settings)]
            except ValueError:
                continue  # no coincidences at all: S undefined
            worst = max(worst, chsh_S(*es).value)
    assert 2.7 < worst <= TSIRELSON + 1e-9
    assert time.perf_counter() - start < 300.0


@pytest.mark.acceptance(7, "retrieval and g2 anchors, g2 threshold crossing")
def test_decay_anchors():
    cal = exp.calibrate(exp.REFERENCE_ANCHORS)
    for (tau, target, _), resid in zip(exp.REFERENCE_ANCHORS.retrieval, cal.residuals["retrieval"]):
        eta = stokes_efficiency(tau, cal.memory, cal.detector)
        assert abs(eta - target) < 1e-3
        assert abs(resid) < 1e-3
    cfg = cal.config()
    r = exp.scan_retrieval_g2_vs_tau(cfg, taus=[0.5, 20.5])
    assert 8.3 <= r.values("g2")[1] <= 11.3
    crossing = r.fit["tau_g2_bell_bound"]
    assert 20.5 < crossing < 30.0
    assert exp.g2_threshold_tau(cfg, BELL_BOUND_G2) == pytest.approx(crossing)


@pytest.mark.acceptance(8, "deterministic sampling and 5 sigma pattern frequencies")
def test_monte_carlo(calibrated, tmp_path):
    settings = bell_settings_rad()
    files = []
    for name in ("a", "b"):
        _, records = run_experiment(calibrated, settings, 50000, RngSpec(77), return_records=True)
        records.to_csv(tmp_path / f"{name}.csv")
        files.append((tmp_path / f"{name}.csv").read_bytes())
    assert files[0] == files[1]

    rng = np.random.default_rng(8)
    n = 10**6
    for k in range(20):
        cfg = random_chain(rng, n_max=3)
        setting = tuple(rng.uniform(0, math.pi, 2))
        (p,) = chain_distributions(cfg, rng.uniform(0, 30), [setting])
        hist = sample_trials(p, n, k, RngSpec(1000 + k)).histogram()
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(hist - n * p) <= 5 * sigma + 1e-9), k


@pytest.mark.acceptance(9, "significance of the violation at 2.60 +- 0.03")
def test_significance():
    z = violation_significance(Estimate(2.60, 0.03))
    assert z == (2.60 - 2) / 0.03
    assert z == pytest.approx(20.0, rel=1e-12)
