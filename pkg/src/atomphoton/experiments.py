"""Sweeps over detection rate and storage time, and calibration against quoted endpoints."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.optimize import brentq, least_squares, minimize_scalar

from . import montecarlo
from .measurement import (
    BELL_BOUND_G2, Estimate, SettingCounts, UndefinedEstimate, bell_settings_rad, chsh_S,
    fringe_visibility, heralded_efficiency, violation_significance,
)
from .montecarlo import RngSpec
from .source import (
    ChainConfig, DetectorParams, MemoryParams, PhysicsError, SourceParams,
    build_atom_photon_state, chain_counts, chain_distributions, matched_g2,
)

DEFAULT_TAU_GRID = (0.5, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 20.5, 23.0, 25.0)
DEFAULT_PAS_GRID = tuple(float(x) for x in np.round(np.arange(1, 17) * 1.25e-3, 10))
FRINGE_THETA_AS = math.pi / 4
FRINGE_THETA_S = tuple(np.linspace(0.0, math.pi, 8, endpoint=False))
G2_SETTING = (0.0, 0.0)  # H/V basis: AS+ = AS_H and S- = S_V belong to arm L
DEFAULT_TRIALS = 10**6


class CalibrationError(PhysicsError):
    """Anchors admit no physical solution."""


# -- fitting ---------------------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    cov: np.ndarray  # covariance of (slope, intercept)
    chi2: float

    @property
    def slope_err(self) -> float:
        return math.sqrt(self.cov[0, 0])

    @property
    def intercept_err(self) -> float:
        return math.sqrt(self.cov[1, 1])


def fit_linear_weighted(x, y, sigma=None) -> LinearFit:
    """Closed-form weighted least squares for y = slope * x + intercept.

    Without ``sigma`` all points get unit weight and the covariance is scaled
    by the residual variance.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or x.size != y.size:
        raise ValueError("need at least two (x, y) points of equal length")
    if sigma is None:
        w = np.ones_like(x)
    else:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), x.shape)
        if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("sigma must be positive and finite")
        w = sigma**-2.0
    s, sx, sy = w.sum(), (w * x).sum(), (w * y).sum()
    sxx, sxy = (w * x * x).sum(), (w * x * y).sum()
    delta = s * sxx - sx * sx
    if delta <= 0:
        raise ValueError("degenerate abscissae")
    slope = (s * sxy - sx * sy) / delta
    intercept = (sxx * sy - sx * sxy) / delta
    cov = np.array([[s, -sx], [-sx, sxx]]) / delta
    resid = y - (slope * x + intercept)
    chi2 = float((w * resid**2).sum())
    if sigma is None:
        dof = x.size - 2
        cov = cov * (chi2 / dof if dof > 0 else 0.0)
    return LinearFit(float(slope), float(intercept), cov, chi2)


# -- sweeps ----------------------------------------------------------------------

@dataclass
class SweepResult:
    kind: str
    variable: str
    grid: np.ndarray
    columns: dict[str, list[Estimate]]
    fit: dict[str, float] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.size > 1 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("sweep grid must be strictly increasing")

    def values(self, name: str) -> np.ndarray:
        return np.array([e.value for e in self.columns[name]])

    def errors(self, name: str) -> np.ndarray:
        return np.array([e.std_err for e in self.columns[name]])


def _check_mode(mode: str):
    if mode not in ("analytic", "sampled"):
        raise ValueError(f"mode must be 'analytic' or 'sampled', got {mode!r}")


def _measure(cfg: ChainConfig, tau: float, settings, mode: str, trials: int, rng: RngSpec,
             first_id: int, atom_photon=None) -> list[SettingCounts]:
    """Counts at each setting: expected counts (analytic) or sampled counts."""
    if mode == "analytic":
        return [c.scaled(trials) for c in chain_counts(cfg, tau, settings, atom_photon)]
    dists = chain_distributions(cfg, tau, settings, atom_photon)
    out = []
    for k, (d, (a, b)) in enumerate(zip(dists, settings)):
        rec = montecarlo.sample_trials(d, trials, first_id + k, rng)
        out.append(SettingCounts.from_histogram(rec.histogram(), a, b))
    return out


def fringe_from_counts(counts: Sequence[SettingCounts], analytic: bool) -> Estimate:
    theta = [c.theta_S for c in counts]
    y = [c.n_pp for c in counts]
    if analytic:
        return fringe_visibility(theta, y)
    return fringe_visibility(theta, y, errors=np.sqrt(np.maximum(y, 1.0)))


def visibility_fit(p_AS, V: Sequence[Estimate]) -> dict[str, float]:
    """Fit 1/V = c0 + c1 p_AS and report the small-rate line V = a - b p_AS.

    With g2 = 1 + 1/chi, the cross-correlation relation gives 1/V linear in the
    excitation probability, so this form absorbs the curvature of V itself.
    """
    v = np.array([e.value for e in V])
    err = np.array([e.std_err for e in V])
    y = 1.0 / v
    fit = fit_linear_weighted(p_AS, y, err / v**2 if np.all(err > 0) else None)
    c1, c0 = fit.slope, fit.intercept
    a, b = 1.0 / c0, c1 / c0**2
    # d(a, b)/d(c1, c0)
    jac = np.array([[0.0, -1.0 / c0**2], [1.0 / c0**2, -2.0 * c1 / c0**3]])
    cov = jac @ fit.cov @ jac.T
    return {
        "intercept": a, "intercept_err": math.sqrt(cov[0, 0]),
        "slope": -b, "slope_err": math.sqrt(cov[1, 1]),
        "inv_intercept": c0, "inv_slope": c1, "chi2": fit.chi2,
        "crossing_p_AS": (math.sqrt(2.0) - c0) / c1 if c1 > 0 else math.inf,
        "line_crossing_p_AS": (a - 1.0 / math.sqrt(2.0)) / b if b > 0 else math.inf,
    }


def sweep_visibility_vs_pas(cfg: ChainConfig, grid: Sequence[float] = DEFAULT_PAS_GRID,
                            mode: str = "analytic", trials: int = DEFAULT_TRIALS, seed: int = 0,
                            tau: float = 0.5) -> SweepResult:
    """Fringe visibility versus anti-Stokes detection rate p_AS = eta_AS * chi.

    The anti-Stokes analyzer sits in the 45 degree basis and the Stokes analyzer
    scans ``FRINGE_THETA_S``; V is the AS+/S+ coincidence fringe contrast.
    """
    _check_mode(mode)
    eta_AS = cfg.detector.eta_AS
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(grid > eta_AS):
        raise ValueError("p_AS grid must lie in (0, eta_AS]")
    rng = RngSpec(seed)
    settings = [(FRINGE_THETA_AS, t) for t in FRINGE_THETA_S]
    vis, rate = [], []
    for j, p in enumerate(grid):
        counts = _measure(cfg.with_chi(p / eta_AS), tau, settings, mode, trials, rng, j * len(settings))
        vis.append(fringe_from_counts(counts, analytic=False))
        n_as = sum(c.single("AS+") + c.single("AS-") for c in counts)
        total = 2.0 * sum(c.trials for c in counts)
        rate.append(Estimate(n_as / total, math.sqrt(n_as) / total, int(n_as)))
    result = SweepResult("visibility", "p_AS", grid, {"V": vis, "p_AS_measured": rate},
                         provenance={"mode": mode, "seed": seed if mode == "sampled" else None,
                                     "trials": trials, "tau_us": tau})
    if grid.size >= 2:
        result.fit = visibility_fit(grid, vis)
    return result


def bell_point(cfg: ChainConfig, tau: float, mode: str, trials: int, rng: RngSpec, first_id: int = 0,
               atom_photon=None) -> tuple[Estimate, list[Estimate]]:
    counts = _measure(cfg, tau, bell_settings_rad(), mode, trials, rng, first_id, atom_photon)
    es = [c.correlation() for c in counts]
    return chsh_S(*es), es


def scan_bell_vs_tau(cfg: ChainConfig, taus: Sequence[float] = DEFAULT_TAU_GRID, mode: str = "analytic",
                     trials: int = DEFAULT_TRIALS, seed: int = 0) -> SweepResult:
    _check_mode(mode)
    taus = np.asarray(taus, dtype=float)
    if np.any(taus < 0):
        raise ValueError("storage times must be >= 0")
    rng = RngSpec(seed)
    atom_photon = build_atom_photon_state(cfg.source, cfg.n_max)
    s_vals, sig = [], []
    for j, tau in enumerate(taus):
        s, _ = bell_point(cfg, tau, mode, trials, rng, 4 * j, atom_photon)
        s_vals.append(s)
        sig.append(Estimate(violation_significance(s)) if s.std_err > 0 else Estimate(math.nan))
    result = SweepResult("bell", "tau_us", taus, {"S": s_vals, "sigma_violation": sig},
                         provenance={"mode": mode, "seed": seed if mode == "sampled" else None,
                                     "trials": trials})
    result.fit = {
        "above_classical": [bool(s.value > 2.0) for s in s_vals],
        "above_classical_2sigma": [bool(s.value - 2.0 >= 2.0 * s.std_err) for s in s_vals],
    }
    return result


def g2_threshold_tau(cfg: ChainConfig, threshold: float = BELL_BOUND_G2, t_lo: float = 0.0,
                     t_hi: float = 200.0) -> float:
    """Storage time at which the matched-pair g2 first falls to ``threshold``."""
    def f(t):
        return matched_g2(cfg.source, cfg.memory, cfg.detector, t, cfg.n_max).value - threshold
    if f(t_lo) <= 0:
        return t_lo
    if f(t_hi) > 0:
        return math.inf
    return brentq(f, t_lo, t_hi, xtol=1e-9)


def scan_retrieval_g2_vs_tau(cfg: ChainConfig, taus: Sequence[float] = DEFAULT_TAU_GRID,
                             mode: str = "analytic", trials: int = DEFAULT_TRIALS, seed: int = 0,
                             p_AS: float | None = 2e-3) -> SweepResult:
    """Retrieval efficiency and matched-pair g2 versus storage time at fixed p_AS.

    Analytic mode reports the model retrieval efficiency per stored excitation;
    sampled mode reports the accidental-subtracted heralded efficiency.
    """
    _check_mode(mode)
    if p_AS is not None:
        cfg = cfg.with_chi(p_AS / cfg.detector.eta_AS)
    taus = np.asarray(taus, dtype=float)
    rng = RngSpec(seed)
    atom_photon = build_atom_photon_state(cfg.source, cfg.n_max)
    eta, g2 = [], []
    for j, tau in enumerate(taus):
        (c,) = _measure(cfg, tau, [G2_SETTING], mode, trials, rng, j, atom_photon)
        g = c.g2("AS+", "S-")
        if mode == "analytic":
            exact = cfg.memory.retrieval(tau) * cfg.detector.eta_S
            eta.append(Estimate(exact, heralded_efficiency(c).std_err, c.n_pm))
        else:
            eta.append(heralded_efficiency(c))
        g2.append(g)
    result = SweepResult("decay", "tau_us", taus, {"eta_retrieve": eta, "g2": g2},
                         provenance={"mode": mode, "seed": seed if mode == "sampled" else None,
                                     "trials": trials, "p_AS": p_AS})
    result.fit = {"tau_g2_bell_bound": g2_threshold_tau(cfg)}
    return result


# -- calibration -------------------------------------------------------------------

@dataclass(frozen=True)
class Anchors:
    """Quoted endpoint values. Each anchor is (tau_us, value, std_err)."""

    retrieval: tuple[tuple[float, float, float], ...]
    g2: tuple[tuple[float, float, float], ...]
    bell: tuple[tuple[float, float, float], ...]
    visibility_intercept: float
    p_AS: float = 2e-3
    eta_AS: float = 0.08
    eta_S: float = 0.2
    shape: str = "gaussian"
    visibility_tau: float = 0.5
    n_max: int = 6

    def __post_init__(self):
        for name in ("retrieval", "g2", "bell"):
            object.__setattr__(self, name, tuple(tuple(float(v) for v in a) for a in getattr(self, name)))
        if len(self.retrieval) < 2:
            raise ValueError("calibration needs at least 2 retrieval anchors")
        if len(self.g2) < 2:
            raise ValueError("calibration needs at least 2 g2 anchors")
        if len(self.bell) < 1:
            raise ValueError("calibration needs at least 1 Bell anchor")


REFERENCE_ANCHORS = Anchors(
    retrieval=((0.5, 0.122, 0.004), (20.5, 0.022, 0.001)),
    g2=((0.5, 38.0, 1.0), (20.5, 9.8, 0.7)),
    bell=((0.5, 2.60, 0.03), (20.5, 2.17, 0.07)),
    visibility_intercept=0.95,
)


@dataclass(frozen=True)
class Calibration:
    memory: MemoryParams
    detector: DetectorParams
    mode_overlap: float
    chi: float
    residuals: dict

    @property
    def intrinsic_visibility(self) -> float:
        return self.mode_overlap

    def config(self, n_max: int = 6, base: ChainConfig | None = None) -> ChainConfig:
        base = base or ChainConfig()
        src = replace(base.source, chi_L=self.chi, chi_R=self.chi, mode_overlap=self.mode_overlap,
                      phase_jitter_sigma=0.0)
        return replace(base, source=src, memory=self.memory, detector=self.detector, n_max=n_max)


def _decay_abscissa(tau, shape):
    tau = np.asarray(tau, dtype=float)
    return tau**2 if shape == "gaussian" else tau


def fit_retrieval(anchors: Anchors) -> tuple[float, float]:
    """Decay constant T and the product eta_r0 * eta_S from the retrieval anchors."""
    tau, eta, err = np.array(anchors.retrieval).T
    if np.any(eta <= 0):
        raise CalibrationError("retrieval anchors must be positive")
    if np.ptp(tau) == 0:
        raise CalibrationError("retrieval anchors need two distinct storage times")
    fit = fit_linear_weighted(_decay_abscissa(tau, anchors.shape), np.log(eta), err / eta)
    if fit.slope >= 0:
        raise CalibrationError("retrieval anchors do not decay; no positive decay constant exists")
    T = (-1.0 / fit.slope) ** (0.5 if anchors.shape == "gaussian" else 1.0)
    return float(T), float(math.exp(fit.intercept))


@lru_cache(maxsize=8)
def calibrate(anchors: Anchors = REFERENCE_ANCHORS) -> Calibration:
    """Fit memory decay, Stokes background and intrinsic visibility to the anchors.

    Order: retrieval decay (closed form), background (g2 anchors), intrinsic
    visibility (intercept of a visibility sweep), spin dephasing (Bell anchors).
    """
    residuals: dict = {}
    chi = anchors.p_AS / anchors.eta_AS
    T, eta0 = fit_retrieval(anchors)
    if eta0 > anchors.eta_S:
        raise CalibrationError(f"retrieval product {eta0:.4g} exceeds eta_S={anchors.eta_S}")
    memory = MemoryParams(eta_r0=eta0 / anchors.eta_S, shape=anchors.shape, T=T, dephase_T=1e9)
    residuals["retrieval"] = [memory.retrieval(t) * anchors.eta_S - e for t, e, _ in anchors.retrieval]

    src = SourceParams(chi, chi)
    noiseless = DetectorParams(eta_AS=anchors.eta_AS, eta_S=anchors.eta_S)
    for t, g, _ in anchors.g2:
        ideal = matched_g2(src, memory, noiseless, t, anchors.n_max).value
        if g > ideal:
            raise CalibrationError(f"g2 anchor {g} at {t} us exceeds the noiseless value {ideal:.4g}")

    def g2_resid(x):
        det = replace(noiseless, background_S=x[0], background_S_rate=x[1])
        return [(matched_g2(src, memory, det, t, anchors.n_max).value - g) / e for t, g, e in anchors.g2]

    sol = least_squares(g2_resid, x0=[1e-4, 1e-5], bounds=([0.0, 0.0], [0.5, 0.05]),
                        x_scale=[1e-4, 1e-5], xtol=1e-14, ftol=1e-14, gtol=1e-14)
    detector = replace(noiseless, background_S=float(sol.x[0]), background_S_rate=float(sol.x[1]))
    residuals["g2"] = [r * e for r, (_, _, e) in zip(g2_resid(sol.x), anchors.g2)]

    base = ChainConfig(SourceParams(chi, chi), memory, detector, n_max=anchors.n_max)
    # V scales linearly with the mode overlap, so one sweep at overlap 1 fixes it.
    sweep = sweep_visibility_vs_pas(base, tau=anchors.visibility_tau)
    overlap = anchors.visibility_intercept / sweep.fit["intercept"]
    if not 0 < overlap <= 1:
        raise CalibrationError(f"visibility intercept {anchors.visibility_intercept} is not reachable")
    base = replace(base, source=replace(base.source, mode_overlap=overlap))
    residuals["visibility_intercept"] = 0.0

    atom_photon = build_atom_photon_state(base.source, base.n_max)

    def bell_model(dT):
        cfg = replace(base, memory=replace(memory, dephase_T=dT))
        return [bell_point(cfg, t, "analytic", 1, RngSpec(0), atom_photon=atom_photon)[0].value
                for t, _, _ in anchors.bell]

    def chi2(log_dT):
        return sum(((s - S) / e) ** 2 for s, (_, S, e) in zip(bell_model(10.0**log_dT), anchors.bell))

    opt = minimize_scalar(chi2, bounds=(0.0, 6.0), method="bounded", options={"xatol": 1e-4})
    memory = replace(memory, dephase_T=float(10.0**opt.x))
    residuals["bell"] = [s - S for s, (_, S, _) in zip(bell_model(memory.dephase_T), anchors.bell)]
    return Calibration(memory, detector, overlap, chi, residuals)
