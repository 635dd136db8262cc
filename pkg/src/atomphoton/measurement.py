"""Counting estimators: cross-correlation, visibility, polarization correlations, CHSH.

Count-based estimators carry first-order Poisson errors. Passing probabilities
with ``analytic=True`` returns the same value with ``std_err = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Detector order inside a 4-bit click mask, most significant bit first.
DETECTORS = ("AS+", "AS-", "S+", "S-")
BIT = {"AS+": 8, "AS-": 4, "S+": 2, "S-": 1}

# Basis-angle settings (degrees) for E11, E12, E21, E22.
BELL_SETTINGS_DEG = ((0.0, 22.5), (0.0, -22.5), (45.0, 22.5), (45.0, -22.5))
# Relative sign of each E term. The printed combination E11 - E12 - E21 - E22
# cancels to zero for the ideal |H,V> + |V,H> state at the settings above; this
# assignment is the one that reaches 2*sqrt(2) there. Frozen, see test_measurement.
CHSH_SIGNS = (1, 1, -1, 1)

BELL_BOUND_G2 = 3.0 + 2.0 * math.sqrt(2.0)


class UndefinedEstimate(ValueError):
    """Estimator has no defined value for these counts (e.g. zero singles)."""


@dataclass(frozen=True)
class Estimate:
    value: float
    std_err: float = 0.0
    n_effective: int = 0

    def __post_init__(self):
        if not self.std_err >= 0:
            raise ValueError(f"std_err must be >= 0, got {self.std_err}")

    def __float__(self):
        return float(self.value)


def _as_estimate(x) -> Estimate:
    return x if isinstance(x, Estimate) else Estimate(float(x))


# -- cross-correlation and visibility -----------------------------------------

def g2_estimator(joint, singles_AS, singles_S, trials, analytic: bool = False) -> Estimate:
    """Normalized coincidence rate (joint/trials) / ((singles_AS/trials) (singles_S/trials))."""
    if trials <= 0:
        raise UndefinedEstimate("g2 needs trials > 0")
    if singles_AS <= 0 or singles_S <= 0:
        raise UndefinedEstimate("g2 undefined: zero singles")
    value = joint * trials / (singles_AS * singles_S)
    if analytic:
        return Estimate(value)
    if joint <= 0:
        return Estimate(value, math.inf, 0)
    rel = math.sqrt(1.0 / joint + 1.0 / singles_AS + 1.0 / singles_S)
    return Estimate(value, value * rel, int(joint))


def visibility_from_g2(g2) -> Estimate:
    """V = (g2 - 1) / (g2 + 1)."""
    g = _as_estimate(g2)
    if g.value < 0:
        raise ValueError(f"g2 must be >= 0, got {g.value}")
    v = (g.value - 1.0) / (g.value + 1.0)
    err = 2.0 * g.std_err / (g.value + 1.0) ** 2
    return Estimate(v, err, g.n_effective)


def g2_from_visibility(visibility) -> Estimate:
    """Inverse of :func:`visibility_from_g2`: g2 = (1 + V) / (1 - V)."""
    v = _as_estimate(visibility)
    if not -1.0 <= v.value < 1.0:
        raise ValueError(f"visibility must lie in [-1, 1), got {v.value}")
    g = (1.0 + v.value) / (1.0 - v.value)
    err = 2.0 * v.std_err / (1.0 - v.value) ** 2
    return Estimate(g, err, v.n_effective)


def predicted_visibility(p_AS: float, eta_AS: float) -> float:
    """Small-excitation visibility 1 - 2 p_AS / eta_AS, clamped to [-1, 1]."""
    if eta_AS <= 0:
        raise ValueError("eta_AS must be positive")
    if not 0 <= p_AS <= eta_AS:
        raise ValueError(f"p_AS={p_AS} outside [0, eta_AS={eta_AS}]")
    return min(1.0, max(-1.0, 1.0 - 2.0 * p_AS / eta_AS))


def bell_bound_rate(eta_AS: float) -> float:
    """Detection rate at which the small-excitation visibility reaches 1/sqrt(2)."""
    return (1.0 - 1.0 / math.sqrt(2.0)) * eta_AS / 2.0


# -- polarization correlations -------------------------------------------------

def correlation_E(n_pp, n_pm, n_mp, n_mm, analytic: bool = False) -> Estimate:
    """(N++ + N-- - N+- - N-+) / total, binomial error."""
    total = n_pp + n_pm + n_mp + n_mm
    if total <= 0:
        raise UndefinedEstimate("correlation undefined: zero coincidences")
    e = (n_pp + n_mm - n_pm - n_mp) / total
    if analytic:
        return Estimate(e)
    return Estimate(e, math.sqrt(max(1.0 - e * e, 0.0) / total), int(total))


def chsh_S(E11, E12, E21, E22, signs: Sequence[int] = CHSH_SIGNS) -> Estimate:
    terms = [_as_estimate(e) for e in (E11, E12, E21, E22)]
    s = abs(sum(sg * t.value for sg, t in zip(signs, terms)))
    err = math.sqrt(sum(t.std_err**2 for t in terms))
    return Estimate(s, err, sum(t.n_effective for t in terms))


def violation_significance(S: Estimate) -> float:
    """Number of standard errors by which S exceeds the local-realist bound 2."""
    if S.std_err <= 0:
        raise ValueError("significance needs a positive std_err")
    return (S.value - 2.0) / S.std_err


def fringe_visibility(theta_S: Sequence[float], counts: Sequence[float], errors=None) -> Estimate:
    """Contrast of a coincidence fringe versus analyzer basis angle (radians).

    Fits ``c0 + c1 cos(2 theta) + c2 sin(2 theta)`` by least squares and returns
    ``sqrt(c1^2 + c2^2) / c0``. With ``errors=None`` the fit is unweighted and
    the result is treated as exact.
    """
    theta = np.asarray(theta_S, dtype=float)
    y = np.asarray(counts, dtype=float)
    if theta.size < 4:
        raise ValueError("fringe scan needs at least 4 points")
    if np.ptp(theta) < math.pi / 2 - 1e-12:
        raise ValueError("fringe scan must span at least half a period (90 deg of basis angle)")
    if np.all(y <= 0):
        raise UndefinedEstimate("degenerate fringe: no coincidences")
    design = np.column_stack([np.ones_like(theta), np.cos(2 * theta), np.sin(2 * theta)])
    w = np.ones_like(y) if errors is None else 1.0 / np.asarray(errors, dtype=float) ** 2
    lhs = design.T @ (design * w[:, None])
    coef = np.linalg.solve(lhs, design.T @ (w * y))
    c0, c1, c2 = coef
    if c0 <= 0:
        raise UndefinedEstimate("degenerate fringe: non-positive offset")
    amp = math.hypot(c1, c2)
    v = amp / c0
    if errors is None:
        return Estimate(v)
    cov = np.linalg.inv(lhs)
    if amp > 0:
        grad = np.array([-v / c0, c1 / (amp * c0), c2 / (amp * c0)])
    else:
        grad = np.array([0.0, 1.0 / c0, 0.0])
    return Estimate(v, float(math.sqrt(grad @ cov @ grad)), int(y.sum()))


# -- counts tables -------------------------------------------------------------

def _mask_sum(hist: np.ndarray, *detectors: str) -> float:
    need = sum(BIT[d] for d in detectors)
    idx = [m for m in range(16) if m & need == need]
    return hist[idx].sum()


@dataclass(frozen=True)
class SettingCounts:
    """Coincidence and singles counts at one pair of analyzer basis angles (radians).

    ``n_pp`` counts trials where AS+ and S+ both clicked, regardless of the other
    two detectors; likewise for the other three.
    """

    theta_AS: float
    theta_S: float
    trials: float
    n_pp: float
    n_pm: float
    n_mp: float
    n_mm: float
    singles: tuple[float, float, float, float]
    analytic: bool = False

    def __post_init__(self):
        s = dict(zip(DETECTORS, self.singles))
        checks = [
            (self.n_pp, ("AS+", "S+")), (self.n_pm, ("AS+", "S-")),
            (self.n_mp, ("AS-", "S+")), (self.n_mm, ("AS-", "S-")),
        ]
        tol = 1e-9 * max(self.trials, 1)
        for n, (a, b) in checks:
            if n < 0 or n > min(s[a], s[b]) + tol:
                raise ValueError(f"coincidence count {n} exceeds singles {a}/{b}")
        if any(x > self.trials + tol for x in self.singles):
            raise ValueError("singles exceed trials")

    @classmethod
    def from_histogram(cls, hist, theta_AS, theta_S, analytic=False) -> "SettingCounts":
        """Build from a 16-entry pattern histogram (or probability table if analytic)."""
        h = np.asarray(hist)
        num = float if analytic else int
        return cls(
            theta_AS=float(theta_AS), theta_S=float(theta_S), trials=num(h.sum()),
            n_pp=num(_mask_sum(h, "AS+", "S+")), n_pm=num(_mask_sum(h, "AS+", "S-")),
            n_mp=num(_mask_sum(h, "AS-", "S+")), n_mm=num(_mask_sum(h, "AS-", "S-")),
            singles=tuple(num(_mask_sum(h, d)) for d in DETECTORS),
            analytic=analytic,
        )

    def single(self, detector: str) -> float:
        return self.singles[DETECTORS.index(detector)]

    def coincidence(self, as_detector: str, s_detector: str) -> float:
        key = {("AS+", "S+"): self.n_pp, ("AS+", "S-"): self.n_pm,
               ("AS-", "S+"): self.n_mp, ("AS-", "S-"): self.n_mm}
        return key[(as_detector, s_detector)]

    def correlation(self) -> Estimate:
        return correlation_E(self.n_pp, self.n_pm, self.n_mp, self.n_mm, analytic=self.analytic)

    def g2(self, as_detector: str, s_detector: str) -> Estimate:
        return g2_estimator(self.coincidence(as_detector, s_detector), self.single(as_detector),
                            self.single(s_detector), self.trials, analytic=self.analytic)

    def p_AS(self) -> Estimate:
        """Mean click probability of one anti-Stokes detector."""
        n = self.single("AS+") + self.single("AS-")
        value = n / (2.0 * self.trials)
        if self.analytic:
            return Estimate(value)
        return Estimate(value, math.sqrt(max(n, 1.0)) / (2.0 * self.trials), int(n))

    def scaled(self, trials: float) -> "SettingCounts":
        """Expected counts for ``trials`` repetitions of a probability table.

        The result is treated as data, so estimators on it return the exact value
        together with the Poisson error expected at that trial count.
        """
        if not self.analytic:
            raise ValueError("only probability tables can be scaled to expected counts")
        if trials <= 0:
            raise ValueError("trials must be positive")
        k = trials / self.trials
        return SettingCounts(self.theta_AS, self.theta_S, float(trials), self.n_pp * k, self.n_pm * k,
                             self.n_mp * k, self.n_mm * k, tuple(s * k for s in self.singles), False)


def heralded_efficiency(counts: SettingCounts, herald: str = "AS+", target: str = "S-") -> Estimate:
    """Accidental-subtracted conditional click probability P(target|herald) - P(target)."""
    n_h = counts.single(herald)
    if n_h <= 0:
        raise UndefinedEstimate("heralded efficiency undefined: no herald clicks")
    cond = counts.coincidence(herald, target) / n_h
    value = cond - counts.single(target) / counts.trials
    if counts.analytic:
        return Estimate(value)
    return Estimate(value, math.sqrt(max(cond * (1.0 - cond), 0.0) / n_h), int(n_h))


@dataclass
class CountsTable:
    """Per-setting counts keyed by setting id."""

    settings: dict[int, SettingCounts] = field(default_factory=dict)

    def __getitem__(self, setting_id: int) -> SettingCounts:
        return self.settings[setting_id]

    def __len__(self):
        return len(self.settings)

    def find(self, theta_AS: float, theta_S: float, tol: float = 1e-9) -> SettingCounts:
        for c in self.settings.values():
            if abs(c.theta_AS - theta_AS) < tol and abs(c.theta_S - theta_S) < tol:
                return c
        raise KeyError(f"no setting at ({theta_AS}, {theta_S})")


def chsh_from_table(table: CountsTable, settings_rad: Sequence[tuple[float, float]]) -> tuple[Estimate, list[Estimate]]:
    """CHSH S from the four settings (in E11, E12, E21, E22 order)."""
    es = [table.find(a, b).correlation() for a, b in settings_rad]
    return chsh_S(*es), es


def bell_settings_rad() -> list[tuple[float, float]]:
    return [(math.radians(a), math.radians(b)) for a, b in BELL_SETTINGS_DEG]
