"""The write / store / read chain of the dual-mode ensemble source.

Arm L pairs anti-Stokes polarization H with spin mode L, arm R pairs V with
spin mode R. After storage the spin modes are read out as Stokes photons,
spin_L into S_V and spin_R into S_H, so the heralded pair is
(|H>_AS |V>_S + e^{i(phi1+phi2)} |V>_AS |H>_S) / sqrt(2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fock
from .fock import ModeRegister, QuantumState
from .measurement import DETECTORS, Estimate, SettingCounts, g2_estimator

ATOM_PHOTON_MODES = ("AS_H", "AS_V", "spin_L", "spin_R")
PHOTONIC_MODES = ("AS_H", "AS_V", "S_H", "S_V")
SHAPES = ("gaussian", "exponential")

# Analyzer outputs: after mixing, AS_H/S_H carry the "+" port and AS_V/S_V the "-" port.
ANALYZER_PORTS = {"AS+": "AS_H", "AS-": "AS_V", "S+": "S_H", "S-": "S_V"}


class PhysicsError(ValueError):
    """Parameters describe an infeasible physical configuration."""


def _check(cond: bool, msg: str):
    if not cond:
        raise PhysicsError(msg)


@dataclass(frozen=True)
class SourceParams:
    chi_L: float = 0.025
    chi_R: float = 0.025
    phi1: float = 0.0
    phi2: float = 0.0
    phase_jitter_sigma: float = 0.0
    mode_overlap: float = 1.0

    def __post_init__(self):
        _check(0.0 <= self.chi_L < 1.0, f"chi_L out of range: {self.chi_L}")
        _check(0.0 <= self.chi_R < 1.0, f"chi_R out of range: {self.chi_R}")
        _check(0.0 <= self.mode_overlap <= 1.0, f"mode_overlap out of range: {self.mode_overlap}")
        _check(self.phase_jitter_sigma >= 0.0, f"phase_jitter_sigma out of range: {self.phase_jitter_sigma}")

    @property
    def intrinsic_visibility(self) -> float:
        return self.mode_overlap * math.exp(-0.5 * self.phase_jitter_sigma**2)


@dataclass(frozen=True)
class MemoryParams:
    """Storage model. Times in microseconds."""

    eta_r0: float = 1.0
    shape: str = "gaussian"
    T: float = 15.7
    dephase_T: float = 1e6

    def __post_init__(self):
        _check(0.0 <= self.eta_r0 <= 1.0, f"eta_r0 out of range: {self.eta_r0}")
        _check(self.shape in SHAPES, f"shape must be one of {SHAPES}, got {self.shape!r}")
        _check(self.T > 0, f"T out of range: {self.T}")
        _check(self.dephase_T > 0, f"dephase_T out of range: {self.dephase_T}")

    def _decay(self, tau: float, scale: float) -> float:
        x = tau / scale
        return math.exp(-x * x) if self.shape == "gaussian" else math.exp(-x)

    def retrieval(self, tau: float) -> float:
        """Intrinsic retrieval efficiency after storing for ``tau``."""
        _check(tau >= 0, f"storage time must be >= 0, got {tau}")
        return self.eta_r0 * self._decay(tau, self.T)

    def kappa(self, tau: float) -> float:
        """Spin dephasing strength accumulated over ``tau``."""
        _check(tau >= 0, f"storage time must be >= 0, got {tau}")
        return 1.0 - self._decay(tau, self.dephase_T)


@dataclass(frozen=True)
class DetectorParams:
    """Channel efficiencies and per-gate noise.

    ``background_S`` and ``background_S_rate`` (per microsecond of storage) give
    the uncorrelated click probability added to each Stokes detector.
    """

    eta_AS: float = 0.08
    eta_S: float = 1.0
    dark_prob: float = 0.0
    background_S: float = 0.0
    background_S_rate: float = 0.0

    def __post_init__(self):
        _check(0.0 <= self.eta_AS <= 1.0, f"eta_AS out of range: {self.eta_AS}")
        _check(0.0 <= self.eta_S <= 1.0, f"eta_S out of range: {self.eta_S}")
        _check(0.0 <= self.dark_prob < 1.0, f"dark_prob out of range: {self.dark_prob}")
        _check(0.0 <= self.background_S < 1.0, f"background_S out of range: {self.background_S}")
        _check(self.background_S_rate >= 0.0, f"background_S_rate out of range: {self.background_S_rate}")

    def stokes_background(self, tau: float) -> float:
        return min(self.background_S + self.background_S_rate * tau, 1.0 - 1e-12)

    def stokes_dark(self, tau: float) -> float:
        return 1.0 - (1.0 - self.dark_prob) * (1.0 - self.stokes_background(tau))


def _unit(v) -> np.ndarray:
    return np.asarray(v, dtype=float)


def _direction(deg_from_z: float) -> tuple[float, float, float]:
    a = math.radians(deg_from_z)
    return (math.sin(a), 0.0, math.cos(a))


@dataclass(frozen=True)
class GeometryParams:
    """Beam directions (unit 3-vectors) and the common wavenumber (rad/m)."""

    k_W: tuple[float, float, float] = (0.0, 0.0, 1.0)
    k_R: tuple[float, float, float] = (0.0, 0.0, -1.0)
    k_AS_L: tuple[float, float, float] = field(default_factory=lambda: _direction(3.0))
    k_AS_R: tuple[float, float, float] = field(default_factory=lambda: _direction(-3.0))
    wavenumber: float = 2 * math.pi / 795e-9

    def __post_init__(self):
        for name in ("k_W", "k_R", "k_AS_L", "k_AS_R"):
            v = _unit(getattr(self, name))
            _check(v.shape == (3,), f"{name} must be a 3-vector")
            _check(abs(np.linalg.norm(v) - 1.0) <= 1e-12, f"{name} is not unit-norm")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        _check(self.wavenumber > 0, "wavenumber must be positive")


@dataclass(frozen=True)
class ModeMatch:
    k_S: np.ndarray  # predicted Stokes wavevector, units of the common wavenumber
    counter_propagating: bool
    residual: float  # |k_S_hat + k_AS_hat|
    mismatch_angle: float  # angle between k_S and -k_AS, rad
    magnitude_error: float  # |k_S| - 1, relative phase-mismatch


def mode_match(geo: GeometryParams, arm: str = "L", tol: float = 1e-3) -> ModeMatch:
    """Stokes direction from momentum conservation k_S = k_R + k_W - k_AS."""
    k_as = _unit(geo.k_AS_L if arm == "L" else geo.k_AS_R)
    k_s = _unit(geo.k_R) + _unit(geo.k_W) - k_as
    norm = np.linalg.norm(k_s)
    _check(norm > 0, "degenerate geometry: predicted Stokes wavevector vanishes")
    k_hat = k_s / norm
    residual = float(np.linalg.norm(k_hat + k_as))
    cosang = float(np.clip(-k_hat @ k_as, -1.0, 1.0))
    angle = 2.0 * math.asin(min(residual / 2.0, 1.0)) if cosang > 0 else math.acos(cosang)
    return ModeMatch(k_s, residual < tol, residual, angle, float(norm - 1.0))


# -- state chain -----------------------------------------------------------------

def build_atom_photon_state(src: SourceParams, n_max: int = 6) -> QuantumState:
    """Write step: both arms excited, phi1 on the V path, overlap and jitter folded in."""
    reg = ModeRegister(ATOM_PHOTON_MODES, n_max)
    d = reg.local_dim
    # Both arms start in vacuum, so the product of the two pair kets is the state.
    pair = np.zeros((2, d, d), dtype=complex)
    for k, chi in enumerate((src.chi_L, src.chi_R)):
        pair[k][np.arange(d), np.arange(d)] = fock.pair_amplitudes(chi, n_max)
    # axes (AS_H, spin_L) x (AS_V, spin_R) -> (AS_H, AS_V, spin_L, spin_R)
    ket = np.einsum("ac,bd->abcd", pair[0], pair[1]).ravel()
    state = QuantumState(reg, np.outer(ket, ket.conj()))
    state = fock.phase_shift(state, "AS_V", src.phi1)
    if src.phase_jitter_sigma > 0:
        state = fock.phase_diffuse(state, "AS_V", src.phase_jitter_sigma)
    if src.mode_overlap < 1.0:
        incoherent = fock.dephase(state, "AS_V", 1.0)
        state = fock.mix([state, incoherent], [src.mode_overlap, 1.0 - src.mode_overlap])
    return state


def store(state: QuantumState, tau: float, mem: MemoryParams) -> QuantumState:
    kappa = mem.kappa(tau)
    if kappa == 0.0:
        return state
    for mode in ("spin_L", "spin_R"):
        state = fock.dephase(state, mode, kappa)
    return state


def stokes_efficiency(tau: float, mem: MemoryParams, det: DetectorParams) -> float:
    """Probability that one stored excitation yields a Stokes photon at its detector."""
    eta = mem.retrieval(tau) * det.eta_S
    _check(eta <= 1.0, f"retrieval efficiency {eta} exceeds 1")
    return eta


def retrieve(state: QuantumState, tau: float, mem: MemoryParams, det: DetectorParams,
             phi2: float = 0.0) -> QuantumState:
    """Read step: spin_L -> S_V and spin_R -> S_H, lossy, then phi2 on the S_H path."""
    eta = stokes_efficiency(tau, mem, det)
    state = fock.rename(state, {"spin_L": "S_V", "spin_R": "S_H"})
    for mode in ("S_V", "S_H"):
        state = fock.loss_channel(state, mode, eta)
    state = fock.phase_shift(state, "S_H", phi2)
    return fock.reorder(state, PHOTONIC_MODES)


def photonic_state(src: SourceParams, mem: MemoryParams, det: DetectorParams, tau: float,
                   n_max: int = 6, atom_photon: QuantumState | None = None) -> QuantumState:
    """Write, store and read; anti-Stokes loss not yet applied."""
    if atom_photon is None:
        atom_photon = build_atom_photon_state(src, n_max)
    return retrieve(store(atom_photon, tau, mem), tau, mem, det, src.phi2)


def apply_as_loss(state: QuantumState, det: DetectorParams) -> QuantumState:
    for mode in ("AS_H", "AS_V"):
        state = fock.loss_channel(state, mode, det.eta_AS)
    return state


def detector_list(det: DetectorParams, tau: float) -> list[tuple[str, float]]:
    s_dark = det.stokes_dark(tau)
    darks = {"AS+": det.dark_prob, "AS-": det.dark_prob, "S+": s_dark, "S-": s_dark}
    return [(ANALYZER_PORTS[d], darks[d]) for d in DETECTORS]


def analyzer_probabilities(state: QuantumState, theta_AS: float, theta_S: float,
                           det: DetectorParams, tau: float = 0.0,
                           as_loss_applied: bool = False) -> np.ndarray:
    """16-entry click distribution indexed by the (AS+, AS-, S+, S-) mask.

    Angles are analyzer basis angles in radians: "+" projects onto
    cos(theta)|H> + sin(theta)|V>. Equal anti-Stokes losses commute with the
    analyzer rotation, so they are applied before it; a state that already
    carries them may be passed with ``as_loss_applied=True``.
    """
    _check(state.register.modes == PHOTONIC_MODES, f"analyzer expects modes {PHOTONIC_MODES}")
    if not as_loss_applied:
        state = apply_as_loss(state, det)
    n_max = state.register.n_max
    pops = fock.unitary_populations(state, [
        (("AS_H", "AS_V"), fock.su2_unitary(n_max, float(theta_AS), 0.0)),
        (("S_H", "S_V"), fock.su2_unitary(n_max, float(theta_S), 0.0)),
    ])
    darks = [dk for _, dk in detector_list(det, tau)]
    return fock.click_table(pops, darks).ravel()


def analyzer_counts(state, theta_AS, theta_S, det, tau=0.0, as_loss_applied=False) -> SettingCounts:
    """Exact click probabilities packaged as an analytic :class:`SettingCounts`."""
    dist = analyzer_probabilities(state, theta_AS, theta_S, det, tau, as_loss_applied)
    return SettingCounts.from_histogram(dist, theta_AS, theta_S, analytic=True)


def matched_g2(src: SourceParams, mem: MemoryParams, det: DetectorParams, tau: float,
               n_max: int = 6) -> Estimate:
    """g2 between AS_H and its phase-conjugate Stokes mode S_V (arm L).

    Arm L is independent of arm R, so this runs on the two-mode arm alone.
    """
    reg = ModeRegister(("AS_H", "S_V"), n_max)
    state = fock.two_mode_squeeze(fock.vacuum(reg), "AS_H", "S_V", src.chi_L)
    state = fock.loss_channel(state, "AS_H", det.eta_AS)
    state = fock.loss_channel(state, "S_V", stokes_efficiency(tau, mem, det))
    p = fock.click_probabilities(state, [("AS_H", det.dark_prob), ("S_V", det.stokes_dark(tau))])
    return g2_estimator(p[1, 1], p[1, :].sum(), p[:, 1].sum(), 1.0, analytic=True)


def crosstalk_g2(src: SourceParams, mem: MemoryParams, det: DetectorParams, tau: float,
                 n_max: int = 6, matched: bool = False) -> Estimate:
    """g2 between AS_V (arm R) and S_V (read out of arm L) on the full chain.

    With ``matched=True`` pairs AS_H with S_V instead. Raises
    :class:`~atomphoton.measurement.UndefinedEstimate` when an arm is dark.
    """
    state = photonic_state(src, mem, det, tau, n_max)
    counts = analyzer_counts(state, 0.0, 0.0, det, tau)
    return counts.g2("AS+" if matched else "AS-", "S-")


@dataclass(frozen=True)
class ChainConfig:
    """Everything needed to evaluate the chain at one storage time."""

    source: SourceParams = field(default_factory=SourceParams)
    memory: MemoryParams = field(default_factory=MemoryParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    geometry: GeometryParams = field(default_factory=GeometryParams)
    n_max: int = 6

    def with_chi(self, chi: float) -> "ChainConfig":
        return replace(self, source=replace(self.source, chi_L=chi, chi_R=chi))


def detected_state(cfg: ChainConfig, tau: float, atom_photon: QuantumState | None = None) -> QuantumState:
    """Photonic state at the analyzers, anti-Stokes loss included."""
    state = photonic_state(cfg.source, cfg.memory, cfg.detector, tau, cfg.n_max, atom_photon)
    return apply_as_loss(state, cfg.detector)


def chain_distributions(cfg: ChainConfig, tau: float, settings, atom_photon: QuantumState | None = None) -> list[np.ndarray]:
    """16-entry click distributions for each (theta_AS, theta_S) setting in radians."""
    state = detected_state(cfg, tau, atom_photon)
    return [analyzer_probabilities(state, a, b, cfg.detector, tau, as_loss_applied=True)
            for a, b in settings]


def chain_counts(cfg: ChainConfig, tau: float, settings, atom_photon: QuantumState | None = None) -> list[SettingCounts]:
    dists = chain_distributions(cfg, tau, settings, atom_photon)
    return [SettingCounts.from_histogram(d, a, b, analytic=True) for d, (a, b) in zip(dists, settings)]
