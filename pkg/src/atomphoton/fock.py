"""Dense density-matrix engine for a small register of truncated bosonic modes.

States live in the photon-number product basis, one axis per mode, each mode
truncated at ``n_max`` photons. Every operation is pure: it returns a new
:class:`QuantumState` and never touches its input.
"""
from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.special import comb

HERMITIAN_TOL = 1e-12
EIGEN_TOL = 1e-10


class FockError(ValueError):
    """Invalid argument to an engine operation."""


@dataclass(frozen=True)
class ModeRegister:
    modes: tuple[str, ...]
    n_max: int

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if len(set(self.modes)) != len(self.modes):
            raise FockError(f"duplicate mode labels in {self.modes}")
        if not self.modes:
            raise FockError("register needs at least one mode")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise FockError(f"n_max must be an integer >= 1, got {self.n_max}")

    @property
    def local_dim(self) -> int:
        return self.n_max + 1

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def dim(self) -> int:
        return self.local_dim ** self.n_modes

    def index(self, mode: str) -> int:
        try:
            return self.modes.index(mode)
        except ValueError:
            raise FockError(f"unknown mode {mode!r}; register has {self.modes}") from None

    def rename(self, mapping: dict[str, str]) -> "ModeRegister":
        return ModeRegister(tuple(mapping.get(m, m) for m in self.modes), self.n_max)

    def occupations(self):
        """All occupation tuples in basis order."""
        return itertools.product(range(self.local_dim), repeat=self.n_modes)


@dataclass(frozen=True)
class QuantumState:
    """Density operator over ``register``; the matrix is stored read-only."""

    register: ModeRegister
    matrix: np.ndarray
    trace_cache: float = field(init=False, repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        d = self.register.dim
        if m.shape != (d, d):
            raise FockError(f"matrix shape {m.shape} does not match register dimension {d}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "trace_cache", float(np.trace(m).real))

    @property
    def n_modes(self) -> int:
        return self.register.n_modes

    def tensor(self) -> np.ndarray:
        """View of the matrix with one ket axis and one bra axis per mode."""
        d = self.register.local_dim
        return self.matrix.reshape((d,) * (2 * self.n_modes))

    def trace(self) -> float:
        return self.trace_cache

    def normalize(self) -> "QuantumState":
        if self.trace_cache <= 0:
            raise FockError("cannot normalize a state with zero trace")
        return QuantumState(self.register, self.matrix / self.trace_cache)

    def diagonal(self) -> np.ndarray:
        """Photon-number populations as an array with one axis per mode."""
        d = self.register.local_dim
        return np.diagonal(self.matrix).real.reshape((d,) * self.n_modes)

    def leaked_population(self) -> float:
        """Probability that any mode sits at the truncation edge ``n_max``."""
        pops = self.diagonal()
        safe = pops[(slice(0, -1),) * self.n_modes].sum()
        return float(max(pops.sum() - safe, 0.0))

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        scale = max(np.abs(self.matrix).max(), 1.0)
        return bool(np.abs(self.matrix - self.matrix.conj().T).max() <= tol * scale)

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.matrix + self.matrix.conj().T)
        return float(np.linalg.eigvalsh(herm).min())


def _from_tensor(register: ModeRegister, tensor: np.ndarray) -> QuantumState:
    return QuantumState(register, tensor.reshape(register.dim, register.dim))


def vacuum(register: ModeRegister) -> QuantumState:
    m = np.zeros((register.dim, register.dim), dtype=complex)
    m[0, 0] = 1.0
    return QuantumState(register, m)


def fock_state(register: ModeRegister, occupation: Sequence[int]) -> QuantumState:
    """Pure number state with the given per-mode occupations."""
    return pure_state(register, {tuple(occupation): 1.0})


def pure_state(register: ModeRegister, amplitudes) -> QuantumState:
    """Pure state from a full ket vector or a ``{occupation tuple: amplitude}`` map.

    The ket is normalized.
    """
    if isinstance(amplitudes, dict):
        d = register.local_dim
        psi = np.zeros((d,) * register.n_modes, dtype=complex)
        for occ, amp in amplitudes.items():
            if len(occ) != register.n_modes or max(occ) > register.n_max or min(occ) < 0:
                raise FockError(f"occupation {occ} outside register")
            psi[tuple(occ)] += amp
        psi = psi.ravel()
    else:
        psi = np.asarray(amplitudes, dtype=complex).ravel()
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise FockError("zero ket")
    psi = psi / norm
    return QuantumState(register, np.outer(psi, psi.conj()))


def tensor_product(first: QuantumState, second: QuantumState) -> QuantumState:
    if first.register.n_max != second.register.n_max:
        raise FockError("registers must share n_max")
    reg = ModeRegister(first.register.modes + second.register.modes, first.register.n_max)
    return QuantumState(reg, np.kron(first.matrix, second.matrix))


def mix(states: Sequence[QuantumState], weights: Sequence[float]) -> QuantumState:
    """Convex combination of states on identical registers."""
    regs = {s.register for s in states}
    if len(regs) != 1:
        raise FockError("mixed states must share one register")
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise FockError("mixing weights must be non-negative and sum to 1")
    m = sum(wi * s.matrix for wi, s in zip(w, states))
    return QuantumState(states[0].register, m)


def reorder(state: QuantumState, modes: Sequence[str]) -> QuantumState:
    """Permute the register into the given mode order."""
    reg = state.register
    if sorted(modes) != sorted(reg.modes):
        raise FockError(f"{modes} is not a permutation of {reg.modes}")
    perm = [reg.index(m) for m in modes]
    n = reg.n_modes
    t = state.tensor().transpose(perm + [n + p for p in perm])
    return _from_tensor(ModeRegister(tuple(modes), reg.n_max), t)


def rename(state: QuantumState, mapping: dict[str, str]) -> QuantumState:
    return QuantumState(state.register.rename(mapping), state.matrix)


# -- low level application helpers ------------------------------------------

def _apply_ket_bra(state: QuantumState, axes: Sequence[int], op: np.ndarray) -> QuantumState:
    """rho -> op rho op^dagger, with op acting on the listed mode axes."""
    reg = state.register
    n, d = reg.n_modes, reg.local_dim
    k = len(axes)
    t = state.tensor()
    for offset, mat in ((0, op), (n, op.conj())):
        ax = [a + offset for a in axes]
        t = np.moveaxis(t, ax, list(range(k)))
        shape = t.shape
        t = (mat @ t.reshape(d**k, -1)).reshape(shape)
        t = np.moveaxis(t, list(range(k)), ax)
    return _from_tensor(reg, t)


def _apply_superop(state: QuantumState, axis: int, superop: np.ndarray) -> QuantumState:
    """Apply a single-mode superoperator acting on the (ket, bra) index pair."""
    reg = state.register
    n, d = reg.n_modes, reg.local_dim
    t = np.moveaxis(state.tensor(), [axis, n + axis], [0, 1])
    shape = t.shape
    t = (superop @ t.reshape(d * d, -1)).reshape(shape)
    t = np.moveaxis(t, [0, 1], [axis, n + axis])
    return _from_tensor(reg, t)


def _scale_coherences(state: QuantumState, axis: int, factors: np.ndarray) -> QuantumState:
    """Multiply element (n, n') of one mode by ``factors[n, n']``."""
    reg = state.register
    n, d = reg.n_modes, reg.local_dim
    shape = [1] * (2 * n)
    shape[axis] = d
    shape[n + axis] = d
    return _from_tensor(reg, state.tensor() * factors.reshape(shape))


@lru_cache(maxsize=None)
def annihilation(n_max: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n_max + 1, dtype=float)), k=1)


# -- state preparation ---------------------------------------------------------

def pair_amplitudes(chi: float, n_max: int) -> np.ndarray:
    """Renormalized amplitudes sqrt((1-chi) chi^n), n = 0..n_max."""
    n = np.arange(n_max + 1)
    amp = np.sqrt((1.0 - chi) * chi**n)
    return amp / np.linalg.norm(amp)


def two_mode_squeeze(state: QuantumState, photon_mode: str, spin_mode: str, chi: float) -> QuantumState:
    """Put two vacuum modes into the pair state sum_n sqrt((1-chi) chi^n) |n, n>."""
    if photon_mode == spin_mode:
        raise FockError("two_mode_squeeze needs two distinct modes")
    if not 0.0 <= chi < 1.0:
        raise FockError(f"chi must lie in [0, 1), got {chi}")
    reg = state.register
    i, j = reg.index(photon_mode), reg.index(spin_mode)
    pops = state.diagonal()
    vac = np.moveaxis(pops, [i, j], [0, 1])[0, 0].sum()
    if abs(vac - state.trace_cache) > 1e-12:
        raise FockError(f"modes {photon_mode!r}, {spin_mode!r} are not in vacuum")
    if chi == 0.0:
        return state

    d = reg.local_dim
    pair = np.zeros((d, d), dtype=complex)
    pair[np.arange(d), np.arange(d)] = pair_amplitudes(chi, reg.n_max)
    # The target modes are in vacuum, so |00> -> |pair> is an isometry on the
    # relevant subspace; apply it as a (d^2 x d^2) operator whose first column is the pair ket.
    op = np.zeros((d * d, d * d), dtype=complex)
    op[:, 0] = pair.ravel()
    return _apply_ket_bra(state, [i, j], op)


# -- channels ------------------------------------------------------------------

def loss_kraus(n_max: int, eta: float) -> list[np.ndarray]:
    """Kraus operators of the pure-loss channel with transmissivity ``eta``."""
    d = n_max + 1
    ops = []
    for k in range(d):
        a = np.zeros((d, d))
        for n in range(k, d):
            a[n - k, n] = np.sqrt(comb(n, k) * eta ** (n - k) * (1.0 - eta) ** k)
        ops.append(a)
    return ops


@lru_cache(maxsize=256)
def _loss_superop(n_max: int, eta: float) -> np.ndarray:
    return sum(np.kron(k, k) for k in loss_kraus(n_max, eta)).astype(complex)


def loss_channel(state: QuantumState, mode: str, eta: float) -> QuantumState:
    """Beam splitter to an empty environment; photon number thinned binomially."""
    if not 0.0 <= eta <= 1.0:
        raise FockError(f"eta must lie in [0, 1], got {eta}")
    if eta == 1.0:
        return state
    axis = state.register.index(mode)
    return _apply_superop(state, axis, _loss_superop(state.register.n_max, float(eta)))


def dephase(state: QuantumState, mode: str, kappa: float) -> QuantumState:
    """Scale the (n, n') coherence of ``mode`` by (1 - kappa)^|n - n'|."""
    if not 0.0 <= kappa <= 1.0:
        raise FockError(f"kappa must lie in [0, 1], got {kappa}")
    d = state.register.local_dim
    dn = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    factors = np.where(dn == 0, 1.0, (1.0 - kappa) ** dn)
    return _scale_coherences(state, state.register.index(mode), factors)


def phase_diffuse(state: QuantumState, mode: str, sigma: float) -> QuantumState:
    """Average over a Gaussian random phase of standard deviation ``sigma`` on ``mode``.

    The (n, n') coherence picks up exp(-sigma^2 (n - n')^2 / 2).
    """
    if sigma < 0:
        raise FockError(f"sigma must be >= 0, got {sigma}")
    d = state.register.local_dim
    dn = np.subtract.outer(np.arange(d), np.arange(d))
    return _scale_coherences(state, state.register.index(mode), np.exp(-0.5 * sigma**2 * dn**2))


# -- unitaries -----------------------------------------------------------------

def phase_shift(state: QuantumState, mode: str, phi: float) -> QuantumState:
    """exp(i phi n) on ``mode``."""
    d = state.register.local_dim
    u = np.exp(1j * phi * np.arange(d))
    return _scale_coherences(state, state.register.index(mode), np.outer(u, u.conj()))


@lru_cache(maxsize=512)
def su2_unitary(n_max: int, theta: float, phi: float) -> np.ndarray:
    """Two-mode mixing unitary on the truncated (a, b) space.

    In the Heisenberg picture a -> cos(theta) a + e^{-i phi} sin(theta) b, so a
    click on output ``a`` projects a single photon onto
    cos(theta)|a> + e^{i phi} sin(theta)|b>.
    """
    a1 = annihilation(n_max)
    eye = np.eye(n_max + 1)
    a = np.kron(a1, eye)
    b = np.kron(eye, a1)
    gen = theta * (np.exp(-1j * phi) * a.T @ b - np.exp(1j * phi) * a @ b.T)
    return expm(gen)


def su2_mix(state: QuantumState, mode_a: str, mode_b: str, theta: float, phi: float = 0.0) -> QuantumState:
    """Beam splitter / wave-plate rotation between two modes."""
    if mode_a == mode_b:
        raise FockError("su2_mix needs two distinct modes")
    if theta == 0.0 and phi == 0.0:
        return state
    reg = state.register
    axes = [reg.index(mode_a), reg.index(mode_b)]
    return _apply_ket_bra(state, axes, su2_unitary(reg.n_max, float(theta), float(phi)))


# -- measurement and reduction -------------------------------------------------

def photon_distribution(state: QuantumState, modes: Sequence[str]) -> np.ndarray:
    """Joint photon-number distribution of ``modes`` (axes in the given order)."""
    reg = state.register
    idx = [reg.index(m) for m in modes]
    if len(set(idx)) != len(idx):
        raise FockError("duplicate modes")
    pops = state.diagonal()
    other = tuple(a for a in range(reg.n_modes) if a not in idx)
    marg = pops.sum(axis=other) if other else pops
    kept = sorted(idx)
    return np.moveaxis(marg, [kept.index(i) for i in idx], list(range(len(idx))))


def mean_photon_number(state: QuantumState, mode: str) -> float:
    p = photon_distribution(state, [mode])
    return float(np.arange(p.size) @ p)


def click_table(populations: np.ndarray, darks: Sequence[float]) -> np.ndarray:
    """Threshold click table from a joint photon-number distribution (one axis per detector)."""
    p = np.asarray(populations, dtype=float)
    d = p.shape[0]
    for axis, dark in enumerate(darks):
        if not 0.0 <= dark < 1.0:
            raise FockError(f"dark_prob must lie in [0, 1), got {dark}")
        povm = np.zeros((d, 2))
        povm[0, 0] = 1.0 - dark
        povm[:, 1] = 1.0 - povm[:, 0]
        p = np.moveaxis(np.tensordot(p, povm, axes=([axis], [0])), -1, axis)
    return p


def click_probabilities(state: QuantumState, detectors: Sequence[tuple[str, float]]) -> np.ndarray:
    """Threshold-detector click table.

    Returns an array of shape ``(2,) * k``; index 0 means no click, 1 means click,
    axes in detector order. The no-click element of each detector is
    ``(1 - dark) |0><0|`` on its mode.
    """
    modes = [m for m, _ in detectors]
    if len(set(modes)) != len(modes):
        raise FockError(f"duplicate detector modes in {modes}")
    return click_table(photon_distribution(state, modes), [dk for _, dk in detectors])


def unitary_populations(state: QuantumState, ops: Sequence[tuple[Sequence[str], np.ndarray]]) -> np.ndarray:
    """Photon-number populations of U rho U^dagger for U a product of block unitaries.

    ``ops`` lists ``(modes, matrix)`` pairs acting on disjoint mode groups. Only
    the ket side is propagated; the diagonal is then contracted against the
    conjugate blocks, which avoids forming the full output state.
    """
    reg = state.register
    n, d = reg.n_modes, reg.local_dim
    groups = [[reg.index(m) for m in modes] for modes, _ in ops]
    flat = [a for g in groups for a in g]
    if len(set(flat)) != len(flat):
        raise FockError("unitary blocks must act on disjoint modes")
    t = state.tensor()
    for axes, (_, u) in zip(groups, ops):
        k = len(axes)
        t = np.moveaxis(t, axes, list(range(k)))
        shape = t.shape
        t = (u @ t.reshape(d**k, -1)).reshape(shape)
        t = np.moveaxis(t, list(range(k)), axes)
    letters = string.ascii_letters
    ket = list(letters[:n])
    bra = list(ket)
    operands, subs = [t], []
    for axes, (_, u) in zip(groups, ops):
        for a in axes:
            bra[a] = letters[n + a]
        k = len(axes)
        operands.append(u.conj().reshape((d,) * (2 * k)))
        subs.append("".join(ket[a] for a in axes) + "".join(bra[a] for a in axes))
    expr = ",".join(["".join(ket) + "".join(bra)] + subs) + "->" + "".join(ket)
    return np.einsum(expr, *operands, optimize=True).real


def partial_trace(state: QuantumState, keep: Sequence[str]) -> QuantumState:
    """Reduced state on ``keep``, in the order given."""
    if not keep:
        raise FockError("keep must name at least one mode")
    reg = state.register
    idx = [reg.index(m) for m in keep]
    n = reg.n_modes
    letters = string.ascii_letters
    ket = list(letters[:n])
    bra = list(letters[n:2 * n])
    for a in range(n):
        if a not in idx:
            bra[a] = ket[a]
    out = "".join(ket[a] for a in idx) + "".join(bra[a] for a in idx)
    t = np.einsum("".join(ket) + "".join(bra) + "->" + out, state.tensor())
    return _from_tensor(ModeRegister(tuple(keep), reg.n_max), t)


def postselect(state: QuantumState, keep: Callable[[tuple[int, ...]], bool]) -> QuantumState:
    """Project onto basis states whose occupation tuple satisfies ``keep`` and renormalize."""
    mask = np.array([bool(keep(occ)) for occ in state.register.occupations()])
    m = state.matrix * np.outer(mask, mask)
    return QuantumState(state.register, m).normalize()


def fidelity_with_pure(state: QuantumState, ket: np.ndarray) -> float:
    psi = np.asarray(ket, dtype=complex).ravel()
    psi = psi / np.linalg.norm(psi)
    return float((psi.conj() @ state.matrix @ psi).real)
