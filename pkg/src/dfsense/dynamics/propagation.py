"""Closed-system propagation, ground states, gaps and adiabatic sweeps."""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh, expm_multiply

from ..spin import (
    Basis,
    BasisKind,
    EnsembleSpec,
    OperatorMatrix,
    build_operator,
    dfs_projector,
    sector_basis,
    terms,
    _wrap,
)
from ..metrology import jz_minus_operator
from ..states import QuantumState, convert, make_initial_product, make_lieb_mattis, _fix_phase
from .hamiltonians import build_h_adiabatic

__all__ = [
    "EIG_LIMIT",
    "Spectrum",
    "spectrum",
    "evolve_unitary",
    "unitary_trajectory",
    "restrict_to_sector",
    "GroundState",
    "ground_state",
    "spectral_gap",
    "SweepSchedule",
    "SweepResult",
    "run_adiabatic_sweep",
]

EIG_LIMIT = 4096
_spectra: "weakref.WeakKeyDictionary[OperatorMatrix, Spectrum]" = weakref.WeakKeyDictionary()


@dataclass(frozen=True)
class Spectrum:
    energies: np.ndarray
    vectors: np.ndarray

    def propagate(self, psi: np.ndarray, times) -> np.ndarray:
        """Rows are e^{-iHt} psi for each t."""
        c = self.vectors.conj().T @ psi
        ph = np.exp(-1j * np.outer(np.atleast_1d(times), self.energies))
        return (ph * c[None, :]) @ self.vectors.T


def spectrum(h: OperatorMatrix) -> Spectrum:
    """Cached full eigendecomposition of a Hermitian operator."""
    if not h.hermitian_hint:
        raise ValueError("operator is not flagged Hermitian")
    hit = _spectra.get(h)
    if hit is None:
        w, v = eigh(h.toarray())
        hit = Spectrum(w, v)
        _spectra[h] = hit
    return hit


def _check_basis(h: OperatorMatrix, psi: QuantumState) -> None:
    if h.basis != psi.basis:
        raise ValueError(
            f"Hamiltonian basis ({h.basis.kind.value}) differs from state basis ({psi.basis.kind.value})"
        )


def evolve_unitary(h: OperatorMatrix, psi: QuantumState, t: float) -> QuantumState:
    """e^{-iHt} psi."""
    _check_basis(h, psi)
    if t == 0:
        return psi
    if h.dim <= EIG_LIMIT:
        out = spectrum(h).propagate(psi.amplitudes, [t])[0]
    else:
        out = expm_multiply(-1j * t * h.tocsr(), psi.amplitudes)
    return QuantumState(psi.basis, out / np.linalg.norm(out))


def unitary_trajectory(h: OperatorMatrix, psi: QuantumState, times: Sequence[float]) -> np.ndarray:
    """Amplitude rows e^{-iHt} psi on a time grid."""
    _check_basis(h, psi)
    times = np.asarray(times, dtype=float)
    if h.dim <= EIG_LIMIT:
        return spectrum(h).propagate(psi.amplitudes, times)
    if len(times) > 1 and np.allclose(np.diff(times), times[1] - times[0]):
        return expm_multiply(-1j * h.tocsr(), psi.amplitudes, start=times[0],
                             stop=times[-1], num=len(times), endpoint=True)
    return np.array([expm_multiply(-1j * t * h.tocsr(), psi.amplitudes) for t in times])


# --------------------------------------------------------------------------
# sectors, ground states, gaps
# --------------------------------------------------------------------------


def restrict_to_sector(h: OperatorMatrix, m_plus: float) -> tuple[OperatorMatrix, np.ndarray | None]:
    """Block of ``h`` inside a J_z^+ sector.

    Returns the block and, for product-space operators, the indices used (the
    block then keeps a plain index basis and states are embedded back).
    """
    b = h.basis
    if b.kind is BasisKind.DFS_SECTOR:
        if abs(b.m_plus - m_plus) > 1e-9:
            raise ValueError("operator already lives in a different sector")
        return h, None
    if b.kind in (BasisKind.UNCOUPLED, BasisKind.COUPLED):
        target = sector_basis(b.spec, m_plus, coupled=b.kind is BasisKind.COUPLED)
        if h.terms is not None:
            return build_operator(h.terms, target, hermitian=h.hermitian_hint), None
        _, idx = dfs_projector(b.spec, m_plus, b)
        blk = h.tocsr()[idx][:, idx]
        return _wrap(target, blk, h.hermitian_hint), None
    _, idx = dfs_projector(b.spec, m_plus, b)
    return h, np.asarray(idx)


@dataclass(frozen=True)
class GroundState:
    energy: float
    state: QuantumState
    degenerate: bool = False
    gap: float | None = None

    def __iter__(self):
        yield self.energy
        yield self.state


def _lowest(h: OperatorMatrix, idx: np.ndarray | None, k: int = 2):
    mat = h.tocsr() if h.is_sparse else h.toarray()
    if idx is not None:
        mat = mat[idx][:, idx]
    n = mat.shape[0]
    if n <= EIG_LIMIT:
        dense = mat.toarray() if sp.issparse(mat) else mat
        w, v = eigh(dense, subset_by_index=[0, min(k, n) - 1])
    else:
        w, v = eigsh(sp.csr_matrix(mat), k=min(k, n - 1), which="SA")
        order = np.argsort(w)
        w, v = w[order], v[:, order]
    return w, v


def ground_state(h: OperatorMatrix, sector: float | None = None, tol: float = 1e-9) -> GroundState:
    """Lowest eigenpair of ``h`` (optionally inside a J_z^+ sector).

    The returned vector has its first nonzero amplitude real and positive.
    """
    if not h.hermitian_hint:
        raise ValueError("operator is not flagged Hermitian")
    idx = None
    if sector is not None:
        h, idx = restrict_to_sector(h, sector)
    w, v = _lowest(h, idx)
    vec = v[:, 0]
    if idx is not None:
        full = np.zeros(h.dim, dtype=complex)
        full[idx] = vec
        vec = full
    vec = _fix_phase(np.asarray(vec, dtype=complex))
    state = QuantumState(h.basis, vec / np.linalg.norm(vec))
    gap = float(w[1] - w[0]) if len(w) > 1 else None
    scale = max(1.0, abs(w[0]))
    deg = gap is not None and gap < tol * scale
    return GroundState(float(w[0]), state, bool(deg), gap)


def spectral_gap(h: OperatorMatrix, sector: float | None = None) -> float:
    """E1 - E0, within a J_z^+ sector when given."""
    idx = None
    if sector is not None:
        h, idx = restrict_to_sector(h, sector)
    n = h.dim if idx is None else len(idx)
    if n < 2:
        raise ValueError("a one-dimensional sector has no gap")
    w, _ = _lowest(h, idx)
    return float(w[1] - w[0])


# --------------------------------------------------------------------------
# adiabatic sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSchedule:
    """Gradient ramp delta(t) over ``duration`` in ``steps`` piecewise-constant steps."""

    delta_of_t: Callable[[float], float]
    chi: float
    duration: float
    steps: int
    validate: bool = True

    def __post_init__(self):
        if self.chi <= 0 or self.duration <= 0 or self.steps < 1:
            raise ValueError("chi, duration and steps must be positive")
        if self.validate:
            start = self.delta_of_t(0.0) / self.chi
            end = self.delta_of_t(self.duration) / self.chi
            if start < 10:
                raise ValueError(f"sweep must start with delta/chi >= 10 (got {start:.3g})")
            if end > 0.01:
                raise ValueError(f"sweep must end with delta/chi <= 0.01 (got {end:.3g})")
            if min(self.delta_of_t(t) for t in np.linspace(0, self.duration, 11)) < 0:
                raise ValueError("delta(t) must be nonnegative")

    @classmethod
    def exponential(cls, chi: float, duration: float, steps: int,
                    start: float = 100.0, end: float = 0.01) -> "SweepSchedule":
        """delta(t) = start chi exp(-t/tau), reaching end chi at ``duration``."""
        tau = duration / math.log(start / end)
        d0 = start * chi
        return cls(lambda t: d0 * math.exp(-t / tau), chi, duration, steps)

    def midpoints(self) -> tuple[np.ndarray, np.ndarray]:
        dt = self.duration / self.steps
        tm = (np.arange(self.steps) + 0.5) * dt
        return tm, np.array([self.delta_of_t(t) for t in tm])


@dataclass(frozen=True)
class SweepResult:
    times: np.ndarray
    states: list
    fidelity: float
    fidelities: np.ndarray


def run_adiabatic_sweep(spec: EnsembleSpec, schedule: SweepSchedule,
                        samples: int = 11, initial: QuantumState | None = None) -> SweepResult:
    """Sweep the gradient down in the M+ = 0 coupled sector.

    Each step holds delta at its midpoint value and is propagated exactly.
    Starts from the initial product state unless ``initial`` is given.
    """
    basis = sector_basis(spec, 0, coupled=True)
    target = make_lieb_mattis(spec, basis=basis)
    psi = make_initial_product(spec, basis=basis) if initial is None else convert(initial, basis)
    hc = build_operator(terms.scale(terms.CAVITY, schedule.chi), basis, hermitian=True).toarray()
    jzm = jz_minus_operator(basis).toarray()
    _, deltas = schedule.midpoints()
    dt = schedule.duration / schedule.steps
    sample_at = set(np.linspace(0, schedule.steps, samples).round().astype(int).tolist())
    vec = psi.amplitudes.copy()
    times, states, fids = [], [], []
    for k in range(schedule.steps + 1):
        if k in sample_at:
            st = QuantumState(basis, vec / np.linalg.norm(vec))
            times.append(k * dt)
            states.append(st)
            fids.append(abs(np.vdot(target.amplitudes, st.amplitudes)) ** 2)
        if k == schedule.steps:
            break
        w, v = np.linalg.eigh(hc - deltas[k] * jzm)
        vec = v @ (np.exp(-1j * w * dt) * (v.conj().T @ vec))
    final = abs(np.vdot(target.amplitudes, vec / np.linalg.norm(vec))) ** 2
    return SweepResult(np.array(times), states, float(final), np.array(fids))

