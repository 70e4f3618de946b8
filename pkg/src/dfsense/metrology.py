"""Phase encoding, the two-body measurement, and Fisher information."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh

from .spin import (
    Basis,
    BasisKind,
    EnsembleSpec,
    OperatorMatrix,
    build_jz_minus_coupled,
    build_operator,
    coupled_basis,
    jz_minus_sector_coupled,
    sector_basis,
    spin_matrices,
    terms,
    uncoupled_basis,
    _wrap,
)
from .states import (
    DensityMatrix,
    ProbabilityTable,
    QuantumState,
    convert,
    dephase_common_phase,
    make_jm_state,
)

__all__ = [
    "PhaseSetting",
    "MetrologyReport",
    "jz_minus_diagonal",
    "jz_minus_operator",
    "encode_phase",
    "build_measurement",
    "estimator_variance",
    "mixture_variance",
    "ExchangeMoments",
    "dark_state_qfi",
    "dephased_density",
    "qfi_pure",
    "qfi_mixed",
    "avg_qfi",
    "analytic_jm_qfi",
    "analytic_jm_moments",
    "analytic_first_moment_coefficient",
    "population_distribution",
    "cfi_population",
    "photon_count_observable",
]


@dataclass(frozen=True)
class PhaseSetting:
    phi: float
    capital_phi: float | None = None
    repetitions: int = 1

    def __post_init__(self):
        if int(self.repetitions) != self.repetitions or self.repetitions < 1:
            raise ValueError("repetitions must be a positive integer")


@dataclass(frozen=True)
class MetrologyReport:
    phi: float
    signal: float
    second_moment: float
    slope: float
    est_variance: float
    qfi: float | None = None
    cfi: float | None = None
    repetitions: int = 1
    degenerate: bool = False

    @property
    def variance(self) -> float:
        return self.second_moment - self.signal**2

    @property
    def qcrb(self) -> float | None:
        if self.qfi is None or self.qfi <= 0:
            return None
        return 1.0 / (self.repetitions * self.qfi)


# --------------------------------------------------------------------------
# generator and encoding
# --------------------------------------------------------------------------


def _diagonal_partner(basis: Basis) -> Basis:
    """Basis in which J_z^- is diagonal and that holds the same states."""
    if basis.kind is BasisKind.COUPLED:
        return uncoupled_basis(basis.spec)
    if basis.kind is BasisKind.DFS_SECTOR and basis.coupled:
        return sector_basis(basis.spec, basis.m_plus)
    return basis


def jz_minus_diagonal(basis: Basis) -> np.ndarray:
    """Eigenvalues of J_z^A - J_z^B on a basis where it is diagonal."""
    if basis.kind is BasisKind.FULL_PRODUCT:
        n, na = basis.spec.n_total, basis.spec.n_a
        s = np.arange(basis.dim)
        out = np.zeros(basis.dim)
        for k in range(n):
            z = 0.5 - ((s >> (n - 1 - k)) & 1)
            out += z if k < na else -z
        return out
    if basis.is_coupled:
        raise ValueError("J_z^- is not diagonal in a coupled basis")
    lab = np.asarray(basis.labels, dtype=float)
    return lab[:, 0] - lab[:, 1]


def jz_minus_operator(basis: Basis) -> OperatorMatrix:
    if basis.kind is BasisKind.COUPLED and basis.spec.is_symmetric:
        return build_jz_minus_coupled(basis.spec)
    if basis.kind is BasisKind.DFS_SECTOR and basis.coupled and basis.spec.is_symmetric:
        return _wrap(basis, jz_minus_sector_coupled(basis.spec, basis.m_plus), True,
                     terms=terms.JZ_MINUS)
    if not basis.is_coupled:
        return _wrap(basis, sp.diags(jz_minus_diagonal(basis)).tocsr(), True,
                     terms=terms.JZ_MINUS)
    return build_operator(terms.JZ_MINUS, basis, hermitian=True)


def encode_phase(obj, phi: float):
    """Apply exp(-i phi J_z^-) to a state (or conjugate a density matrix)."""
    basis = obj.basis
    diag_basis = _diagonal_partner(basis)
    work = convert(obj, diag_basis)
    ph = np.exp(-1j * phi * jz_minus_diagonal(diag_basis))
    if isinstance(work, QuantumState):
        out = QuantumState(diag_basis, ph * work.amplitudes)
    else:
        if sp.issparse(work.data):
            D = sp.diags(ph)
            data = D @ work.data @ D.conj()
        else:
            data = ph[:, None] * work.data * ph.conj()[None, :]
        out = DensityMatrix(diag_basis, data, check_spectrum=False)
    return convert(out, basis)


def build_measurement(spec: EnsembleSpec, basis: Basis | None = None) -> OperatorMatrix:
    """The exchange observable J_+^A J_-^B + J_-^A J_+^B."""
    basis = uncoupled_basis(spec) if basis is None else basis
    if basis.spec != spec:
        raise ValueError("basis belongs to a different ensemble spec")
    return build_operator(terms.MEASUREMENT, basis, hermitian=True)


def _generator(basis: Basis, generator) -> OperatorMatrix:
    if generator is None:
        return jz_minus_operator(basis)
    if isinstance(generator, OperatorMatrix):
        if generator.basis != basis:
            if generator.terms is None:
                raise ValueError("generator lives in another basis and has no symbolic form")
            return build_operator(generator.terms, basis, hermitian=True)
        return generator
    return build_operator(tuple(generator), basis, hermitian=True)


# --------------------------------------------------------------------------
# estimator variance
# --------------------------------------------------------------------------


def _slope_threshold(second: float, spec: EnsembleSpec) -> float:
    # relative to the natural size of the signal; absolute 1e-12 is below
    # round-off once <M^2> grows like N^4
    return 1e-12 * max(1.0, math.sqrt(max(second, 0.0))) * max(1.0, spec.n_total / 2)


def _moments_pure(psi: np.ndarray, O, G) -> tuple[float, float, float]:
    Opsi = O @ psi
    signal = float(np.real(np.vdot(psi, Opsi)))
    second = float(np.real(np.vdot(Opsi, Opsi)))
    slope = float(2 * np.imag(np.vdot(Opsi, G @ psi)))
    return signal, second, slope


def _moments_mixed(rho, O, G) -> tuple[float, float, float]:
    def tr(a):
        return float(np.real(a.diagonal().sum()))
    Orho = O @ rho
    signal = tr(Orho)
    second = tr(O @ Orho)
    comm = G @ O - O @ G
    slope = float(np.real((1j * (comm @ rho)).diagonal().sum()))
    return signal, second, slope


def estimator_variance(obj, observable: OperatorMatrix, phi: float, repetitions: int = 1,
                       with_qfi: bool = True) -> MetrologyReport:
    """Error-propagation variance of the phase estimate at ``phi``.

    The slope is the exact commutator expression <i[J_z^-, O_phi]>.  At
    fringe extrema the report carries ``est_variance = inf`` and
    ``degenerate = True`` instead of raising.
    """
    if not observable.hermitian_hint:
        raise ValueError("observable must be Hermitian")
    PhaseSetting(phi, repetitions=repetitions)
    enc = encode_phase(obj, phi)
    enc = convert(enc, observable.basis)
    G = jz_minus_operator(observable.basis).data
    O = observable.data
    if isinstance(enc, QuantumState):
        signal, second, slope = _moments_pure(enc.amplitudes, O, G)
    else:
        signal, second, slope = _moments_mixed(enc.data, O, G)
    var = max(second - signal**2, 0.0)
    degenerate = abs(slope) < _slope_threshold(second, obj.basis.spec)
    est = math.inf if degenerate else var / (repetitions * slope**2)
    qfi = None
    if with_qfi:
        if isinstance(obj, QuantumState):
            qfi = qfi_pure(obj)
        elif obj.basis.dim <= 1024:
            qfi = qfi_mixed(obj)
    return MetrologyReport(float(phi), signal, second, slope, est, qfi, None,
                           repetitions, degenerate)


def mixture_variance(components, observable_for, phi: float) -> MetrologyReport:
    """Estimator variance of an incoherent mixture sum_k p_k |psi_k><psi_k|.

    ``components`` is a sequence of (weight, QuantumState); the states may
    live in different bases and ``observable_for(basis)`` supplies the
    observable in each of them.  All moments are linear in the mixture.
    """
    signal = second = slope = 0.0
    spec = None
    for w, st in components:
        spec = st.spec
        obs = observable_for(st.basis)
        enc = convert(encode_phase(st, phi), obs.basis)
        G = jz_minus_operator(obs.basis).data
        s1, s2, d = _moments_pure(enc.amplitudes, obs.data, G)
        signal += w * s1
        second += w * s2
        slope += w * d
    if spec is None:
        raise ValueError("empty mixture")
    var = max(second - signal**2, 0.0)
    degenerate = abs(slope) < _slope_threshold(second, spec)
    est = math.inf if degenerate else var / slope**2
    return MetrologyReport(float(phi), signal, second, slope, est, None, None, 1, degenerate)


@dataclass(frozen=True)
class ExchangeMoments:
    """<X>, <Y>, <X^2>, <Y^2>, <XY + YX> of an unencoded state.

    X = J_+^A J_-^B + h.c. is the exchange observable and Y = i(J_+^A J_-^B - h.c.).
    Encoding by exp(-i phi J_z^-) turns X into cos(2 phi) X + sin(2 phi) Y, so
    the whole phase dependence follows from these five numbers.

    ``noise`` is the absolute accuracy of the moments (e.g. from an
    integrator tolerance); a variance or squared slope not above it is
    reported as degenerate.
    """

    x: float
    y: float
    xx: float
    yy: float
    xy: float
    noise: float = 0.0

    def report(self, phi: float, spec: EnsembleSpec | None = None) -> MetrologyReport:
        c, s = math.cos(2 * phi), math.sin(2 * phi)
        signal = c * self.x + s * self.y
        second = c * c * self.xx + s * s * self.yy + c * s * self.xy
        slope = 2 * (c * self.y - s * self.x)
        var = max(second - signal**2, 0.0)
        thr = 1e-12 * max(1.0, math.sqrt(max(second, 0.0)))
        if spec is not None:
            thr = _slope_threshold(second, spec)
        degenerate = abs(slope) < thr or (self.noise > 0 and min(var, slope**2) <= self.noise)
        est = math.inf if degenerate else var / slope**2
        return MetrologyReport(float(phi), signal, second, slope, est, None, None, 1, degenerate)

    def variance(self, phi: float) -> float:
        return self.report(phi).est_variance

    @classmethod
    def terms(cls) -> tuple:
        """Symbolic forms of X, Y, X^2, Y^2 and XY + YX, in that order."""
        X, Y = terms.MEASUREMENT, terms.TMS
        return (X, Y, terms.product(X, X), terms.product(Y, Y),
                terms.product(X, Y) + terms.product(Y, X))


# --------------------------------------------------------------------------
# quantum Fisher information
# --------------------------------------------------------------------------


def qfi_pure(state: QuantumState, generator=None) -> float:
    """4 Var(G) with G = J_z^- unless another generator is given."""
    G = _generator(state.basis, generator).data
    psi = state.amplitudes
    Gpsi = G @ psi
    m1 = np.real(np.vdot(psi, Gpsi))
    m2 = np.real(np.vdot(Gpsi, Gpsi))
    return float(4 * (m2 - m1**2))


def qfi_mixed(rho: DensityMatrix, generator=None, cutoff: float = 1e-12) -> float:
    """QFI from the spectral decomposition of rho (support only)."""
    a = rho.toarray()
    if np.max(np.abs(a - a.conj().T), initial=0.0) > 1e-10:
        raise ValueError("density matrix is not Hermitian")
    G = _generator(rho.basis, generator)
    Gd = G.toarray()
    w, v = eigh((a + a.conj().T) / 2)
    keep = w > cutoff * w.max()
    p, vecs = w[keep], v[:, keep]
    Gm = vecs.conj().T @ Gd @ vecs
    G2 = np.real(np.einsum("ij,jk,ki->i", vecs.conj().T, Gd @ Gd, vecs))
    single = 4 * (G2 - np.real(np.diag(Gm)) ** 2)
    total = float(np.sum(p * single))
    P = p[:, None] + p[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        wgt = np.where(P > 1e-14, 8 * p[:, None] * p[None, :] / P, 0.0)
    np.fill_diagonal(wgt, 0.0)
    total -= float(np.sum(wgt * np.abs(Gm) ** 2))
    return total


def analytic_jm_qfi(N: int, J: float, M: float) -> float:
    """Closed-form QFI of |J, M> for the symmetric split."""
    _check_jm(N, J, M)
    num = (12 * M**2 + 8 * J * (1 + J) * (J + J**2 - M**2 - 1)
           + (1 - 2 * J * (1 + J) + 2 * M**2) * (N**2 + 4 * N))
    return float(num / (3 - 4 * J * (J + 1)))


def dark_state_qfi(N: int, J: float) -> float:
    """QFI of the dark state |J, -J>."""
    return float((N**2 + 4 * N - 4 * J**2 - 8 * J) / (3 + 2 * J))


def avg_qfi(table: ProbabilityTable, spec: EnsembleSpec) -> float:
    """p(J)-weighted QFI of the dark states |J, -J>."""
    N = spec.n_total
    return float(sum(p * dark_state_qfi(N, J) for J, p in table.entries.items()))


def _check_jm(N, J, M) -> None:
    if int(N) != N or N < 2 or N % 2:
        raise ValueError("N must be a positive even integer")
    if J < 0 or J > N / 2 or abs(M) > J or abs(2 * J - round(2 * J)) > 1e-9 \
            or abs((J - M) - round(J - M)) > 1e-9:
        raise ValueError(f"invalid quantum numbers (J={J}, M={M}) for N={N}")


def analytic_first_moment_coefficient(N: int, J: float, M: float) -> float:
    """A with <O_phi> = A cos(2 phi) on |J, M>."""
    _check_jm(N, J, M)
    num = (J * (J + 1) * (2 + M**2 - 3 * J * (J + 1))
           + (J**2 + J + M**2 - 1) * (N**2 / 4 + N))
    return float(num / (3 - 4 * J * (J + 1)))


def _alpha_beta_stretched(N: int, m: float) -> tuple[float, float]:
    """Second-moment coefficients for J = |M| = m."""
    denom = 32 * (3 + 2 * m) * (5 + 2 * m)
    pref = (1 + m) * (2 * m - N) * (4 + 2 * m + N) / denom
    alpha = pref * (4 * (1 + m) * (-4 + m + m**2) - 4 * (2 + m) * N - (2 + m) * N**2)
    beta = pref * (2 + m) * (2 + 2 * m - N) * (6 + 2 * m + N)
    return float(alpha), float(beta)


@lru_cache(maxsize=256)
def _alpha_beta_brute(N: int, J: float, M: float) -> tuple[float, float]:
    spec = EnsembleSpec.symmetric(N)
    b = sector_basis(spec, M)
    O = build_measurement(spec, b)
    psi = make_jm_state(spec, J, M, basis=b)
    vals = []
    for phi in (0.0, math.pi / 4):
        enc = encode_phase(psi, phi).amplitudes
        Op = O.data @ enc
        vals.append(float(np.real(np.vdot(Op, Op))))
    return (vals[0] + vals[1]) / 2, (vals[0] - vals[1]) / 2


def analytic_jm_moments(N: int, J: float, M: float, phi: float) -> tuple[float, float]:
    """First and second moment of the exchange observable on |J, M>.

    The second moment is alpha + beta cos(4 phi); closed forms are used when
    J = |M| and a direct evaluation otherwise.
    """
    _check_jm(N, J, M)
    signal = analytic_first_moment_coefficient(N, J, M) * math.cos(2 * phi)
    if abs(J - abs(M)) < 1e-9:
        alpha, beta = _alpha_beta_stretched(N, abs(M))
    else:
        alpha, beta = _alpha_beta_brute(int(N), float(J), float(M))
    return float(signal), float(alpha + beta * math.cos(4 * phi))


# --------------------------------------------------------------------------
# separable strategies: population statistics after a pi/2 pulse
# --------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _pulse(n: int) -> np.ndarray:
    """exp(-i pi/2 J_x) for spin n/2, m descending."""
    s = spin_matrices(n / 2)
    jp = s["p"].toarray()
    jx = (jp + jp.T) / 2
    w, v = np.linalg.eigh(jx)
    out = (v * np.exp(-0.5j * math.pi * w)) @ v.conj().T
    out.setflags(write=False)
    return out


def population_distribution(state: QuantumState, phi: float, dephase: bool = True):
    """Joint distribution of (m_a, m_b) after encoding and a pi/2 pulse.

    Returns (p, dp) as (n_a+1, n_b+1) arrays, ``dp`` being the exact phase
    derivative.  With ``dephase`` the common phase is averaged out by
    measuring each J_z^+ sector incoherently.
    """
    spec = state.spec
    ub = uncoupled_basis(spec)
    psi = convert(state, ub).amplitudes
    gz = jz_minus_diagonal(ub)
    psi = np.exp(-1j * phi * gz) * psi
    dpsi = -1j * gz * psi
    shape = (spec.n_a + 1, spec.n_b + 1)
    Ra, Rb = _pulse(spec.n_a), _pulse(spec.n_b)
    P = psi.reshape(shape)
    dP = dpsi.reshape(shape)
    p = np.zeros(shape)
    dp = np.zeros(shape)
    if dephase:
        ia, ib = np.indices(shape)
        level = ia + ib
        for s in range(shape[0] + shape[1] - 1):
            mask = level == s
            if not np.any(P[mask]):
                continue
            amp = Ra @ np.where(mask, P, 0) @ Rb.T
            damp = Ra @ np.where(mask, dP, 0) @ Rb.T
            p += np.abs(amp) ** 2
            dp += 2 * np.real(np.conj(amp) * damp)
    else:
        amp = Ra @ P @ Rb.T
        damp = Ra @ dP @ Rb.T
        p = np.abs(amp) ** 2
        dp = 2 * np.real(np.conj(amp) * damp)
    return p, dp


def cfi_population(spec: EnsembleSpec, state: QuantumState, phi: float,
                   dephase: bool = True, floor: float = 1e-14) -> float:
    """Classical Fisher information of the two population measurements."""
    if state.spec != spec:
        raise ValueError("state belongs to a different ensemble spec")
    p, dp = population_distribution(state, phi, dephase)
    keep = p > floor
    return float(np.sum(dp[keep] ** 2 / p[keep]))


def dephased_density(state: QuantumState, phi: float = 0.0) -> DensityMatrix:
    """Encoded state averaged over the common phase (small N only)."""
    rho = encode_phase(state, phi).density()
    return dephase_common_phase(rho)


# --------------------------------------------------------------------------
# photon counting
# --------------------------------------------------------------------------


def photon_count_observable(spec: EnsembleSpec, basis: Basis | None = None) -> OperatorMatrix:
    """Number of photons emitted on full decay: J + M on |J, M>."""
    basis = coupled_basis(spec) if basis is None else basis
    if not basis.is_coupled:
        raise ValueError("the photon-count observable is defined in a coupled basis")
    vals = np.array([J + M for J, M in basis.labels], dtype=float)
    return _wrap(basis, sp.diags(vals).tocsr(), True)
