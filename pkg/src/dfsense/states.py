"""State constructors, basis conversion and the J distribution.

All constructors return states in the uncoupled basis unless a ``basis`` is
passed.  Sector bases keep large-N work cheap: the M+ = 0 sector of N = 2048
atoms has only 1025 states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm

from .spin import (
    Basis,
    BasisKind,
    EnsembleSpec,
    OperatorMatrix,
    _coupling_matrix,
    coupled_basis,
    full_product_basis,
    sector_basis,
    sector_transform,
    spin_matrices,
    uncoupled_basis,
)

__all__ = [
    "QuantumState",
    "DensityMatrix",
    "ProbabilityTable",
    "transform_matrix",
    "convert",
    "make_initial_product",
    "make_ghz_dfs",
    "make_lieb_mattis",
    "make_tms_family",
    "make_jm_state",
    "make_css",
    "make_sss",
    "squeezing_angle",
    "squeezing_parameter",
    "product_state",
    "project_pJ",
    "pJ_exact",
    "pJ_asymptotic",
    "pj_moments",
    "make_steady_state",
    "dephase_common_phase",
]

NORM_TOL = 1e-10


def _fix_phase(vec: np.ndarray) -> np.ndarray:
    nz = np.nonzero(np.abs(vec) > 1e-14)[0]
    if len(nz):
        first = vec[nz[0]]
        vec = vec * (abs(first) / first)
    return vec


@dataclass(frozen=True, eq=False)
class QuantumState:
    basis: Basis
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).ravel()
        if amp.shape[0] != self.basis.dim:
            raise ValueError(
                f"state length {amp.shape[0]} does not match basis dimension {self.basis.dim}"
            )
        nrm = np.linalg.norm(amp)
        if abs(nrm - 1.0) > NORM_TOL:
            raise ValueError(f"state is not normalized (norm {nrm:.12g})")
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @classmethod
    def normalized(cls, basis: Basis, vec) -> "QuantumState":
        vec = np.asarray(vec, dtype=complex)
        n = np.linalg.norm(vec)
        if n == 0:
            raise ValueError("cannot normalize the zero vector")
        return cls(basis, vec / n)

    @property
    def spec(self) -> EnsembleSpec:
        return self.basis.spec

    def to(self, basis: Basis) -> "QuantumState":
        return convert(self, basis)

    def overlap(self, other: "QuantumState") -> complex:
        other = convert(other, self.basis)
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def fidelity(self, other: "QuantumState") -> float:
        return abs(self.overlap(other)) ** 2

    def expect(self, op: OperatorMatrix) -> complex:
        psi = convert(self, op.basis).amplitudes
        return complex(np.vdot(psi, op.data @ psi))

    def density(self) -> "DensityMatrix":
        a = self.amplitudes
        return DensityMatrix(self.basis, np.outer(a, a.conj()))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    basis: Basis
    data: np.ndarray | sp.spmatrix
    check_spectrum: bool = True

    def __post_init__(self):
        d = self.basis.dim
        data = self.data
        if data.shape != (d, d):
            raise ValueError(f"density shape {data.shape} does not match dimension {d}")
        herm = data - data.conj().T
        herr = abs(herm).max() if sp.issparse(herm) else np.max(np.abs(herm), initial=0.0)
        if herr > 1e-10:
            raise ValueError(f"density matrix not Hermitian (error {herr:.3e})")
        tr = data.diagonal().sum()
        if abs(tr - 1) > 1e-10:
            raise ValueError(f"density matrix trace {tr.real:.12g} != 1")
        if self.check_spectrum:
            if sp.issparse(data):
                off = data - sp.diags(data.diagonal())
                if off.nnz == 0 or abs(off).max() == 0:
                    w = data.diagonal().real
                else:
                    w = np.linalg.eigvalsh(data.toarray())
            else:
                w = np.linalg.eigvalsh(data)
            if w.min() < -1e-10:
                raise ValueError(f"density matrix has eigenvalue {w.min():.3e} < 0")

    @property
    def spec(self) -> EnsembleSpec:
        return self.basis.spec

    def toarray(self) -> np.ndarray:
        return self.data.toarray() if sp.issparse(self.data) else np.asarray(self.data)

    def to(self, basis: Basis) -> "DensityMatrix":
        return convert(self, basis)

    def expect(self, op: OperatorMatrix) -> complex:
        rho = convert(self, op.basis)
        prod = op.data @ rho.data
        return complex(prod.diagonal().sum())

    def purity(self) -> float:
        a = self.toarray()
        return float(np.sum(np.abs(a) ** 2))


@dataclass(frozen=True)
class ProbabilityTable:
    """Distribution over total angular momentum J."""

    entries: Mapping[float, float]

    def __post_init__(self):
        ent = {float(k): float(v) for k, v in self.entries.items()}
        vals = np.array(list(ent.values()))
        if len(vals) == 0:
            raise ValueError("empty probability table")
        if vals.min() < -1e-12 or vals.max() > 1 + 1e-12:
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(vals.sum() - 1) > 1e-10:
            raise ValueError(f"probabilities sum to {vals.sum():.12g}")
        object.__setattr__(self, "entries", dict(sorted(ent.items())))

    @property
    def js(self) -> np.ndarray:
        return np.array(list(self.entries.keys()))

    @property
    def probs(self) -> np.ndarray:
        return np.array(list(self.entries.values()))

    def __getitem__(self, J) -> float:
        return self.entries.get(float(J), 0.0)

    @property
    def mode(self) -> float:
        return float(self.js[np.argmax(self.probs)])


# --------------------------------------------------------------------------
# basis conversion
# --------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _dicke_embedding(spec: EnsembleSpec) -> sp.csr_matrix:
    """Columns are symmetric Dicke product states in the 2^N product basis."""
    n, na, nb = spec.n_total, spec.n_a, spec.n_b
    dim = 2 ** n
    s = np.arange(dim)
    down_a = np.zeros(dim, dtype=int)
    down_b = np.zeros(dim, dtype=int)
    for k in range(n):
        bit = (s >> (n - 1 - k)) & 1
        if k < na:
            down_a += bit
        else:
            down_b += bit
    col = down_a * (nb + 1) + down_b
    amp = 1.0 / np.sqrt(
        np.array([math.comb(na, a) * math.comb(nb, b) for a, b in zip(down_a, down_b)],
                 dtype=float)
    )
    return sp.csr_matrix((amp, (s, col)), shape=(dim, (na + 1) * (nb + 1)))


def _sector_indices(basis: Basis) -> np.ndarray:
    """Positions of a sector-uncoupled basis inside the uncoupled basis."""
    ub = uncoupled_basis(basis.spec)
    return np.array([ub.index[lab] for lab in sector_basis(basis.spec, basis.m_plus).labels])


def _to_uncoupled(basis: Basis):
    """Sparse map from ``basis`` coordinates to uncoupled coordinates."""
    spec = basis.spec
    ub = uncoupled_basis(spec)
    if basis.kind is BasisKind.UNCOUPLED:
        return sp.identity(ub.dim, format="csr")
    if basis.kind is BasisKind.COUPLED:
        return sp.csr_matrix(_coupling_matrix(spec)).T.tocsr()
    if basis.kind is BasisKind.DFS_SECTOR:
        idx = _sector_indices(basis)
        emb = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))),
                            shape=(ub.dim, len(idx)))
        if basis.coupled:
            emb = emb @ sp.csr_matrix(sector_transform(spec, basis.m_plus).T)
        return sp.csr_matrix(emb)
    return _dicke_embedding(spec).T.tocsr()


def transform_matrix(src: Basis, dst: Basis):
    """Matrix T with v_dst = T v_src for states supported in both bases."""
    if src.spec != dst.spec:
        raise ValueError("bases belong to different ensemble specs")
    if src == dst:
        return sp.identity(src.dim, format="csr")
    if (src.kind is BasisKind.DFS_SECTOR and dst.kind is BasisKind.DFS_SECTOR
            and src.m_plus == dst.m_plus):
        U = sector_transform(src.spec, src.m_plus)
        return sp.csr_matrix(U if dst.coupled else U.T)
    if src.kind is BasisKind.FULL_PRODUCT:
        to_u = _dicke_embedding(src.spec).T.tocsr()
    else:
        to_u = _to_uncoupled(src)
    if dst.kind is BasisKind.FULL_PRODUCT:
        from_u = _dicke_embedding(dst.spec)
    else:
        from_u = _to_uncoupled(dst).T.tocsr()
    return sp.csr_matrix(from_u @ to_u)


def convert(obj, basis: Basis):
    """Re-express a state or density matrix in another basis.

    Raises if the object has weight outside the target space (for example a
    state leaking out of a DFS sector).
    """
    if obj.basis == basis:
        return obj
    T = transform_matrix(obj.basis, basis)
    if isinstance(obj, QuantumState):
        v = T @ obj.amplitudes
        lost = 1 - np.linalg.norm(v)
        if abs(lost) > 1e-10:
            raise ValueError(f"state has weight {lost:.3e} outside the target basis")
        return QuantumState(basis, v / np.linalg.norm(v))
    if isinstance(obj, DensityMatrix):
        rho = T @ obj.data @ T.conj().T
        if sp.issparse(rho) and basis.dim <= 512:
            rho = rho.toarray()
        tr = rho.diagonal().sum()
        if abs(tr - 1) > 1e-10:
            raise ValueError(f"density has weight {1 - tr.real:.3e} outside the target basis")
        return DensityMatrix(basis, rho, check_spectrum=obj.check_spectrum)
    raise TypeError(f"cannot convert {type(obj).__name__}")


def _resolve_basis(spec: EnsembleSpec, basis: Basis | None) -> Basis:
    if basis is None:
        return uncoupled_basis(spec)
    if basis.spec != spec:
        raise ValueError("basis belongs to a different ensemble spec")
    return basis


def _from_uncoupled_labels(spec, entries: dict, basis: Basis | None) -> QuantumState:
    """Build a state from {(m_a, m_b): amplitude} and express it in ``basis``."""
    basis = _resolve_basis(spec, basis)
    if basis.kind is BasisKind.DFS_SECTOR:
        sb = sector_basis(spec, basis.m_plus)
        v = np.zeros(sb.dim, dtype=complex)
        for lab, a in entries.items():
            if lab not in sb.index:
                raise ValueError(f"label {lab} lies outside sector M+={basis.m_plus}")
            v[sb.index[lab]] = a
        st = QuantumState.normalized(sb, _fix_phase(v))
        return convert(st, basis)
    ub = uncoupled_basis(spec)
    v = np.zeros(ub.dim, dtype=complex)
    for lab, a in entries.items():
        v[ub.index[lab]] = a
    st = QuantumState.normalized(ub, _fix_phase(v))
    return convert(st, basis)


# --------------------------------------------------------------------------
# constructors
# --------------------------------------------------------------------------


def _require_symmetric(spec: EnsembleSpec, what: str) -> None:
    if not spec.is_symmetric:
        raise ValueError(f"{what} requires N_A = N_B")


def make_initial_product(spec: EnsembleSpec, basis: Basis | None = None) -> QuantumState:
    """Ensemble A fully excited, ensemble B in the ground state."""
    return _from_uncoupled_labels(spec, {(spec.j_a, -spec.j_b): 1.0}, basis)


def make_ghz_dfs(spec: EnsembleSpec, basis: Basis | None = None) -> QuantumState:
    _require_symmetric(spec, "the GHZ-DFS state")
    j = spec.j_a
    return _from_uncoupled_labels(spec, {(j, -j): 1.0, (-j, j): 1.0}, basis)


def make_lieb_mattis(spec: EnsembleSpec, basis: Basis | None = None) -> QuantumState:
    """Alternating-sign superposition of all |m, -m> pairs (the J = 0 state)."""
    return make_tms_family(spec, np.inf, basis)


def make_tms_family(spec: EnsembleSpec, alpha: float, basis: Basis | None = None) -> QuantumState:
    """Spin analog of a two-mode squeezed vacuum with squeezing strength alpha.

    ``alpha = np.inf`` is accepted as the maximally squeezed (Lieb-Mattis)
    limit instead of relying on tanh saturating.
    """
    _require_symmetric(spec, "the two-mode squeezed family")
    if np.isnan(alpha):
        raise ValueError("alpha must not be NaN")
    j = spec.j_a
    k = np.arange(spec.n_a + 1)
    if np.isposinf(alpha):
        amps = (-1.0) ** k
    else:
        r = -np.tanh(alpha)
        with np.errstate(under="ignore"):
            amps = np.where(k == 0, 1.0, r ** k)
    return _from_uncoupled_labels(spec, {(j - kk, -(j - kk)): a for kk, a in zip(k, amps)}, basis)


def make_jm_state(spec: EnsembleSpec, J: float, M: float, basis: Basis | None = None) -> QuantumState:
    """Coupled state |J, M> with both subensembles at maximal spin."""
    Js = spec.j_values
    tJ, tM = 2 * J, 2 * M
    if not (abs(tJ - round(tJ)) < 1e-9 and abs(tM - round(tM)) < 1e-9):
        raise ValueError("J and M must be half-integers")
    if not np.any(np.abs(Js - J) < 1e-9) or abs(M) > J + 1e-9 or abs((J - M) - round(J - M)) > 1e-9:
        raise ValueError(f"(J={J}, M={M}) is not a valid coupled label for this spec")
    J, M = round(tJ) / 2, round(tM) / 2
    cb = sector_basis(spec, M, coupled=True)
    v = np.zeros(cb.dim)
    v[cb.index[(J, M)]] = 1.0
    st = convert(QuantumState(cb, v), sector_basis(spec, M))
    st = QuantumState(st.basis, _fix_phase(st.amplitudes))
    return convert(st, _resolve_basis(spec, basis))


def _css_amplitudes(j: float) -> np.ndarray:
    """Single-ensemble coherent state along +x, m descending."""
    n = int(round(2 * j))
    k = np.arange(n + 1)
    logc = np.array([math.lgamma(n + 1) - math.lgamma(kk + 1) - math.lgamma(n - kk + 1) for kk in k])
    return np.exp(0.5 * logc - 0.5 * n * math.log(2))


def product_state(spec: EnsembleSpec, psi_a: np.ndarray, psi_b: np.ndarray,
                  basis: Basis | None = None) -> QuantumState:
    """Tensor product of two single-ensemble states (m descending)."""
    psi_a = np.asarray(psi_a, dtype=complex)
    psi_b = np.asarray(psi_b, dtype=complex)
    if psi_a.shape != (spec.n_a + 1,) or psi_b.shape != (spec.n_b + 1,):
        raise ValueError("factor lengths must be n_a+1 and n_b+1")
    v = np.kron(psi_a, psi_b)
    st = QuantumState.normalized(uncoupled_basis(spec), _fix_phase(v))
    return convert(st, _resolve_basis(spec, basis))


def make_css(spec: EnsembleSpec, basis: Basis | None = None) -> QuantumState:
    """Both ensembles polarized along +x."""
    _require_symmetric(spec, "the coherent spin state")
    a = _css_amplitudes(spec.j_a)
    return product_state(spec, a, a, basis)


def _single_ensemble_ops(j: float):
    s = spin_matrices(j)
    jz = s["z"].toarray()
    jp = s["p"].toarray()
    jx = (jp + jp.T) / 2
    jy = (jp - jp.T) / (2j)
    return jx, jy, jz


def _oat(j: float, mu: float) -> np.ndarray:
    m = j - np.arange(int(round(2 * j)) + 1)
    return np.exp(-1j * mu * m**2) * _css_amplitudes(j)


def squeezing_angle(j: float, mu: float) -> float:
    """Rotation angle about x that puts the squeezed quadrature along y.

    The y-z covariance of the twisted state is diagonalized in closed form and
    the candidate giving the smaller Var(J_y) is returned.
    """
    jx, jy, jz = _single_ensemble_ops(j)
    psi = _oat(j, mu)

    def ev(a, b=None):
        if b is None:
            return np.real(np.vdot(psi, a @ psi))
        return np.real(np.vdot(psi, (a @ b + b @ a) @ psi)) / 2

    vy = ev(jy @ jy) - ev(jy) ** 2
    vz = ev(jz @ jz) - ev(jz) ** 2
    cyz = ev(jy, jz) - ev(jy) * ev(jz)
    base = 0.5 * math.atan2(2 * cyz, vy - vz)
    best, best_v = 0.0, np.inf
    for nu in (base, base + math.pi / 2, -base, -base + math.pi / 2):
        U = expm(-1j * nu * jx)
        phi = U @ psi
        v = np.real(np.vdot(phi, jy @ jy @ phi)) - np.real(np.vdot(phi, jy @ phi)) ** 2
        if v < best_v - 1e-14:
            best, best_v = nu, v
    return float(best)


def squeezing_parameter(j: float, mu: float) -> float:
    """Wineland parameter 2j Var(J_y) / <J_x>^2 of one twisted ensemble."""
    jx, jy, _ = _single_ensemble_ops(j)
    a = expm(-1j * squeezing_angle(j, mu) * jx) @ _oat(j, mu)

    def ev(o):
        return float(np.real(np.vdot(a, o @ a)))

    return 2 * j * (ev(jy @ jy) - ev(jy) ** 2) / ev(jx) ** 2


def make_sss(spec: EnsembleSpec, mu: float, nu: float | None = None,
             basis: Basis | None = None) -> QuantumState:
    """One-axis-twisted coherent states, rotated by nu about x.

    ``nu=None`` picks the angle that minimizes Var(J_y) of each ensemble.
    """
    _require_symmetric(spec, "the squeezed spin state")
    j = spec.j_a
    if nu is None:
        nu = squeezing_angle(j, mu)
    jx, _, _ = _single_ensemble_ops(j)
    a = expm(-1j * nu * jx) @ _oat(j, mu)
    return product_state(spec, a, a, basis)


# --------------------------------------------------------------------------
# J distribution
# --------------------------------------------------------------------------


def project_pJ(obj) -> ProbabilityTable:
    """Weight of each total J in a state or density matrix."""
    basis = obj.basis
    spec = basis.spec
    if basis.kind is BasisKind.DFS_SECTOR:
        target = sector_basis(spec, basis.m_plus, coupled=True)
    else:
        target = coupled_basis(spec)
    obj = convert(obj, target)
    if isinstance(obj, QuantumState):
        w = np.abs(obj.amplitudes) ** 2
    else:
        w = np.real(obj.data.diagonal())
    out: dict = {}
    for (J, _), p in zip(target.labels, w):
        out[J] = out.get(J, 0.0) + float(p)
    tot = sum(out.values())
    return ProbabilityTable({J: min(max(p / tot, 0.0), 1.0) for J, p in out.items()})


def pJ_exact(spec: EnsembleSpec) -> ProbabilityTable:
    """J distribution of the initial product state, without building vectors."""
    M = (spec.n_a - spec.n_b) / 2
    block = sector_transform(spec, M)
    # initial state sits at the largest m_a of its sector, column 0
    col = block[:, 0] ** 2
    Js = spec.j_values[spec.j_values >= abs(M) - 1e-9]
    return ProbabilityTable(dict(zip(Js.tolist(), (col / col.sum()).tolist())))


def pJ_asymptotic(N: int, J: float) -> float:
    """Large-N approximation of the J distribution of the initial state."""
    return (2 * J + 1) / (N / 2 + 1) * ((N + 2 - J) / (N + 2 + J)) ** (J + 1)


def pj_moments(table: ProbabilityTable) -> tuple[float, float]:
    """Mean of J and mean of J^2."""
    js, ps = table.js, table.probs
    return float(np.sum(js * ps)), float(np.sum(js**2 * ps))


def make_steady_state(spec: EnsembleSpec, basis: Basis | None = None) -> DensityMatrix:
    """Mixture of the dark states |J, -J> weighted by p(J) of the initial state."""
    table = pJ_exact(spec)
    cb = coupled_basis(spec) if basis is None else basis
    if cb.spec != spec:
        raise ValueError("basis belongs to a different ensemble spec")
    full = coupled_basis(spec)
    idx = [full.index[(J, -J)] for J in table.js]
    data = sp.csr_matrix((table.probs, (idx, idx)), shape=(full.dim, full.dim))
    if full.dim <= 512:
        data = data.toarray()
    rho = DensityMatrix(full, data)
    return convert(rho, cb)


def dephase_common_phase(rho: DensityMatrix) -> DensityMatrix:
    """Average over a uniformly random common phase.

    The integral over the phase removes every coherence between different
    J_z^+ eigenvalues and leaves the blocks untouched.
    """
    mp = rho.basis.m_plus_values
    mask = np.abs(mp[:, None] - mp[None, :]) < 1e-9
    if sp.issparse(rho.data):
        coo = rho.data.tocoo()
        keep = mask[coo.row, coo.col]
        data = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=coo.shape)
    else:
        data = np.where(mask, rho.data, 0)
    return DensityMatrix(rho.basis, data, check_spectrum=rho.check_spectrum)
