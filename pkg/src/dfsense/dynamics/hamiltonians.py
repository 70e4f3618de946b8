"""Cavity-mediated spin Hamiltonians and the J1-J2 parent model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..spin import (
    Basis,
    BasisKind,
    EnsembleSpec,
    OperatorMatrix,
    build_operator,
    full_product_basis,
    terms,
    uncoupled_basis,
    _wrap,
)

__all__ = [
    "CavityParams",
    "cavity_rates",
    "build_h_cavity",
    "build_h_tms",
    "build_h_lieb_mattis",
    "build_h_adiabatic",
    "LatticeSpec",
    "chain_lattice",
    "build_j1j2",
]


@dataclass(frozen=True)
class CavityParams:
    """Bare cavity-QED parameters and the derived spin-model rates."""

    g: float
    kappa: float
    gamma: float
    delta_detuning: float
    n_total: int

    def __post_init__(self):
        if self.kappa <= 0 or self.gamma < 0 or self.g < 0:
            raise ValueError("need kappa > 0, gamma >= 0, g >= 0")
        if int(self.n_total) != self.n_total or self.n_total < 2 or self.n_total % 2:
            raise ValueError("n_total must be a positive even integer")

    @property
    def _den(self) -> float:
        return 4 * self.delta_detuning**2 + self.kappa**2

    @property
    def chi(self) -> float:
        return 4 * self.g**2 * self.delta_detuning / self._den

    @property
    def Gamma(self) -> float:
        return 4 * self.g**2 * self.kappa / self._den

    @property
    def cooperativity(self) -> float:
        return 4 * self.g**2 / (self.kappa * self.gamma) if self.gamma > 0 else math.inf

    @property
    def collective_cooperativity(self) -> float:
        return self.n_total * self.cooperativity


def cavity_rates(x: float, cooperativity: float) -> tuple[float, float, float]:
    """(chi, Gamma, gamma) in units of 4 g^2 / kappa at detuning x = 2 Delta / kappa."""
    chi = x / (2 * (1 + x * x))
    Gamma = 1 / (1 + x * x)
    gamma = 0.0 if math.isinf(cooperativity) else 1.0 / cooperativity
    return chi, Gamma, gamma


def _basis(spec: EnsembleSpec, basis: Basis | None) -> Basis:
    basis = uncoupled_basis(spec) if basis is None else basis
    if basis.spec != spec:
        raise ValueError("basis belongs to a different ensemble spec")
    return basis


def build_h_cavity(spec: EnsembleSpec, chi: float, basis: Basis | None = None) -> OperatorMatrix:
    """chi (J_+^A + J_+^B)(J_-^A + J_-^B)."""
    return build_operator(terms.scale(terms.CAVITY, chi), _basis(spec, basis), hermitian=True)


def build_h_tms(spec: EnsembleSpec, chi: float, basis: Basis | None = None) -> OperatorMatrix:
    """chi i (J_+^A J_-^B - J_-^A J_+^B)."""
    return build_operator(terms.scale(terms.TMS, chi), _basis(spec, basis), hermitian=True)


def build_h_lieb_mattis(spec: EnsembleSpec, chi: float, basis: Basis | None = None) -> OperatorMatrix:
    """2 chi J^A . J^B."""
    return build_operator(terms.scale(terms.LIEB_MATTIS, chi), _basis(spec, basis), hermitian=True)


def build_h_adiabatic(spec: EnsembleSpec, chi: float, delta: float,
                      basis: Basis | None = None) -> OperatorMatrix:
    """Cavity Hamiltonian plus the gradient -delta (J_z^A - J_z^B)."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    t = terms.scale(terms.CAVITY, chi) + terms.scale(terms.JZ_MINUS, -delta)
    return build_operator(t, _basis(spec, basis), hermitian=True)


# --------------------------------------------------------------------------
# J1-J2 lattice model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeSpec:
    """Sites with sublattice labels 'A'/'B' and two edge lists."""

    sublattice: tuple
    nn_edges: tuple
    nnn_edges: tuple = field(default=())

    def __post_init__(self):
        labs = tuple(self.sublattice)
        if set(labs) - {"A", "B"}:
            raise ValueError("sublattice labels must be 'A' or 'B'")
        n = len(labs)
        for i, j in tuple(self.nn_edges) + tuple(self.nnn_edges):
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"invalid edge ({i}, {j})")
        for i, j in self.nn_edges:
            if labs[i] == labs[j]:
                raise ValueError(f"nearest-neighbor edge ({i}, {j}) does not cross sublattices")
        for i, j in self.nnn_edges:
            if labs[i] != labs[j]:
                raise ValueError(f"next-nearest edge ({i}, {j}) crosses sublattices")
        object.__setattr__(self, "sublattice", labs)
        object.__setattr__(self, "nn_edges", tuple(map(tuple, self.nn_edges)))
        object.__setattr__(self, "nnn_edges", tuple(map(tuple, self.nnn_edges)))

    @property
    def n_sites(self) -> int:
        return len(self.sublattice)

    @property
    def spec(self) -> EnsembleSpec:
        na = self.sublattice.count("A")
        return EnsembleSpec(na, self.n_sites - na)

    def qubit_of_site(self) -> list[int]:
        """Qubit position of every site: A sites first, then B, order kept."""
        a = [i for i, s in enumerate(self.sublattice) if s == "A"]
        b = [i for i, s in enumerate(self.sublattice) if s == "B"]
        pos = [0] * self.n_sites
        for q, site in enumerate(a + b):
            pos[site] = q
        return pos


def chain_lattice(n_sites: int, periodic: bool = True) -> LatticeSpec:
    """Alternating chain: even sites A, odd sites B."""
    if n_sites < 4 or n_sites % 2:
        raise ValueError("chain needs an even number of sites >= 4")
    lim = n_sites if periodic else n_sites - 1
    nn = [(i, (i + 1) % n_sites) for i in range(lim)]
    lim2 = n_sites if periodic else n_sites - 2
    nnn = [(i, (i + 2) % n_sites) for i in range(lim2)]
    return LatticeSpec(tuple("AB"[i % 2] for i in range(n_sites)), tuple(nn), tuple(nnn))


def _pair_dot(n: int, qa: int, qb: int) -> sp.csr_matrix:
    """sigma_a . sigma_b on n qubits (bit n-1-q holds qubit q, 0 = up)."""
    dim = 2**n
    s = np.arange(dim)
    ba, bb = 1 << (n - 1 - qa), 1 << (n - 1 - qb)
    za = 1 - 2 * ((s & ba) != 0)
    zb = 1 - 2 * ((s & bb) != 0)
    diff = za != zb
    flip = s[diff] ^ (ba | bb)
    data = np.concatenate([(za * zb).astype(float), np.full(diff.sum(), 2.0)])
    rows = np.concatenate([s, flip])
    cols = np.concatenate([s, s[diff]])
    return sp.csr_matrix((data, (rows, cols)), shape=(dim, dim))


def build_j1j2(lattice: LatticeSpec, j1: float, j2: float) -> OperatorMatrix:
    """j1 sum_nn sigma.sigma - j2 sum_nnn sigma.sigma on the product space.

    Sites are relabeled so that sublattice A occupies the first qubits, which
    makes the result share its basis with the symmetric-state embedding.
    """
    if lattice.n_sites > 14:
        raise ValueError("full product space limited to 14 sites here")
    q = lattice.qubit_of_site()
    n = lattice.n_sites
    H = sp.csr_matrix((2**n, 2**n))
    for i, j in lattice.nn_edges:
        H = H + j1 * _pair_dot(n, q[i], q[j])
    for i, j in lattice.nnn_edges:
        H = H - j2 * _pair_dot(n, q[i], q[j])
    return _wrap(full_product_basis(lattice.spec), H, True)
