"""Angular-momentum machinery for two permutation-symmetric spin ensembles.

Every collective operator is described symbolically as a sum of products of
the six primitives ``zA, pA, mA, zB, pB, mB`` (``J_z``, ``J_+`` and ``J_-`` of
ensembles A and B).  The symbolic form can be materialized in any of the
supported bases, which is what lets the dynamics engines rebuild the same
Hamiltonian inside every irrep block or in the full product space.

Index ordering is fixed: uncoupled labels ``(m_a, m_b)`` with ``m_a``
descending then ``m_b`` descending, coupled labels ``(J, M)`` with ``J``
descending then ``M`` descending.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "EnsembleSpec",
    "BasisKind",
    "Basis",
    "OperatorMatrix",
    "uncoupled_basis",
    "coupled_basis",
    "sector_basis",
    "full_product_basis",
    "cg_coefficient",
    "cg_sector_matrix",
    "coupling_transform",
    "build_collective_operator",
    "build_operator",
    "build_jz_minus_coupled",
    "jz_minus_sector_coupled",
    "dfs_projector",
    "spin_matrices",
    "terms",
]

SPARSE_THRESHOLD = 512
FULL_PRODUCT_MAX_N = 20


def _twice(x: float, name: str = "value") -> int:
    t = 2.0 * float(x)
    r = int(round(t))
    if abs(t - r) > 1e-9:
        raise ValueError(f"{name}={x!r} is not a half-integer")
    return r


@dataclass(frozen=True)
class EnsembleSpec:
    """Atom numbers of the two ensembles.

    ``EnsembleSpec.symmetric(N)`` gives the balanced split ``N/2 + N/2``.
    """

    n_a: int
    n_b: int

    def __post_init__(self):
        for name in ("n_a", "n_b"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if (self.n_a + self.n_b) % 2:
            raise ValueError(
                f"total atom number N={self.n_a + self.n_b} must be even"
            )

    @classmethod
    def symmetric(cls, n_total: int) -> "EnsembleSpec":
        if int(n_total) != n_total or n_total < 2 or n_total % 2:
            raise ValueError(f"N must be a positive even integer, got {n_total!r}")
        return cls(int(n_total) // 2, int(n_total) // 2)

    @property
    def n_total(self) -> int:
        return self.n_a + self.n_b

    @property
    def imbalance(self) -> int:
        return abs(self.n_a - self.n_b)

    @property
    def j_a(self) -> float:
        return self.n_a / 2

    @property
    def j_b(self) -> float:
        return self.n_b / 2

    @property
    def is_symmetric(self) -> bool:
        return self.n_a == self.n_b

    @property
    def j_values(self) -> np.ndarray:
        """Total J values in descending order."""
        hi, lo = self.j_a + self.j_b, abs(self.j_a - self.j_b)
        return hi - np.arange(int(round(hi - lo)) + 1)


class BasisKind(enum.Enum):
    UNCOUPLED = "uncoupled"
    COUPLED = "coupled"
    DFS_SECTOR = "dfs_sector"
    FULL_PRODUCT = "full_product"


@dataclass(frozen=True)
class Basis:
    """Which representation a vector or matrix lives in.

    For ``DFS_SECTOR`` bases ``m_plus`` selects the ``J_z^+`` eigenvalue and
    ``coupled`` picks ``(J, M)`` labels instead of ``(m_a, m_b)``.
    """

    kind: BasisKind
    spec: EnsembleSpec
    m_plus: float | None = None
    coupled: bool = False

    def __post_init__(self):
        if self.kind is BasisKind.DFS_SECTOR:
            if self.m_plus is None:
                raise ValueError("a DFS sector basis needs m_plus")
            tm = _twice(self.m_plus, "m_plus")
            if abs(tm) > self.spec.n_total or (tm - self.spec.n_total) % 2:
                raise ValueError(
                    f"m_plus={self.m_plus} outside [-N/2, N/2] or wrong parity"
                )
            object.__setattr__(self, "m_plus", tm / 2)
        elif self.m_plus is not None:
            raise ValueError("m_plus is only meaningful for DFS sector bases")
        if self.kind is BasisKind.FULL_PRODUCT and self.spec.n_total > FULL_PRODUCT_MAX_N:
            raise ValueError(
                f"full product space limited to N <= {FULL_PRODUCT_MAX_N}"
            )

    @cached_property
    def labels(self) -> list:
        ja, jb = self.spec.j_a, self.spec.j_b
        if self.kind is BasisKind.UNCOUPLED:
            return [
                (ja - i, jb - k)
                for i in range(self.spec.n_a + 1)
                for k in range(self.spec.n_b + 1)
            ]
        if self.kind is BasisKind.COUPLED:
            return [(J, J - k) for J in self.spec.j_values for k in range(int(2 * J) + 1)]
        if self.kind is BasisKind.DFS_SECTOR:
            M = self.m_plus
            if self.coupled:
                return [(J, M) for J in self.spec.j_values if J >= abs(M) - 1e-9]
            hi, lo = min(ja, M + jb), max(-ja, M - jb)
            return [(hi - i, M - hi + i) for i in range(int(round(hi - lo)) + 1)]
        return list(range(2 ** self.spec.n_total))

    @property
    def dim(self) -> int:
        if self.kind is BasisKind.FULL_PRODUCT:
            return 2 ** self.spec.n_total
        if self.kind in (BasisKind.UNCOUPLED, BasisKind.COUPLED):
            return (self.spec.n_a + 1) * (self.spec.n_b + 1)
        return len(self.labels)

    @cached_property
    def index(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}

    @cached_property
    def m_plus_values(self) -> np.ndarray:
        """J_z^+ eigenvalue of every basis vector."""
        if self.kind is BasisKind.FULL_PRODUCT:
            n = self.spec.n_total
            s = np.arange(2 ** n)
            downs = np.zeros(2 ** n, dtype=int)
            for k in range(n):
                downs += (s >> k) & 1
            return n / 2 - downs
        if self.kind is BasisKind.COUPLED or (self.kind is BasisKind.DFS_SECTOR and self.coupled):
            return np.array([lab[1] for lab in self.labels], dtype=float)
        return np.array([lab[0] + lab[1] for lab in self.labels], dtype=float)

    @property
    def is_coupled(self) -> bool:
        return self.kind is BasisKind.COUPLED or (
            self.kind is BasisKind.DFS_SECTOR and self.coupled
        )


def uncoupled_basis(spec: EnsembleSpec) -> Basis:
    return Basis(BasisKind.UNCOUPLED, spec)


def coupled_basis(spec: EnsembleSpec) -> Basis:
    return Basis(BasisKind.COUPLED, spec)


def sector_basis(spec: EnsembleSpec, m_plus: float = 0, coupled: bool = False) -> Basis:
    return Basis(BasisKind.DFS_SECTOR, spec, m_plus=m_plus, coupled=coupled)


def full_product_basis(spec: EnsembleSpec) -> Basis:
    return Basis(BasisKind.FULL_PRODUCT, spec)


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Square matrix tagged with its basis.

    ``terms`` keeps the symbolic collective form when the operator was built
    from spin primitives; ``source`` is the column basis of a basis-change
    matrix (``None`` for ordinary operators).
    """

    basis: Basis
    data: np.ndarray | sp.spmatrix
    hermitian_hint: bool = False
    terms: tuple | None = None
    source: Basis | None = None

    def __post_init__(self):
        d = self.basis.dim
        if self.data.shape != (d, d):
            raise ValueError(
                f"operator shape {self.data.shape} does not match basis dimension {d}"
            )
        if self.hermitian_hint:
            diff = self.data - self.data.conj().T
            err = abs(diff).max() if sp.issparse(diff) else np.max(np.abs(diff), initial=0.0)
            if err > 1e-12:
                raise ValueError(f"operator flagged Hermitian but |A - A^dag| = {err:.3e}")

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.data)

    def toarray(self) -> np.ndarray:
        return self.data.toarray() if sp.issparse(self.data) else np.asarray(self.data)

    def tocsr(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.data)

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.basis, self.data.conj().T, self.hermitian_hint)

    def __matmul__(self, other):
        if isinstance(other, OperatorMatrix):
            _check_same(self.basis, other.basis)
            return _wrap(self.basis, self.data @ other.data)
        return self.data @ other

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        _check_same(self.basis, other.basis)
        return _wrap(self.basis, self.data + other.data,
                     self.hermitian_hint and other.hermitian_hint)

    def __sub__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        _check_same(self.basis, other.basis)
        return _wrap(self.basis, self.data - other.data,
                     self.hermitian_hint and other.hermitian_hint)

    def __mul__(self, c) -> "OperatorMatrix":
        herm = self.hermitian_hint and np.isreal(c)
        return _wrap(self.basis, self.data * c, herm)

    __rmul__ = __mul__

    def expect(self, vec: np.ndarray) -> complex:
        vec = np.asarray(vec)
        return complex(np.vdot(vec, self.data @ vec))


def _check_same(a: Basis, b: Basis) -> None:
    if a != b:
        raise ValueError(f"basis mismatch: {a.kind.value} vs {b.kind.value}")


def _wrap(basis, data, hermitian=False, terms=None, source=None) -> OperatorMatrix:
    if basis.dim > SPARSE_THRESHOLD:
        data = sp.csr_matrix(data)
    elif sp.issparse(data):
        data = data.toarray()
    else:
        data = np.asarray(data)
    return OperatorMatrix(basis, data, hermitian, terms, source)


# --------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# --------------------------------------------------------------------------


def _cg_block(tj1: int, tj2: int, tM: int, tJs: np.ndarray) -> np.ndarray:
    """CG coefficients <J,M|j1,m1;j2,M-m1> for several J at once.

    Rows follow ``tJs``; columns run over the allowed m1 in descending order.
    Solves the three-term recursion of the J^2 eigen-equation from both ends
    of the m1 range and joins the two sweeps where the sweep from the low end
    stops growing, which keeps each sweep inside its numerically stable
    region.
    """
    j1, j2, M = tj1 / 2, tj2 / 2, tM / 2
    hi = min(j1, M + j2)
    lo = max(-j1, M - j2)
    n = int(round(hi - lo)) + 1
    Js = np.asarray(tJs, dtype=float) / 2
    nJ = len(Js)
    if n == 1:
        return np.ones((nJ, 1))
    m1 = hi - np.arange(n)
    m2 = M - m1
    c1, c2 = j1 * (j1 + 1), j2 * (j2 + 1)
    diag = (c1 + c2 + 2 * m1 * m2)[None, :] - (Js * (Js + 1))[:, None]
    # off[i] couples m1[i] and m1[i+1] = m1[i] - 1
    mm = m1[:-1]
    off = np.sqrt(np.maximum(c1 - mm * (mm - 1), 0.0)) * np.sqrt(
        np.maximum(c2 - m2[:-1] * (m2[:-1] + 1), 0.0)
    )
    big = 1e150

    # low-end sweep; each row stops at its turning point, the largest i with
    # |bwd[i-1]| < |bwd[i]|, where the sweep leaves its stable region
    bwd = np.zeros((nJ, n))
    bwd[:, -1] = 1.0
    k = np.zeros(nJ, dtype=int)
    live = np.ones(nJ, dtype=bool)
    for i in range(n - 1, 0, -1):
        if i == n - 1:
            nxt = -diag[:, -1] * bwd[:, -1] / off[-1]
        else:
            nxt = -(diag[:, i] * bwd[:, i] + off[i] * bwd[:, i + 1]) / off[i - 1]
        stop = live & (np.abs(nxt) < np.abs(bwd[:, i]))
        k[stop] = i
        live &= ~stop
        if not live.any():
            break
        bwd[live, i - 1] = nxt[live]
        over = live & (np.abs(bwd[:, i - 1]) > big)
        if over.any():
            bwd[over, i - 1:] /= np.abs(bwd[over, i - 1])[:, None]

    # high-end sweep, stopped per row at its matching point so that the
    # values it must hand over are never rescaled into underflow
    fwd = np.zeros((nJ, n))
    fwd[:, 0] = 1.0
    fwd[:, 1] = -diag[:, 0] / off[0]
    for i in range(1, n - 1):
        act = k >= i + 1
        if not act.any():
            break
        nxt = -(diag[:, i] * fwd[:, i] + off[i - 1] * fwd[:, i - 1]) / off[i]
        fwd[act, i + 1] = nxt[act]
        over = act & (np.abs(fwd[:, i + 1]) > big)
        if over.any():
            fwd[over, : i + 2] /= np.abs(fwd[over, i + 1])[:, None]

    rows = np.arange(nJ)
    scale = fwd[rows, k] / bwd[rows, k]
    cols = np.arange(n)[None, :]
    out = np.where(cols <= k[:, None], fwd, bwd * scale[:, None])
    out /= np.max(np.abs(out), axis=1)[:, None]
    out /= np.sqrt(np.sum(out**2, axis=1))[:, None]
    # the forward sweep starts at +1 and is only rescaled by positive factors,
    # so the coefficient at the largest m1 is already positive (Condon-Shortley)
    return out


_CACHE_LIMIT = 250_000


@lru_cache(maxsize=128)
def _cg_sector_small(tj1: int, tj2: int, tM: int) -> np.ndarray:
    return _cg_sector_compute(tj1, tj2, tM)


def _cg_sector_compute(tj1: int, tj2: int, tM: int) -> np.ndarray:
    tJmax = tj1 + tj2
    tJmin = max(abs(tj1 - tj2), abs(tM))
    tJs = np.arange(tJmax, tJmin - 1, -2)
    out = _cg_block(tj1, tj2, tM, tJs)
    out.setflags(write=False)
    return out


def _cg_sector_cached(tj1: int, tj2: int, tM: int) -> np.ndarray:
    # large blocks (tens of MB at j ~ 1000) are recomputed rather than cached
    n_j = (tj1 + tj2 - max(abs(tj1 - tj2), abs(tM))) // 2 + 1
    if n_j * n_j > _CACHE_LIMIT:
        return _cg_sector_compute(tj1, tj2, tM)
    return _cg_sector_small(tj1, tj2, tM)


def cg_sector_matrix(j1: float, j2: float, M: float) -> np.ndarray:
    """Orthogonal matrix of CG coefficients for one J_z^+ = M sector.

    Rows: J descending from j1+j2 to max(|j1-j2|, |M|).  Columns: m1
    descending over the allowed range.
    """
    tj1, tj2, tM = _twice(j1, "j1"), _twice(j2, "j2"), _twice(M, "M")
    if tj1 < 0 or tj2 < 0:
        raise ValueError("angular momenta must be nonnegative")
    if abs(tM) > tj1 + tj2 or (tM - tj1 - tj2) % 2:
        raise ValueError(f"M={M} not reachable from j1={j1}, j2={j2}")
    return _cg_sector_cached(tj1, tj2, tM)


def cg_coefficient(j1, m1, j2, m2, J, M) -> float:
    """Clebsch-Gordan coefficient <J,M|j1,m1;j2,m2> (Condon-Shortley phase)."""
    t = {k: _twice(v, k) for k, v in
         dict(j1=j1, m1=m1, j2=j2, m2=m2, J=J, M=M).items()}
    for jn, mn in (("j1", "m1"), ("j2", "m2"), ("J", "M")):
        if t[jn] < 0:
            raise ValueError(f"{jn} must be nonnegative")
        if abs(t[mn]) > t[jn] or (t[jn] - t[mn]) % 2:
            raise ValueError(f"{mn}={t[mn] / 2} invalid for {jn}={t[jn] / 2}")
    if t["M"] != t["m1"] + t["m2"]:
        return 0.0
    if not abs(t["j1"] - t["j2"]) <= t["J"] <= t["j1"] + t["j2"] or (
        t["J"] - t["j1"] - t["j2"]
    ) % 2:
        return 0.0
    block = _cg_sector_cached(t["j1"], t["j2"], t["M"])
    row = (t["j1"] + t["j2"] - t["J"]) // 2
    hi2 = min(t["j1"], t["M"] + t["j2"])
    col = (hi2 - t["m1"]) // 2
    return float(block[row, col])


def coupling_transform(spec: EnsembleSpec) -> OperatorMatrix:
    """Unitary U with U[(J,M), (m_a,m_b)] = <J,M|j_a,m_a;j_b,m_b>."""
    return OperatorMatrix(
        coupled_basis(spec), _coupling_matrix(spec), source=uncoupled_basis(spec)
    )


@lru_cache(maxsize=32)
def _coupling_matrix(spec: EnsembleSpec):
    cb, ub = coupled_basis(spec), uncoupled_basis(spec)
    rows, cols, vals = [], [], []
    tja, tjb = spec.n_a, spec.n_b
    for tM in range(-(tja + tjb), tja + tjb + 1, 2):
        M = tM / 2
        block = _cg_sector_cached(tja, tjb, tM)
        Js = spec.j_values[spec.j_values >= abs(M) - 1e-9]
        hi = min(spec.j_a, M + spec.j_b)
        for r, J in enumerate(Js):
            ri = cb.index[(J, M)]
            for c in range(block.shape[1]):
                ma = hi - c
                rows.append(ri)
                cols.append(ub.index[(ma, M - ma)])
                vals.append(block[r, c])
    U = sp.csr_matrix((vals, (rows, cols)), shape=(cb.dim, ub.dim))
    return U.toarray() if cb.dim <= SPARSE_THRESHOLD else U


def sector_transform(spec: EnsembleSpec, m_plus: float) -> np.ndarray:
    """CG matrix mapping sector-uncoupled to sector-coupled coordinates."""
    return cg_sector_matrix(spec.j_a, spec.j_b, m_plus)


# --------------------------------------------------------------------------
# collective operators
# --------------------------------------------------------------------------


def spin_matrices(j: float) -> dict:
    """Sparse ``jz, jp, jm`` for a single spin j, basis m descending."""
    tj = _twice(j, "j")
    m = j - np.arange(tj + 1)
    jz = sp.diags(m)
    up = np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1))
    jp = sp.diags(up, 1)
    return {"z": sp.csr_matrix(jz), "p": sp.csr_matrix(jp), "m": sp.csr_matrix(jp.T)}


# symbolic forms: tuple of (coefficient, (primitive, ...)) ; () is identity
class terms:
    """Symbolic collective operators used across the package."""

    @staticmethod
    def single(which: str, scope: str) -> tuple:
        name = {"Jz": "z", "Jplus": "p", "Jminus": "m"}.get(which)
        scopes = {"A": ("A",), "B": ("B",), "Total": ("A", "B")}[scope]
        if name is not None:
            return tuple((1.0, (name + s,)) for s in scopes)
        if which == "Jx":
            return tuple((0.5, (p + s,)) for s in scopes for p in ("p", "m"))
        if which == "Jy":
            return tuple(
                (c, (p + s,)) for s in scopes for p, c in (("p", -0.5j), ("m", 0.5j))
            )
        raise ValueError(f"unknown operator {which!r}")

    JZ_MINUS = ((1.0, ("zA",)), (-1.0, ("zB",)))
    JZ_PLUS = ((1.0, ("zA",)), (1.0, ("zB",)))
    MEASUREMENT = ((1.0, ("pA", "mB")), (1.0, ("mA", "pB")))
    # i (J+^A J-^B - J-^A J+^B)
    TMS = ((1j, ("pA", "mB")), (-1j, ("mA", "pB")))
    CAVITY = (
        (1.0, ("pA", "mA")), (1.0, ("pA", "mB")),
        (1.0, ("pB", "mA")), (1.0, ("pB", "mB")),
    )
    # 2 J^A . J^B
    LIEB_MATTIS = ((2.0, ("zA", "zB")), (1.0, ("pA", "mB")), (1.0, ("mA", "pB")))
    CASIMIR_A = ((1.0, ("pA", "mA")), (1.0, ("zA", "zA")), (-1.0, ("zA",)))
    CASIMIR_B = ((1.0, ("pB", "mB")), (1.0, ("zB", "zB")), (-1.0, ("zB",)))
    # J.J of the total spin
    CASIMIR = CAVITY + ((1.0, ("zA", "zA")), (2.0, ("zA", "zB")), (1.0, ("zB", "zB")),
                        (-1.0, ("zA",)), (-1.0, ("zB",)))
    ONE_AXIS_TWIST = ((1.0, ("zA", "zA")), (1.0, ("zB", "zB")))

    @staticmethod
    def scale(t: tuple, c) -> tuple:
        return tuple((c * a, p) for a, p in t)

    @staticmethod
    def product(t1: tuple, t2: tuple) -> tuple:
        return tuple((a * b, p + q) for a, p in t1 for b, q in t2)


def _is_hermitian_terms(t: tuple, basis: Basis, data) -> bool:
    diff = data - data.conj().T
    err = abs(diff).max() if sp.issparse(diff) else np.max(np.abs(diff), initial=0.0)
    return err <= 1e-12 * max(1.0, abs(data).max() if sp.issparse(data) else np.max(np.abs(data), initial=0.0))


def _label_action(t: tuple, labels: Sequence, ja: float, jb: float):
    """Apply a symbolic operator to (m_a, m_b) labels.

    Returns (col_index, row_labels_ma, row_labels_mb, coef) arrays for all
    nonzero matrix elements.
    """
    lab = np.asarray(labels, dtype=float).reshape(-1, 2)
    cols_all, ma_all, mb_all, val_all = [], [], [], []
    ca, cb = ja * (ja + 1), jb * (jb + 1)
    for coef, prims in t:
        ma = lab[:, 0].copy()
        mb = lab[:, 1].copy()
        val = np.full(len(lab), complex(coef))
        for p in reversed(prims):
            kind, ens = p[0], p[1]
            m = ma if ens == "A" else mb
            c = ca if ens == "A" else cb
            if kind == "z":
                val = val * m
            elif kind == "p":
                val = val * np.sqrt(np.maximum(c - m * (m + 1), 0.0))
                m += 1
            elif kind == "m":
                val = val * np.sqrt(np.maximum(c - m * (m - 1), 0.0))
                m -= 1
            else:
                raise ValueError(f"unknown primitive {p!r}")
        keep = val != 0
        cols_all.append(np.nonzero(keep)[0])
        ma_all.append(ma[keep])
        mb_all.append(mb[keep])
        val_all.append(val[keep])
    return (np.concatenate(cols_all), np.concatenate(ma_all),
            np.concatenate(mb_all), np.concatenate(val_all))


def _materialize_uncoupled_like(t: tuple, labels, index: dict, spec: EnsembleSpec):
    cols, ma, mb, val = _label_action(t, labels, spec.j_a, spec.j_b)
    rows = np.empty(len(cols), dtype=int)
    for i, key in enumerate(zip(ma.tolist(), mb.tolist())):
        r = index.get(key)
        if r is None:
            raise ValueError(
                "operator does not preserve the selected J_z^+ sector"
            )
        rows[i] = r
    d = len(labels)
    return sp.csr_matrix((val, (rows, cols)), shape=(d, d))


def _full_product_primitives(spec: EnsembleSpec) -> dict:
    return _full_prims_cached(spec.n_a, spec.n_b)


@lru_cache(maxsize=4)
def _full_prims_cached(n_a: int, n_b: int) -> dict:
    n = n_a + n_b
    dim = 2 ** n
    s = np.arange(dim)
    prims = {}
    for ens, sites in (("A", range(n_a)), ("B", range(n_a, n))):
        z = np.zeros(dim)
        rows, cols = [], []
        for k in sites:
            bit = 1 << (n - 1 - k)
            down = (s & bit) != 0
            z += np.where(down, -0.5, 0.5)
            up_states = s[~down]
            rows.append(up_states | bit)
            cols.append(up_states)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        jm = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(dim, dim))
        prims["z" + ens] = sp.csr_matrix(sp.diags(z))
        prims["m" + ens] = jm
        prims["p" + ens] = sp.csr_matrix(jm.T)
    return prims


def site_operator(spec: EnsembleSpec, k: int, which: str) -> sp.csr_matrix:
    """Single-site ``sigma_-`` (``'m'``) or excited-state projector (``'n'``)."""
    n = spec.n_total
    dim = 2 ** n
    s = np.arange(dim)
    bit = 1 << (n - 1 - k)
    up = (s & bit) == 0
    if which == "n":
        return sp.csr_matrix(sp.diags(up.astype(float)))
    if which == "m":
        cols = s[up]
        return sp.csr_matrix((np.ones(len(cols)), (cols | bit, cols)), shape=(dim, dim))
    raise ValueError(which)


def _materialize_products(t: tuple, prims: dict, dim: int):
    out = sp.csr_matrix((dim, dim), dtype=complex)
    eye = sp.identity(dim, format="csr")
    for coef, ps in t:
        m = eye
        for p in ps:
            m = m @ prims[p]
        out = out + coef * m
    return out


def materialize(t: tuple, basis: Basis):
    """Matrix (sparse) of a symbolic collective operator in ``basis``."""
    spec = basis.spec
    if basis.kind is BasisKind.UNCOUPLED:
        return _materialize_uncoupled_like(t, basis.labels, basis.index, spec)
    if basis.kind is BasisKind.COUPLED:
        X = _materialize_uncoupled_like(t, uncoupled_basis(spec).labels,
                                        uncoupled_basis(spec).index, spec)
        U = _coupling_matrix(spec)
        Us = sp.csr_matrix(U)
        return sp.csr_matrix(Us @ X @ Us.T)
    if basis.kind is BasisKind.DFS_SECTOR:
        ub = sector_basis(spec, basis.m_plus)
        X = _materialize_uncoupled_like(t, ub.labels, ub.index, spec)
        if not basis.coupled:
            return X
        U = sector_transform(spec, basis.m_plus)
        return sp.csr_matrix(U @ X.toarray() @ U.T)
    prims = _full_product_primitives(spec)
    return _materialize_products(t, prims, basis.dim)


def _simplify(data):
    if sp.issparse(data):
        data = sp.csr_matrix(data)
        if data.nnz and np.all(np.abs(data.data.imag) == 0):
            data = sp.csr_matrix(data.real)
    else:
        if np.all(np.abs(np.imag(data)) == 0):
            data = np.real(data)
    return data


def build_operator(t: tuple, basis: Basis, hermitian: bool | None = None) -> OperatorMatrix:
    """Materialize symbolic terms into an :class:`OperatorMatrix`."""
    data = _simplify(materialize(t, basis))
    if hermitian is None:
        hermitian = _is_hermitian_terms(t, basis, data)
    if hermitian:
        # remove rounding asymmetry introduced by basis transforms
        data = (data + data.conj().T) / 2
    return _wrap(basis, data, bool(hermitian), terms=tuple(t))


def build_collective_operator(spec: EnsembleSpec, which: str, scope: str,
                              basis: Basis | None = None) -> OperatorMatrix:
    """Collective ``Jx, Jy, Jz, Jplus, Jminus`` of ensemble A, B or the total."""
    basis = uncoupled_basis(spec) if basis is None else basis
    if basis.spec != spec:
        raise ValueError("basis was built for a different EnsembleSpec")
    t = terms.single(which, scope)
    return build_operator(t, basis, hermitian=which in ("Jx", "Jy", "Jz"))


# --------------------------------------------------------------------------
# J_z^- in the coupled basis
# --------------------------------------------------------------------------


def _jz_minus_offdiag(N: int, J: np.ndarray, M: float) -> np.ndarray:
    return np.sqrt((J**2 - M**2) * ((N / 2 + 1) ** 2 - J**2) / (4 * J**2 - 1))


def jz_minus_sector_coupled(spec: EnsembleSpec, m_plus: float) -> np.ndarray:
    """Tridiagonal J_z^- inside one coupled sector (J descending), dense."""
    if not spec.is_symmetric:
        raise NotImplementedError("closed form only holds for N_A = N_B")
    b = sector_basis(spec, m_plus, coupled=True)
    Js = np.array([lab[0] for lab in b.labels])
    out = np.zeros((len(Js), len(Js)))
    if len(Js) > 1:
        e = _jz_minus_offdiag(spec.n_total, Js[:-1], m_plus)
        out[np.arange(len(Js) - 1), np.arange(1, len(Js))] = e
        out[np.arange(1, len(Js)), np.arange(len(Js) - 1)] = e
    return out


def build_jz_minus_coupled(spec: EnsembleSpec) -> OperatorMatrix:
    """J_z^A - J_z^B in the coupled basis from its tridiagonal closed form."""
    if not spec.is_symmetric:
        raise NotImplementedError("closed form only holds for N_A = N_B")
    cb = coupled_basis(spec)
    N = spec.n_total
    rows, cols, vals = [], [], []
    for (J, M), i in cb.index.items():
        if J - 1 >= abs(M) and J >= 1:
            k = cb.index[(J - 1, M)]
            v = float(_jz_minus_offdiag(N, np.array(J), M))
            rows += [i, k]
            cols += [k, i]
            vals += [v, v]
    data = sp.csr_matrix((vals, (rows, cols)), shape=(cb.dim, cb.dim))
    return _wrap(cb, data, True, terms=terms.JZ_MINUS)


# --------------------------------------------------------------------------
# DFS projector
# --------------------------------------------------------------------------


def dfs_projector(spec: EnsembleSpec, m_plus: float, basis: Basis | None = None):
    """Projector onto the J_z^+ = m_plus eigensector and its index list."""
    basis = uncoupled_basis(spec) if basis is None else basis
    tm = _twice(m_plus, "m_plus")
    if abs(tm) > spec.n_total:
        raise ValueError(f"|m_plus| must be <= N/2, got {m_plus}")
    if basis.kind is BasisKind.DFS_SECTOR:
        raise ValueError("basis is already a single sector")
    idx = np.nonzero(np.abs(basis.m_plus_values - tm / 2) < 1e-9)[0]
    d = basis.dim
    P = sp.csr_matrix((np.ones(len(idx)), (idx, idx)), shape=(d, d))
    return _wrap(basis, P, True), idx.tolist()
