"""Permutation-invariant master equation for two ensembles with local decay.

Local emission breaks the maximal-spin structure but not the permutation
symmetry inside each ensemble, so the state decomposes over pairs of
irreducible spins (j_a, j_b).  Each block is stored summed over its
degenerate copies, so the total trace is the plain sum of block traces.

For an ensemble of n atoms the local-decay gain from irrep j into irrep j'
at (m, m') -> (m-1, m'-1) factorizes as g(m) g(m') with

    j' = j     g = sqrt((j+m)(j-m+1))   sqrt((n/2+1) / (2j(j+1)))
    j' = j-1   g = sqrt((j+m)(j+m-1))   sqrt((n/2+j+1) / (2j(2j+1)))
    j' = j+1   g = sqrt((j-m+1)(j-m+2)) sqrt((n/2-j) / (2(j+1)(2j+1)))

Blocks are further split by J_z^+ sector pairs (M, M'); both the
Hamiltonian and all jumps respect that grading.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from ..spin import BasisKind, EnsembleSpec, _label_action, terms
from ..states import DensityMatrix, QuantumState, convert
from ..spin import uncoupled_basis
from .lindblad import BlockSystem, Engine, LindbladModel

__all__ = [
    "PermInvState",
    "degeneracy",
    "irreps",
    "perminv_from_symmetric",
    "perminv_system",
    "evolve_lindblad_perminv",
    "block_labels",
]


def degeneracy(n: int, j: float) -> int:
    """Number of copies of spin j in n spin-1/2 particles."""
    k = int(round(n / 2 - j))
    if k < 0:
        return 0
    return math.comb(n, k) - (math.comb(n, k - 1) if k >= 1 else 0)


def irreps(n: int) -> list[float]:
    return [n / 2 - k for k in range(n // 2 + 1)]


def block_labels(ja: float, jb: float) -> list:
    """(m_a, m_b) labels of an irrep pair, m_a then m_b descending."""
    return [(ja - i, jb - k) for i in range(int(round(2 * ja)) + 1)
            for k in range(int(round(2 * jb)) + 1)]


def _sector_labels(ja: float, jb: float, M: float) -> list:
    hi, lo = min(ja, M + jb), max(-ja, M - jb)
    if hi < lo - 1e-9:
        return []
    return [(hi - i, M - hi + i) for i in range(int(round(hi - lo)) + 1)]


@dataclass(frozen=True, eq=False)
class PermInvState:
    """Degeneracy-weighted blocks {(j_a, j_b): matrix over block_labels}."""

    spec: EnsembleSpec
    blocks: dict

    def __post_init__(self):
        ja_ok, jb_ok = set(irreps(self.spec.n_a)), set(irreps(self.spec.n_b))
        for (ja, jb), R in self.blocks.items():
            if ja not in ja_ok or jb not in jb_ok:
                raise ValueError(f"({ja}, {jb}) is not an irrep pair of this spec")
            d = (int(round(2 * ja)) + 1) * (int(round(2 * jb)) + 1)
            if np.shape(R) != (d, d):
                raise ValueError(f"block ({ja}, {jb}) must be {d}x{d}")

    @property
    def trace(self) -> float:
        return float(sum(np.real(np.trace(R)) for R in self.blocks.values()))

    def expect(self, t: tuple) -> complex:
        """Expectation of a symbolic collective operator."""
        tot = 0.0
        for (ja, jb), R in self.blocks.items():
            labs = block_labels(ja, jb)
            O = _dense_from_labels(t, ja, jb, labs, labs)
            tot += np.sum(O * R.T)
        return complex(tot)

    def min_eigenvalue(self) -> float:
        return float(min(np.linalg.eigvalsh((R + R.conj().T) / 2).min()
                         for R in self.blocks.values()))


def perminv_from_symmetric(obj) -> PermInvState:
    """Embed a maximal-spin state or density matrix as the top irrep block."""
    spec = obj.basis.spec
    ub = uncoupled_basis(spec)
    obj = convert(obj, ub)
    if isinstance(obj, QuantumState):
        a = obj.amplitudes
        R = np.outer(a, a.conj())
    elif isinstance(obj, DensityMatrix):
        R = obj.toarray().astype(complex)
    else:
        raise ValueError("initial state must be a QuantumState or DensityMatrix")
    return PermInvState(spec, {(spec.j_a, spec.j_b): R})


def _dense_from_labels(t: tuple, ja: float, jb: float, src: list, dst: list) -> np.ndarray:
    out = np.zeros((len(dst), len(src)), dtype=complex)
    if not src or not dst:
        return out
    index = {lab: i for i, lab in enumerate(dst)}
    cols, ma, mb, val = _label_action(t, src, ja, jb)
    for c, a, b, v in zip(cols, ma, mb, val):
        r = index.get((a, b))
        if r is None:
            raise ValueError("operator leaves the target label set")
        out[r, c] += v
    return out


def _local_gain(n: int, j: float, jt: float, m: np.ndarray) -> np.ndarray:
    if jt == j:
        if j == 0:
            return np.zeros_like(m)
        g = np.sqrt(np.maximum((j + m) * (j - m + 1), 0)) * math.sqrt((n / 2 + 1) / (2 * j * (j + 1)))
    elif jt == j - 1:
        g = np.sqrt(np.maximum((j + m) * (j + m - 1), 0)) * math.sqrt((n / 2 + j + 1) / (2 * j * (2 * j + 1)))
    else:
        g = np.sqrt((j - m + 1) * (j - m + 2)) * math.sqrt((n / 2 - j) / (2 * (j + 1) * (2 * j + 1)))
    return g


def _local_transfer(n: int, which: str, ja, jb, ja_t, jb_t, src: list, dst: list) -> np.ndarray:
    """Map from sector labels of (ja, jb) to those of the target pair."""
    G = np.zeros((len(dst), len(src)))
    index = {lab: i for i, lab in enumerate(dst)}
    for c, (a, b) in enumerate(src):
        if which == "A":
            g = _local_gain(n, ja, ja_t, np.array(a))
            key = (a - 1, b)
        else:
            g = _local_gain(n, jb, jb_t, np.array(b))
            key = (a, b - 1)
        r = index.get(key)
        if r is not None and g != 0:
            G[r, c] = float(g)
    return G


def _neighbors(n: int, j: float) -> list[float]:
    js = set(irreps(n))
    return [jt for jt in (j - 1, j, j + 1) if jt in js]


def perminv_system(model: LindbladModel, seeds: Sequence[tuple]) -> BlockSystem:
    """Generator on all (j_a, j_b, M, M') blocks reachable from ``seeds``."""
    spec = model.spec
    Gc, gl = model.gamma_collective, model.gamma_local
    na, nb = spec.n_a, spec.n_b
    hterms = model.hamiltonian.terms

    def nonempty(ja, jb, M):
        return bool(_sector_labels(ja, jb, M))

    def successors(key):
        ja, jb, M, Mp = key
        out = []
        if Gc > 0 and nonempty(ja, jb, M - 1) and nonempty(ja, jb, Mp - 1):
            out.append(((ja, jb, M - 1, Mp - 1), "C"))
        if gl > 0:
            for jt in _neighbors(na, ja):
                if nonempty(jt, jb, M - 1) and nonempty(jt, jb, Mp - 1):
                    out.append(((jt, jb, M - 1, Mp - 1), "A"))
            for jt in _neighbors(nb, jb):
                if nonempty(ja, jt, M - 1) and nonempty(ja, jt, Mp - 1):
                    out.append(((ja, jt, M - 1, Mp - 1), "B"))
        return out

    keys, edges = [], []
    seen = set()
    queue = deque(seeds)
    while queue:
        k = queue.popleft()
        if k in seen:
            continue
        seen.add(k)
        keys.append(k)
        for nk, kind in successors(k):
            edges.append((nk, k, kind))
            if nk not in seen:
                queue.append(nk)

    @lru_cache(maxsize=None)
    def heff(ja, jb, M):
        labs = _sector_labels(ja, jb, M)
        H = _dense_from_labels(hterms, ja, jb, labs, labs)
        loss = np.zeros((len(labs), len(labs)), dtype=complex)
        if Gc > 0:
            loss += Gc * _dense_from_labels(terms.CAVITY, ja, jb, labs, labs)
        if gl > 0:
            loss += gl * np.diag([a + b + (na + nb) / 2 for a, b in labs])
        return H - 0.5j * loss

    @lru_cache(maxsize=None)
    def collective_map(ja, jb, M):
        src, dst = _sector_labels(ja, jb, M), _sector_labels(ja, jb, M - 1)
        t = terms.single("Jminus", "Total")
        return np.real(_dense_from_labels(t, ja, jb, src, dst))

    @lru_cache(maxsize=None)
    def local_map(which, ja, jb, ja_t, jb_t, M):
        src, dst = _sector_labels(ja, jb, M), _sector_labels(ja_t, jb_t, M - 1)
        return _local_transfer(na if which == "A" else nb, which, ja, jb, ja_t, jb_t, src, dst)

    shapes = [(len(_sector_labels(k[0], k[1], k[2])), len(_sector_labels(k[0], k[1], k[3])))
              for k in keys]
    system = BlockSystem(keys, shapes, [heff(k[0], k[1], k[2]) for k in keys],
                         [heff(k[0], k[1], k[3]) for k in keys])
    for tgt, src, kind in edges:
        ja, jb, M, Mp = src
        if kind == "C":
            system.add_gain(tgt, src, collective_map(ja, jb, M), collective_map(ja, jb, Mp), Gc)
        else:
            jta, jtb = tgt[0], tgt[1]
            system.add_gain(tgt, src, local_map(kind, ja, jb, jta, jtb, M),
                            local_map(kind, ja, jb, jta, jtb, Mp), gl)
    return system


def _split(state: PermInvState) -> dict:
    out = {}
    for (ja, jb), R in state.blocks.items():
        labs = block_labels(ja, jb)
        Ms = sorted({a + b for a, b in labs}, reverse=True)
        pos = {M: [i for i, (a, b) in enumerate(labs) if abs(a + b - M) < 1e-9] for M in Ms}
        for M in Ms:
            for Mp in Ms:
                blk = R[np.ix_(pos[M], pos[Mp])]
                if np.any(np.abs(blk) > 0):
                    out[(ja, jb, M, Mp)] = blk
    return out


def _join(spec: EnsembleSpec, blocks: dict) -> PermInvState:
    out: dict = {}
    for (ja, jb, M, Mp), blk in blocks.items():
        labs = block_labels(ja, jb)
        if (ja, jb) not in out:
            out[(ja, jb)] = np.zeros((len(labs), len(labs)), dtype=complex)
        idx = {lab: i for i, lab in enumerate(labs)}
        ri = [idx[lab] for lab in _sector_labels(ja, jb, M)]
        ci = [idx[lab] for lab in _sector_labels(ja, jb, Mp)]
        out[(ja, jb)][np.ix_(ri, ci)] = blk
    return PermInvState(spec, out)


def sector_observable(t: tuple):
    """Cached per-(j_a, j_b, M) matrices of a J_z^+-conserving observable."""

    @lru_cache(maxsize=None)
    def block(ja, jb, M):
        labs = _sector_labels(ja, jb, M)
        return _dense_from_labels(t, ja, jb, labs, labs)

    def value(blocks: dict) -> complex:
        tot = 0j
        for (ja, jb, M, Mp), R in blocks.items():
            if M == Mp:
                tot += np.sum(block(ja, jb, M) * R.T)
        return tot

    return value


def evolve_lindblad_perminv(model: LindbladModel, blocks: PermInvState, t_grid,
                            observe: Callable | None = None, rtol: float = 1e-10,
                            atol: float = 1e-12) -> list:
    """Block states on ``t_grid`` (or ``observe`` applied to the sector blocks)."""
    if model.engine is not Engine.PERM_INVARIANT:
        raise ValueError("model is not configured for the permutation-invariant engine")
    if not isinstance(blocks, PermInvState):
        raise ValueError("initial state must be a PermInvState; see perminv_from_symmetric")
    if blocks.spec != model.spec:
        raise ValueError("state and model belong to different ensemble specs")
    split = _split(blocks)
    system = perminv_system(model, list(split))
    spec = model.spec
    if observe is None:
        def observe(b):
            return _join(spec, b)
    return system.integrate(split, t_grid, observe, rtol=rtol, atol=atol)
