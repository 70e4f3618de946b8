"""Collective emission in the coupled basis.

Collective decay keeps J fixed and lowers M, so the density matrix is stored
as blocks between J_z^+ sectors (M, M') with J running down each sector.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from ..spin import EnsembleSpec, build_operator, coupled_basis, sector_basis
from ..states import DensityMatrix, convert
from .lindblad import BlockSystem, Engine, LindbladModel

__all__ = ["collective_system", "evolve_lindblad_collective", "split_sectors", "join_sectors"]


def _sector_js(spec: EnsembleSpec, M: float) -> np.ndarray:
    js = spec.j_values
    return js[js >= abs(M) - 1e-9]


def _lowering(spec: EnsembleSpec, M: float) -> np.ndarray:
    """J_- from sector M to sector M-1 (coupled labels)."""
    src, dst = _sector_js(spec, M), _sector_js(spec, M - 1)
    G = np.zeros((len(dst), len(src)))
    for c, J in enumerate(src):
        hit = np.nonzero(np.abs(dst - J) < 1e-9)[0]
        if len(hit) == 0:  # J = -M is annihilated
            continue
        G[hit[0], c] = np.sqrt(J * (J + 1) - M * (M - 1))
    return G


def split_sectors(rho: DensityMatrix) -> dict:
    """Coupled-basis density matrix -> {(M, M'): block} with nonzero blocks only."""
    cb = coupled_basis(rho.spec)
    a = convert(rho, cb).toarray()
    labels = cb.labels
    Ms = sorted({lab[1] for lab in labels}, reverse=True)
    idx = {M: [i for i, lab in enumerate(labels) if lab[1] == M] for M in Ms}
    out = {}
    for M in Ms:
        for Mp in Ms:
            blk = a[np.ix_(idx[M], idx[Mp])]
            if np.any(np.abs(blk) > 0):
                out[(M, Mp)] = blk
    return out


def join_sectors(spec: EnsembleSpec, blocks: dict) -> np.ndarray:
    cb = coupled_basis(spec)
    labels = cb.labels
    out = np.zeros((cb.dim, cb.dim), dtype=complex)
    for (M, Mp), blk in blocks.items():
        ri = [i for i, lab in enumerate(labels) if lab[1] == M]
        ci = [i for i, lab in enumerate(labels) if lab[1] == Mp]
        out[np.ix_(ri, ci)] = blk
    return out


def collective_system(model: LindbladModel, seeds: Sequence[tuple]) -> BlockSystem:
    """Block generator over all (M, M') pairs reachable from ``seeds``."""
    spec = model.spec
    Gam = model.gamma_collective
    jmax = spec.j_values[0]
    keys = []
    for M, Mp in seeds:
        k = 0
        while abs(M - k) <= jmax + 1e-9 and abs(Mp - k) <= jmax + 1e-9:
            key = (M - k, Mp - k)
            if key not in keys:
                keys.append(key)
            if Gam == 0:
                break
            k += 1

    @lru_cache(maxsize=None)
    def heff(M):
        b = sector_basis(spec, M, coupled=True)
        H = build_operator(model.hamiltonian.terms, b, hermitian=True).toarray()
        js = _sector_js(spec, M)
        return H - 0.5j * Gam * np.diag(js * (js + 1) - M * (M - 1))

    shapes = [(len(_sector_js(spec, M)), len(_sector_js(spec, Mp))) for M, Mp in keys]
    sys_ = BlockSystem(keys, shapes, [heff(M) for M, _ in keys], [heff(Mp) for _, Mp in keys])
    for M, Mp in keys:
        src = (M + 1, Mp + 1)
        if src in sys_.index:
            sys_.add_gain((M, Mp), src, _lowering(spec, M + 1), _lowering(spec, Mp + 1), Gam)
    return sys_


def evolve_lindblad_collective(model: LindbladModel, rho: DensityMatrix, t_grid,
                               observe: Callable | None = None, rtol: float = 1e-10,
                               atol: float = 1e-12) -> list:
    """Density matrices (coupled basis) on ``t_grid`` under collective emission.

    With ``observe`` the callback receives the block dictionary and its
    results are returned instead.
    """
    if model.engine is not Engine.COLLECTIVE_COUPLED:
        raise ValueError("model is not configured for the collective engine")
    if rho.spec != model.spec:
        raise ValueError("state and model belong to different ensemble specs")
    blocks = split_sectors(rho)
    system = collective_system(model, list(blocks))
    spec = model.spec
    if observe is None:
        def observe(b):
            a = join_sectors(spec, b)
            a = (a + a.conj().T) / 2
            return DensityMatrix(coupled_basis(spec), a, check_spectrum=False)
    return system.integrate(blocks, t_grid, observe, rtol=rtol, atol=atol)
