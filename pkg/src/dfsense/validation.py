"""Quick invariant checks run by ``dfsense validate``.

Each check is small (a few seconds at most) and returns the worst deviation
it saw together with the tolerance it was held to.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import (
    Engine,
    JumpChannel,
    LindbladModel,
    build_h_cavity,
    build_h_tms,
    evolve_lindblad_collective,
    evolve_lindblad_full,
    evolve_lindblad_perminv,
    perminv_from_symmetric,
)
from .dynamics.perminv import sector_observable
from .metrology import build_measurement, estimator_variance, qfi_pure
from .spin import (
    EnsembleSpec,
    build_operator,
    cg_sector_matrix,
    coupled_basis,
    coupling_transform,
    terms,
    uncoupled_basis,
)
from .states import make_ghz_dfs, make_initial_product, make_lieb_mattis, make_steady_state

__all__ = ["Check", "CheckResult", "CHECKS", "run_checks"]


@dataclass(frozen=True)
class Check:
    name: str
    run: Callable[[], float]
    tolerance: float


@dataclass(frozen=True)
class CheckResult:
    name: str
    deviation: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.deviation) and self.deviation <= self.tolerance)


def _cg_orthogonality() -> float:
    worst = 0.0
    for twice_j1 in range(1, 9):
        for twice_j2 in range(1, 9):
            j1, j2 = twice_j1 / 2, twice_j2 / 2
            for twice_m in range(-(twice_j1 + twice_j2), twice_j1 + twice_j2 + 1, 2):
                C = cg_sector_matrix(j1, j2, twice_m / 2)
                worst = max(worst, np.abs(C @ C.T - np.eye(C.shape[0])).max())
    return worst


def _coupling_unitary() -> float:
    worst = 0.0
    for n in (2, 4, 8, 12):
        U = coupling_transform(EnsembleSpec.symmetric(n)).toarray()
        worst = max(worst, np.abs(U @ U.conj().T - np.eye(U.shape[0])).max())
    return worst


def _qfi_closed_forms() -> float:
    worst = 0.0
    for n in (2, 4, 8, 16):
        spec = EnsembleSpec.symmetric(n)
        worst = max(worst, abs(qfi_pure(make_ghz_dfs(spec)) / n**2 - 1),
                    abs(qfi_pure(make_lieb_mattis(spec)) / ((n * n + 4 * n) / 3) - 1))
    return worst


def _measurement_saturation() -> float:
    worst = 0.0
    for n in (2, 4, 8, 16):
        spec = EnsembleSpec.symmetric(n)
        r = estimator_variance(make_lieb_mattis(spec), build_measurement(spec), np.pi / 4)
        worst = max(worst, abs(r.est_variance * (n * n + 4 * n) / 3 - 1))
    return worst


def _measurement_commutes() -> float:
    spec = EnsembleSpec.symmetric(8)
    ub = uncoupled_basis(spec)
    M = build_measurement(spec, ub).toarray()
    Z = build_operator(terms.JZ_PLUS, ub).toarray()
    return float(np.abs(M @ Z - Z @ M).max())


def _steady_state() -> float:
    spec = EnsembleSpec.symmetric(6)
    cb = coupled_basis(spec)
    model = LindbladModel(build_h_cavity(spec, 0.0, cb), (JumpChannel("collective", 1.0),),
                          Engine.COLLECTIVE_COUPLED)
    rho = evolve_lindblad_collective(model, make_initial_product(spec, cb).density(), [0.0, 50.0])[-1]
    d = rho.toarray() - make_steady_state(spec, cb).toarray()
    return float(0.5 * np.abs(np.linalg.eigvalsh((d + d.conj().T) / 2)).sum())


def _engines_agree() -> float:
    spec = EnsembleSpec.symmetric(4)
    ub = uncoupled_basis(spec)
    jumps = (JumpChannel("collective", 0.7), JumpChannel("local", 0.3))
    h = build_h_tms(spec, 1.0, ub)
    psi = make_initial_product(spec, ub)
    ts = np.linspace(0.0, 1.0, 3)
    fM, fZ = sector_observable(terms.MEASUREMENT), sector_observable(terms.JZ_PLUS)
    pi = np.array(evolve_lindblad_perminv(LindbladModel(h, jumps, Engine.PERM_INVARIANT),
                                          perminv_from_symmetric(psi), ts,
                                          observe=lambda b: (fM(b).real, fZ(b).real)))
    full = evolve_lindblad_full(LindbladModel(h, jumps, Engine.FULL_DENSITY), psi, ts,
                                observables=[terms.MEASUREMENT, terms.JZ_PLUS]).real
    return float(np.abs(pi - full).max())


CHECKS = (
    Check("CG sector matrices orthogonal (j <= 4)", _cg_orthogonality, 1e-12),
    Check("coupling transform unitary (N <= 12)", _coupling_unitary, 1e-12),
    Check("QFI of GHZ-DFS and Lieb-Mattis states", _qfi_closed_forms, 1e-9),
    Check("exchange measurement saturates the bound", _measurement_saturation, 1e-9),
    Check("exchange measurement commutes with J_z^+", _measurement_commutes, 1e-12),
    Check("collective emission reaches the dark-state mixture", _steady_state, 1e-6),
    Check("perm-invariant and full-space engines agree", _engines_agree, 1e-6),
)


def run_checks(checks=CHECKS, report: Callable[[CheckResult], None] | None = None) -> list:
    out = []
    for c in checks:
        t0 = time.perf_counter()
        try:
            dev = float(c.run())
        except Exception:  # a crash counts as a failed check
            dev = float("nan")
        r = CheckResult(c.name, dev, c.tolerance, time.perf_counter() - t0)
        out.append(r)
        if report is not None:
            report(r)
    return out
