"""Lindblad model description and a block-sparse master-equation kernel.

Both exact reduced engines (coupled-basis collective emission and the
permutation-invariant solver) store the density matrix as a set of dense
blocks.  A block ``b`` evolves as

    dR_b/dt = -i (H_b R_b - R_b H'_b^dag) + sum_s rate * G R_s G'^T

where ``H`` and ``H'`` are the effective non-Hermitian Hamiltonians of the
row and column spaces and every gain term maps a source block through real
transfer matrices.  The kernel below only knows about this structure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from ..spin import OperatorMatrix

__all__ = [
    "Engine",
    "JumpChannel",
    "LindbladModel",
    "BlockSystem",
    "NumericalFailure",
    "RTOL",
    "ATOL",
]

RTOL = 1e-10
ATOL = 1e-12


class NumericalFailure(RuntimeError):
    """An integrator or optimizer did not converge."""


class Engine(enum.Enum):
    COLLECTIVE_COUPLED = "collective_coupled"
    MCWF_FULL = "mcwf_full"
    PERM_INVARIANT = "perm_invariant"
    FULL_DENSITY = "full_density"


@dataclass(frozen=True)
class JumpChannel:
    """``collective``: sqrt(rate) (J_-^A + J_-^B).  ``local``: sqrt(rate) sigma_-^(k) for every atom."""

    kind: str
    rate: float

    def __post_init__(self):
        if self.kind not in ("collective", "local"):
            raise ValueError(f"unknown jump kind {self.kind!r}")
        if not np.isfinite(self.rate) or self.rate < 0:
            raise ValueError("jump rates must be finite and nonnegative")


@dataclass(frozen=True)
class LindbladModel:
    hamiltonian: OperatorMatrix
    jumps: tuple = ()
    engine: Engine = Engine.PERM_INVARIANT

    def __post_init__(self):
        jumps = tuple(self.jumps)
        for j in jumps:
            if not isinstance(j, JumpChannel):
                raise TypeError("jumps must be JumpChannel instances")
        object.__setattr__(self, "jumps", jumps)
        if not self.hamiltonian.hermitian_hint:
            raise ValueError("Hamiltonian must be Hermitian")
        if self.engine is Engine.COLLECTIVE_COUPLED:
            bad = [j for j in jumps if j.kind != "collective" and j.rate > 0]
            if bad:
                raise ValueError(
                    "the collective engine only admits jumps commuting with J.J "
                    "(collective emission); use the permutation-invariant engine"
                )
        if self.engine in (Engine.COLLECTIVE_COUPLED, Engine.PERM_INVARIANT):
            if self.hamiltonian.terms is None:
                raise ValueError("reduced engines need a Hamiltonian with a symbolic form")

    @property
    def spec(self):
        return self.hamiltonian.basis.spec

    def rate(self, kind: str) -> float:
        return float(sum(j.rate for j in self.jumps if j.kind == kind))

    @property
    def gamma_collective(self) -> float:
        return self.rate("collective")

    @property
    def gamma_local(self) -> float:
        return self.rate("local")

    def with_engine(self, engine: Engine) -> "LindbladModel":
        return LindbladModel(self.hamiltonian, self.jumps, engine)


@dataclass
class _Gain:
    source: int
    left: np.ndarray
    right: np.ndarray
    rate: float


@dataclass
class BlockSystem:
    """Block-sparse Lindblad generator."""

    keys: list
    shapes: list
    heff_left: list
    heff_right: list
    gains: list = field(default_factory=list)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}
        sizes = [r * c for r, c in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        if not self.gains:
            self.gains = [[] for _ in self.keys]
        self._hl = [-1j * h for h in self.heff_left]
        self._hr = [1j * h.conj().T for h in self.heff_right]

    def add_gain(self, target: Hashable, source: Hashable, left, right, rate: float) -> None:
        if rate == 0:
            return
        t, s = self.index[target], self.index[source]
        self.gains[t].append(_Gain(s, np.asarray(left), np.asarray(right), float(rate)))

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def pack(self, blocks: dict) -> np.ndarray:
        y = np.zeros(self.size, dtype=complex)
        for k, R in blocks.items():
            if k not in self.index:
                if np.any(R):
                    raise ValueError(f"block {k} is not part of the reachable set")
                continue
            i = self.index[k]
            y[self.offsets[i]:self.offsets[i + 1]] = np.asarray(R).ravel()
        return y

    def unpack(self, y: np.ndarray) -> dict:
        return {k: y[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i])
                for i, k in enumerate(self.keys)}

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        R = [y[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i])
             for i in range(len(self.keys))]
        out = np.empty_like(y)
        for i, Ri in enumerate(R):
            d = self._hl[i] @ Ri + Ri @ self._hr[i]
            for g in self.gains[i]:
                d += g.rate * (g.left @ R[g.source] @ g.right.T)
            out[self.offsets[i]:self.offsets[i + 1]] = d.ravel()
        return out

    def integrate(self, blocks0: dict, t_grid: Sequence[float],
                  observe: Callable[[dict], object] | None = None,
                  rtol: float = RTOL, atol: float = ATOL) -> list:
        """Block states (or ``observe`` results) on ``t_grid``."""
        t_grid = np.asarray(t_grid, dtype=float)
        if np.any(np.diff(t_grid) < 0):
            raise ValueError("t_grid must be nondecreasing")
        y0 = self.pack(blocks0)
        observe = observe or (lambda b: b)
        if t_grid[-1] == t_grid[0]:
            return [observe(self.unpack(y0)) for _ in t_grid]
        sol = solve_ivp(self.rhs, (t_grid[0], t_grid[-1]), y0, method="DOP853",
                        t_eval=t_grid, rtol=rtol, atol=atol)
        if not sol.success:
            raise NumericalFailure(f"master-equation integration failed: {sol.message}")
        return [observe(self.unpack(sol.y[:, k])) for k in range(len(t_grid))]
