"""Full product-space engines: a density-matrix oracle and quantum trajectories."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from ..spin import (
    BasisKind,
    OperatorMatrix,
    build_operator,
    full_product_basis,
    site_operator,
    terms,
)
from ..states import DensityMatrix, QuantumState, convert
from .lindblad import ATOL, RTOL, Engine, LindbladModel, NumericalFailure

__all__ = [
    "MCWF_MAX_N",
    "TrajectoryConfig",
    "TrajectoryResult",
    "full_space_operators",
    "evolve_lindblad_full",
    "evolve_mcwf_full",
    "max_jump_rate",
]

MCWF_MAX_N = 20
FULL_DENSITY_MAX_N = 10
_DENSE_PROPAGATOR_LIMIT = 2048
_CHUNK = 64


@dataclass(frozen=True)
class FullSpaceOperators:
    hamiltonian: sp.csr_matrix
    heff: sp.csr_matrix
    jumps: list          # sparse L_k including sqrt(rate)
    basis: object


def full_space_operators(model: LindbladModel) -> FullSpaceOperators:
    """Hamiltonian, effective Hamiltonian and jump operators on 2^N states."""
    spec = model.spec
    fb = full_product_basis(spec)
    h = model.hamiltonian
    if h.basis.kind is BasisKind.FULL_PRODUCT:
        H = h.tocsr()
    elif h.terms is not None:
        H = build_operator(h.terms, fb, hermitian=True).tocsr()
    else:
        raise ValueError("Hamiltonian needs a symbolic form or the full product basis")
    H = sp.csr_matrix(H, dtype=complex)
    jumps = []
    for ch in model.jumps:
        if ch.rate == 0:
            continue
        if ch.kind == "collective":
            L = build_operator(terms.single("Jminus", "Total"), fb, hermitian=False).tocsr()
            jumps.append(np.sqrt(ch.rate) * sp.csr_matrix(L, dtype=complex))
        else:
            for k in range(spec.n_total):
                jumps.append(np.sqrt(ch.rate) * sp.csr_matrix(site_operator(spec, k, "m"), dtype=complex))
    loss = sp.csr_matrix(H.shape, dtype=complex)
    for L in jumps:
        loss = loss + L.conj().T @ L
    return FullSpaceOperators(H, sp.csr_matrix(H - 0.5j * loss), jumps, fb)


def _as_full(obj, fb):
    if obj.basis.kind is BasisKind.FULL_PRODUCT:
        return obj
    return convert(obj, fb)


def evolve_lindblad_full(model: LindbladModel, rho, t_grid, observables: Sequence = (),
                         rtol: float = RTOL, atol: float = ATOL):
    """Direct integration of the master equation on the 2^N product space.

    Meant as an oracle for N <= 10.  With ``observables`` (operators on the
    product space) an array of expectation values of shape (len(t_grid),
    len(observables)) is returned, otherwise a list of density matrices.
    """
    if model.spec.n_total > FULL_DENSITY_MAX_N:
        raise ValueError(f"full-space density integration limited to N <= {FULL_DENSITY_MAX_N}")
    ops = full_space_operators(model)
    fb = ops.basis
    if isinstance(rho, QuantumState):
        rho = rho.density()
    rho = _as_full(rho, fb)
    d = fb.dim
    A = (-1j * ops.heff).tocsr()
    jumps = [(L, L.conj().T.tocsr()) for L in ops.jumps]

    def rhs(t, y):
        R = y.reshape(d, d)
        out = A @ R
        out = out + out.conj().T
        for L, Ld in jumps:
            out += L @ (Ld.T @ R.T).T
        return out.ravel()

    y0 = np.asarray(rho.toarray(), dtype=complex).ravel()
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[-1] > t_grid[0]:
        sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]), y0, method="DOP853", t_eval=t_grid,
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise NumericalFailure(sol.message)
        ys = sol.y.T
    else:
        ys = np.tile(y0, (len(t_grid), 1))
    mats = [_full_matrix(o, fb) for o in observables]
    if mats:
        return np.array([[np.sum(m.T.multiply(y.reshape(d, d))) if sp.issparse(m)
                          else np.sum(m.T * y.reshape(d, d)) for m in mats] for y in ys])
    return [DensityMatrix(fb, (y.reshape(d, d) + y.reshape(d, d).conj().T) / 2,
                          check_spectrum=False) for y in ys]


def _full_matrix(o, fb):
    if isinstance(o, OperatorMatrix):
        if o.basis.kind is BasisKind.FULL_PRODUCT:
            return o.tocsr()
        if o.terms is None:
            raise ValueError("observable needs a symbolic form to move to the product space")
        return build_operator(o.terms, fb).tocsr()
    if isinstance(o, tuple):
        return build_operator(o, fb).tocsr()
    return sp.csr_matrix(o)


# --------------------------------------------------------------------------
# quantum trajectories
# --------------------------------------------------------------------------


def max_jump_rate(model: LindbladModel) -> float:
    """Upper bound of sum_k <L_k^dag L_k> over all states."""
    spec = model.spec
    j = spec.n_total / 2
    return model.gamma_collective * j * (j + 1) + model.gamma_local * spec.n_total


@dataclass(frozen=True)
class TrajectoryConfig:
    """Trajectory count, root seed, sampling step and final time.

    ``dt`` is the output grid and the jump-decision step; it must satisfy
    dt * (max total jump rate) <= 0.1, which is checked against a model by
    :func:`evolve_mcwf_full`.  ``substeps`` further subdivides each step.
    """

    n_trajectories: int
    seed: int
    dt: float
    t_final: float
    substeps: int = 5
    workers: int = 1

    def __post_init__(self):
        if int(self.n_trajectories) != self.n_trajectories or self.n_trajectories < 1:
            raise ValueError("n_trajectories must be a positive integer")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not (self.dt > 0 and self.t_final >= 0):
            raise ValueError("need dt > 0 and t_final >= 0")
        if self.substeps < 1 or self.workers < 1:
            raise ValueError("substeps and workers must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def check(self, model: LindbladModel) -> None:
        if self.dt * max_jump_rate(model) > 0.1 + 1e-12:
            raise ValueError(
                f"dt * max jump rate = {self.dt * max_jump_rate(model):.3g} exceeds 0.1"
            )
        if abs(self.n_steps * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError("t_final must be a multiple of dt")


@dataclass(frozen=True)
class TrajectoryResult:
    times: np.ndarray
    mean: np.ndarray        # (n_times, n_observables)
    stderr: np.ndarray
    values: np.ndarray      # (n_trajectories, n_times, n_observables)
    jumps: np.ndarray       # jump count per trajectory
    final_states: list | None = None


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for one trajectory."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


class _Stepper:
    """Drift over one substep: exact propagator or second-order Taylor."""

    def __init__(self, heff: sp.csr_matrix, h: float):
        self.h = h
        if heff.shape[0] <= _DENSE_PROPAGATOR_LIMIT:
            self.U = expm(-1j * h * heff.toarray())
            self.U_half = expm(-0.5j * h * heff.toarray())
        else:
            self.U = None
            self.A = (-1j * h * heff).tocsr()

    def _taylor(self, psi, f):
        a = f * (self.A @ psi)
        return psi + a + 0.5 * f * (self.A @ a)

    def __call__(self, psi: np.ndarray) -> np.ndarray:
        return self.U @ psi if self.U is not None else self._taylor(psi, 1.0)

    def half(self, psi: np.ndarray) -> np.ndarray:
        return self.U_half @ psi if self.U is not None else self._taylor(psi, 0.5)


def _run_chunk(indices, psi0, ops, stepper, obs, cfg):
    n_sub = cfg.substeps
    n_steps = cfg.n_steps
    jumps = ops.jumps
    nt = len(indices)
    P = np.tile(psi0[:, None], (1, nt))
    draws = np.stack([trajectory_rng(cfg.seed, i).random(n_steps * n_sub) for i in indices]) \
        if n_steps else np.zeros((nt, 0))
    vals = np.empty((nt, n_steps + 1, len(obs)))
    counts = np.zeros(nt, dtype=int)
    h = cfg.dt / n_sub

    def record(k):
        for j, O in enumerate(obs):
            OP = O @ P
            vals[:, k, j] = np.real(np.einsum("ij,ij->j", P.conj(), OP))

    record(0)
    for step in range(n_steps):
        for s in range(n_sub):
            r = draws[:, step * n_sub + s]
            Q = stepper(P)
            dp = 1.0 - np.einsum("ij,ij->j", Q.conj(), Q).real
            jump = r < dp
            for c in np.nonzero(jump)[0]:
                # the jump is placed at the substep midpoint
                psi = stepper.half(P[:, c])
                amps = [L @ psi for L in jumps]
                w = np.array([np.vdot(a, a).real for a in amps])
                cum = np.cumsum(w) * (dp[c] / w.sum())
                k = min(int(np.searchsorted(cum, r[c], side="right")), len(w) - 1)
                Q[:, c] = stepper.half(amps[k])
                counts[c] += 1
            P = Q / np.linalg.norm(Q, axis=0)[None, :]
        record(step + 1)
    return vals, counts, P


def evolve_mcwf_full(model: LindbladModel, psi: QuantumState, config: TrajectoryConfig,
                     observables: Sequence = (), keep_states: bool = False) -> TrajectoryResult:
    """Quantum-jump unraveling on the full product space.

    Each substep propagates with the non-Hermitian effective Hamiltonian; one
    uniform number per substep decides whether a jump occurred (against the
    norm loss) and which channel fired (against the cumulative channel
    weights).  Trajectory ``i`` draws from its own stream derived from
    ``(seed, i)`` and trajectories are processed in fixed chunks, so results
    do not depend on ``config.workers``.
    """
    if model.engine is not Engine.MCWF_FULL:
        raise ValueError("model is not configured for the trajectory engine")
    if model.spec.n_total > MCWF_MAX_N:
        raise ValueError(f"trajectory engine limited to N <= {MCWF_MAX_N}")
    config.check(model)
    ops = full_space_operators(model)
    fb = ops.basis
    psi0 = np.asarray(_as_full(psi, fb).amplitudes, dtype=complex)
    obs = [_full_matrix(o, fb) for o in observables]
    stepper = _Stepper(ops.heff, config.dt / config.substeps)
    ntraj = config.n_trajectories
    chunks = [list(range(i, min(i + _CHUNK, ntraj))) for i in range(0, ntraj, _CHUNK)]

    def run(ch):
        return _run_chunk(ch, psi0, ops, stepper, obs, config)

    if config.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    values = np.concatenate([p[0] for p in parts], axis=0)
    counts = np.concatenate([p[1] for p in parts])
    mean = values.mean(axis=0)
    stderr = values.std(axis=0, ddof=1) / np.sqrt(ntraj) if ntraj > 1 else np.zeros_like(mean)
    states = None
    if keep_states:
        states = [QuantumState(fb, p[2][:, c]) for p in parts for c in range(p[2].shape[1])]
    return TrajectoryResult(config.times, mean, stderr, values, counts, states)
