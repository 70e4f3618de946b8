"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The lines are repeated in an "acceptance criteria" section at the end of the
pytest run.  Every check is made at its stated tolerance and runtime limit.
"""

import math
import time
from functools import lru_cache

import numpy as np
import pytest
import scipy.sparse as sp

from dfsense.dynamics import (
    Engine,
    JumpChannel,
    LindbladModel,
    SweepSchedule,
    TrajectoryConfig,
    build_h_cavity,
    build_h_lieb_mattis,
    build_h_tms,
    build_j1j2,
    chain_lattice,
    evolve_lindblad_collective,
    evolve_lindblad_full,
    evolve_lindblad_perminv,
    evolve_mcwf_full,
    ground_state,
    perminv_from_symmetric,
    run_adiabatic_sweep,
)
from dfsense.dynamics.perminv import sector_observable
from dfsense.experiments import make_config, run_experiment
from dfsense.io import format_csv
from dfsense.metrology import (
    analytic_jm_moments,
    analytic_jm_qfi,
    build_measurement,
    estimator_variance,
    qfi_pure,
)
from dfsense.spin import (
    EnsembleSpec,
    build_operator,
    coupled_basis,
    full_product_basis,
    sector_basis,
    spin_matrices,
    terms,
    uncoupled_basis,
)
from dfsense.states import (
    make_ghz_dfs,
    make_initial_product,
    make_jm_state,
    make_lieb_mattis,
    make_steady_state,
    pJ_asymptotic,
    pJ_exact,
)


class Criterion:
    """Collects named sub-checks and the wall time of one criterion."""

    def __init__(self, number, limit, log):
        self.number, self.limit, self.log = number, limit, log
        self.parts = []
        self.t0 = time.perf_counter()

    def check(self, name, ok, detail):
        self.parts.append((name, bool(ok), detail))

    def finish(self):
        seconds = time.perf_counter() - self.t0
        in_time = self.limit is None or seconds <= self.limit
        ok = all(p[1] for p in self.parts) and in_time
        body = "; ".join(f"{n} {'ok' if good else 'FAILED'} ({d})" for n, good, d in self.parts)
        limit = "" if self.limit is None else f", limit {self.limit:g} s"
        self.log(f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {body} "
                 f"[{seconds:.1f} s{limit}]")
        failed = [n for n, good, _ in self.parts if not good]
        if not in_time:
            failed.append(f"runtime {seconds:.1f} s > {self.limit:g} s")
        assert not failed, f"criterion {self.number} failed: {', '.join(failed)}"


@pytest.fixture
def criterion(acceptance_log):
    def make(number, limit):
        return Criterion(number, limit, acceptance_log)
    return make


@lru_cache(maxsize=None)
def first_run(name, **kw):
    return run_experiment(make_config(name, **kw))


def rel(a, b):
    return abs(a / b - 1)


# independent operator route: Kronecker products of single-spin matrices


def kron_collective(spec):
    a, b = spin_matrices(spec.j_a), spin_matrices(spec.j_b)
    ia, ib = sp.identity(spec.n_a + 1), sp.identity(spec.n_b + 1)
    pAmB = sp.kron(a["p"], b["m"])
    X = (pAmB + pAmB.T).toarray()
    Y = (1j * (pAmB - pAmB.T)).toarray()
    zm = (sp.kron(a["z"], ib) - sp.kron(ia, b["z"])).diagonal()
    zp = (sp.kron(a["z"], ib) + sp.kron(ia, b["z"])).toarray()
    return X, Y, zm, zp


# ---- 1 ----------------------------------------------------------------------------------


def test_criterion_01_closed_form_qfi(criterion):
    c = criterion(1, 5)
    worst_ghz = worst_lm = 0.0
    for n in (2, 4, 8, 16, 32, 64):
        spec = EnsembleSpec.symmetric(n)
        worst_ghz = max(worst_ghz, rel(qfi_pure(make_ghz_dfs(spec)), n * n))
        worst_lm = max(worst_lm, rel(qfi_pure(make_lieb_mattis(spec)), (n * n + 4 * n) / 3))
    c.check("GHZ-DFS N^2", worst_ghz <= 1e-9, f"max rel err {worst_ghz:.1e}")
    c.check("Lieb-Mattis (N^2+4N)/3", worst_lm <= 1e-9, f"max rel err {worst_lm:.1e}")
    c.finish()


# ---- 2 ----------------------------------------------------------------------------------


def test_criterion_02_jm_closed_forms(criterion):
    c = criterion(2, 60)
    worst_q = worst_m1 = worst_m2 = 0.0
    count = 0
    for n in range(2, 17, 2):
        spec = EnsembleSpec.symmetric(n)
        X, _, zm, _ = kron_collective(spec)
        ub = uncoupled_basis(spec)
        for tJ in range(0, n + 1, 2):
            J = tJ / 2
            for M in np.arange(-J, J + 1):
                v = make_jm_state(spec, J, M, ub).amplitudes
                mean_z = np.vdot(v, zm * v).real
                q = 4 * (np.vdot(v, zm * zm * v).real - mean_z**2)
                scale_q = max(1.0, q)
                worst_q = max(worst_q, abs(analytic_jm_qfi(n, J, M) - q) / scale_q)
                for phi in (0.0, 0.3, math.pi / 4, 1.1):
                    w = np.exp(-1j * phi * zm) * v
                    Xw = X @ w
                    m1 = np.vdot(w, Xw).real
                    m2 = np.vdot(Xw, Xw).real
                    a1, a2 = analytic_jm_moments(n, J, M, phi)
                    # first moments vanish at some phases: compare on the scale of <X^2>
                    s = max(1.0, math.sqrt(m2))
                    worst_m1 = max(worst_m1, abs(a1 - m1) / s)
                    worst_m2 = max(worst_m2, abs(a2 - m2) / max(1.0, m2))
                count += 1
    c.check("QFI", worst_q <= 1e-9, f"{count} states, max rel err {worst_q:.1e}")
    c.check("first moment", worst_m1 <= 1e-9, f"max rel err {worst_m1:.1e}")
    c.check("second moment", worst_m2 <= 1e-9, f"max rel err {worst_m2:.1e}")
    c.finish()


# ---- 3 ----------------------------------------------------------------------------------


def test_criterion_03_measurement_saturates(criterion):
    c = criterion(3, 10)
    worst = 0.0
    for n in range(2, 65, 2):
        spec = EnsembleSpec.symmetric(n)
        r = estimator_variance(make_lieb_mattis(spec), build_measurement(spec), math.pi / 4,
                               with_qfi=False)
        worst = max(worst, rel(r.est_variance, 3 / (n * n + 4 * n)))
    c.check("variance = 3/(N^2+4N), N = 2..64", worst <= 1e-9, f"max rel err {worst:.1e}")
    c.finish()


# ---- 4 ----------------------------------------------------------------------------------


def test_criterion_04_steady_state(criterion):
    c = criterion(4, 120)
    worst = 0.0
    for n in range(2, 17, 2):
        spec = EnsembleSpec.symmetric(n)
        cb = coupled_basis(spec)
        Gamma = 1.0
        model = LindbladModel(build_h_cavity(spec, 0.0, cb), (JumpChannel("collective", Gamma),),
                              Engine.COLLECTIVE_COUPLED)
        rho = evolve_lindblad_collective(model, make_initial_product(spec, cb).density(),
                                         [0.0, 50.0 / Gamma])[-1]
        d = rho.toarray() - make_steady_state(spec, cb).toarray()
        td = 0.5 * np.abs(np.linalg.eigvalsh((d + d.conj().T) / 2)).sum()
        worst = max(worst, td)
    c.check("trace distance, N = 2..16", worst <= 1e-6, f"max {worst:.1e}")
    worst = 0.0
    for n in (256, 512, 1024, 2048, 4096):
        table = pJ_exact(EnsembleSpec.symmetric(n))
        mode = table.js[int(np.argmax(table.probs))]
        worst = max(worst, rel(pJ_asymptotic(n, mode), table[mode]))
    c.check("asymptotic p(J) at the mode, N = 256..4096", worst <= 0.05, f"max rel dev {worst:.2%}")
    c.finish()


# ---- 5 ----------------------------------------------------------------------------------


def test_criterion_05_steady_state_exponents(criterion):
    c = criterion(5, 60)
    res = first_run("steady_state_scaling")
    v, b = res.fits["variance_relative"], res.fits["bound_relative"]
    c.check("variance exponent -0.50 +- 0.03", abs(v.exponent + 0.50) <= 0.03 and v.r_squared >= 0.99,
            f"{v.exponent:.3f}, r2 {v.r_squared:.5f}, N {v.fit_range[0]:g}-{v.fit_range[1]:g}")
    c.check("bound exponent -0.51 +- 0.03", abs(b.exponent + 0.51) <= 0.03 and b.r_squared >= 0.99,
            f"{b.exponent:.3f}, r2 {b.r_squared:.5f}")
    c.finish()


# ---- 6 ----------------------------------------------------------------------------------

QUENCH_NS = (32, 64, 128, 256, 512, 1024)


def test_criterion_06_quench_plateau(criterion):
    c = criterion(6, 120)
    res = first_run("quench_infidelity", n_values=QUENCH_NS)
    i128 = res.where(N=128)[0][2]
    tau = res.column("chi_t_opt")
    c.check("I_min(128) in [0.08, 0.12]", 0.08 <= i128 <= 0.12, f"{i128:.4f}")
    c.check("chi t_opt strictly decreasing", bool(np.all(np.diff(tau) < 0)),
            ", ".join(f"{t:.4f}" for t in tau))
    c.check("no flagged rows", not any(r[3] for r in res.rows), "")
    c.finish()


# ---- 7 ----------------------------------------------------------------------------------


def test_criterion_07_quench_prefactor(criterion):
    c = criterion(7, 120)
    res = first_run("quench_sensitivity")
    big = [r for r in res.rows if r[0] >= 256]
    ratios = [r[4] for r in big]
    fit = res.fits["var_quench"]
    c.check("ratio in [1.87, 2.53] for N >= 256", all(1.87 <= x <= 2.53 for x in ratios),
            f"{min(ratios):.3f}..{max(ratios):.3f}")
    c.check("exponent -2.0 +- 0.1", abs(fit.exponent + 2) <= 0.1 and fit.r_squared >= 0.99,
            f"{fit.exponent:.3f}, r2 {fit.r_squared:.5f}")
    c.finish()


# ---- 8 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_separable_baselines(criterion):
    c = criterion(8, 600)
    res = first_run("separable")
    row = res.where(N=128)[0]
    ratio = row[1] / 128
    sss, free = res.fits["sss_relative"], res.fits["sss_noiseless_relative"]
    c.check("CSS F/N in [0.98, 1.05] at N=128", 0.98 <= ratio <= 1.05, f"{ratio:.4f}")
    c.check("SSS exponent -0.35 +- 0.05 (dephased)",
            abs(sss.exponent + 0.35) <= 0.05 and sss.r_squared >= 0.99,
            f"{sss.exponent:.3f}, r2 {sss.r_squared:.5f}")
    c.check("SSS exponent -2/3 +- 0.1 (no dephasing)",
            abs(free.exponent + 2 / 3) <= 0.1 and free.r_squared >= 0.99,
            f"{free.exponent:.3f}, r2 {free.r_squared:.5f}")
    c.finish()


# ---- 9 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_engine_cross_validation(criterion):
    c = criterion(9, 600)
    spec = EnsembleSpec.symmetric(8)
    ub = uncoupled_basis(spec)
    h = build_h_tms(spec, 1.0, ub)
    jumps = (JumpChannel("collective", 0.25), JumpChannel("local", 0.2))
    psi = make_initial_product(spec, ub)
    obs = [terms.MEASUREMENT, terms.JZ_PLUS]
    cfg = TrajectoryConfig(2000, 9, 0.015, 1.5)
    times = cfg.times
    full = evolve_lindblad_full(LindbladModel(h, jumps, Engine.FULL_DENSITY), psi, times,
                                observables=obs).real
    fs = [sector_observable(t) for t in obs]
    pi = np.array(evolve_lindblad_perminv(LindbladModel(h, jumps), perminv_from_symmetric(psi), times,
                                          observe=lambda b: [f(b).real for f in fs]))
    dev = np.abs(pi - full).max()
    c.check("perm-invariant vs full density", dev <= 1e-6, f"max dev {dev:.1e}")
    traj = evolve_mcwf_full(LindbladModel(h, jumps, Engine.MCWF_FULL), psi, cfg, observables=obs)
    idx = np.arange(20, len(times), 20)
    z = np.abs(traj.mean[idx] - full[idx]) / traj.stderr[idx]
    c.check("trajectories within 3 standard errors", z.max() <= 3,
            f"2000 trajectories, {len(idx)} times x 2 observables, max |z| {z.max():.2f}")
    c.finish()


# ---- 10 ---------------------------------------------------------------------------------


def _monotone_and_exponents(c, res, label, ref_fit):
    for n in (12, 16):
        ratios = [res.where(N=n, C=C)[0][res.columns.index("ratio")] for C in (2.0, 1.0, 0.4)]
        c.check(f"{label} N={n} ratio nondecreasing", ratios[0] <= ratios[1] <= ratios[2],
                ", ".join(f"{r:.3f}" for r in ratios))
    ref = res.fits[ref_fit].exponent
    for C in (2.0, 1.0, 0.4):
        e = res.fits[f"var_opt_C={C:g}"].exponent
        c.check(f"{label} C={C:g} exponent", abs(e - ref) <= 0.15, f"{e:.3f} vs noiseless {ref:.3f}")


@pytest.mark.slow
def test_criterion_10_noise_robustness(criterion):
    c = criterion(10, 1800)
    _monotone_and_exponents(c, first_run("noisy_quench"), "quench", "var_reference")
    _monotone_and_exponents(c, first_run("noisy_stochastic"), "emission", "var_reference")
    c.finish()


# ---- 11 ---------------------------------------------------------------------------------


def test_criterion_11_adiabatic(criterion):
    c = criterion(11, 60)
    res = first_run("adiabatic_gap", n_values=(64, 1024))
    for n in (64, 1024):
        hi = res.where(N=n, delta_over_chi=1e3)[0][3]
        lo = res.where(N=n, delta_over_chi=1e-2)[0][2]
        c.check(f"N={n} gap/delta at 1e3", abs(hi - 2) <= 0.02, f"{hi:.4f}")
        c.check(f"N={n} gap/chi at 1e-2", abs(lo - 2) <= 0.02, f"{lo:.4f}")
    sweep = run_adiabatic_sweep(EnsembleSpec.symmetric(32), SweepSchedule.exponential(1.0, 50.0, 6400))
    c.check("sweep fidelity N=32", sweep.fidelity >= 0.99, f"{sweep.fidelity:.5f}")
    c.finish()


# ---- 12 ---------------------------------------------------------------------------------


def test_criterion_12_parent_hamiltonians(criterion):
    c = criterion(12, 60)
    worst = 0.0
    for n in range(2, 33, 2):
        spec = EnsembleSpec.symmetric(n)
        cb = coupled_basis(spec)
        gs = ground_state(build_h_lieb_mattis(spec, 1.0, cb), sector=0)
        worst = max(worst, 1 - gs.state.fidelity(make_lieb_mattis(spec, cb)))
    c.check("Lieb-Mattis ground state, N <= 32", worst <= 1e-10, f"max infidelity {worst:.1e}")
    lat = chain_lattice(8)
    gs = ground_state(build_j1j2(lat, 0.01, 1.0), sector=0)
    f = gs.state.fidelity(make_lieb_mattis(lat.spec, full_product_basis(lat.spec)))
    c.check("J1-J2 chain, 8 sites", f >= 0.99, f"fidelity {f:.6f}")
    c.finish()


# ---- 13 ---------------------------------------------------------------------------------


def test_criterion_13_photon_counting_and_identities(criterion):
    c = criterion(13, 30)
    res = first_run("photon_measurement", n_values=(128,), phase_grid=(1e-3,))
    r = res.rows[0][5]
    c.check("target at phi=1e-3: var * F = 1 +- 1e-3", abs(r - 1) <= 1e-3, f"{r:.8f}")
    worst_rot = worst_comm = worst_build = 0.0
    for n in range(2, 13, 2):
        spec = EnsembleSpec.symmetric(n)
        X, Y, zm, zp = kron_collective(spec)
        u = np.exp(1j * math.pi / 4 * zm)
        rotated = u[:, None] * X * u.conj()[None, :]
        worst_rot = max(worst_rot, np.abs(rotated - Y).max())
        worst_comm = max(worst_comm, np.abs(X @ zp - zp @ X).max())
        ub = uncoupled_basis(spec)
        worst_build = max(worst_build,
                          np.abs(build_operator(terms.MEASUREMENT, ub).toarray() - X).max(),
                          np.abs(build_operator(terms.TMS, ub).toarray() - Y).max())
    c.check("rotation identity, N <= 12", worst_rot <= 1e-12, f"max {worst_rot:.1e}")
    c.check("[M, J_z^+] = 0, N <= 12", worst_comm <= 1e-12, f"max {worst_comm:.1e}")
    c.check("package operators match", worst_build <= 1e-12, f"max {worst_build:.1e}")
    c.finish()


# ---- 14 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_14_determinism(criterion):
    c = criterion(14, None)
    for name, kw in (("quench_infidelity", dict(n_values=QUENCH_NS)),
                     ("noisy_quench", {}), ("noisy_stochastic", {})):
        a = format_csv(first_run(name, **kw)).encode()
        b = format_csv(run_experiment(make_config(name, **kw))).encode()
        c.check(f"{name} rerun", a == b, f"{len(a)} bytes")
    mcwf = dict(n_values=(6, 8), cooperativity=(1.0,), engine="mcwf", trajectories=48, seed=14)
    for name, extra in (("noisy_stochastic", dict(budget=9, t_max=2.0)),
                        ("noisy_quench", dict(budget=7, x_points=2, refine=False))):
        outs = [format_csv(run_experiment(make_config(name, workers=w, **mcwf, **extra))).encode()
                for w in (1, 2, 4)]
        c.check(f"{name} trajectories, workers 1/2/4", outs[0] == outs[1] == outs[2],
                f"{len(outs[0])} bytes")
    c.finish()
