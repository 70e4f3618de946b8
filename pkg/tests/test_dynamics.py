import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from dfsense.dynamics import (
    CavityParams,
    Engine,
    JumpChannel,
    LatticeSpec,
    LindbladModel,
    SweepSchedule,
    TrajectoryConfig,
    build_h_adiabatic,
    build_h_cavity,
    build_h_lieb_mattis,
    build_h_tms,
    build_j1j2,
    cavity_rates,
    chain_lattice,
    evolve_lindblad_collective,
    evolve_lindblad_full,
    evolve_lindblad_perminv,
    evolve_mcwf_full,
    evolve_unitary,
    ground_state,
    max_jump_rate,
    perminv_from_symmetric,
    run_adiabatic_sweep,
    spectral_gap,
    unitary_trajectory,
)
from dfsense.dynamics import propagation
from dfsense.dynamics.fullspace import trajectory_rng
from dfsense.dynamics.perminv import degeneracy, irreps, sector_observable
from dfsense.spin import (
    EnsembleSpec,
    build_operator,
    coupled_basis,
    full_product_basis,
    sector_basis,
    terms,
    uncoupled_basis,
)
from dfsense.states import (
    QuantumState,
    convert,
    make_initial_product,
    make_jm_state,
    make_lieb_mattis,
    make_steady_state,
)

# ---- kron oracle -------------------------------------------------------------------

SP = np.array([[0, 1], [0, 0]], dtype=complex)   # (up, down) ordering
SM = SP.T.copy()
SZ = np.diag([0.5, -0.5]).astype(complex)
PAULI = {"x": np.array([[0, 1], [1, 0]], dtype=complex),
         "y": np.array([[0, -1j], [1j, 0]]),
         "z": np.diag([1.0, -1.0]).astype(complex)}


def on_site(op, k, n):
    mats = [np.eye(2, dtype=complex)] * n
    mats[k] = op
    return reduce(np.kron, mats)


def collective(op, sites, n):
    return sum(on_site(op, k, n) for k in sites)


def kron_ops(spec):
    n, na = spec.n_total, spec.n_a
    A, B = range(na), range(na, n)
    return {
        "pA": collective(SP, A, n), "mA": collective(SM, A, n), "zA": collective(SZ, A, n),
        "pB": collective(SP, B, n), "mB": collective(SM, B, n), "zB": collective(SZ, B, n),
    }


def dot(a, b, n):
    return sum(on_site(PAULI[c], a, n) @ on_site(PAULI[c], b, n) for c in "xyz")


# ---- Hamiltonians ------------------------------------------------------------------


def test_hamiltonians_against_kron():
    spec = EnsembleSpec(2, 4)
    fb = full_product_basis(spec)
    o = kron_ops(spec)
    Jp, Jm = o["pA"] + o["pB"], o["mA"] + o["mB"]
    chi = 0.37
    assert np.abs(build_h_cavity(spec, chi, fb).toarray() - chi * Jp @ Jm).max() < 1e-12
    tms = chi * 1j * (o["pA"] @ o["mB"] - o["mA"] @ o["pB"])
    assert np.abs(build_h_tms(spec, chi, fb).toarray() - tms).max() < 1e-12
    dotAB = 0.5 * (o["pA"] @ o["mB"] + o["mA"] @ o["pB"]) + o["zA"] @ o["zB"]
    assert np.abs(build_h_lieb_mattis(spec, chi, fb).toarray() - 2 * chi * dotAB).max() < 1e-12
    ad = chi * Jp @ Jm - 0.8 * (o["zA"] - o["zB"])
    assert np.abs(build_h_adiabatic(spec, chi, 0.8, fb).toarray() - ad).max() < 1e-12
    with pytest.raises(ValueError):
        build_h_adiabatic(spec, chi, -1.0)


def test_hamiltonian_rejects_foreign_basis():
    with pytest.raises(ValueError):
        build_h_cavity(EnsembleSpec.symmetric(4), 1.0, uncoupled_basis(EnsembleSpec.symmetric(6)))


def test_cavity_params_and_rates():
    p = CavityParams(g=0.5, kappa=2.0, gamma=0.25, delta_detuning=1.5, n_total=10)
    x = 2 * p.delta_detuning / p.kappa
    unit = 4 * p.g**2 / p.kappa
    chi, Gamma, gamma = cavity_rates(x, p.cooperativity)
    assert p.chi == pytest.approx(unit * chi)
    assert p.Gamma == pytest.approx(unit * Gamma)
    assert p.gamma / unit == pytest.approx(gamma)
    assert p.collective_cooperativity == pytest.approx(10 * p.cooperativity)
    assert cavity_rates(0.0, math.inf) == (0.0, 1.0, 0.0)
    for bad in (dict(kappa=0.0), dict(n_total=7), dict(gamma=-1.0)):
        kw = dict(g=1.0, kappa=1.0, gamma=0.1, delta_detuning=0.0, n_total=4) | bad
        with pytest.raises(ValueError):
            CavityParams(**kw)


def test_j1j2_against_kron():
    lat = chain_lattice(6)
    H = build_j1j2(lat, 0.3, 1.1).toarray()
    q = lat.qubit_of_site()
    ref = sum(0.3 * dot(q[i], q[j], 6) for i, j in lat.nn_edges) \
        - sum(1.1 * dot(q[i], q[j], 6) for i, j in lat.nnn_edges)
    assert np.abs(H - ref).max() < 1e-12


def test_lattice_validation():
    with pytest.raises(ValueError):
        LatticeSpec(("A", "A", "B", "B"), ((0, 1),))
    with pytest.raises(ValueError):
        LatticeSpec(("A", "B", "A", "B"), ((0, 1),), ((0, 1),))
    with pytest.raises(ValueError):
        chain_lattice(5)


def test_j1j2_ground_state_near_lieb_mattis():
    spec = chain_lattice(8).spec
    gs = ground_state(build_j1j2(chain_lattice(8), 0.01, 1.0), sector=0)
    assert gs.state.fidelity(make_lieb_mattis(spec, full_product_basis(spec))) > 0.999


# ---- spectra and unitary evolution ------------------------------------------------------


@pytest.mark.parametrize("n", [4, 8, 12])
def test_lieb_mattis_hamiltonian_ground_state_and_gap(n):
    spec = EnsembleSpec.symmetric(n)
    chi = 0.7
    h = build_h_lieb_mattis(spec, chi, coupled_basis(spec))
    gs = ground_state(h, sector=0)
    j = n / 4
    assert gs.energy == pytest.approx(-2 * chi * j * (j + 1), abs=1e-10)
    assert gs.state.fidelity(make_lieb_mattis(spec, coupled_basis(spec))) == pytest.approx(1, abs=1e-10)
    # E(J) = chi (J(J+1) - 2 j(j+1)) inside the M = 0 sector
    assert spectral_gap(h, sector=0) == pytest.approx(2 * chi, abs=1e-10)


def test_cavity_hamiltonian_spectrum_in_sector():
    spec = EnsembleSpec.symmetric(6)
    h = build_h_cavity(spec, 1.3, uncoupled_basis(spec))
    assert spectral_gap(h, sector=0) == pytest.approx(2 * 1.3, abs=1e-10)
    assert ground_state(h, sector=0).energy == pytest.approx(0, abs=1e-10)


@given(st.integers(0, 2**32 - 1), st.floats(0, 5))
def test_evolve_unitary_matches_expm(seed, t):
    spec = EnsembleSpec(2, 4)
    ub = uncoupled_basis(spec)
    rng = np.random.default_rng(seed)
    psi = QuantumState.normalized(ub, rng.normal(size=ub.dim) + 1j * rng.normal(size=ub.dim))
    h = build_h_tms(spec, 0.8, ub)
    want = expm(-1j * t * h.toarray()) @ psi.amplitudes
    assert np.abs(evolve_unitary(h, psi, t).amplitudes - want).max() < 1e-9


def test_krylov_branch_agrees(monkeypatch):
    spec = EnsembleSpec.symmetric(6)
    ub = uncoupled_basis(spec)
    h = build_h_tms(spec, 0.5, ub)
    psi = make_initial_product(spec, ub)
    times = np.linspace(0, 3, 7)
    dense = unitary_trajectory(h, psi, times)
    monkeypatch.setattr(propagation, "EIG_LIMIT", 0)
    sparse = unitary_trajectory(h, psi, times)
    odd = unitary_trajectory(h, psi, times ** 2)
    assert np.abs(dense - sparse).max() < 1e-10
    assert np.abs(evolve_unitary(h, psi, 3.0).amplitudes - dense[-1]).max() < 1e-10
    monkeypatch.setattr(propagation, "EIG_LIMIT", 4096)
    assert np.abs(unitary_trajectory(h, psi, times ** 2) - odd).max() < 1e-10


def test_unitary_basis_mismatch():
    spec = EnsembleSpec.symmetric(4)
    with pytest.raises(ValueError):
        evolve_unitary(build_h_tms(spec, 1.0, uncoupled_basis(spec)),
                       make_initial_product(spec, coupled_basis(spec)), 1.0)


def test_cavity_evolution_conserves_casimirs():
    spec = EnsembleSpec.symmetric(8)
    ub = uncoupled_basis(spec)
    psi = make_initial_product(spec, ub)
    JJ = build_operator(terms.CASIMIR, ub)
    Zp = build_operator(terms.JZ_PLUS, ub)
    h = build_h_cavity(spec, 1.0, ub)
    for t in (0.3, 1.7, 4.0):
        out = evolve_unitary(h, psi, t)
        assert out.expect(JJ).real == pytest.approx(psi.expect(JJ).real, abs=1e-10)
        assert out.expect(Zp).real == pytest.approx(0, abs=1e-10)


# ---- adiabatic sweep ----------------------------------------------------------------


def test_sweep_schedule_validation():
    with pytest.raises(ValueError):
        SweepSchedule(lambda t: 5.0, 1.0, 10.0, 10)          # starts too low
    with pytest.raises(ValueError):
        SweepSchedule(lambda t: 100.0, 1.0, 10.0, 10)        # never reaches zero
    with pytest.raises(ValueError):
        SweepSchedule.exponential(1.0, 10.0, 0)
    s = SweepSchedule.exponential(2.0, 30.0, 50)
    assert s.delta_of_t(0) == pytest.approx(200.0)
    assert s.delta_of_t(30.0) == pytest.approx(0.02)


def test_single_step_sweep_is_exact_propagation():
    spec = EnsembleSpec.symmetric(6)
    chi, T = 1.0, 2.0
    sched = SweepSchedule(lambda t: 3.0, chi, T, 1, validate=False)
    res = run_adiabatic_sweep(spec, sched, samples=2)
    cb = sector_basis(spec, 0, coupled=True)
    h = build_h_adiabatic(spec, chi, 3.0, cb)
    want = evolve_unitary(h, make_initial_product(spec, cb), T)
    assert res.states[-1].fidelity(want) == pytest.approx(1, abs=1e-12)


def test_slow_sweep_prepares_lieb_mattis():
    spec = EnsembleSpec.symmetric(8)
    res = run_adiabatic_sweep(spec, SweepSchedule.exponential(1.0, 80.0, 800))
    assert res.fidelity > 0.99
    assert res.fidelities[0] == pytest.approx(make_initial_product(spec).fidelity(make_lieb_mattis(spec)))
    assert res.fidelities[-1] == pytest.approx(res.fidelity)


# ---- master-equation engines ----------------------------------------------------------


def test_jump_and_model_validation():
    spec = EnsembleSpec.symmetric(4)
    h = build_h_cavity(spec, 1.0, coupled_basis(spec))
    with pytest.raises(ValueError):
        JumpChannel("dephasing", 1.0)
    with pytest.raises(ValueError):
        JumpChannel("local", -1.0)
    with pytest.raises(ValueError):
        LindbladModel(h, (JumpChannel("local", 0.1),), Engine.COLLECTIVE_COUPLED)
    with pytest.raises(TypeError):
        LindbladModel(h, (("local", 0.1),))
    m = LindbladModel(h, (JumpChannel("collective", 0.2), JumpChannel("local", 0.1)))
    assert m.gamma_collective == 0.2 and m.gamma_local == 0.1
    with pytest.raises(ValueError):
        evolve_lindblad_collective(m, make_initial_product(spec, coupled_basis(spec)).density(), [0, 1])


def test_perminv_dimensions():
    assert irreps(6) == [3.0, 2.0, 1.0, 0.0]
    assert [degeneracy(6, j) for j in irreps(6)] == [1, 5, 9, 5]
    assert sum(degeneracy(6, j) * (2 * j + 1) for j in irreps(6)) == 2**6
    assert irreps(5) == [2.5, 1.5, 0.5]


def test_single_atom_local_decay():
    spec = EnsembleSpec.symmetric(2)
    gamma = 0.6
    ts = np.linspace(0, 3, 7)
    ub = uncoupled_basis(spec)
    psi = make_initial_product(spec, ub)     # A up, B down
    model = LindbladModel(build_h_cavity(spec, 0.0, ub), (JumpChannel("local", gamma),))
    za = sector_observable(terms.single("Jz", "A"))
    pi = evolve_lindblad_perminv(model, perminv_from_symmetric(psi), ts, observe=lambda b: za(b).real)
    full = evolve_lindblad_full(model.with_engine(Engine.FULL_DENSITY), psi, ts,
                                observables=[terms.single("Jz", "A")]).real[:, 0]
    want = np.exp(-gamma * ts) - 0.5
    assert np.abs(np.array(pi) - want).max() < 1e-8
    assert np.abs(full - want).max() < 1e-8


def test_superradiant_triplet_decay():
    # |1,1> -> |1,0> at rate Gamma <J+J-> = 2 Gamma
    spec = EnsembleSpec.symmetric(2)
    cb = coupled_basis(spec)
    Gamma = 0.4
    model = LindbladModel(build_h_cavity(spec, 0.0, cb), (JumpChannel("collective", Gamma),),
                          Engine.COLLECTIVE_COUPLED)
    ts = np.linspace(0, 4, 5)
    rhos = evolve_lindblad_collective(model, make_jm_state(spec, 1, 1, cb).density(), ts)
    i = cb.index[(1.0, 1.0)]
    got = [r.toarray()[i, i].real for r in rhos]
    assert np.abs(np.array(got) - np.exp(-2 * Gamma * ts)).max() < 1e-8


def test_collective_emission_reaches_dark_mixture():
    spec = EnsembleSpec.symmetric(6)
    cb = coupled_basis(spec)
    model = LindbladModel(build_h_cavity(spec, 0.3, cb), (JumpChannel("collective", 1.0),),
                          Engine.COLLECTIVE_COUPLED)
    rho = evolve_lindblad_collective(model, make_initial_product(spec, cb).density(), [0, 60.0])[-1]
    assert np.abs(rho.toarray() - make_steady_state(spec, cb).toarray()).max() < 1e-8


@pytest.mark.parametrize("spec", [EnsembleSpec.symmetric(4), EnsembleSpec(2, 4)])
def test_three_engines_agree(spec):
    ub = uncoupled_basis(spec)
    ts = np.linspace(0, 1.5, 4)
    psi = make_initial_product(spec, ub)
    obs = [terms.MEASUREMENT, terms.JZ_PLUS, terms.CASIMIR]
    h = build_h_tms(spec, 0.9, ub)
    # collective-only dynamics: all three engines
    coll = (JumpChannel("collective", 0.5),)
    full = evolve_lindblad_full(LindbladModel(h, coll, Engine.FULL_DENSITY), psi, ts, observables=obs).real
    fs = [sector_observable(t) for t in obs]
    pi = np.array(evolve_lindblad_perminv(LindbladModel(h, coll), perminv_from_symmetric(psi), ts,
                                          observe=lambda b: [f(b).real for f in fs]))
    cb = coupled_basis(spec)
    ops_c = [build_operator(t, cb) for t in obs]
    rhos = evolve_lindblad_collective(LindbladModel(build_h_tms(spec, 0.9, cb), coll,
                                                    Engine.COLLECTIVE_COUPLED),
                                      convert(psi, cb).density(), ts)
    co = np.array([[r.expect(o).real for o in ops_c] for r in rhos])
    assert np.abs(full - pi).max() < 1e-7
    assert np.abs(full - co).max() < 1e-7
    # with local decay: full vs permutation-invariant
    both = coll + (JumpChannel("local", 0.3),)
    full = evolve_lindblad_full(LindbladModel(h, both, Engine.FULL_DENSITY), psi, ts, observables=obs).real
    pi = np.array(evolve_lindblad_perminv(LindbladModel(h, both), perminv_from_symmetric(psi), ts,
                                          observe=lambda b: [f(b).real for f in fs]))
    assert np.abs(full - pi).max() < 1e-7


def test_perminv_preserves_trace_and_positivity():
    spec = EnsembleSpec.symmetric(10)
    ub = uncoupled_basis(spec)
    model = LindbladModel(build_h_tms(spec, 1.0, ub),
                          (JumpChannel("collective", 0.5), JumpChannel("local", 0.5)))
    states = evolve_lindblad_perminv(model, perminv_from_symmetric(make_initial_product(spec, ub)),
                                     [0, 0.5, 2.0, 6.0])
    for s in states:
        assert s.trace == pytest.approx(1, abs=1e-9)
        assert s.min_eigenvalue() > -1e-9
    # everything ends up decaying toward all-down
    assert states[-1].expect(terms.JZ_PLUS).real < states[1].expect(terms.JZ_PLUS).real


def test_full_density_size_limit():
    spec = EnsembleSpec.symmetric(12)
    model = LindbladModel(build_h_cavity(spec, 1.0), (), Engine.FULL_DENSITY)
    with pytest.raises(ValueError):
        evolve_lindblad_full(model, make_initial_product(spec), [0, 1])


# ---- quantum trajectories -----------------------------------------------------------


def _mcwf_setup(n=4):
    spec = EnsembleSpec.symmetric(n)
    ub = uncoupled_basis(spec)
    h = build_h_tms(spec, 1.0, ub)
    jumps = (JumpChannel("collective", 0.5), JumpChannel("local", 0.25))
    return spec, ub, h, jumps


def test_trajectory_config_validation():
    spec, ub, h, jumps = _mcwf_setup()
    model = LindbladModel(h, jumps, Engine.MCWF_FULL)
    assert max_jump_rate(model) == pytest.approx(0.5 * 6 + 0.25 * 4)
    with pytest.raises(ValueError):
        TrajectoryConfig(0, 1, 0.01, 1.0)
    with pytest.raises(ValueError):
        TrajectoryConfig(10, -1, 0.01, 1.0)
    with pytest.raises(ValueError):
        TrajectoryConfig(10, 2**64, 0.01, 1.0)
    with pytest.raises(ValueError):
        evolve_mcwf_full(model, make_initial_product(spec, ub), TrajectoryConfig(10, 1, 0.05, 1.0))
    with pytest.raises(ValueError):
        evolve_mcwf_full(model, make_initial_product(spec, ub), TrajectoryConfig(10, 1, 0.025, 1.01))


def test_trajectory_streams_independent_and_reproducible():
    a = trajectory_rng(5, 0).random(4)
    assert np.array_equal(a, trajectory_rng(5, 0).random(4))
    assert not np.array_equal(a, trajectory_rng(5, 1).random(4))
    assert not np.array_equal(a, trajectory_rng(6, 0).random(4))


def test_mcwf_matches_master_equation():
    spec, ub, h, jumps = _mcwf_setup()
    psi = make_initial_product(spec, ub)
    obs = [terms.MEASUREMENT, terms.JZ_PLUS]
    cfg = TrajectoryConfig(600, 20240611, 0.025, 1.5)
    res = evolve_mcwf_full(LindbladModel(h, jumps, Engine.MCWF_FULL), psi, cfg, observables=obs)
    ref = evolve_lindblad_full(LindbladModel(h, jumps, Engine.FULL_DENSITY), psi, res.times,
                               observables=obs).real
    z = np.abs(res.mean - ref)[1:] / np.maximum(res.stderr[1:], 1e-3)
    assert z.max() < 5
    assert res.jumps.sum() > 0
    assert np.allclose(res.values[:, 0, :], ref[0])


def test_mcwf_independent_of_workers():
    spec, ub, h, jumps = _mcwf_setup()
    psi = make_initial_product(spec, ub)
    model = LindbladModel(h, jumps, Engine.MCWF_FULL)
    r1 = evolve_mcwf_full(model, psi, TrajectoryConfig(150, 99, 0.025, 0.5, workers=1),
                          observables=[terms.JZ_PLUS])
    r3 = evolve_mcwf_full(model, psi, TrajectoryConfig(150, 99, 0.025, 0.5, workers=3),
                          observables=[terms.JZ_PLUS])
    assert np.array_equal(r1.values, r3.values)
    assert np.array_equal(r1.jumps, r3.jumps)


def test_mcwf_no_jumps_is_unitary():
    spec, ub, h, _ = _mcwf_setup()
    psi = make_initial_product(spec, ub)
    res = evolve_mcwf_full(LindbladModel(h, (), Engine.MCWF_FULL), psi,
                           TrajectoryConfig(3, 1, 0.1, 1.0), keep_states=True)
    want = evolve_unitary(h, psi, 1.0)
    assert res.final_states[0].fidelity(convert(want, full_product_basis(spec))) == pytest.approx(1, abs=1e-9)
    assert res.jumps.sum() == 0
