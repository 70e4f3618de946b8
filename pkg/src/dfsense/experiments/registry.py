"""Registered experiments, their defaults and option schemas."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import pipelines as P
from .base import ConfigError, ExperimentConfig, ExperimentResult, Option

__all__ = ["Experiment", "REGISTRY", "get_experiment", "make_config", "run_experiment",
           "COMMON_KEYS"]

COMMON_KEYS = ("n_values", "phase_grid", "cooperativity", "budget", "seed", "output")

_POW2 = tuple(2**k for k in range(1, 11))
_OCTAVE_FILL = (2, 4, 8, 16, 32, 64, 128, 256, 384, 512, 768, 1024, 1536, 2048)
_UP_TO_4096 = (4, 8, 16, 32, 64, 128, 256, 512, 1024, 1536, 2048, 3072, 4096)

_OPEN_OPTIONS = {
    "engine": Option("perm_invariant", str, "perm_invariant or mcwf"),
    "trajectories": Option(200, int, "trajectories per point (mcwf engine)"),
    "workers": Option(1, int, "threads for trajectories; output does not depend on it"),
    "rtol": Option(1e-8, float, "relative tolerance of the master-equation integrator"),
}


@dataclass(frozen=True)
class Experiment:
    name: str
    run: Callable[[ExperimentConfig], ExperimentResult]
    description: str
    n_values: tuple
    phase_grid: tuple = ()
    cooperativity: tuple = ()
    budget: int = 0
    options: dict = field(default_factory=dict)

    def schema(self) -> dict:
        out = {
            "n_values": ("list of even integers", self.n_values),
            "phase_grid": ("list of reals (radians)", self.phase_grid),
            "cooperativity": ("list of positive reals, inf allowed", self.cooperativity),
            "budget": ("coarse grid size of the main optimizer, 0 = built-in", self.budget),
            "seed": ("64-bit root seed", 0),
            "output": ("output directory", ""),
        }
        for k, o in self.options.items():
            out[k] = (o.help, o.default)
        return out


REGISTRY: dict = {}


def _register(*args, **kw):
    e = Experiment(*args, **kw)
    REGISTRY[e.name] = e


_register("quench_infidelity", P.exp_quench_infidelity,
          "minimal infidelity of the TMS quench to the target and the optimal chi t",
          _POW2)
_register("quench_sensitivity", P.exp_quench_sensitivity,
          "variance at pi/4 of the time-optimal quench against the target",
          _OCTAVE_FILL)
_register("noisy_quench", P.exp_noisy_quench,
          "TMS quench with collective and free-space emission, optimized over detuning and time",
          (8, 12, 16, 20), cooperativity=(2.0, 1.0, 0.4), budget=25,
          options=dict(_OPEN_OPTIONS,
                       x_min=Option(0.3, float, "smallest detuning 2 Delta / kappa"),
                       x_max=Option(30.0, float, "largest detuning 2 Delta / kappa"),
                       x_points=Option(7, int, "log-spaced detuning samples"),
                       refine=Option(True, bool, "local refinement in detuning and time")))
_register("steady_state_scaling", P.exp_steady_state_scaling,
          "steady-state variance of collective emission against the average-QFI bound",
          _UP_TO_4096,
          options={"fit_octaves": Option(2.0, float, "fit window in octaves below the largest N")})
_register("pj_moments", P.exp_pj_moments,
          "first and second moments of the J distribution of the initial state",
          _UP_TO_4096)
_register("noisy_stochastic", P.exp_noisy_stochastic,
          "collective emission with free-space decay, optimized over hold time",
          (8, 12, 16, 20), cooperativity=(2.0, 1.0, 0.4), budget=41,
          options=dict(_OPEN_OPTIONS,
                       t_max=Option(8.0, float, "hold-time window in units of 1/Gamma")))
_register("separable", P.exp_separable,
          "Fisher information of coherent and squeezed separable pairs under common-phase noise",
          (8, 16, 32, 64, 128), budget=41,
          options={"mu_points": Option(12, int, "coarse samples of the twisting strength")})
_register("photon_measurement", P.exp_photon_measurement,
          "variance of the photon-count measurement for the target and the steady state",
          (128,), phase_grid=tuple(np.round(np.linspace(-0.3, 0.3, 61), 12).tolist()))
_register("adiabatic_gap", P.exp_adiabatic_gap,
          "ground-state gap of the gradient plus cavity Hamiltonian in the M = 0 sector",
          (64, 1024),
          options={"points": Option(21, int, "log-spaced delta / chi samples"),
                   "log_min": Option(-2.0, float, "log10 of the smallest delta / chi"),
                   "log_max": Option(3.0, float, "log10 of the largest delta / chi")})


def get_experiment(name: str) -> Experiment:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown experiment {name!r}; registered: {', '.join(sorted(REGISTRY))}"
        ) from None


def make_config(name: str, **values) -> ExperimentConfig:
    """Config with registry defaults; unknown keys are errors."""
    exp = get_experiment(name)
    unknown = set(values) - set(COMMON_KEYS) - set(exp.options)
    if unknown:
        raise ConfigError(f"{name}: unknown setting(s) {', '.join(sorted(unknown))}")
    opts = {k: o.default for k, o in exp.options.items()}
    for k in exp.options:
        if k in values:
            opts[k] = exp.options[k].parse(values[k])
    return ExperimentConfig(
        name=name,
        n_values=tuple(values.get("n_values", exp.n_values)),
        phase_grid=tuple(values.get("phase_grid", exp.phase_grid)),
        cooperativity=tuple(values.get("cooperativity", exp.cooperativity)),
        budget=int(values.get("budget", exp.budget)),
        seed=int(values.get("seed", 0)),
        output=str(values.get("output", "")),
        options=opts,
    )


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    exp = get_experiment(config.name)
    missing = set(exp.options) - set(config.options)
    if missing:
        config = make_config(config.name, n_values=config.n_values, phase_grid=config.phase_grid,
                             cooperativity=config.cooperativity, budget=config.budget,
                             seed=config.seed, output=config.output,
                             **{**{k: o.default for k, o in exp.options.items()}, **config.options})
    return exp.run(config)
