"""Experiment configuration and result containers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fitting import PowerLawFit

__all__ = ["ExperimentConfig", "ExperimentResult", "ConfigError", "Option", "derive_seed"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class Option:
    """One experiment-specific setting: default, type and a short description."""

    default: object
    kind: type
    help: str

    def parse(self, value):
        if self.kind is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ConfigError(f"not a boolean: {value!r}")
            return bool(value)
        try:
            return self.kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"cannot read {value!r} as {self.kind.__name__}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    n_values: tuple = ()
    phase_grid: tuple = ()
    cooperativity: tuple = ()
    budget: int = 0
    seed: int = 0
    output: str = ""
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        n = tuple(int(v) for v in self.n_values)
        for v, raw in zip(n, self.n_values):
            if v != raw:
                raise ConfigError(f"atom numbers must be integers (got {raw!r})")
            if v < 2 or v % 2:
                raise ConfigError(f"atom numbers must be even and >= 2 (got {v})")
        if list(n) != sorted(n) or len(set(n)) != len(n):
            raise ConfigError("n_values must be sorted ascending without repeats")
        coop = tuple(float(c) for c in self.cooperativity)
        if any(not (c > 0) for c in coop):
            raise ConfigError("cooperativities must be positive (use inf for no free-space decay)")
        if int(self.budget) != self.budget or self.budget < 0:
            raise ConfigError("budget must be a nonnegative integer")
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must fit in 64 unsigned bits")
        object.__setattr__(self, "n_values", n)
        object.__setattr__(self, "phase_grid", tuple(float(p) for p in self.phase_grid))
        object.__setattr__(self, "cooperativity", coop)
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "options", dict(self.options))

    def option(self, key: str):
        return self.options[key]


@dataclass
class ExperimentResult:
    """Table of rows plus fitted power laws and scalar summaries."""

    name: str
    columns: tuple
    rows: list
    fits: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def column(self, key: str) -> np.ndarray:
        i = self.columns.index(key)
        return np.array([r[i] for r in self.rows], dtype=float)

    def where(self, **match) -> list:
        idx = {k: self.columns.index(k) for k in match}
        return [r for r in self.rows
                if all(math.isclose(float(r[i]), float(match[k]), rel_tol=0, abs_tol=1e-12)
                       or (math.isinf(float(match[k])) and math.isinf(float(r[i])))
                       for k, i in idx.items())]

    def fit_summary(self) -> dict:
        out = {}
        for k, f in self.fits.items():
            if isinstance(f, PowerLawFit):
                out[k] = {"exponent": f.exponent, "prefactor": f.prefactor,
                          "r_squared": f.r_squared, "fit_range": list(f.fit_range),
                          "flagged": f.r_squared < 0.99}
        return out


def derive_seed(root: int, *key: int) -> int:
    """64-bit child seed from the root seed and an integer path."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
