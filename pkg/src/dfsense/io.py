"""Config files, CSV tables, fit summaries and the run manifest."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .experiments import ConfigError, ExperimentConfig, ExperimentResult, get_experiment, make_config

__all__ = [
    "OUT_ENV",
    "format_number",
    "format_csv",
    "write_csv",
    "read_csv",
    "format_fit_summary",
    "parse_config_text",
    "load_config",
    "resolve_output_dir",
    "RunManifest",
    "write_run",
    "sha256_file",
]

OUT_ENV = "DFSENSE_OUT"
DEFAULT_OUT = "dfsense_out"

_RUN_SECTION = "run"
_OPTIONS_SECTION = "options"
_LIST_KEYS = {"n_values": int, "phase_grid": float, "cooperativity": float}


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def format_number(v) -> str:
    """Integers as written, reals in scientific notation with 17 significant digits."""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    x = float(v)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.16e}"


def format_csv(result: ExperimentResult) -> str:
    lines = [",".join(result.columns)]
    for row in result.rows:
        if len(row) != len(result.columns):
            raise ValueError("row length does not match the header")
        lines.append(",".join(format_number(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(result: ExperimentResult, path) -> Path:
    path = Path(path)
    path.write_bytes(format_csv(result).encode("utf-8"))
    return path


def read_csv(path) -> tuple[list, list]:
    """(header, rows of floats); the inverse of :func:`write_csv`."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = text[0].split(",")
    return header, [[float(c) for c in line.split(",")] for line in text[1:] if line]


def format_fit_summary(result: ExperimentResult) -> str:
    """Fits and scalar summaries as indented JSON (sorted keys, 17 digits)."""

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, bool) or isinstance(v, int) or isinstance(v, str):
            return v
        x = float(v)
        return x if math.isfinite(x) else repr(x)

    body = {"experiment": result.name, "fits": clean(result.fit_summary()),
            "summary": clean(result.summary)}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------


def _parse_list(raw: str, kind, key: str) -> tuple:
    items = [s.strip() for s in raw.replace("\n", ",").split(",") if s.strip()]
    out = []
    for s in items:
        try:
            if kind is int:
                f = float(s)
                if not f.is_integer():
                    raise ValueError
                out.append(int(f))
            else:
                out.append(float(s))
        except ValueError:
            raise ConfigError(f"{key}: cannot read {s!r} as {kind.__name__}") from None
    return tuple(out)


def parse_config_text(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Read an INI-style config.

    Two sections are recognized: ``[run]`` with the common keys (``experiment``,
    ``n_values``, ``phase_grid``, ``cooperativity``, ``budget``, ``seed``,
    ``output``) and ``[options]`` with experiment-specific settings.  Anything
    else, including a misspelled key, is an error.
    """
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    unknown = set(cp.sections()) - {_RUN_SECTION, _OPTIONS_SECTION}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    run = dict(cp[_RUN_SECTION]) if cp.has_section(_RUN_SECTION) else {}
    opts = dict(cp[_OPTIONS_SECTION]) if cp.has_section(_OPTIONS_SECTION) else {}
    named = run.pop("experiment", None)
    if named and experiment and named != experiment:
        raise ConfigError(f"config is for {named!r}, not {experiment!r}")
    name = experiment or named
    if not name:
        raise ConfigError("no experiment given (use --experiment or 'experiment =' in [run])")
    exp = get_experiment(name)
    values = {}
    for key, raw in run.items():
        if key in _LIST_KEYS:
            values[key] = _parse_list(raw, _LIST_KEYS[key], key)
        elif key in ("budget", "seed"):
            try:
                values[key] = int(raw, 0)
            except ValueError:
                raise ConfigError(f"{key}: not an integer: {raw!r}") from None
        elif key == "output":
            values[key] = raw.strip()
        else:
            raise ConfigError(f"[run]: unknown key {key!r}")
    for key in opts:
        if key not in exp.options:
            known = ", ".join(sorted(exp.options)) or "none"
            raise ConfigError(f"[options]: unknown key {key!r} for {name} (known: {known})")
    values.update(opts)
    return make_config(name, **values)


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, experiment)


def resolve_output_dir(cli_value: str | None, config: ExperimentConfig) -> Path:
    """--out, then $DFSENSE_OUT, then the config's ``output``, then ./dfsense_out."""
    for v in (cli_value, os.environ.get(OUT_ENV), config.output):
        if v:
            return Path(v)
    return Path(DEFAULT_OUT)


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: ExperimentConfig
    started: str
    finished: str = ""
    outputs: dict = field(default_factory=dict)   # file name -> sha256
    version: str = __version__

    def to_dict(self) -> dict:
        c = self.config

        def num(x):
            return x if math.isfinite(x) else repr(x)

        return {
            "tool": f"dfsense {self.version}",
            "experiment": c.name,
            "config": {
                "n_values": list(c.n_values),
                "phase_grid": [num(p) for p in c.phase_grid],
                "cooperativity": [num(x) for x in c.cooperativity],
                "budget": c.budget,
                "options": {k: (num(v) if isinstance(v, float) else v) for k, v in c.options.items()},
            },
            "seed": c.seed,
            "seeding": "per-experiment and per-trajectory streams: "
                       "Philox(SeedSequence(seed, spawn_key=path)); trajectory i uses path (i,) "
                       "under the child seed of (experiment id, call index)",
            "started": self.started,
            "finished": self.finished,
            "outputs": {k: {"sha256": v} for k, v in sorted(self.outputs.items())},
        }


def write_run(result: ExperimentResult, config: ExperimentConfig, out_dir, started: str,
              finished: str) -> Path:
    """CSV and fit summary first, manifest last; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(result, out / f"{result.name}.csv")
    fit_path = out / f"{result.name}_fits.json"
    fit_path.write_bytes(format_fit_summary(result).encode("utf-8"))
    man = RunManifest(config, started, finished)
    for p in (csv_path, fit_path):
        man.outputs[p.name] = sha256_file(p)
    path = out / f"{result.name}_manifest.json"
    path.write_text(json.dumps(man.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path
