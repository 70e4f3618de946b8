import io
import json
import math
import subprocess
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfsense import cli
from dfsense.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, cli_run
from dfsense.dynamics import NumericalFailure
from dfsense.experiments import REGISTRY, ConfigError, ExperimentResult, make_config
from dfsense.io import (
    OUT_ENV,
    format_csv,
    format_number,
    load_config,
    parse_config_text,
    read_csv,
    resolve_output_dir,
    sha256_file,
)


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli_run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


# ---- number and CSV format ------------------------------------------------------------


def test_format_number():
    assert format_number(12) == "12"
    assert format_number(True) == "1"
    assert format_number(0.1) == "1.0000000000000001e-01"
    assert format_number(-2.5) == "-2.5000000000000000e+00"
    assert format_number(math.inf) == "inf" and format_number(-math.inf) == "-inf"
    assert format_number(math.nan) == "nan"


@given(st.floats(allow_nan=False))
def test_format_number_round_trips(x):
    assert float(format_number(x)) == x


def test_csv_layout(tmp_path):
    res = ExperimentResult("demo", ("N", "v"), [(4, 0.25), (8, math.inf)])
    text = format_csv(res)
    assert text == "N,v\n4,2.5000000000000000e-01\n8,inf\n"
    p = tmp_path / "demo.csv"
    p.write_bytes(text.encode("utf-8"))
    header, rows = read_csv(p)
    assert header == ["N", "v"] and rows == [[4.0, 0.25], [8.0, math.inf]]
    with pytest.raises(ValueError):
        format_csv(ExperimentResult("bad", ("a", "b"), [(1,)]))


# ---- config files -----------------------------------------------------------------------


def test_parse_config_full():
    cfg = parse_config_text("""
[run]
experiment = noisy_quench
n_values = 8, 12
cooperativity = inf, 1.0
budget = 9
seed = 0x10
output = somewhere

[options]
x_points = 3
refine = no
""")
    assert cfg.name == "noisy_quench"
    assert cfg.n_values == (8, 12)
    assert math.isinf(cfg.cooperativity[0])
    assert cfg.budget == 9 and cfg.seed == 16 and cfg.output == "somewhere"
    assert cfg.options["x_points"] == 3 and cfg.options["refine"] is False


@pytest.mark.parametrize("text, match", [
    ("[run]\nn_value = 4\n", "unknown key"),
    ("[runs]\nn_values = 4\n", "unknown section"),
    ("[options]\nx_points = 3\n", "unknown key"),
    ("[run]\nn_values = 4, 7\n", "even"),
    ("[run]\nn_values = 4.5\n", "int"),
    ("[run]\nseed = abc\n", "integer"),
    ("[run]\nexperiment = separable\n", "not 'pj_moments'"),
    ("not an ini file", "cannot parse"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text, "pj_moments")


def test_config_needs_an_experiment(tmp_path):
    with pytest.raises(ConfigError):
        parse_config_text("[run]\nn_values = 4\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini", "pj_moments")


def test_output_precedence(monkeypatch):
    cfg = make_config("pj_moments", output="from_config")
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert str(resolve_output_dir(None, cfg)) == "from_config"
    assert str(resolve_output_dir(None, make_config("pj_moments"))) == "dfsense_out"
    monkeypatch.setenv(OUT_ENV, "from_env")
    assert str(resolve_output_dir(None, cfg)) == "from_env"
    assert str(resolve_output_dir("from_flag", cfg)) == "from_flag"


# ---- subcommands ----------------------------------------------------------------------------


def test_list_names_all_experiments():
    code, out, _ = call("list")
    assert code == EXIT_OK
    for name in REGISTRY:
        assert name in out
    assert len(REGISTRY) == 9


def test_describe():
    code, out, _ = call("describe", "--experiment", "noisy_quench")
    assert code == EXIT_OK
    assert "[run]" in out and "[options]" in out and "x_points" in out and "engine" in out


def test_unknown_experiment_lists_names():
    code, out, err = call("run", "--experiment", "nope")
    assert code == EXIT_CONFIG
    assert "pj_moments" in err and "steady_state_scaling" in err


def test_usage_errors_are_configuration_errors():
    assert call("run")[0] == EXIT_CONFIG
    assert call("frobnicate")[0] == EXIT_CONFIG
    assert call("run", "--experiment", "pj_moments", "--seed", "x")[0] == EXIT_CONFIG


def test_odd_n_in_config(tmp_path):
    p = tmp_path / "odd.ini"
    p.write_text("[run]\nn_values = 4, 7\n")
    code, _, err = call("run", "--experiment", "pj_moments", "--config", str(p),
                        "--out", str(tmp_path / "o"))
    assert code == EXIT_CONFIG
    assert "even" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_in_config(tmp_path):
    p = tmp_path / "typo.ini"
    p.write_text("[run]\nn_valeus = 4\n")
    assert call("run", "--experiment", "pj_moments", "--config", str(p))[0] == EXIT_CONFIG


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    def boom(config):
        raise NumericalFailure("integrator stalled")
    monkeypatch.setattr(cli, "run_experiment", boom)
    code, _, err = call("run", "--experiment", "pj_moments", "--out", str(tmp_path))
    assert code == EXIT_NUMERICAL and "integrator stalled" in err


def test_run_writes_outputs_and_manifest(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nn_values = 2, 4, 8, 16\nseed = 5\n")
    code, out, _ = call("run", "--experiment", "pj_moments", "--config", str(p),
                        "--out", str(tmp_path / "o"))
    assert code == EXIT_OK and "4 rows" in out
    d = tmp_path / "o"
    man = json.loads((d / "pj_moments_manifest.json").read_text())
    assert man["experiment"] == "pj_moments" and man["seed"] == 5
    assert man["config"]["n_values"] == [2, 4, 8, 16]
    assert set(man["outputs"]) == {"pj_moments.csv", "pj_moments_fits.json"}
    for name, entry in man["outputs"].items():
        assert entry["sha256"] == sha256_file(d / name)
    assert man["tool"].startswith("dfsense ")
    # the manifest is the last file written
    mtimes = {f.name: f.stat().st_mtime_ns for f in d.iterdir()}
    assert mtimes["pj_moments_manifest.json"] >= max(mtimes.values())
    header, rows = read_csv(d / "pj_moments.csv")
    assert header[:3] == ["N", "J_mean", "J2_mean"] and rows[0][1] == 0.5
    fits = json.loads((d / "pj_moments_fits.json").read_text())
    assert "J_mean" in fits["fits"]


def test_seeded_reruns_are_byte_identical(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["run", "--experiment", "steady_state_scaling", "--seed", "7"]
    assert call(*argv, "--out", str(a))[0] == EXIT_OK
    monkeypatch.setenv(OUT_ENV, str(b))
    assert call(*argv)[0] == EXIT_OK
    name = "steady_state_scaling.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "steady_state_scaling_fits.json").read_bytes() == \
        (b / "steady_state_scaling_fits.json").read_bytes()


def test_trajectory_run_independent_of_workers(tmp_path):
    base = "[run]\nn_values = 6\ncooperativity = 1.0\nbudget = 5\nseed = 3\n" \
           "[options]\nengine = mcwf\ntrajectories = 70\nt_max = 2.0\nworkers = {}\n"
    for w in (1, 3):
        p = tmp_path / f"w{w}.ini"
        p.write_text(base.format(w))
        assert call("run", "--experiment", "noisy_stochastic", "--config", str(p),
                    "--out", str(tmp_path / f"o{w}"))[0] == EXIT_OK
    name = "noisy_stochastic.csv"
    assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o3" / name).read_bytes()


def test_validate_passes():
    code, out, _ = call("validate")
    assert code == EXIT_OK
    lines = out.strip().splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines)


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "dfsense.cli", "list"], capture_output=True, text=True)
    assert r.returncode == 0 and "adiabatic_gap" in r.stdout
    r = subprocess.run([sys.executable, "-m", "dfsense.cli", "run", "--experiment", "x"],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "registered" in r.stderr
