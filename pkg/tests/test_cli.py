import csv
import json
import os

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from klflow.cli import (
    AGGREGATE_FIELDS,
    ConfigError,
    TRIAL_FIELDS,
    aggregate_trials,
    load_config,
    main,
    toml_dumps,
    two_pass_stderr,
)


def write_config(path, body):
    with open(path, "w") as fh:
        fh.write(body)
    return str(path)


TINY_NPMLE = """
kind = "npmle-location"
profile = "desk"
seeds = [0, 1]
out = "{out}"

[solver]
n_outer = 3
n_inner = 15
M = 64
patience = 15

[experiment]
n = 50
n_blocks = 2
width = 8
"""

TINY_VERIFY = """
kind = "simplex-verify"
profile = "desk"
out = "{out}"

[experiment]
grid = 12
n = 25
n_steps = 40
"""


def test_load_config_expands_profile(tmp_path):
    cfg_path = write_config(tmp_path / "c.toml", TINY_NPMLE.format(out=tmp_path / "o"))
    config = load_config(cfg_path)
    assert config["kind"] == "npmle-location"
    assert config["solver"]["n_outer"] == 3  # override wins
    assert config["solver"]["tau"] == 5.0  # profile default survives
    assert config["experiment"]["base_variance"] == 4.0
    assert config["seeds"] == [0, 1]


def test_load_config_flag_overrides(tmp_path):
    cfg_path = write_config(tmp_path / "c.toml", TINY_NPMLE.format(out=tmp_path / "o"))
    config = load_config(cfg_path, seeds=[7], out="elsewhere", strict=True)
    assert config["seeds"] == [7]
    assert config["out"] == "elsewhere"
    assert config["strict"]


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = write_config(tmp_path / "bad.toml", "kind = [unclosed")
    with pytest.raises(ConfigError, match="parse error"):
        load_config(bad)
    unknown = write_config(tmp_path / "k.toml", 'kind = "teleport"\n')
    with pytest.raises(ConfigError, match="'kind'"):
        load_config(unknown)
    bad_solver = write_config(
        tmp_path / "s.toml", 'kind = "npmle-location"\n[solver]\nbogus_field = 1\n'
    )
    with pytest.raises(ConfigError, match="bogus_field"):
        load_config(bad_solver)


def test_config_roundtrip_through_toml(tmp_path):
    cfg_path = write_config(tmp_path / "c.toml", TINY_NPMLE.format(out=tmp_path / "o"))
    config = load_config(cfg_path)
    echoed = toml_dumps(config)
    reparsed = tomllib.loads(echoed)
    assert reparsed["kind"] == config["kind"]
    assert reparsed["solver"] == config["solver"]
    assert reparsed["experiment"] == config["experiment"]
    assert reparsed["seeds"] == config["seeds"]


def test_two_pass_stderr_formula(rng):
    vals = rng.standard_normal(10)
    expected = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    assert abs(two_pass_stderr(vals) - expected) < 1e-12
    assert two_pass_stderr([1.0]) == 0.0


def test_aggregate_trials():
    per_trial = {
        0: [(1, 2.0, 0.5), (2, 1.0, 0.2)],
        1: [(1, 4.0, 0.7), (2, 3.0, 0.4)],
    }
    rows = aggregate_trials(per_trial)
    assert [r["k"] for r in rows] == [1, 2]
    assert rows[0]["loss_mean"] == pytest.approx(3.0)
    assert rows[0]["metric_mean"] == pytest.approx(0.6)
    assert rows[0]["loss_stderr"] == pytest.approx(np.std([2.0, 4.0], ddof=1) / np.sqrt(2), abs=1e-12)
    assert rows[0]["n_trials"] == 2


def test_main_config_error_exit_code(tmp_path):
    bad = write_config(tmp_path / "bad.toml", "kind = [unclosed")
    assert main(["run", bad]) == 2


def test_run_end_to_end(tmp_path):
    out = tmp_path / "out"
    cfg_path = write_config(tmp_path / "c.toml", TINY_NPMLE.format(out=out))
    assert main(["run", cfg_path]) == 0
    for name in ("trial_0.csv", "trial_1.csv", "aggregate.csv", "log_gap.svg", "config_echo.toml", "report.json"):
        assert (out / name).exists(), name
    with open(out / "trial_0.csv") as fh:
        header = next(csv.reader(fh))
    assert header == TRIAL_FIELDS
    with open(out / "aggregate.csv") as fh:
        header = next(csv.reader(fh))
    assert header == AGGREGATE_FIELDS
    report = json.loads((out / "report.json").read_text())
    assert report["ok"] and report["kind"] == "npmle-location"
    svg = (out / "log_gap.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg
    # reference is cached: a second run must not recompute it
    mtime = os.path.getmtime(out / "reference_0.json")
    assert main(["run", cfg_path]) == 0
    assert os.path.getmtime(out / "reference_0.json") == mtime


def test_run_seed_flag_restricts_trials(tmp_path):
    out = tmp_path / "out"
    cfg_path = write_config(tmp_path / "c.toml", TINY_NPMLE.format(out=out))
    assert main(["run", cfg_path, "--seed", "5"]) == 0
    assert (out / "trial_5.csv").exists()
    assert not (out / "trial_0.csv").exists()


def test_verify_end_to_end(tmp_path):
    out = tmp_path / "v"
    cfg_path = write_config(tmp_path / "v.toml", TINY_VERIFY.format(out=out))
    assert main(["verify", cfg_path]) == 0
    report = json.loads((out / "report.json").read_text())
    for name in (
        "theorem1_flow_decay",
        "theorem2_geometric",
        "theorem2_sublinear",
        "theorem4_geometric",
        "theorem4_polynomial",
        "theorem5_stochastic",
        "lemma_a1",
    ):
        assert report["checks"][name]["passed"], name
    assert report["ok"]


def test_compare_rejects_incompatible_methods(tmp_path):
    body = TINY_NPMLE.format(out=tmp_path / "o") + '\nmethods = ["langevin"]\n'
    # methods belongs in [experiment]; append under that table
    body = body.replace("width = 8", 'width = 8\nmethods = ["langevin"]')
    cfg_path = write_config(tmp_path / "c.toml", body)
    assert main(["compare", cfg_path]) == 2


def test_compare_end_to_end(tmp_path):
    out = tmp_path / "cmp"
    body = TINY_NPMLE.format(out=out).replace(
        "width = 8", 'width = 8\nkw_grid_per_dim = 6\nm = 20\nmethods = ["iklpd", "kw-grid"]'
    ).replace("seeds = [0, 1]", "seeds = [0]")
    cfg_path = write_config(tmp_path / "c.toml", body)
    assert main(["compare", cfg_path]) == 0
    with open(out / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    methods = {r["method"] for r in rows}
    assert methods == {"iklpd", "kw-grid"}
    assert (out / "compare.svg").exists()
