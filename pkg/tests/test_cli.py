import hashlib
import math
import json
import os

import pytest

from bsvie import __version__
from bsvie.cli import (EXIT_ASSUMPTION, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, config_hash,
                       default_config, load_config, main)

SMALL_GRID = ["--set", "grid.T_max=6", "--set", "grid.n_panels=12", "--set", "grid.pts_per_panel=4"]


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)], quiet=True)
    return code, out


def digests(folder):
    return {p: hashlib.sha256((folder / p).read_bytes()).hexdigest() for p in sorted(os.listdir(folder))}


def test_resolvent_outputs_and_metadata(tmp_path):
    code, out = run(tmp_path, "resolvent", *SMALL_GRID)
    assert code == EXIT_OK
    assert sorted(os.listdir(out)) == ["diagnostics.json", "resolvent.csv"]
    doc = json.loads((out / "diagnostics.json").read_text())
    assert set(doc["meta"]) == {"command", "seed", "grid", "config_hash", "version"}
    assert doc["meta"]["version"] == __version__ and doc["meta"]["command"] == "resolvent"
    assert doc["diagnostics"]["L_lambda"] == pytest.approx(1 / 6, rel=1e-4)
    assert doc["diagnostics"]["cross_method_max_diff"] <= 1e-8
    assert (out / "resolvent.csv").read_text().startswith("t,s,psi,phi,residual\n")


def test_reruns_are_byte_identical(tmp_path):
    _, a = run(tmp_path, "solve", *SMALL_GRID, "--set", "driver.type=cos_brownian", "--set", "mc.n_paths=500",
               name="a")
    _, b = run(tmp_path, "solve", *SMALL_GRID, "--set", "driver.type=cos_brownian", "--set", "mc.n_paths=500",
               "--set", "threads=2", name="b")
    assert digests(a) == digests(b)


def test_threads_env_override(tmp_path, monkeypatch):
    _, a = run(tmp_path, "example2", "--set", "mc.n_paths=300", name="a")
    monkeypatch.setenv("BSVIE_THREADS", "3")
    _, b = run(tmp_path, "example2", "--set", "mc.n_paths=300", "--set", "threads=1", name="b")
    assert digests(a) == digests(b)


@pytest.mark.parametrize("args, code", [
    (["resolvent", "--set", "kernel.alpha=2", "--set", "kernel.gamma=1", "--set", "lam=0.5"], EXIT_ASSUMPTION),
    (["resolvent", "--set", "bogus=1"], EXIT_CONFIG),
    (["resolvent", "--set", "grid.n_panels=2.5"], EXIT_CONFIG),
    (["resolvent", "--set", "kernel.type=nope"], EXIT_CONFIG),
    (["resolvent", "--set", "novalue"], EXIT_CONFIG),
    (["solve", *SMALL_GRID, "--set", "xi.type=constant", "--set", "xi.xi0=0.3"], EXIT_ASSUMPTION),
    (["solve", *SMALL_GRID, "--set", "xi.type=random", "--set", "zk=true"], EXIT_ASSUMPTION),
    (["control", "--set", "a=3.0", "--set", "sigma=0.0", "--set", "n_paths=2", "--set", "explosion_cap=1000"],
     EXIT_NUMERIC),
    (["example1", "--set", "tol=1e-17"], EXIT_CHECK),
    (["nosuchcommand"], EXIT_CONFIG),
])
def test_exit_codes(tmp_path, args, code):
    assert main([*args, "--out", str(tmp_path / "o")], quiet=True) == code


def test_bad_config_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["resolvent", "--config", str(bad)], quiet=True) == EXIT_CONFIG
    assert main(["resolvent", "--config", str(tmp_path / "missing.json")], quiet=True) == EXIT_CONFIG
    lst = tmp_path / "list.json"
    lst.write_text("[1, 2]")
    assert main(["resolvent", "--config", str(lst)], quiet=True) == EXIT_CONFIG


def test_config_file_and_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"kernel": {"alpha": 0.25}, "seed": 3}))
    cfg = load_config("resolvent", str(f), ["kernel.gamma=3", "grid.T_max=8"])
    assert cfg["kernel"]["alpha"] == 0.25 and cfg["kernel"]["gamma"] == 3 and cfg["seed"] == 3
    assert cfg["grid"]["T_max"] == 8
    assert cfg["kernel"]["type"] == default_config("resolvent")["kernel"]["type"]


def test_config_hash_ignores_run_local_keys():
    a = default_config("solve")
    b = dict(a, threads=4, output="elsewhere")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(dict(a, seed=a["seed"] + 1))


def test_print_config(tmp_path, capsys):
    assert main(["control", "--print-config", "--set", "sigma=0.5"]) == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["sigma"] == 0.5 and cfg == load_config("control", None, ["sigma=0.5"])


@pytest.mark.parametrize("cmd", ["resolvent", "solve", "example1", "example2", "control", "selftest"])
def test_every_command_has_complete_defaults(cmd):
    cfg = default_config(cmd)
    assert {"seed", "threads", "output"} <= set(cfg)
    assert load_config(cmd) == cfg


def test_solve_outputs(tmp_path):
    code, out = run(tmp_path, "solve", *SMALL_GRID, "--set", "grid.pts_per_panel=8",
                    "--set", "verifiers=[\"finite\", \"picard\"]")
    assert code == EXIT_OK
    assert {"Y.csv", "Z.csv", "diagnostics.json"} <= set(os.listdir(out))
    y = (out / "Y.csv").read_text().splitlines()
    assert y[0] == "t,Y"
    # horizon 6 drops a tail of order e^{-6}
    assert float(y[1].split(",")[1]) == pytest.approx(1.2, abs=2 * math.exp(-6.0))
    doc = json.loads((out / "diagnostics.json").read_text())
    assert doc["meta"]["grid"]["T_max"] == 6.0


def test_control_report(tmp_path):
    code, out = run(tmp_path, "control", "--set", "sigma=0.0", "--set", "n_paths=4")
    assert code == EXIT_OK
    doc = json.loads((out / "report.json").read_text())
    assert doc["report"]["J"] == pytest.approx(1 / 3, abs=1e-8)
    assert (out / "moments.csv").read_text().startswith("t,X_mean,X_sq_mean\n")


def test_selftest_subset(tmp_path, capsys):
    code = main(["selftest", "--set", "only=[2, 3]", "--out", str(tmp_path / "s")])
    assert code == EXIT_OK
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("[")]
    assert len(lines) == 2 and all(ln.startswith("[PASS]") for ln in lines)
    doc = json.loads((tmp_path / "s" / "selftest.json").read_text())
    assert [c["number"] for c in doc["criteria"]] == [2, 3]
