import json

import pytest

from sphs import cli
from sphs import config as cfgmod

INLINE = {
    "schema_version": 1,
    "name": "inline_ou",
    "seed": 5,
    "model": {
        "inline": {
            "n": 2,
            "params": {"k": 1.0},
            "J": [[0, 1], [-1, 0]],
            "R": [[1, 0], [0, 1]],
            "sigma": [[1, 0], [0, 1]],
            "hamiltonian": {"Lambda": [[1, 0], [0, 1]]},
        }
    },
    "passivity": {"radii": [0.5, 2.0, 4.0], "eps": 0.1, "require": "strict"},
    "simulation": {"dt": 0.01, "T": 2.0, "paths": 40, "stride": 10},
    "domain": {"lo": [-4, -4], "hi": [4, 4]},
    "grid": {"shape": [48, 48]},
    "output": {"format": "both"},
    "analyses": ["validate", "passivity", "simulate", "fp-solve"],
}


def write_cfg(tmp_path, cfg, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def report(out):
    return json.loads((out / "report.json").read_text())


def test_inline_run_passes(tmp_path):
    code = cli.run(write_cfg(tmp_path, INLINE), tmp_path / "out")
    rep = report(tmp_path / "out")
    assert code == 0 and rep["passed"] and rep["exit_code"] == 0
    assert rep["analyses"] == ["validate", "passivity", "simulate", "fp-solve"]
    files = set(rep["files"])
    assert {"ensemble.csv", "ensemble.bin"} <= files
    assert all((tmp_path / "out" / f).is_file() for f in files)
    assert (tmp_path / "out" / "metadata.json").is_file()


def test_failed_check_exits_2(tmp_path, capsys):
    assert cli.main(["run", "counterexample", "--out", str(tmp_path / "o")]) == 2
    assert not report(tmp_path / "o")["results"]["passivity"]["passed"]
    assert "passivity" in capsys.readouterr().err


@pytest.mark.parametrize(
    "mutate, key",
    [
        (lambda c: c["simulation"].pop("paths"), "simulation.paths"),
        (lambda c: c["model"]["inline"].update(n=0), "model.inline.n"),
        (lambda c: c["model"]["inline"].update(hamiltonian="x1 +* 2"), "model"),
        (lambda c: c["model"]["inline"].update(J=[[0, "y"], ["-y", 0]]), "model.inline.J"),
        (lambda c: c.update(model={"builtin": "nope"}), "model.builtin"),
        (lambda c: c.update(model={"builtin": "ou", "params": {"bogus": 1}}), "model.params"),
    ],
)
def test_config_errors_exit_1(tmp_path, capsys, mutate, key):
    cfg = json.loads(json.dumps(INLINE))
    mutate(cfg)
    assert cli.run(write_cfg(tmp_path, cfg), tmp_path / "out") == 1
    err = capsys.readouterr().err
    assert key in err
    assert not (tmp_path / "out" / "report.json").exists()


def test_usage_and_missing_files(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run"])
    assert exc.value.code == 1
    assert cli.main(["run", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["run", "counterexample", "--out", str(tmp_path / "o"), "--set", "noequals"]) == 1
    capsys.readouterr()


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.run(write_cfg(tmp_path, INLINE), blocker / "sub") == 1
    assert "out" in capsys.readouterr().err


def test_override_equals_edited_file(tmp_path):
    cli.run(write_cfg(tmp_path, INLINE), tmp_path / "a", overrides=["simulation.paths=24", "seed=9"])
    edited = json.loads(json.dumps(INLINE))
    edited["simulation"]["paths"] = 24
    edited["seed"] = 9
    cli.run(write_cfg(tmp_path, edited, "d.json"), tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "ensemble.bin").read_bytes() == (tmp_path / "b" / "ensemble.bin").read_bytes()


def test_seed_flag_matches_set(tmp_path):
    p = write_cfg(tmp_path, INLINE)
    cli.main(["run", str(p), "--out", str(tmp_path / "a"), "--seed", "3"])
    cli.main(["run", str(p), "--out", str(tmp_path / "b"), "--set", "seed=3"])
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert report(tmp_path / "a")["seed"] == 3


def test_threads_do_not_change_outputs(tmp_path):
    p = write_cfg(tmp_path, INLINE)
    cli.run(p, tmp_path / "a", threads=1)
    cli.run(p, tmp_path / "b", threads=3)
    for f in ("report.json", "ensemble.csv", "ensemble.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seed_changes_ensemble(tmp_path):
    p = write_cfg(tmp_path, INLINE)
    cli.run(p, tmp_path / "a", seed=1)
    cli.run(p, tmp_path / "b", seed=2)
    assert (tmp_path / "a" / "ensemble.bin").read_bytes() != (tmp_path / "b" / "ensemble.bin").read_bytes()


def test_drift_based_inline(tmp_path):
    cfg = {
        "name": "cubic",
        "model": {"inline": {"n": 1, "drift": ["-x1**3"], "sigma": [[1]], "storage": "x1**2 / 2"}},
        "passivity": {"radii": [2, 4, 8], "eps": 0.1, "require": "strict"},
        "analyses": ["passivity"],
    }
    assert cli.run(write_cfg(tmp_path, cfg), tmp_path / "o") == 0
    cfg["model"]["inline"].pop("storage")
    assert cli.run(write_cfg(tmp_path, cfg), tmp_path / "o2") == 1


def test_list(capsys):
    assert cli.main(["list"]) == 0
    assert capsys.readouterr().out.split() == cfgmod.builtin_names()
