import json

import numpy as np
import pytest

from mobility_ot.cli import main
from mobility_ot.config import config_hash, parse_config
from mobility_ot.errors import ConfigError
from mobility_ot.studies import read_csv, run_gamma_study, run_study

TRANSLATION = {"kind": "gamma", "mobility": {"kind": "linear", "M": 2.0}, "p": 2,
               "mu0": {"kind": "uniform", "a": 0.0, "b": 1.0},
               "mu1": {"kind": "uniform", "a": 0.5, "b": 1.5},
               "N_list": [4, 8, 16], "solver": {"K": 16}}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_config_hash_is_canonical():
    a = {"kind": "gamma", "N_list": [1, 2], "mu0": {"a": 0, "b": 1}}
    b = {"mu0": {"b": 1, "a": 0}, "N_list": [1, 2], "kind": "gamma"}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "seed": 1})


def test_gamma_translation_is_flat():
    rep = run_gamma_study(parse_config(TRANSLATION))
    assert rep.verdict
    assert all(r["distance"] == pytest.approx(0.5, rel=1e-12) for r in rep.records)
    assert all(r["config_hash"] == rep.stamp["config_hash"] for r in rep.records)
    assert not rep.verdicts["strictly_decreasing"]


def test_gamma_identical_measures_give_zeros():
    cfg = {**TRANSLATION, "mu1": TRANSLATION["mu0"]}
    rep = run_gamma_study(parse_config(cfg))
    assert rep.verdict
    assert all(r["distance"] == 0.0 for r in rep.records)


def test_gamma_logistic_sandwich():
    cfg = {"kind": "gamma", "mobility": {"kind": "logistic", "M": 1.0},
           "mu0": {"kind": "uniform", "a": 0, "b": 2}, "mu1": {"kind": "uniform", "a": 1, "b": 3},
           "N_list": [4, 8, 16]}
    rep = run_study(parse_config(cfg))
    assert rep.verdict and rep.verdicts["strictly_decreasing"]
    assert all(1.0 <= r["distance"] <= np.sqrt(2) for r in rep.records)


@pytest.mark.parametrize("cfg,field", [
    ({"kind": "gamma"}, "mu0"),
    ({**TRANSLATION, "N_list": [8, 4]}, "N_list"),
    ({**TRANSLATION, "N_list": [4, 2.5]}, "N_list"),
    ({**TRANSLATION, "mobility": {"kind": "cubic"}}, "mobility.kind"),
    ({**TRANSLATION, "solver": {"K": 0}}, "solver"),
    ({**TRANSLATION, "solver": {"iters": 3}}, "solver.iters"),
    ({**TRANSLATION, "p": "two"}, "p"),
    ({**TRANSLATION, "seed": -1}, "seed"),
    ({**TRANSLATION, "rule": "nearest"}, "rule"),
    ({"kind": "jko", "mu0": {"kind": "uniform", "a": 0, "b": 2}, "F": {"kind": "potential", "f": "linear"},
      "tau": 0.1, "n_steps": 1, "N_list": [4], "p": 3}, "p"),
    ({"kind": "ftl", "riemann": [1.0], "t": 0.5, "N_list": [8]}, "riemann"),
    ({"kind": "distance", "a": [0, 1, 2]}, "b"),
    ({"kind": "warp"}, "kind"),
])
def test_parse_errors_name_the_field(cfg, field):
    with pytest.raises(ConfigError) as err:
        parse_config(cfg)
    assert err.value.field == field


def test_cli_gamma_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["gamma", "--config", _write(tmp_path, TRANSLATION), "--out", str(out)]) == 0
    cols, rows = read_csv(out / "gamma.csv")
    assert cols[:2] == ("N", "distance")
    assert [float(r[1]) for r in rows] == [0.5, 0.5, 0.5]
    text = (out / "gamma.csv").read_text()
    h = parse_config(TRANSLATION).hash
    assert text.endswith(f"# config_hash={h}\n")
    summary = json.loads((out / "gamma_summary.json").read_text())
    assert summary["stamp"]["config_hash"] == h and summary["verdict"] is True
    assert "gamma: PASS" in capsys.readouterr().out


def test_cli_is_deterministic_across_threads(tmp_path):
    cfg = {"kind": "gamma", "mobility": {"kind": "logistic", "M": 1.0},
           "mu0": {"kind": "uniform", "a": 0, "b": 2}, "mu1": {"kind": "uniform", "a": 1, "b": 3},
           "N_list": [4, 8], "solver": {"K": 8}}
    path = _write(tmp_path, cfg)
    main(["gamma", "--config", path, "--out", str(tmp_path / "a")])
    main(["gamma", "--config", path, "--out", str(tmp_path / "b"), "--threads", "2"])
    for name in ("gamma.csv", "gamma_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_seed_changes_hash(tmp_path):
    path = _write(tmp_path, TRANSLATION)
    main(["gamma", "--config", path, "--out", str(tmp_path / "a")])
    main(["gamma", "--config", path, "--out", str(tmp_path / "b"), "--seed", "7"])
    a = (tmp_path / "a" / "gamma.csv").read_text().splitlines()
    b = (tmp_path / "b" / "gamma.csv").read_text().splitlines()
    assert a[:-1] == b[:-1] and a[-1] != b[-1]


def test_cli_config_errors(tmp_path, capsys):
    bad = _write(tmp_path, {**TRANSLATION, "mu0": {"kind": "uniform", "a": 0}})
    assert main(["gamma", "--config", bad]) == 2
    assert "mu0.b" in capsys.readouterr().err
    broken = tmp_path / "broken.json"
    broken.write_text("{\"kind\": ")
    assert main(["gamma", "--config", str(broken)]) == 2
    assert "--config" in capsys.readouterr().err
    assert main(["ftl", "--config", _write(tmp_path, TRANSLATION)]) == 2
    assert "kind" in capsys.readouterr().err
    assert main(["gamma", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["gamma", "--config", _write(tmp_path, TRANSLATION), "--threads", "0"]) == 2


def test_cli_verdict_failure_exit_code(tmp_path):
    # a single solver iteration cannot converge, so the study verdict fails
    cfg = {"kind": "distance", "mobility": {"kind": "logistic", "M": 1.0},
           "a": [0.0, 1.5, 3.0], "b": [1.0, 2.2, 4.5],
           "solver": {"K": 8, "max_inner": 1, "max_outer": 1, "exact_final": False}}
    assert main(["distance", "--config", _write(tmp_path, cfg)]) == 1


def test_cli_other_studies(tmp_path):
    geo = {"kind": "geodesic", "mobility": {"kind": "logistic", "M": 1.0},
           "mu0": {"kind": "uniform", "a": 0, "b": 2}, "mu1": {"kind": "uniform", "a": 1, "b": 3},
           "N": 4, "solver": {"K": 8}}
    assert main(["geodesic", "--config", _write(tmp_path, geo), "--out", str(tmp_path / "g")]) == 0
    cols, rows = read_csv(tmp_path / "g" / "geodesic.csv")
    assert cols == ("t", "i", "x", "R", "phi_term") and len(rows) == 9 * 5
    assert all(r[4] == "" for r in rows[-5:])
    assert read_csv(tmp_path / "g" / "cone_a.csv")[0] == ("i", "x_i", "R_i")
    ftl = {"kind": "ftl", "riemann": [1.0, 0.0], "t": 0.5, "N_list": [8, 16], "profile_points": 11}
    assert main(["ftl", "--config", _write(tmp_path, ftl), "--out", str(tmp_path / "f")]) == 0
    assert read_csv(tmp_path / "f" / "ftl_profile.csv")[0] == ("x", "rho_exact", "rho_ftl")
    assert read_csv(tmp_path / "f" / "ftl_traj_N16.csv")[0] == ("t", "i", "x", "R")
    jko = {"kind": "jko", "mobility": {"kind": "linear", "M": 1.0},
           "mu0": {"kind": "uniform", "a": 0, "b": 4}, "F": {"kind": "potential", "f": "linear"},
           "tau": 0.1, "n_steps": 2, "N_list": [4, 8], "solver": {"K": 8}}
    assert main(["jko", "--config", _write(tmp_path, jko), "--out", str(tmp_path / "j")]) == 0
    cols, rows = read_csv(tmp_path / "j" / "jko.csv")
    assert cols == ("N", "n", "J", "F", "dist", "second_moment", "wq_to_ref") and len(rows) == 6


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 10
