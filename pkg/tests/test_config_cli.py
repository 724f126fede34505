import csv
import os

import numpy as np
import pytest

from sensorsched import cli
from sensorsched.config import PRESETS, load, load_preset, loads, parse_config, preset_text
from sensorsched.errors import ConfigError
from sensorsched.experiments import learn, solve_report

SMALL = """
[channel]
r_s = 0.7

[problem]
kind = "costly"
lam = 20.0

[learner]
algorithms = ["sync", "structured"]

[run]
T = 600
seeds = [1, 2]
T_w = 100
"""


@pytest.mark.parametrize("name", PRESETS)
def test_presets_parse(name):
    cfg = load_preset(name)
    assert cfg.M == 30 and cfg.seeds == tuple(range(1, 11))
    assert loads(preset_text(name)).digest == cfg.digest


def test_preset_contents():
    assert load_preset("costly20").lam == 20.0
    assert load_preset("constrained04").b == 0.4
    assert load_preset("timevarying").channel.segments == ((0, 0.9), (2500, 0.6))
    assert load_preset("mdpx").learner.x_iters == (1, 5, 50)
    assert len({load_preset(n).digest for n in PRESETS}) == len(PRESETS)


@pytest.mark.parametrize("data,path", [
    ({"problem": {"kind": "costly", "lam": 20.0, "b": 0.4}}, "problem.lam"),
    ({"problem": {"kind": "costly"}}, "problem.lam"),
    ({"problem": {"kind": "constrained", "b": 1.5}}, "problem.b"),
    ({"problem": {"kind": "greedy", "lam": 1.0}}, "problem.kind"),
    ({"problem": {"lam": 1.0}, "solver": {"M": 0}}, "solver.M"),
    ({"problem": {"lam": 1.0}, "run": {"T_w": 0}}, "run.T_w"),
    ({"problem": {"lam": 1.0}, "learner": {"alpha_a": 0.4}}, "learner.alpha"),
    ({"problem": {"lam": 1.0}, "learner": {"algorithms": ["sgd"]}}, "learner.algorithms"),
    ({"problem": {"lam": 1.0}, "learner": {"algorithms": ["param_p2"]}}, "learner.algorithms"),
    ({"problem": {"lam": 1.0}, "channel": {"r_s": 1.2}}, "channel"),
    ({"problem": {"lam": 1.0}, "system": {"A": [[1.0, 0.0]]}}, "system"),
    ({"problem": {"lam": 1.0}, "extras": {}}, "extras"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    assert str(info.value.path).startswith(path)


def test_toml_syntax_error():
    with pytest.raises(ConfigError):
        loads("[problem\nlam = 1")


def test_digest_ignores_output_location_only():
    cfg = loads(SMALL)
    assert cfg.with_overrides(out="/tmp/elsewhere", workers=3).digest == cfg.digest
    assert cfg.with_overrides(seed=5).digest != cfg.digest
    assert cfg.with_overrides(seed=5).seeds == (5,)


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(SMALL)
    assert load(path).digest == loads(SMALL).digest
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.toml")


def test_cli_solve_costly(capsys, tmp_path):
    assert cli.main(["solve", "--preset", "costly20", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "J* = 16.441116" in text and "theta* = 2" in text
    with open(tmp_path / "solve_summary.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["J_star"]) == pytest.approx(16.441116029689724, rel=1e-9)
    assert os.path.exists(tmp_path / "solve_regime0.csv")


def test_cli_solve_constrained(capsys):
    assert cli.main(["solve", "--preset", "constrained04"]) == 0
    text = capsys.readouterr().out
    assert "theta = 2" in text and "r_theta = 0.857142857143" in text
    assert "J_r = 0.4" in text


def test_solve_timevarying_reports_both_regimes():
    report = solve_report(load_preset("timevarying"))
    assert [e["r_s"] for e in report["regimes"]] == [0.9, 0.6]
    assert [e["theta"] for e in report["regimes"]] == [1, 1]


def test_unstable_channel_warns_and_still_solves():
    cfg = parse_config({"problem": {"lam": 20.0}, "channel": {"r_s": 0.2}})
    with pytest.warns(RuntimeWarning, match="stability margin"):
        report = solve_report(cfg)
    assert np.isfinite(report["regimes"][0]["j_star"])


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[problem]\nkind = "costly"\nlam = 1.0\nb = 0.3\n')
    assert cli.main(["solve", "--config", str(bad)]) == 1
    assert "problem.lam" in capsys.readouterr().err
    huge = tmp_path / "huge.toml"
    huge.write_text('[problem]\nlam = 1.0\n[solver]\nM = 200\n')
    assert cli.main(["solve", "--config", str(huge)]) == 3
    assert cli.main(["learn", "--preset", "costly20", "--workers", "0"]) == 1


def test_cli_verify_passes_and_detects_fault(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert cli.main(["verify", "--inject-fault"]) == 2
    assert "FAIL" in capsys.readouterr().out


def read_dir(path):
    return {name: (path / name).read_bytes() for name in sorted(os.listdir(path))
            if name != "timing.csv"}


def test_learn_is_reproducible(tmp_path):
    cfg = loads(SMALL)
    learn(cfg, str(tmp_path / "a"))
    learn(cfg, str(tmp_path / "b"), workers=2)
    a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
    assert set(a) == {"summary.csv", "sync_seed1.csv", "sync_seed2.csv", "structured_seed1.csv",
                      "structured_seed2.csv"}
    assert a == b
    assert os.path.exists(tmp_path / "a" / "timing.csv")


def test_summary_recomputable_from_traces(tmp_path):
    cfg = loads(SMALL)
    rows = learn(cfg, str(tmp_path))
    for row in rows:
        with open(tmp_path / f"{row['algorithm']}_seed{row['seed']}.csv") as fh:
            recs = list(csv.DictReader(fh))
        cost = np.array([float(r["cost_e"]) for r in recs])
        a = np.array([int(r["a"]) for r in recs])
        assert float(row["J_e"]) == pytest.approx(cost.mean(), rel=1e-9)
        assert float(row["J_r"]) == pytest.approx(a.mean(), abs=1e-9)
        assert float(row["J_e_win"]) == pytest.approx(cost[-cfg.T_w:].mean(), rel=1e-9)
        assert float(row["J_cost"]) == pytest.approx(cost.mean() + 20.0 * a.mean(), rel=1e-9)
        assert row["digest"] == cfg.digest


def test_cli_learn_single_seed(tmp_path, capsys):
    path = tmp_path / "c.toml"
    path.write_text(SMALL)
    assert cli.main(["learn", "--config", str(path), "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    assert "seed   3" in capsys.readouterr().out
    assert os.path.exists(tmp_path / "o" / "sync_seed3.csv")
