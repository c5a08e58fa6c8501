import json
import math

import pytest

from mevrl import __version__
from mevrl.cli import exp_smooth, main


def _csvs(path):
    return sorted(p for p in path.glob("*.csv"))


def test_analytic_unit_case_prints_me(tmp_path, capsys):
    code = main(["analytic", "--mu1", "0", "--mu2", "0", "--var", "1", "--n", "1",
                 "--out", str(tmp_path)])
    assert code == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.strip().startswith("me "))
    value = float(line.split("expectation")[1].split()[0])
    assert value == pytest.approx(math.sqrt(2) / math.sqrt(2 * math.pi), abs=1e-5)


def test_alpha_out_of_range_exits_2(tmp_path, capsys):
    code = main(["simple-mdp", "--algo", "teq", "--alpha", "0.6", "--out", str(tmp_path)])
    assert code == 2
    assert "alpha must lie in (0, 0.5]" in capsys.readouterr().err
    assert not _csvs(tmp_path)


@pytest.mark.parametrize("argv", [["bogus"], ["iid-sweep", "--nope", "1"], [],
                                  ["cliff", "--algo", "sarsa"], ["iid-sweep", "--runs", "x"],
                                  ["iid-sweep", "--set", "colour=red"]])
def test_usage_errors_exit_2(argv, tmp_path):
    assert main(argv + (["--out", str(tmp_path)] if argv and argv[0] != "bogus" else [])) == 2


def test_iid_sweep_is_byte_identical(tmp_path):
    args = ["iid-sweep", "--runs", "1000", "--seed", "7", "--gap-points", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _csvs(tmp_path / "a")[0], _csvs(tmp_path / "b")[0]
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert "\r" not in text and text.splitlines()[0].startswith("mu1,name,bias")
    assert len(text.splitlines()) == 1 + 3 * 7


def test_resolved_config_round_trip(tmp_path):
    assert main(["noniid", "--runs", "500", "--rho", "0.5", "--kde", "false",
                 "--out", str(tmp_path / "a")]) == 0
    record = json.loads((tmp_path / "a" / "resolved-config.json").read_text())
    assert record["subcommand"] == "noniid" and record["version"] == __version__
    assert record["rho"] == 0.5 and record["seed"] == 0 and "out" not in record
    assert main(["noniid", "--config", str(tmp_path / "a" / "resolved-config.json"),
                 "--out", str(tmp_path / "b")]) == 0
    assert _csvs(tmp_path / "a")[0].read_bytes() == _csvs(tmp_path / "b")[0].read_bytes()


def test_precedence_flags_over_file_over_defaults(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[common]\nseed = 3\n[simple-mdp]\nruns = 20\nepisodes = 5\nalgo = teq\n")
    assert main(["simple-mdp", "--config", str(ini), "--episodes", "4",
                 "--out", str(tmp_path / "o")]) == 0
    rec = json.loads((tmp_path / "o" / "resolved-config.json").read_text())
    assert (rec["seed"], rec["runs"], rec["episodes"], rec["algo"]) == (3, 20, 4, "teq")
    assert rec["epsilon"] == 0.1
    rows = _csvs(tmp_path / "o")[0].read_text().splitlines()
    assert len(rows) == 1 + 4


def test_set_overrides_and_unknown_file_keys(tmp_path):
    assert main(["cliff", "--set", "episodes=3", "--set", "runs=2", "--smooth", "0.5",
                 "--out", str(tmp_path)]) == 0
    names = [p.name for p in _csvs(tmp_path)]
    assert any(n.endswith("-smoothed.csv") for n in names)
    bad = tmp_path / "bad.ini"
    bad.write_text("[cliff]\nepisodez = 3\n")
    assert main(["cliff", "--config", str(bad), "--out", str(tmp_path)]) == 2
    other = tmp_path / "resolved-config.json"
    assert main(["iid-sweep", "--config", str(other), "--out", str(tmp_path)]) == 2


def test_missing_config_file_exits_2(tmp_path):
    assert main(["ads", "--config", str(tmp_path / "none.ini")]) == 2


def test_timestamp_collisions_get_suffix(tmp_path):
    for _ in range(2):
        assert main(["analytic", "--estimators", "me", "--out", str(tmp_path)]) == 0
    assert len(_csvs(tmp_path)) == 2


def test_out_defaults_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MEVRL_OUT", str(tmp_path / "env"))
    assert main(["analytic", "--estimators", "me"]) == 0
    assert len(_csvs(tmp_path / "env")) == 1


def test_deep_train_checkpoint_and_bias(tmp_path, capsys):
    ckpt = tmp_path / "net.bin"
    assert main(["deep-train", "--env", "maxbias", "--variant", "bdqn", "--heads", "3",
                 "--steps", "300", "--eval-every", "150", "--min-buffer", "50",
                 "--target-period", "50", "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    assert ckpt.exists()
    assert main(["estimate-bias", "--checkpoint", str(ckpt), "--env", "maxbias",
                 "--out", str(tmp_path)]) == 0
    assert "estimated bias" in capsys.readouterr().out
    assert main(["estimate-bias", "--checkpoint", str(ckpt), "--env", "cliff",
                 "--out", str(tmp_path)]) == 1
    assert main(["estimate-bias", "--out", str(tmp_path)]) == 2


def test_ads_single_config_and_fit(tmp_path, capsys):
    assert main(["ads", "--n-customers", "1000", "--runs", "200", "--estimators", "me cve",
                 "--out", str(tmp_path)]) == 0
    rows = _csvs(tmp_path)[0].read_text().splitlines()
    assert rows[0] == "N,M,hi,name,bias,var,mse,se,runs" and len(rows) == 3
    assert main(["fit-kernel", "--gap-points", "3", "--out", str(tmp_path)]) == 0
    assert "objective" in capsys.readouterr().out


def test_exp_smooth():
    assert list(exp_smooth([1.0, 3.0], 0.5)) == [1.0, 2.0]
    assert exp_smooth([], 0.5).size == 0
