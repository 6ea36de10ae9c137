import json
import subprocess
import sys

import pytest

from dppg_lab.cli import build_parser, config_overrides, main, parse_seeds


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("1,5,9") == [1, 5, 9]
    assert parse_seeds("0-2,10") == [0, 1, 2, 10]


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.5, "batch_size": 4}), encoding="utf-8")
    args = build_parser().parse_args(["train", "--agent", "dpac", "--env", "karmed", "--steps", "5",
                                      "--config", str(cfg), "--lr", "0.25", "--icl", "false"])
    assert config_overrides(args) == {"lr": 0.25, "batch_size": 4, "icl": False}


def test_train_is_byte_identical(tmp_path, capsys):
    paths = []
    for d in ("a", "b"):
        code, out, _ = _run(capsys, "train", "--agent", "dpac", "--env", "karmed", "--steps", "150", "--seed", "7",
                            "--out", str(tmp_path / d))
        assert code == 0
        paths.append(out.strip())
    assert paths[0].endswith("dpac_karmed_seed7.csv")
    with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
        assert a.read() == b.read()


def test_train_uses_env_var(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DPPG_LAB_OUT", str(tmp_path))
    code, out, _ = _run(capsys, "train", "--agent", "acst", "--env", "karmed", "--steps", "20")
    assert code == 0 and out.strip().startswith(str(tmp_path))


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"not_a_field": 1}), encoding="utf-8")
    code, _, err = _run(capsys, "train", "--agent", "dpac", "--env", "karmed", "--steps", "5",
                        "--config", str(cfg), "--out", str(tmp_path))
    assert code == 2 and err.startswith("error:")


def test_bad_action_space_exits_2(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--agent", "aclr", "--env", "bimodal", "--steps", "5",
                        "--out", str(tmp_path))
    assert code == 2 and "error" in err


def test_unknown_agent_is_argparse_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--agent", "ppo", "--env", "karmed", "--steps", "5"])
    assert exc.value.code == 2


def test_sweep_then_summarize(tmp_path, capsys):
    code, out, _ = _run(capsys, "sweep", "--agent", "dpac", "--env", "karmed", "--steps", "100",
                        "--seeds", "0-2", "--out", str(tmp_path / "sw"))
    assert code == 0 and "over 3 seeds" in out
    code, out, _ = _run(capsys, "summarize", str(tmp_path / "sw"), "--resamples", "500",
                        "--out", str(tmp_path / "sum"))
    assert code == 0 and out.startswith("dpac_karmed:")
    summary = json.loads((tmp_path / "sum" / "summary.json").read_text(encoding="utf-8"))
    assert summary["dpac_karmed"]["n_seeds"] == 3
    assert summary["dpac_karmed"]["final_performance"]["resamples"] == 500
    curve = (tmp_path / "sum" / "dpac_karmed_curve.csv").read_text(encoding="utf-8")
    assert curve.splitlines()[0] == "step,mean,ci_lo,ci_hi,n_seeds"


def test_pe_bandit(tmp_path, capsys):
    code, out, _ = _run(capsys, "pe-bandit", "--env", "karmed", "--steps", "30", "--resolution", "5",
                        "--out", str(tmp_path))
    assert code == 0
    s = json.loads(out)
    assert s["env"] == "karmed" and s["update"] == "icl"
    lines = (tmp_path / "pe_karmed_icl_seed0_landscape.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "u0,u1,u2,q" and len(lines) == 26
    assert (tmp_path / "pe_karmed_icl_seed0.json").exists()


def test_variance_study(tmp_path, capsys):
    code, out, _ = _run(capsys, "variance-study", "--env", "karmed", "--n", "2000", "--out", str(tmp_path))
    assert code == 0
    brief = json.loads(out)
    assert brief["unbiased"] and brief["n_resamples"] == 2000
    assert (tmp_path / "variance_karmed_seed0.json").exists()


def test_check_prop1_karmed(capsys):
    code, out, _ = _run(capsys, "check", "prop1", "--env", "karmed")
    assert code == 0 and json.loads(out)["pass"]


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dppg_lab.cli", "train", "--agent", "dpac", "--env", "bimodal",
                           "--steps", "10", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "dpac_bimodal_seed0.csv").exists()
