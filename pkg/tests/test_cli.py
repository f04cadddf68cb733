import csv
import json
import subprocess
import sys

import pytest

from gvpolab import cli
from gvpolab.config import DEFAULT_TASK, OUTPUT_ROOT_ENV


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


SMALL_TASK = {"kind": "bandit", "num_prompts": 3, "num_responses": 5, "reward_gen": {"type": "uniform"}, "seed": 1}


@pytest.fixture
def small(tmp_path):
    def make(train=None, **extra):
        doc = {"task": SMALL_TASK, "train": {"steps": 200, "log_every": 20, **(train or {})}, **extra}
        return write_config(tmp_path / "cfg.json", doc)
    return make


def test_run_writes_outputs(small, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", small(), "--output", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 10 and rows[-1]["step"] == "200"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_metrics"]["steps_completed"] == 200
    assert summary["config"]["train"]["steps"] == 200
    assert len(summary["config"]["task"]["rewards"]) == 3


def test_run_is_bitwise_reproducible(small, tmp_path):
    cfg = small({"gradient_mode": "monte_carlo", "k": 4})
    cli.main(["run", "--config", cfg, "--output", str(tmp_path / "a"), "--seed", "3"])
    cli.main(["run", "--config", cfg, "--output", str(tmp_path / "b"), "--seed", "3"])
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    cli.main(["run", "--config", cfg, "--output", str(tmp_path / "c"), "--seed", "4"])
    assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "c/metrics.csv").read_bytes()


def test_seed_flag_overrides_train_seed(small, tmp_path):
    cli.main(["run", "--config", small({"seed": 1}), "--output", str(tmp_path / "o"), "--seed", "9"])
    assert json.loads((tmp_path / "o/summary.json").read_text())["config"]["train"]["seed"] == 9


@pytest.mark.parametrize("train, field_name", [({"beta": -1}, "train.beta"), ({"scheme": "PPO"}, "train.scheme")])
def test_config_error_exit_code(small, tmp_path, capsys, train, field_name):
    assert cli.main(["run", "--config", small(train), "--output", str(tmp_path / "o")]) == 2
    assert field_name in capsys.readouterr().err


def test_unknown_top_level_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"trian": {}})
    assert cli.main(["run", "--config", cfg]) == 2
    assert "trian" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_support_violation_exit_code(small, tmp_path):
    table = [[0.5, 0.5, 0, 0, 0]] * 3
    cfg = small({"sampler": {"kind": "fixed", "fixed_probs": table}})
    assert cli.main(["run", "--config", cfg, "--output", str(tmp_path / "o")]) == 2


def test_abort_exit_code(small, tmp_path):
    cfg = small({"max_grad_norm": 1e-9})
    out = tmp_path / "o"
    assert cli.main(["run", "--config", cfg, "--output", str(out)]) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["aborted"] and "theta" in summary["state_dump"]


def test_output_root_env(small, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = small()
    assert cli.main(["run", "--config", cfg]) == 0
    assert (tmp_path / "root" / "cfg" / "metrics.csv").exists()


def test_sweep_beta(small, tmp_path):
    cfg = small(sweep=[{"path": "train.beta", "values": [0.1, 0.5, 1, 2]}])
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", cfg, "--output", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["beta"] for r in rows] == ["0.1", "0.5", "1", "2"]
    assert all(r["aborted"] == "false" for r in rows)
    assert (out / "beta=0.1" / "summary.json").exists()


def test_sweep_two_axes(small, tmp_path):
    cfg = small({"gradient_mode": "monte_carlo"},
                sweep=[{"path": "train.k", "values": [4, 8]},
                       {"path": "train.scheme", "values": ["GVPO", "GRPO", "DPO", "SFT"]}])
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", cfg, "--output", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 8
    assert [(r["k"], r["scheme"]) for r in rows[:2]] == [("4", "GVPO"), ("4", "GRPO")]


def test_sweep_mixture(small, tmp_path):
    mixes = [[0, 8], [2, 6], [4, 4], [6, 2], "7:1"]
    cfg = small({"gradient_mode": "monte_carlo", "k": 8}, sweep=[{"path": "train.sampler.mix", "values": mixes}])
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", cfg, "--output", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["mix"] for r in rows] == ["0:8", "2:6", "4:4", "6:2", "7:1"]


def test_sweep_continues_past_bad_cell(small, tmp_path):
    cfg = small(sweep=[{"path": "train.beta", "values": [1.0, -1.0, 0.5]}])
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", cfg, "--output", str(out)]) == 2
    rows = read_csv(out / "sweep.csv")
    assert [r["aborted"] for r in rows] == ["false", "true", "false"]
    assert "train.beta" in rows[1]["abort_reason"]


def test_sweep_bad_path(small, tmp_path):
    cfg = small(sweep=[{"path": "train.betta", "values": [1.0]}])
    assert cli.main(["sweep", "--config", cfg, "--output", str(tmp_path / "sw")]) == 2


def test_compare_four_schemes(tmp_path, capsys):
    doc = {"task": DEFAULT_TASK, "train": {"steps": 2000, "gradient_mode": "monte_carlo", "k": 8, "log_every": 500},
           "compare": {"schemes": ["GVPO", "GRPO", "DPO", "SFT"]}}
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", write_config(tmp_path / "c.json", doc), "--output", str(out)]) == 0
    rows = read_csv(out / "compare.csv")
    assert [r["scheme"] for r in rows] == ["GVPO", "GRPO", "DPO", "SFT"]
    assert list(rows[0]) == list(cli.COMPARE_COLUMNS)
    ranking = json.loads((out / "compare.json").read_text())["ranking"]
    assert ranking[0] == "GVPO"
    assert capsys.readouterr().out.startswith("1. GVPO")


def test_compare_multiple_seeds(small, tmp_path):
    cfg = small({"gradient_mode": "monte_carlo"}, compare={"schemes": ["GVPO", "SFT"], "seeds": [0, 1, 2]})
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", cfg, "--output", str(out)]) == 0
    rows = read_csv(out / "compare.csv")
    assert all(r["seeds"] == "3" for r in rows)
    assert float(rows[0]["kl_to_optimal_se"]) >= 0


def test_compare_needs_two_schemes(small, tmp_path):
    cfg = small(compare={"schemes": ["GVPO"]})
    assert cli.main(["compare", "--config", cfg, "--output", str(tmp_path / "c")]) == 2


def test_verify_unknown_selector(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "bogus"])
    assert exc.value.code == 2


def test_verify_single_json(capsys, tmp_path):
    assert cli.main(["verify", "zero_sum", "--json", "--seed", "42", "--output", str(tmp_path)]) == 0
    captured = capsys.readouterr()
    doc = json.loads(captured.out)
    assert [d["name"] for d in doc] == ["zero_sum"] and doc[0]["passed"]
    assert "PASS" in captured.err
    assert json.loads((tmp_path / "verify.json").read_text()) == doc


def test_verify_threshold_override_fails(tmp_path):
    cfg = write_config(tmp_path / "t.json", {"thresholds": {"zero_sum": 1e-300}})
    assert cli.main(["verify", "zero_sum", "--config", cfg]) == 1


def test_verify_all(capsys):
    assert cli.main(["verify", "all", "--json", "--seed", "42", "--parallel", "4"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc) == 7
    assert all(d["passed"] for d in doc)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gvpolab", "verify", "cancellation"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0
    assert "cancellation" in proc.stdout
