import csv
import json
import subprocess
import sys
from importlib import resources

import pytest

from splitlora.cli import main
from splitlora.config import load_run_config, run_config_from_dict
from splitlora.errors import ConfigError
from splitlora.lora import load_checkpoint

SMALL = {"mode": "splitlora", "rounds": 5, "num_clients": 2, "batch_size": 2, "cut_layer": 1, "rank": 2,
         "lr_client": 0.1, "lr_server": 0.1, "agg_interval": 2, "checkpoint_every": 2,
         "model": {"vocab_size": 16, "seq_len": 4, "width": 8, "hidden": 16, "num_blocks": 3},
         "data": {"n_train": 40, "n_eval": 10}}


def write_cfg(tmp_path, name="cfg.json", **over):
    p = tmp_path / name
    p.write_text(json.dumps({**SMALL, **over}))
    return p


def run(tmp_path, out="run", **over):
    cfg = write_cfg(tmp_path, f"{out}.json", **over)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    return tmp_path / out


def records(run_dir):
    return [json.loads(line) for line in (run_dir / "log.jsonl").read_text().splitlines()]


def test_run_writes_outputs(tmp_path):
    d = run(tmp_path)
    recs = records(d)
    assert len(recs) == 5
    summary = json.loads((d / "summary.json").read_text())
    last = recs[-1]
    assert summary["total_bytes"] == last["cum_bytes"]
    assert summary["total_flops"] == last["cum_flops"]
    assert summary["sim_time_s"] == last["sim_time_s"]
    assert summary["final_mean_ce"] == last["mean_ce"]
    names = sorted(p.name for p in (d / "checkpoints").iterdir())
    assert "final_server.slra" in names and "round00004_client1.slra" in names
    assert load_checkpoint(d / "checkpoints" / "final_global.slra").site_ids


@pytest.mark.parametrize("mode", ["cenlora", "fedlora"])
def test_baseline_modes_run(tmp_path, mode):
    d = run(tmp_path, mode=mode)
    assert json.loads((d / "summary.json").read_text())["mode"] == mode


def test_same_seed_byte_identical_logs(tmp_path):
    a = run(tmp_path, out="a")
    b = run(tmp_path, out="b")
    assert (a / "log.jsonl").read_bytes() == (b / "log.jsonl").read_bytes()


def test_seed_override(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "s1"), "--seed", "1"]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "s0")]) == 0
    assert (tmp_path / "s1" / "log.jsonl").read_bytes() != (tmp_path / "s0" / "log.jsonl").read_bytes()
    assert json.loads((tmp_path / "s1" / "summary.json").read_text())["seed"] == 1


def test_malformed_config_exits_2_without_outputs(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()
    assert "malformed JSON" in capsys.readouterr().err


@pytest.mark.parametrize("over", [{"rank": 99}, {"cut_layer": 3}, {"bogus": 1}, {"mode": "x"},
                                  {"rounds": -1}, {"agg_interval": 0}])
def test_invalid_config_values(tmp_path, over):
    cfg = write_cfg(tmp_path, **over)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_runtime_failure_exits_3(tmp_path, capsys):
    cfg = write_cfg(tmp_path, lr_client=1e4, lr_server=1e4, rounds=40)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "phase" in capsys.readouterr().err


def test_config_input_not_modified(tmp_path):
    cfg = write_cfg(tmp_path)
    before = cfg.read_bytes()
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3"])
    assert cfg.read_bytes() == before


def test_report_writes_csv(tmp_path, capsys):
    d = run(tmp_path)
    assert main(["report", "--in", str(d)]) == 0
    rows = list(csv.reader(open(d / "summary.csv")))
    assert rows[0] == ["round", "mean_ce", "ppl", "cum_bytes", "sim_time_s"]
    assert len(rows) == 5 + 1
    assert "cum_bytes" in capsys.readouterr().out


def test_report_empty_log(tmp_path):
    d = run(tmp_path, rounds=0)
    assert main(["report", "--in", str(d)]) == 0
    assert len(list(csv.reader(open(d / "summary.csv")))) == 1


def test_report_corrupt_line(tmp_path, capsys):
    d = run(tmp_path)
    lines = (d / "log.jsonl").read_text().splitlines()
    lines[2] = lines[2][:10]
    (d / "log.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["report", "--in", str(d)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_report_missing_files(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--in", str(tmp_path / "empty")]) == 2


def test_compare_identical_runs(tmp_path, capsys):
    a, b = run(tmp_path, out="a"), run(tmp_path, out="b")
    capsys.readouterr()
    assert main(["compare", "--in", str(a), str(b), "--threshold", "100"]) == 0
    lines = capsys.readouterr().out.splitlines()
    row_a, row_b = (line.split()[1:] for line in lines[1:3])
    assert row_a == row_b


def test_compare_not_reached(tmp_path, capsys):
    a, b = run(tmp_path, out="a"), run(tmp_path, out="b", mode="fedlora")
    capsys.readouterr()
    assert main(["compare", "--in", str(a), str(b), "--threshold", "0.0"]) == 0
    assert "not reached" in capsys.readouterr().out


def test_compare_missing_dir(tmp_path):
    a = run(tmp_path, out="a")
    assert main(["compare", "--in", str(a), str(tmp_path / "nope"), "--threshold", "1"]) == 2


def test_compare_needs_two_dirs(tmp_path):
    a = run(tmp_path, out="a")
    assert main(["compare", "--in", str(a), "--threshold", "1"]) == 2


def test_time_to_threshold_dominance():
    from splitlora.cli import first_reaching
    a = [{"mean_ce": v, "sim_time_s": t, "cum_bytes": {"x": t}} for t, v in enumerate([3.0, 2.0, 1.0], 1)]
    b = [{"mean_ce": v, "sim_time_s": t, "cum_bytes": {"x": t}} for t, v in enumerate([3.5, 2.5, 1.5], 1)]
    for thr in (3.2, 2.2, 1.2, 0.5):
        ha, hb = first_reaching(a, thr), first_reaching(b, thr)
        assert hb is None or (ha is not None and ha[0] <= hb[0])


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path)
    res = subprocess.run([sys.executable, "-m", "splitlora", "run", "--config", str(cfg),
                          "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "splitlora", "report"], capture_output=True, text=True)
    assert res.returncode == 2


@pytest.mark.parametrize("name", ["gpt2s_like.json", "gpt2m_like.json", "toy_convergence.json"])
def test_presets_are_valid(name):
    text = resources.files("splitlora").joinpath("presets", name).read_text()
    rc = run_config_from_dict(json.loads(text))
    assert rc.training.cut_layer == 3 or name == "toy_convergence.json"


def test_epochs_is_ignored_with_warning(caplog):
    rc = run_config_from_dict({**SMALL, "epochs": 3})
    assert rc.training.rounds == 5
    assert "ignored" in caplog.text


def test_load_missing_config(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "none.json")
