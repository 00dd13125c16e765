import json

import pytest

from lcron import cli

TINY_FLAGS = ["--n-users", "30", "--n-items", "300", "--feature-dim", "4", "--pool-size", "60",
              "--n-days", "3", "--impressions-per-day", "30", "--hidden", "4", "--embedding-dim", "3",
              "--batch-size", "16", "--temperature", "3"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_then_eval(tmp_path, capsys):
    code, out, _ = run(capsys, "train", *TINY_FLAGS, "--out", str(tmp_path))
    assert code == 0 and "joint_recall" in out
    for name in ("metrics.json", "metrics.csv", "metrics_summary.txt", "metrics.npz", "metrics_config.json"):
        assert (tmp_path / name).exists()
    trained = json.loads((tmp_path / "metrics.json").read_text())
    code, _, _ = run(capsys, "eval", *TINY_FLAGS, "--out", str(tmp_path), "--stem", "ev",
                     "--checkpoint", str(tmp_path / "metrics.npz"))
    assert code == 0
    evaluated = json.loads((tmp_path / "ev.json").read_text())
    assert evaluated["days"] == trained["days"]


def test_train_is_byte_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "train", *TINY_FLAGS, "--out", str(tmp_path / d))[0] == 0
    for name in ("metrics.json", "metrics.csv", "metrics.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_and_train_from_file(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    assert run(capsys, "generate", *TINY_FLAGS, "--output", str(data))[0] == 0
    code, _, _ = run(capsys, "train", *TINY_FLAGS, "--dataset", str(data), "--out", str(tmp_path / "f"))
    assert code == 0
    code, _, _ = run(capsys, "train", *TINY_FLAGS, "--out", str(tmp_path / "g"))
    assert (tmp_path / "f" / "metrics.json").read_text() == (tmp_path / "g" / "metrics.json").read_text()


def test_stream_diagnose_sweep(tmp_path, capsys):
    assert run(capsys, "stream", *TINY_FLAGS, "--out", str(tmp_path))[0] == 0
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 3
    code, out, _ = run(capsys, "diagnose", *TINY_FLAGS, "--diag-impressions", "5", "--out", str(tmp_path))
    assert code == 0 and out.startswith("before:")
    code, out, _ = run(capsys, "sweep", *TINY_FLAGS, "--methods", "lcron,bce", "--temperatures", "1,3",
                       "--seeds", "2", "--out", str(tmp_path), "--stem", "sw")
    assert code == 0
    rows = (tmp_path / "sw.csv").read_text().splitlines()
    assert len(rows) == 1 + 3  # bce ignores the temperature grid
    assert rows[0].endswith("p_value_vs_first")


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# settings\nmethod = bce\ntemperature = 2.5\nserving-quotas = 12, 8\n\n")
    args = cli.make_parser().parse_args(["train", "--config", str(conf), "--temperature", "4"])
    cfg = cli.build_config(args)
    assert cfg.method == "bce" and cfg.temperature == 4.0 and cfg.serving_quotas == (12, 8)


def test_preset_is_the_base_layer(tmp_path):
    args = cli.make_parser().parse_args(["train", "--preset", "benchmark", "--batch-size", "32"])
    cfg = cli.build_config(args)
    assert cfg.synth.collapse_negative_grades and cfg.batch_size == 32 and cfg.embedding_dim == 4


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert run(capsys, "train", *TINY_FLAGS)[0] == 0
    assert (tmp_path / "env" / "metrics.json").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--method", "nope"],
    ["train", "--serving-quotas", "10,15"],
    ["eval", "--checkpoint", "/nonexistent/ck.npz"],
    ["train", "--dataset", "/nonexistent/d.jsonl"],
])
def test_failures_exit_nonzero(argv, tmp_path, capsys):
    code, _, err = run(capsys, *argv, *TINY_FLAGS, "--out", str(tmp_path))
    assert code == 1 and "error" in err


def test_bad_config_file(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    code, _, err = run(capsys, "train", "--config", str(conf), "--out", str(tmp_path))
    assert code == 1 and "unknown key" in err


def test_three_stage_generator_from_flags(tmp_path, capsys):
    code, _, _ = run(capsys, "train", *TINY_FLAGS, "--stage-counts", "4,4,4,4,4", "--pool-size", "80",
                     "--serving-quotas", "16,12,8", "--out", str(tmp_path))
    assert code == 0
