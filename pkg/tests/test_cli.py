import json
import subprocess
import sys

import pytest

from a2asr.cli import EXIT_CONFIG, EXIT_DATA, main

from .tiny import tiny_cli_args

TINY = tiny_cli_args()


def run(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_data_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen-data", "--seed", "7", "--out", str(a), *TINY)[0] == 0
    assert run(capsys, "gen-data", "--seed", "7", "--out", str(b), *TINY)[0] == 0
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    assert run(capsys, "gen-data", "--regenerate", str(a), "--out", str(c))[0] == 0
    assert (a / "train.jsonl").read_bytes() == (c / "train.jsonl").read_bytes()


def test_config_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--runs", str(tmp_path), "--train.bogus=1")
    assert code == EXIT_CONFIG and "bogus" in err
    assert run(capsys, "preset", "no_such_preset", "--runs", str(tmp_path))[0] == EXIT_CONFIG
    assert run(capsys, "train", "--runs", str(tmp_path), "stray")[0] == EXIT_CONFIG
    assert run(capsys, "train", "--config", str(tmp_path / "none.toml"))[0] == EXIT_CONFIG
    assert run(capsys, "sweep-tau", "--runs", str(tmp_path), "--values", "a,b")[0] == EXIT_CONFIG


def test_data_errors_exit_3(tmp_path, capsys):
    assert run(capsys, "eval", str(tmp_path / "missing.jsonl"))[0] == EXIT_DATA
    assert run(capsys, "decode", "--runs", str(tmp_path), *TINY)[0] == EXIT_DATA  # nothing trained yet
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run(capsys, "eval", str(empty))[0] == EXIT_DATA


def test_full_pipeline(tmp_path, capsys):
    runs = str(tmp_path / "runs")
    args = ["--runs", runs, *TINY, "--train.lm_transfer=true"]
    code, out, _ = run(capsys, "pretrain-lm", *args)
    assert code == 0 and "perplexity" in out
    assert run(capsys, "train", *args)[0] == 0
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert (run_dir / "averaged.ckpt").exists() and (run_dir / "corpus" / "manifest.json").exists()

    code, out, _ = run(capsys, "decode", *args)
    assert code == 0 and "avg" in out
    (dump,) = run_dir.glob("decode-test-*.jsonl")
    recs = [json.loads(line) for line in dump.read_text().splitlines()]
    assert len(recs) == 12
    assert set(recs[0]) == {"id", "lang", "ref", "hyp", "cer", "attn_score", "ctc_score"}

    report_a = tmp_path / "a.json"
    report_b = tmp_path / "b.json"
    assert run(capsys, "eval", str(dump), "--out", str(report_a))[0] == 0
    assert run(capsys, "eval", str(dump), "--out", str(report_b))[0] == 0
    assert report_a.read_bytes() == report_b.read_bytes()
    stored = json.loads(dump.with_suffix(".report.json").read_text())
    assert json.loads(report_a.read_text())["macro"] == pytest.approx(stored["macro"])

    # a decode-only override reuses the trained model of the same run dir
    assert run(capsys, "decode", *args, "--decode.beam=1")[0] == 0
    assert len(list(run_dir.glob("decode-test-*.jsonl"))) == 2

    code, out, _ = run(capsys, "sweep-tau", *args, "--values", "0,0.3")
    assert code == 0 and "tau=0.3" in out
    (sweep,) = run_dir.glob("sweep-tau-*.json")
    assert set(json.loads(sweep.read_text())) == {"0", "0.3"}

    ckpts = sorted(str(p) for p in (run_dir / "ckpt").glob("*.ckpt"))
    out_ckpt = tmp_path / "avg.ckpt"
    assert run(capsys, "average-ckpt", *ckpts, "--n", "2", "--out", str(out_ckpt))[0] == 0
    assert out_ckpt.exists()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "a2asr.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "pretrain-lm", "train", "decode", "eval", "average-ckpt", "sweep-tau", "preset"):
        assert cmd in proc.stdout
