import filecmp
import subprocess
import sys

import pytest

from scala_asr import cli
from scala_asr import model as M
from scala_asr.config import KEYS, load_config
from scala_asr.corpus import load_corpus_dir
from scala_asr.errors import NumericError
from scala_asr.losses import ContrastiveConfig
from scala_asr.masking import MaskConfig
from scala_asr.metrics import audit_negatives, evaluate_corpus

SMALL = """\
# tiny setup for command tests
synth.n_utts = 24
synth.n_test = 6
model.d_f = 16
model.conv = 3:2:16
model.n_sab = 1
model.n_heads = 2
model.ffn_dim = 32
train.steps = 6
train.batch_size = 4
train.eval_interval = 3
train.checkpoint_interval = 3
audit.n_trials = 3
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def work(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL, encoding="utf-8")
    return tmp_path


def common(work):
    return ["--workdir", work, "--config", "small.cfg"]


@pytest.fixture
def trained(work, capsys):
    assert run("gen-data", *common(work)) == 0
    assert run("train", *common(work)) == 0
    capsys.readouterr()
    return work


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_help_lists_every_key(capsys):
    assert run("--help") == 0
    top = capsys.readouterr().out
    assert run("train", "--help") == 0
    out = capsys.readouterr().out
    for key in KEYS:
        assert key in out and key in top
    for name in cli.COMMANDS:
        assert name in top


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--set", "train.stepz=5"], ["train", "--set", "seed=x"],
                                  ["train", "--threads", "0"], ["evaluate"], ["train", "--config", "missing.cfg"],
                                  ["train", "--set", "novalue"]])
def test_usage_errors(argv, work, capsys):
    assert run(*argv, *(["--workdir", work] if argv and argv[0] != "bogus" else [])) == 1
    assert capsys.readouterr().err


def test_unknown_key_in_file(work, capsys):
    (work / "bad.cfg").write_text("seed = 1\ntrain.lr = 0.1\n", encoding="utf-8")
    assert run("gen-data", "--workdir", work, "--config", "bad.cfg") == 1
    assert "bad.cfg:2" in capsys.readouterr().err


def test_config_precedence(work):
    cfg = load_config(work / "small.cfg", ["train.steps=9", "train.steps=11"])
    assert cfg["train.steps"] == 11 and cfg["model.d_f"] == 16 and cfg["seed"] == 0
    args = cli.build_parser().parse_args(["train", *map(str, common(work)), "--seed", "5", "--set", "seed=3"])
    assert cli.Context(args).cfg["seed"] == 5


def test_gen_data_deterministic(work, capsys):
    for d in ("a", "b", "c"):
        seed = "3" if d == "c" else "7"
        assert run("gen-data", *common(work), "--seed", seed, "--set", f"data.dir={d}") == 0
    assert "24 utterances" in capsys.readouterr().out
    assert tree_equal(work / "a", work / "b")
    assert not tree_equal(work / "a", work / "c")


def test_data_errors(work, capsys):
    assert run("train", *common(work)) == 2
    assert run("audit-negatives", *common(work)) == 2
    (work / "junk.sclc").write_bytes(b"nope")
    assert run("evaluate", *common(work), "--ckpt", "junk.sclc") == 2
    assert "data error" in capsys.readouterr().err


def test_train_then_evaluate(trained, capsys):
    assert (trained / "run" / "best.sclc").exists() and (trained / "run" / "metrics.jsonl").exists()
    assert run("evaluate", *common(trained), "--ckpt", "run/best.sclc") == 0
    out = capsys.readouterr().out
    params, mcfg, _ = M.load_model(trained / "run" / "best.sclc")
    utts, _, _ = load_corpus_dir(trained / "data", "test")
    rep = evaluate_corpus(params, utts, mcfg)
    assert f"CER {rep.cer:.2f}%" in out and f"SUB {rep.sub_rate:.2f}%" in out
    assert f"DEL {rep.del_rate:.2f}%" in out and f"INS {rep.ins_rate:.2f}%" in out
    assert run("evaluate", *common(trained), "--ckpt", "run/best.sclc", "--split", "train") == 0


def test_train_is_reproducible_and_resumable(trained, capsys):
    first = (trained / "run" / "metrics.jsonl").read_bytes()
    assert run("train", *common(trained), "--set", "train.out_dir=again") == 0
    assert (trained / "again" / "metrics.jsonl").read_bytes() == first
    assert run("train", *common(trained), "--set", "train.out_dir=again", "--resume", "again/ckpt_000003.sclc") == 0
    assert (trained / "again" / "metrics.jsonl").read_bytes() != first  # appended after step 3
    assert (trained / "again" / "last.sclc").read_bytes() == (trained / "run" / "last.sclc").read_bytes()


def test_audit_matches_library(trained, capsys):
    assert run("audit-negatives", *common(trained), "--seed", "4") == 0
    lines = capsys.readouterr().out.splitlines()
    rate = lines[1].split()
    assert rate[2] == "0.0000" and float(rate[3]) > 0
    utts, inv, _ = load_corpus_dir(trained / "data", "train")
    for col, sup in ((2, True), (3, False)):
        aud = audit_negatives(utts, inv, [2], MaskConfig(), ContrastiveConfig(supervised=sup), 3, seed=4)
        assert lines[1].split()[col] == f"{aud.noisy_rate:.4f}"
        assert int(lines[2].split()[col]) == aud.noisy_pairs
        assert int(lines[3].split()[col]) == aud.total_pairs


def test_report(trained, capsys):
    assert run("report", *common(trained)) == 0
    out = capsys.readouterr().out
    assert (trained / "run" / "report.csv").read_text().startswith("step,train_ctc,train_scl,val_ctc,val_cer\n")
    assert "noisy_negative_rate: 0.0" in out and "sub_rate" in out


def test_grad_check(work, capsys):
    assert run("grad-check", "--workdir", work, "--set", "grad.seeds=2") == 0
    out = capsys.readouterr().out
    assert "seed 0" in out and "seed 1" in out and "PASS" in out


def test_ctc_oracle(work, capsys, monkeypatch):
    assert run("ctc-oracle", "--workdir", work, "--draws", "200") == 0
    assert "PASS" in capsys.readouterr().out
    real = cli.ctc_forward_backward
    monkeypatch.setattr(cli, "ctc_forward_backward", lambda lp, y: (real(lp, y)[0] + 1e-6,) + tuple(real(lp, y)[1:]))
    assert run("ctc-oracle", "--workdir", work, "--draws", "20") == 3
    assert "FAIL" in capsys.readouterr().out


def test_runtime_errors_exit_three(trained, monkeypatch):
    def boom(*a, **kw):
        raise NumericError("diverged")

    monkeypatch.setattr(cli.T, "run_training", boom)
    assert run("train", *common(trained)) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scala_asr", "ctc-oracle", "--draws", "30", "--max-S", "3"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "PASS" in proc.stdout
