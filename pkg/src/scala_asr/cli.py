"""Command-line entry point.

Every command takes ``--config FILE``, repeated ``--set key=value``
overrides (applied in order, last wins), ``--seed`` and ``--workdir``;
relative paths are resolved against the working directory.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import trainer as T
from .config import Config, describe_keys, load_config
from .corpus import SynthSpec, generate_synthetic_corpus, load_corpus_dir
from .errors import ConfigError, DataError, NumericError, ScalaError
from .losses import ContrastiveConfig, ctc_enumerate, ctc_forward_backward
from .metrics import audit_negatives, emit_report, evaluate_corpus

log = logging.getLogger("scala_asr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
CTC_ORACLE_TOL = 1e-9
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- context


class Context:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.workdir = Path(args.workdir)
        cfg_path = self.path(args.config) if args.config else None
        self.cfg: Config = load_config(cfg_path, args.set or ())
        if args.seed is not None:
            self.cfg.set("seed", args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    @property
    def data_dir(self) -> Path:
        return self.path(self.cfg["data.dir"])

    @property
    def out_dir(self) -> Path:
        return self.path(self.cfg["train.out_dir"])

    def split(self, name: str):
        return load_corpus_dir(self.data_dir, name, self.cfg["data.silence_label"])

    def synth_spec(self) -> SynthSpec:
        c = self.cfg
        return SynthSpec(
            n_utts=c["synth.n_utts"], n_test=c["synth.n_test"], n_phonemes=c["synth.n_phonemes"],
            d_s=c["synth.d_s"], n_tokens=c["synth.n_tokens"],
            phonemes_per_token=tuple(c["synth.phonemes_per_token"]),
            tokens_per_utt=(c["synth.tokens_min"], c["synth.tokens_max"]),
            dur_mean=c["synth.dur_mean"], dur_max=c["synth.dur_max"], sigma=c["synth.sigma"],
            center_scale=c["synth.center_scale"], min_separation=c["synth.min_separation"],
            silence_edges=c["synth.silence_edges"], pause_prob=c["synth.pause_prob"],
            boundary_jitter=c["synth.boundary_jitter"],
            markov_successors=c["synth.markov_successors"],
            markov_strength=c["synth.markov_strength"],
            syllabic=c["synth.syllabic"], distinct_neighbours=c["synth.distinct_neighbours"],
        )


# --------------------------------------------------------------------------- commands


def cmd_gen_data(ctx: Context) -> int:
    corpus = generate_synthetic_corpus(ctx.synth_spec(), ctx.cfg["seed"], ctx.data_dir)
    print(f"wrote {len(corpus.utterances)} utterances ({len(corpus.train)} train, "
          f"{len(corpus.test)} test) to {ctx.data_dir}")
    return EXIT_OK


def _model_cfg_for(ctx: Context, utts, vocab) -> M.ModelConfig:
    return T.model_config_from(ctx.cfg, utts[0].features.shape[0], vocab.size)


def cmd_train(ctx: Context) -> int:
    train, inventory, vocab = ctx.split(ctx.cfg["data.train_split"])
    val, _, _ = ctx.split(ctx.cfg["data.val_split"])
    if not train:
        raise DataError("training split is empty")
    tcfg = T.train_config_from(ctx.cfg)
    mcfg = _model_cfg_for(ctx, train, vocab)
    resume = ctx.path(ctx.args.resume) if ctx.args.resume else None
    result = T.run_training(tcfg, mcfg, train, val, inventory, ctx.out_dir, resume)
    cers = [r["value"] for r in result.metrics if r["kind"] == "val_cer"]
    print(f"mode {tcfg.mode}: {result.state.global_step} steps, "
          f"best CER {result.state.best_cer:.2f}% at step {result.state.best_step}"
          + (f", final CER {cers[-1]:.2f}%" if cers else ""))
    print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_evaluate(ctx: Context) -> int:
    params, mcfg, _ = M.load_model(ctx.path(ctx.args.ckpt))
    split = ctx.args.split or ctx.cfg["data.val_split"]
    utts, _, vocab = ctx.split(split)
    if vocab.size != mcfg.vocab_size:
        raise DataError(f"checkpoint vocabulary size {mcfg.vocab_size} != corpus {vocab.size}")
    rep = evaluate_corpus(params, utts, mcfg)
    print(f"split {split}: {len(utts)} utterances, {rep.ref_tokens} reference tokens")
    print(f"CER {rep.cer:.2f}%  SUB {rep.sub_rate:.2f}%  DEL {rep.del_rate:.2f}%  INS {rep.ins_rate:.2f}%")
    print(f"counts: sub={rep.substitutions} del={rep.deletions} ins={rep.insertions}")
    return EXIT_OK


def run_audit(ctx: Context, supervised: bool):
    utts, inventory, _ = ctx.split(getattr(ctx.args, "split", None) or ctx.cfg["data.train_split"])
    strides = [c.stride for c in M.parse_conv(ctx.cfg["model.conv"])]
    mask_cfg = T.mask_config_from(ctx.cfg)
    scl_cfg = ContrastiveConfig(ctx.cfg["scl.tau"], ctx.cfg["scl.K"], supervised)
    return audit_negatives(utts, inventory, strides, mask_cfg, scl_cfg, ctx.cfg["audit.n_trials"],
                           ctx.cfg["seed"], ctx.cfg["align.method"])


def cmd_audit(ctx: Context) -> int:
    sup = run_audit(ctx, True)
    uns = run_audit(ctx, False)
    print(f"{'':<14}{'supervised':>14}{'unsupervised':>14}")
    print(f"{'noisy rate':<14}{sup.noisy_rate:>14.4f}{uns.noisy_rate:>14.4f}")
    print(f"{'noisy pairs':<14}{sup.noisy_pairs:>14d}{uns.noisy_pairs:>14d}")
    print(f"{'total pairs':<14}{sup.total_pairs:>14d}{uns.total_pairs:>14d}")
    return EXIT_OK


def cmd_grad_check(ctx: Context) -> int:
    c = ctx.cfg
    mcfg = M.ModelConfig(
        d_s=c["synth.d_s"], vocab_size=c["synth.n_tokens"] + 1, d_f=c["model.d_f"],
        conv=M.parse_conv(c["model.conv"]), n_sab=c["model.n_sab"], n_heads=c["model.n_heads"],
        ffn_dim=c["model.ffn_dim"], activation=c["model.activation"],
        mask_replacement=c["mask.replacement"], stop_grad_targets=c["model.stop_grad_targets"],
    )
    worst = 0.0
    for i in range(c["grad.seeds"]):
        seed = c["seed"] + i
        rep = T.model_grad_check(mcfg, seed, c["grad.utt_frames"], max_entries=c["grad.max_entries"],
                                 tol=GRAD_TOL)
        name = max(rep.errors, key=rep.errors.get)
        print(f"seed {seed}: max relative error {rep.max_error:.3e} ({name})")
        worst = max(worst, rep.max_error)
    ok = worst <= GRAD_TOL
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {GRAD_TOL:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def ctc_oracle(max_S: int, max_V: int, max_y: int, draws: int, seed: int) -> tuple[int, int, float]:
    """Compare the DP against path enumeration on random emissions.

    Draws are spread round-robin over every shape ``1 <= S <= max_S``,
    ``2 <= V <= max_V``; every reachable target with ``1 <= |y| <= max_y`` is
    checked. Returns ``(draws, comparisons, max_abs_diff)``.
    """
    if max_S < 1 or max_V < 2 or max_y < 1 or draws < 1:
        raise ConfigError("need max_S >= 1, max_V >= 2, max_y >= 1 and draws >= 1")
    rng = np.random.default_rng(seed)
    shapes = [(S, V) for S in range(1, max_S + 1) for V in range(2, max_V + 1)]
    n_cmp, worst = 0, 0.0
    for d in range(draws):
        S, V = shapes[d % len(shapes)]
        logits = rng.normal(0.0, 3.0, size=(S, V))
        lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
        for y, brute in ctc_enumerate(lp).items():
            if not 1 <= len(y) <= max_y:
                continue
            dp = ctc_forward_backward(lp, y)[0]
            worst = max(worst, abs(dp - brute))
            n_cmp += 1
    return draws, n_cmp, worst


def cmd_ctc_oracle(ctx: Context) -> int:
    a = ctx.args
    draws, n_cmp, worst = ctc_oracle(a.max_S, a.max_V, a.max_y, a.draws, ctx.cfg["seed"])
    ok = worst <= CTC_ORACLE_TOL
    print(f"{draws} emission draws, {n_cmp} (emissions, target) pairs; "
          f"max |DP - enumeration| = {worst:.3e}")
    print(f"{'PASS' if ok else 'FAIL'} (tolerance {CTC_ORACLE_TOL:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_report(ctx: Context) -> int:
    a = ctx.args
    metrics = ctx.path(a.metrics) if a.metrics else ctx.out_dir / "metrics.jsonl"
    output = ctx.path(a.output) if a.output else ctx.out_dir / "report"
    cer = None
    ckpt = ctx.path(a.ckpt) if a.ckpt else ctx.out_dir / "best.sclc"
    if a.ckpt or ckpt.exists():
        params, mcfg, _ = M.load_model(ckpt)
        utts, _, _ = ctx.split(ctx.cfg["data.val_split"])
        cer = evaluate_corpus(params, utts, mcfg)
    noisy = None
    mode = ctx.cfg["train.mode"]
    if mode in ("scala", "scala_sc") and ctx.data_dir.exists():
        noisy = run_audit(ctx, mode == "scala").noisy_rate
    summary = emit_report(metrics, output, cer, noisy)
    print(f"wrote {output.with_suffix('.csv')} and {output.with_suffix('.json')}")
    for k in sorted(summary):
        print(f"  {k}: {summary[k]}")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic corpus into data.dir"),
    "train": (cmd_train, "train on data.train_split, validating on data.val_split"),
    "evaluate": (cmd_evaluate, "pooled CER with SUB/DEL/INS breakdown for a checkpoint"),
    "audit-negatives": (cmd_audit, "noisy-negative rate of supervised vs unsupervised sampling"),
    "grad-check": (cmd_grad_check, "finite-difference check of the full model gradient"),
    "ctc-oracle": (cmd_ctc_oracle, "compare the CTC recursion with brute-force path enumeration"),
    "report": (cmd_report, "CSV/JSON report from a metrics stream"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (use with --set key=value or in a --config file):\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="overrides the 'seed' key")
    common.add_argument("--workdir", default=".", help="base directory for relative paths")
    common.add_argument("--threads", type=int, default=1, help="worker cap (computation is single-threaded)")

    parser = _Parser(prog="scala-asr", description="Contrastive CTC training on phoneme-aligned corpora.",
                     epilog=keys, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=keys, formatter_class=fmt)
        if name == "train":
            p.add_argument("--resume", help="continue from a checkpoint written by train")
        elif name == "evaluate":
            p.add_argument("--ckpt", required=True, help="model checkpoint (.sclc)")
            p.add_argument("--split", help="manifest prefix (default: data.val_split)")
        elif name == "audit-negatives":
            p.add_argument("--split", help="manifest prefix (default: data.train_split)")
        elif name == "ctc-oracle":
            p.add_argument("--max-S", dest="max_S", type=int, default=6)
            p.add_argument("--max-V", dest="max_V", type=int, default=4)
            p.add_argument("--max-y", dest="max_y", type=int, default=3)
            p.add_argument("--draws", type=int, default=10000, help="random emission matrices")
        elif name == "report":
            p.add_argument("--metrics", help="metrics JSONL (default: <train.out_dir>/metrics.jsonl)")
            p.add_argument("--output", help="output stem (default: <train.out_dir>/report)")
            p.add_argument("--ckpt", help="checkpoint for the error breakdown (default: best.sclc if present)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        ctx = Context(args)
        return COMMANDS[args.command][0](ctx)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ScalaError, FloatingPointError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
