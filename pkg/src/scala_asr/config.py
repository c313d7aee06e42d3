"""Flat ``key=value`` configuration with a closed set of typed keys."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: dict[str, Key] = {}


def _k(name, parse, default, help):
    KEYS[name] = Key(name, parse, default, help)


_k("seed", int, 0, "master seed for every random stream")
_k("data.dir", str, "data", "corpus directory (relative to --workdir)")
_k("data.train_split", str, "train", "manifest prefix used for training")
_k("data.val_split", str, "test", "manifest prefix used for validation/evaluation")
_k("data.silence_label", str, "sil", "phoneme label treated as silence")
_k("align.method", str, "majority", "encoder-rate label mapping: majority | center")

_k("synth.n_utts", int, 250, "utterances generated in total")
_k("synth.n_test", int, 50, "of which held out as the test split")
_k("synth.n_phonemes", int, 10, "phoneme inventory size including silence")
_k("synth.d_s", int, 12, "feature dimension")
_k("synth.n_tokens", int, 20, "output token vocabulary size (without blank)")
_k("synth.phonemes_per_token", _int_tuple, (2,), "allowed phoneme counts per token, e.g. 1,2")
_k("synth.tokens_min", int, 4, "minimum tokens per utterance")
_k("synth.tokens_max", int, 8, "maximum tokens per utterance")
_k("synth.dur_mean", float, 3.0, "mean phoneme duration in frames")
_k("synth.dur_max", int, 8, "maximum phoneme duration in frames")
_k("synth.sigma", float, 0.5, "frame noise standard deviation")
_k("synth.center_scale", float, 1.0, "standard deviation of phoneme cluster centres")
_k("synth.min_separation", float, 1.0, "minimum distance between cluster centres")
_k("synth.silence_edges", _bool, True, "pad utterances with leading/trailing silence")
_k("synth.pause_prob", float, 0.0, "probability of a silence between tokens")
_k("synth.boundary_jitter", int, 0, "perturb recorded boundaries by up to +-j frames")
_k("synth.markov_successors", int, 0, "0: i.i.d. tokens; k: k preferred successors per token")
_k("synth.markov_strength", float, 0.9, "probability mass on the preferred successors")
_k("synth.syllabic", _bool, True, "tokens are initial+final phoneme pairs (or a lone final)")
_k("synth.distinct_neighbours", _bool, True, "adjacent tokens never repeat a phoneme across the join")

_k("model.d_f", int, 64, "latent dimension")
_k("model.conv", str, "3:2:64", "conv stack as kernel:stride:channels,...")
_k("model.n_sab", int, 2, "number of self-attention blocks")
_k("model.n_heads", int, 4, "attention heads")
_k("model.ffn_dim", int, 128, "feed-forward width")
_k("model.activation", str, "gelu", "gelu | relu")
_k("model.dropout", float, 0.0, "residual dropout rate inside the attention blocks (training only)")
_k("model.stop_grad_targets", _bool, False, "block gradients through the target projection input")

_k("mask.mode", str, "phoneme", "phoneme | fixed | none")
_k("mask.p_e", float, 0.065, "probability that a position starts a mask")
_k("mask.P", int, 2, "phonemes masked per start (phoneme mode)")
_k("mask.F", int, 4, "frames masked per start (fixed mode)")
_k("mask.exclude_silence_anchors", _bool, False, "drop silence positions from the anchor set")
_k("mask.replacement", str, "learned", "learned | zero")

_k("scl.tau", float, 0.1, "contrastive temperature")
_k("scl.K", int, 100, "negatives per anchor")
_k("scl.supervised", _bool, True, "label-filtered negatives (audit only; train.mode decides in training)")

_k("train.mode", str, "scala", "scala | scala_sc | scala_c | baseline")
_k("train.batch_size", int, 8, "utterances per mini-batch")
_k("train.steps", int, 2000, "training steps (one CTC and one SCL update each)")
_k("train.lr_ctc", float, 1e-3, "constant learning rate of the CTC optimizer")
_k("train.lr_scl_start", float, 1e-3, "initial learning rate of the contrastive optimizer")
_k("train.lr_scl_end", float, 1e-4, "final learning rate of the contrastive optimizer")
_k("train.beta1", float, 0.9, "Adam beta1")
_k("train.beta2", float, 0.999, "Adam beta2")
_k("train.eps", float, 1e-8, "Adam epsilon")
_k("train.ratio_ctc", int, 1, "CTC updates per step")
_k("train.ratio_scl", int, 1, "contrastive updates per step")
_k("train.eval_interval", int, 100, "steps between validation passes")
_k("train.checkpoint_interval", int, 500, "steps between periodic checkpoints")
_k("train.out_dir", str, "run", "output directory for checkpoints and metrics")

_k("audit.n_trials", int, 20, "mask/negative sampling repetitions per utterance")
_k("grad.seeds", int, 5, "seeds for grad-check")
_k("grad.max_entries", int, 8, "entries perturbed per parameter in grad-check")
_k("grad.utt_frames", int, 24, "frames of the synthetic probe utterance in grad-check")


class Config:
    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: key.default for k, key in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = KEYS[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def items(self) -> list[tuple[str, Any]]:
        return sorted(self._values.items())

    def as_text(self) -> dict[str, str]:
        out = {}
        for k, v in self.items():
            out[k] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    def copy(self) -> "Config":
        return Config(dict(self._values))


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    """Defaults, then the file, then ``key=value`` overrides in order."""
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for k, v in parse_lines(text.splitlines(), str(path)).items():
            cfg.set(k, v)
    for item in overrides:
        for k, v in parse_lines([item], "--set").items():
            cfg.set(k, v)
    return cfg


def describe_keys() -> str:
    return "\n".join(f"  {k.name:<30} {k.help} (default: {k.default})" for k in KEYS.values())
