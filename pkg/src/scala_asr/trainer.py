"""Alternating CTC / contrastive training with two Adam optimizers."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from . import model as M
from .config import Config
from .corpus import AlignmentTrack, PhonemeInventory, Utterance, downsample_alignment
from .errors import ConfigError, StepError
from .losses import ContrastiveConfig, count_noisy, ctc_loss, min_ctc_length, sample_contrastive, scl_loss
from .masking import MaskConfig, phoneme_mask_from_starts, plan_mask
from .metrics import validation_pass

log = logging.getLogger(__name__)

MODES = ("scala", "scala_sc", "scala_c", "baseline")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "scala"
    batch_size: int = 8
    steps: int = 2000
    lr_ctc: float = 1e-3
    lr_scl_start: float = 1e-3
    lr_scl_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mask: MaskConfig = field(default_factory=MaskConfig)
    scl: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    ratio_ctc: int = 1
    ratio_scl: int = 1
    eval_interval: int = 100
    checkpoint_interval: int = 500
    align_method: str = "majority"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if min(self.lr_ctc, self.lr_scl_start, self.lr_scl_end) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.ratio_ctc < 1 or self.ratio_scl < 1:
            raise ConfigError("update ratios must be >= 1")
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("intervals must be >= 1")
        # mode decides masking and negative filtering
        if self.mode == "baseline" and self.mask.mode != "none":
            object.__setattr__(self, "mask", replace(self.mask, mode="none"))
        supervised = self.mode == "scala"
        if self.mode in ("scala", "scala_sc") and self.scl.supervised != supervised:
            object.__setattr__(self, "scl", replace(self.scl, supervised=supervised))

    @property
    def uses_scl(self) -> bool:
        return self.mode in ("scala", "scala_sc")


def mask_config_from(cfg: Config) -> MaskConfig:
    return MaskConfig(
        mode=cfg["mask.mode"], p_e=cfg["mask.p_e"], P=cfg["mask.P"], F=cfg["mask.F"],
        exclude_silence_anchors=cfg["mask.exclude_silence_anchors"],
        replacement=cfg["mask.replacement"],
    )


def contrastive_config_from(cfg: Config) -> ContrastiveConfig:
    return ContrastiveConfig(tau=cfg["scl.tau"], K=cfg["scl.K"], supervised=cfg["scl.supervised"])


def train_config_from(cfg: Config) -> TrainConfig:
    return TrainConfig(
        mode=cfg["train.mode"], batch_size=cfg["train.batch_size"], steps=cfg["train.steps"],
        lr_ctc=cfg["train.lr_ctc"], lr_scl_start=cfg["train.lr_scl_start"],
        lr_scl_end=cfg["train.lr_scl_end"], beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
        eps=cfg["train.eps"], seed=cfg["seed"], mask=mask_config_from(cfg),
        scl=contrastive_config_from(cfg), ratio_ctc=cfg["train.ratio_ctc"],
        ratio_scl=cfg["train.ratio_scl"], eval_interval=cfg["train.eval_interval"],
        checkpoint_interval=cfg["train.checkpoint_interval"], align_method=cfg["align.method"],
    )


def model_config_from(cfg: Config, d_s: int, vocab_size: int) -> M.ModelConfig:
    return M.ModelConfig(
        d_s=d_s, vocab_size=vocab_size, d_f=cfg["model.d_f"], conv=M.parse_conv(cfg["model.conv"]),
        n_sab=cfg["model.n_sab"], n_heads=cfg["model.n_heads"], ffn_dim=cfg["model.ffn_dim"],
        activation=cfg["model.activation"], mask_replacement=cfg["mask.replacement"],
        stop_grad_targets=cfg["model.stop_grad_targets"], dropout=cfg["model.dropout"],
    )


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: nc.ParamStore) -> "AdamState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()})


def adam_update(params: nc.ParamStore, state: AdamState, lr: float, b1: float, b2: float, eps: float) -> None:
    """One bias-corrected Adam step using the ``grad`` buffers in ``params``."""
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule_scl(step: int, cfg: TrainConfig) -> float:
    """Linear decay over update indices ``0 .. steps-1``, constant afterwards."""
    last = max(cfg.steps - 1, 1)
    frac = min(max(step, 0) / last, 1.0)
    return cfg.lr_scl_start + (cfg.lr_scl_end - cfg.lr_scl_start) * frac


# --------------------------------------------------------------------------- state


@dataclass
class TrainState:
    params: nc.ParamStore
    opt_ctc: AdamState
    opt_scl: AdamState
    rng: np.random.Generator
    global_step: int = 0
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cursor: int = 0
    best_cer: float = float("inf")
    best_step: int = -1

    @classmethod
    def initial(cls, model_cfg: M.ModelConfig, seed: int) -> "TrainState":
        params = M.init_model(model_cfg, seed)
        rng = np.random.default_rng([seed, 1])
        return cls(params, AdamState.zeros(params), AdamState.zeros(params), rng)


def save_state(path: Path, state: TrainState, model_cfg: M.ModelConfig, train_cfg: TrainConfig) -> None:
    extra = {
        "state.global_step": str(state.global_step),
        "state.rng": json.dumps(state.rng.bit_generator.state, sort_keys=True),
        "state.order": ",".join(str(int(i)) for i in state.order),
        "state.cursor": str(state.cursor),
        "state.opt_ctc.t": str(state.opt_ctc.t),
        "state.opt_scl.t": str(state.opt_scl.t),
        "state.best_cer": repr(state.best_cer),
        "state.best_step": str(state.best_step),
        "train.mode": train_cfg.mode,
        "train.steps": str(train_cfg.steps),
        "train.seed": str(train_cfg.seed),
    }
    config = {f"model.{k}": v for k, v in model_cfg.to_items().items()}
    config.update(extra)
    blobs = {f"param.{n}": t.data for n, t in state.params.items()}
    for tag, opt in (("opt_ctc", state.opt_ctc), ("opt_scl", state.opt_scl)):
        for n in state.params.names():
            blobs[f"{tag}.m.{n}"] = opt.m[n]
            blobs[f"{tag}.v.{n}"] = opt.v[n]
    M.write_checkpoint(path, config, blobs)


def load_state(path: Path) -> tuple[TrainState, M.ModelConfig]:
    params, model_cfg, config = M.load_model(path)
    _, blobs = M.read_checkpoint(path)

    def opt(tag):
        return AdamState(
            {n: blobs[f"{tag}.m.{n}"].copy() for n in params.names()},
            {n: blobs[f"{tag}.v.{n}"].copy() for n in params.names()},
            int(config[f"state.{tag}.t"]),
        )

    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(config["state.rng"])
    order_txt = config["state.order"]
    order = np.array([int(x) for x in order_txt.split(",")] if order_txt else [], dtype=np.int64)
    state = TrainState(
        params, opt("opt_ctc"), opt("opt_scl"), rng,
        global_step=int(config["state.global_step"]), order=order,
        cursor=int(config["state.cursor"]), best_cer=float(config["state.best_cer"]),
        best_step=int(config["state.best_step"]),
    )
    return state, model_cfg


# --------------------------------------------------------------------------- steps


@dataclass
class StepReport:
    step: int
    ctc_loss: float | None
    scl_loss: float | None = None
    n_anchors: int = 0
    noisy_negatives: int = 0
    total_negatives: int = 0
    updates_ctc: int = 0
    updates_scl: int = 0
    skipped: tuple[str, ...] = ()


class TrackCache:
    """Encoder-rate alignments, computed once per utterance."""

    def __init__(self, inventory: PhonemeInventory, strides: Sequence[int], method: str = "majority"):
        self.inventory = inventory
        self.strides = list(strides)
        self.method = method
        self._tracks: dict[str, AlignmentTrack] = {}

    def __call__(self, utt: Utterance) -> AlignmentTrack:
        tr = self._tracks.get(utt.id)
        if tr is None:
            tr = downsample_alignment(utt, self.strides, self.inventory, self.method)
            self._tracks[utt.id] = tr
        return tr


def _ctc_phase(state, batch, cfg, model_cfg, tracks) -> tuple[float, list[str]]:
    losses, skipped = [], []
    for u in batch:
        track = tracks(u)
        if track.S < min_ctc_length(u.transcript):
            log.warning("skipping %s: %d frames too short for its target", u.id, track.S)
            skipped.append(u.id)
            continue
        plan = plan_mask(track, cfg.mask, state.rng)
        out = M.forward(state.params, u.features, plan, model_cfg, with_targets=False, rng=state.rng)
        losses.append(ctc_loss(out.log_probs, u.transcript))
    if not losses:
        raise StepError("no utterance in the batch can emit its CTC target")
    total = nc.scale(nc.add_all(losses), 1.0 / len(losses))
    nc.backward(total, state.params)
    adam_update(state.params, state.opt_ctc, cfg.lr_ctc, cfg.beta1, cfg.beta2, cfg.eps)
    return total.item(), skipped


def _scl_phase(state, batch, cfg, model_cfg, tracks, silence_index):
    losses = []
    n_anchor = noisy = total_neg = 0
    exclude = silence_index if cfg.mask.exclude_silence_anchors else None
    for u in batch:
        track = tracks(u)
        plan = plan_mask(track, cfg.mask, state.rng)
        if plan.size == 0:
            continue
        samples = sample_contrastive(plan, track, cfg.scl, state.rng, exclude)
        if not samples:
            continue
        out = M.forward(state.params, u.features, plan, model_cfg, with_head=False, rng=state.rng)
        losses.append(scl_loss(out.c, out.q, samples, cfg.scl.tau))
        a, b = count_noisy(samples, track)
        noisy += a
        total_neg += b
        n_anchor += len(samples)
    if not losses:
        return None, 0, 0, 0
    total = nc.scale(nc.add_all(losses), 1.0 / len(losses))
    nc.backward(total, state.params)
    lr = lr_schedule_scl(state.global_step, cfg)
    adam_update(state.params, state.opt_scl, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return total.item(), n_anchor, noisy, total_neg


def train_step(
    state: TrainState,
    batch: Sequence[Utterance],
    cfg: TrainConfig,
    model_cfg: M.ModelConfig,
    tracks: TrackCache,
) -> StepReport:
    """CTC update(s) on masked passes, then contrastive update(s) on freshly
    masked passes of the same batch (contrastive modes only)."""
    if not batch:
        raise StepError("empty batch")
    report = StepReport(step=state.global_step, ctc_loss=None)
    skipped: list[str] = []
    ctc_vals = []
    for _ in range(cfg.ratio_ctc):
        val, sk = _ctc_phase(state, batch, cfg, model_cfg, tracks)
        ctc_vals.append(val)
        skipped.extend(sk)
        report.updates_ctc += 1
    report.ctc_loss = float(np.mean(ctc_vals))
    if cfg.uses_scl:
        scl_vals = []
        for _ in range(cfg.ratio_scl):
            val, n_anchor, noisy, total_neg = _scl_phase(
                state, batch, cfg, model_cfg, tracks, tracks.inventory.silence_index)
            if val is None:
                log.warning("step %d: no contrastive anchors, update skipped", state.global_step)
                continue
            scl_vals.append(val)
            report.n_anchors += n_anchor
            report.noisy_negatives += noisy
            report.total_negatives += total_neg
            report.updates_scl += 1
        report.scl_loss = float(np.mean(scl_vals)) if scl_vals else None
    report.skipped = tuple(skipped)
    state.global_step += 1
    return report


def next_batch(state: TrainState, n: int, batch_size: int) -> np.ndarray:
    if state.cursor >= len(state.order):
        state.order = state.rng.permutation(n)
        state.cursor = 0
    batch = state.order[state.cursor:state.cursor + batch_size]
    state.cursor += batch_size
    return batch


# --------------------------------------------------------------------------- run loop


class MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []

    def emit(self, step: int, kind: str, value: float) -> None:
        rec = {"step": int(step), "kind": kind, "value": float(value)}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")


@dataclass
class RunResult:
    best_checkpoint: Path
    metrics: list[dict]
    state: TrainState
    model_cfg: M.ModelConfig


def run_training(
    cfg: TrainConfig,
    model_cfg: M.ModelConfig,
    train_utts: Sequence[Utterance],
    val_utts: Sequence[Utterance],
    inventory: PhonemeInventory,
    out_dir: Path,
    resume: Path | None = None,
) -> RunResult:
    """Train for ``cfg.steps`` steps, evaluating and checkpointing periodically.

    Writes ``metrics.jsonl``, ``ckpt_<step>.sclc``, ``last.sclc`` and
    ``best.sclc`` (lowest validation CER, earliest on ties) under ``out_dir``.
    """
    if not train_utts or not val_utts:
        raise ConfigError("training and validation corpora must be non-empty")
    if {u.id for u in train_utts} & {u.id for u in val_utts}:
        raise ConfigError("validation utterances overlap the training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if resume is None:
        metrics_path.write_text("", encoding="utf-8")
        state = TrainState.initial(model_cfg, cfg.seed)
    else:
        state, ckpt_cfg = load_state(resume)
        if ckpt_cfg != model_cfg:
            raise ConfigError("checkpoint model config differs from the requested one")
    writer = MetricsWriter(metrics_path)
    tracks = TrackCache(inventory, model_cfg.strides, cfg.align_method)
    best_path = out_dir / "best.sclc"
    if resume is None or not best_path.exists():
        save_state(best_path, state, model_cfg, cfg)

    while state.global_step < cfg.steps:
        idx = next_batch(state, len(train_utts), cfg.batch_size)
        rep = train_step(state, [train_utts[i] for i in idx], cfg, model_cfg, tracks)
        step = state.global_step
        writer.emit(step, "train_ctc", rep.ctc_loss)
        if rep.scl_loss is not None:
            writer.emit(step, "train_scl", rep.scl_loss)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            val_ctc, cer = validation_pass(state.params, val_utts, model_cfg)
            writer.emit(step, "val_ctc", val_ctc)
            writer.emit(step, "val_cer", cer.cer)
            if cer.cer < state.best_cer:
                state.best_cer, state.best_step = cer.cer, step
                save_state(best_path, state, model_cfg, cfg)
        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            save_state(out_dir / f"ckpt_{step:06d}.sclc", state, model_cfg, cfg)
            save_state(out_dir / "last.sclc", state, model_cfg, cfg)
    return RunResult(best_path, writer.records, state, model_cfg)


# --------------------------------------------------------------------------- gradient probe


def model_grad_check(
    model_cfg: M.ModelConfig,
    seed: int,
    utt_frames: int = 24,
    n_labels: int = 5,
    max_entries: int | None = 8,
    tol: float = 1e-4,
) -> nc.GradCheckReport:
    """Finite-difference check of CTC + contrastive loss through the whole
    encoder on a random probe utterance with a fixed phoneme mask."""
    rng = np.random.default_rng([seed, 7])
    params = M.init_model(model_cfg, seed)
    feats = rng.standard_normal((model_cfg.d_s, utt_frames))
    S = M.output_length(utt_frames, model_cfg)
    labels = rng.integers(0, n_labels, size=S)
    track = AlignmentTrack.from_labels(labels)
    starts = np.sort(rng.choice(S, size=min(2, S), replace=False))
    plan = phoneme_mask_from_starts(track, starts, 1)
    n_tok = max(1, min(S // 3, 4))
    target = [int(x) for x in rng.integers(1, model_cfg.vocab_size, size=n_tok)]
    samples = sample_contrastive(plan, track, ContrastiveConfig(K=min(8, S - 1), supervised=True), rng)

    def f(p):
        out = M.forward(p, feats, plan, model_cfg)
        loss = ctc_loss(out.log_probs, target)
        if samples:
            loss = nc.add(loss, scl_loss(out.c, out.q, samples, 0.1))
        return loss

    return nc.finite_diff_check(f, params, max_entries=max_entries, seed=seed, tol=tol)
