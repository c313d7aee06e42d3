"""Error-rate decomposition, noisy-negative auditing and report emission."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import AlignmentTrack, PhonemeInventory, Utterance, downsample_alignment
from .errors import ContractError, ParseError
from .losses import ContrastiveConfig, count_noisy, ctc_loss, min_ctc_length, sample_contrastive
from .masking import MaskConfig, plan_mask
from . import model as M

METRIC_KINDS = ("train_ctc", "train_scl", "val_ctc", "val_cer")


@dataclass(frozen=True)
class CerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def cer(self) -> float:
        return 100.0 * self.errors / self.ref_tokens

    @property
    def sub_rate(self) -> float:
        return 100.0 * self.substitutions / self.ref_tokens

    @property
    def del_rate(self) -> float:
        return 100.0 * self.deletions / self.ref_tokens

    @property
    def ins_rate(self) -> float:
        return 100.0 * self.insertions / self.ref_tokens

    def __add__(self, other: "CerReport") -> "CerReport":
        return CerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_tokens + other.ref_tokens,
        )


def edit_alignment(ref: Sequence, hyp: Sequence) -> CerReport:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    The backtrace prefers substitution (or match), then deletion, then
    insertion whenever several moves lie on a minimal path.
    """
    if len(ref) == 0:
        raise ContractError("error rate undefined for an empty reference")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    sub = dele = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + cost:
                sub += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return CerReport(sub, dele, ins, n)


def evaluate_corpus(params, utterances: Iterable[Utterance], cfg: M.ModelConfig) -> CerReport:
    """Pooled counts over unmasked greedy decodes."""
    total = None
    for u in utterances:
        out = M.forward(params, u.features, None, cfg, with_targets=False)
        rep = edit_alignment(list(u.transcript), M.greedy_decode(out.log_probs))
        total = rep if total is None else total + rep
    if total is None:
        raise ContractError("cannot evaluate an empty corpus")
    return total


def validation_pass(params, utterances: Sequence[Utterance], cfg: M.ModelConfig) -> tuple[float, CerReport]:
    """Mean unmasked CTC loss (feasible utterances only) and pooled CER."""
    losses = []
    total = None
    for u in utterances:
        out = M.forward(params, u.features, None, cfg, with_targets=False)
        if out.S >= min_ctc_length(u.transcript):
            losses.append(ctc_loss(out.log_probs, u.transcript).item())
        rep = edit_alignment(list(u.transcript), M.greedy_decode(out.log_probs))
        total = rep if total is None else total + rep
    if total is None:
        raise ContractError("cannot evaluate an empty corpus")
    return (float(np.mean(losses)) if losses else float("nan")), total


# --------------------------------------------------------------------------- negative auditing


@dataclass(frozen=True)
class NegativeAudit:
    total_pairs: int
    noisy_pairs: int

    @property
    def noisy_rate(self) -> float:
        return self.noisy_pairs / self.total_pairs if self.total_pairs else 0.0


def audit_tracks(
    tracks: Sequence[AlignmentTrack],
    mask_cfg: MaskConfig,
    scl_cfg: ContrastiveConfig,
    n_trials: int,
    seed: int,
    silence_index: int | None = None,
) -> NegativeAudit:
    if n_trials < 1:
        raise ContractError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    exclude = silence_index if mask_cfg.exclude_silence_anchors else None
    noisy = total = 0
    for _ in range(n_trials):
        for tr in tracks:
            plan = plan_mask(tr, mask_cfg, rng)
            samples = sample_contrastive(plan, tr, scl_cfg, rng, exclude)
            a, b = count_noisy(samples, tr)
            noisy += a
            total += b
    return NegativeAudit(total, noisy)


def audit_negatives(
    corpus: Sequence[Utterance],
    inventory: PhonemeInventory,
    strides: Sequence[int],
    mask_cfg: MaskConfig,
    scl_cfg: ContrastiveConfig,
    n_trials: int,
    seed: int,
    align_method: str = "majority",
) -> NegativeAudit:
    """Simulate mask planning and negative sampling; count same-label pairs."""
    tracks = [downsample_alignment(u, strides, inventory, align_method) for u in corpus]
    return audit_tracks(tracks, mask_cfg, scl_cfg, n_trials, seed, inventory.silence_index)


# --------------------------------------------------------------------------- reports


def read_metrics(path: Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            step, kind, value = int(rec["step"]), rec["kind"], float(rec["value"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed metrics record ({exc})") from None
        if kind not in METRIC_KINDS:
            raise ParseError(f"{path}:{lineno}: unknown metric kind {kind!r}")
        records.append({"step": step, "kind": kind, "value": value})
    return records


def metrics_table(records: Sequence[dict]) -> list[dict]:
    """One row per step; the last value wins when a kind repeats at a step."""
    rows: dict[int, dict] = {}
    for r in records:
        rows.setdefault(r["step"], {})[r["kind"]] = r["value"]
    return [{"step": s, **rows[s]} for s in sorted(rows)]


def summarize(rows: Sequence[dict], cer: CerReport | None = None,
              noisy_rate: float | None = None) -> dict:
    """Final/best validation CER plus optional breakdown and audit values."""
    cers = [(r["step"], r["val_cer"]) for r in rows if r.get("val_cer") is not None]
    summary = {
        "final_cer": cers[-1][1] if cers else None,
        "best_cer": min(c for _, c in cers) if cers else None,
        "best_step": min(cers, key=lambda sc: (sc[1], sc[0]))[0] if cers else None,
        "sub_rate": cer.sub_rate if cer else None,
        "del_rate": cer.del_rate if cer else None,
        "ins_rate": cer.ins_rate if cer else None,
        "noisy_negative_rate": noisy_rate,
    }
    return summary


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step",) + METRIC_KINDS)
    for r in rows:
        w.writerow([r["step"]] + [repr(r[k]) if k in r else "" for k in METRIC_KINDS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {"step": int(rec["step"])}
        for k in METRIC_KINDS:
            if rec[k] != "":
                row[k] = float(rec[k])
        rows.append(row)
    return rows


def emit_report(metrics_path: Path, output_path: Path, cer: CerReport | None = None,
                noisy_rate: float | None = None) -> dict:
    """Write ``<output>.csv`` and ``<output>.json`` from a metrics stream."""
    rows = metrics_table(read_metrics(metrics_path))
    summary = summarize(rows, cer, noisy_rate)
    output_path = Path(output_path)
    output_path.with_suffix(".csv").write_text(rows_to_csv(rows), encoding="utf-8")
    output_path.with_suffix(".json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary
