"""CTC loss on (masked) forward passes and the label-filtered contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import AlignmentTrack
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    InfeasibleTargetError,
    NoAnchorsError,
    SimilarityUndefinedError,
)
from .masking import MaskPlan

BLANK = 0


# --------------------------------------------------------------------------- CTC


def min_ctc_length(targets: Sequence[int]) -> int:
    """Shortest frame count able to emit ``targets`` (repeats need a blank)."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _extend(targets: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(targets) + 1, dtype=np.intp)
    ext[1::2] = targets
    return ext


def ctc_forward_backward(lp: np.ndarray, targets: Sequence[int]):
    """Log-space alpha/beta recursions over the blank-interleaved targets.

    ``alpha[t, s]`` includes the emission at ``t``; ``beta[t, s]`` covers
    frames ``t+1..S-1`` only, so ``alpha + beta - log_p`` is the state
    occupancy at ``t``. Returns ``(log_p, alpha, beta, ext)``.
    """
    S = lp.shape[0]
    ext = _extend(targets)
    L = len(ext)
    # transition s-2 -> s allowed for non-blank labels differing from ext[s-2]
    skip = np.zeros(L, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    em = lp[:, ext]  # S x L
    neg = -np.inf

    alpha = np.full((S, L), neg)
    alpha[0, 0] = em[0, 0]
    if L > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, S):
        prev = alpha[t - 1]
        a1 = np.concatenate(([neg], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([neg, neg], prev[:-2])), neg)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + em[t]

    beta = np.full((S, L), neg)
    beta[S - 1, L - 1] = 0.0
    if L > 1:
        beta[S - 1, L - 2] = 0.0
    skip_next = np.concatenate((skip[2:], [False, False]))
    for t in range(S - 2, -1, -1):
        nxt = beta[t + 1] + em[t + 1]
        b1 = np.concatenate((nxt[1:], [neg]))
        b2 = np.where(skip_next, np.concatenate((nxt[2:], [neg, neg])), neg)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2)

    tail = alpha[S - 1, L - 1] if L == 1 else np.logaddexp(alpha[S - 1, L - 1], alpha[S - 1, L - 2])
    return float(tail), alpha, beta, ext


def ctc_loss(log_probs: nc.Tensor, targets: Sequence[int]) -> nc.Tensor:
    """``-log sum_{pi in valid paths} prod_t p(pi_t)`` for ``log_probs[S x V]``."""
    targets = [int(t) for t in targets]
    S, V = log_probs.shape
    if len(targets) < 1:
        raise ContractError("CTC target must contain at least one token")
    if any(t == BLANK or not 0 < t < V for t in targets):
        raise ContractError("CTC targets must be non-blank indices below the vocabulary size")
    need = min_ctc_length(targets)
    if S < need:
        raise InfeasibleTargetError(f"{S} frames cannot emit a target needing {need}")
    log_p, alpha, beta, ext = ctc_forward_backward(log_probs.data, targets)
    if not np.isfinite(log_p):
        raise InfeasibleTargetError("target has zero probability under the emissions")

    def bw(g):
        occ = np.exp(alpha + beta - log_p)  # S x L
        grad = np.zeros((S, V))
        np.add.at(grad, (slice(None), ext), occ)
        return (-g[0] * grad,)

    return nc.custom_op(np.array([-log_p]), (log_probs,), bw)


def collapse_path(path: Sequence[int]) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return tuple(out)


@lru_cache(maxsize=64)
def _path_groups(S: int, V: int) -> tuple[tuple[tuple[int, ...], np.ndarray], ...]:
    grid = np.indices((V,) * S).reshape(S, -1).T  # every path, one per row
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, path in enumerate(grid):
        groups.setdefault(collapse_path(path), []).append(i)
    return tuple((k, np.array(v)) for k, v in groups.items())


def ctc_enumerate(lp: np.ndarray) -> dict[tuple[int, ...], float]:
    """Brute-force log-probability of every label sequence reachable from
    ``lp[S x V]`` by summing over all ``V**S`` frame paths."""
    S, V = lp.shape
    grid = np.indices((V,) * S).reshape(S, -1)
    scores = lp[np.arange(S)[:, None], grid].sum(axis=0)
    return {k: float(np.logaddexp.reduce(scores[idx])) for k, idx in _path_groups(S, V)}


# --------------------------------------------------------------------------- contrastive sampling


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    K: int = 100
    supervised: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("scl.tau must be > 0")
        if self.K < 1:
            raise ConfigError("scl.K must be >= 1")


@dataclass(frozen=True, eq=False)
class ContrastiveSample:
    anchor: int
    negatives: np.ndarray


def sample_contrastive(
    plan: MaskPlan,
    track: AlignmentTrack,
    cfg: ContrastiveConfig,
    rng,
    exclude_label: int | None = None,
) -> list[ContrastiveSample]:
    """One sample per masked position; negatives drawn uniformly without
    replacement from the other positions (label-filtered when supervised).

    ``exclude_label`` drops anchors carrying that label (used to skip silence).
    """
    if plan.S != track.S:
        raise ContractError("mask plan and alignment track disagree on S")
    labels = track.labels
    everything = np.arange(track.S)
    out = []
    for m in plan.masked:
        m = int(m)
        if exclude_label is not None and labels[m] == exclude_label:
            continue
        if cfg.supervised:
            cand = everything[labels != labels[m]]
        else:
            cand = everything[everything != m]
        if cand.size == 0:
            continue
        if cand.size <= cfg.K:
            neg = cand
        else:
            neg = np.sort(rng.choice(cand, size=cfg.K, replace=False))
        out.append(ContrastiveSample(m, neg))
    return out


def count_noisy(samples: Sequence[ContrastiveSample], track: AlignmentTrack) -> tuple[int, int]:
    """``(noisy, total)`` negative pairs, noisy meaning same label as the anchor."""
    noisy = total = 0
    for s in samples:
        noisy += int(np.count_nonzero(track.labels[s.negatives] == track.labels[s.anchor]))
        total += len(s.negatives)
    return noisy, total


# --------------------------------------------------------------------------- contrastive loss


def scl_loss(c: nc.Tensor, q: nc.Tensor, samples: Sequence[ContrastiveSample], tau: float) -> nc.Tensor:
    """Mean over anchors ``m`` of
    ``-log softmax_{n in {m} + K_m}(cos(c_m, q_n) / tau)`` evaluated at ``n = m``.
    """
    if not samples:
        raise NoAnchorsError("no contrastive anchors")
    if c.shape != q.shape:
        raise ContractError("context and target features must share a shape")
    S = c.shape[1]
    anchors = np.array([s.anchor for s in samples], dtype=np.intp)
    members = np.zeros((len(samples), S), dtype=bool)
    for i, s in enumerate(samples):
        if s.anchor in s.negatives:
            raise ContractError("anchor index listed among its own negatives")
        members[i, s.anchor] = True
        members[i, s.negatives] = True
    used = np.flatnonzero(members.any(axis=0))
    if anchors.max() >= S or used.max() >= S:
        raise ContractError("contrastive index out of range")

    # only normalise the columns that are actually referenced
    try:
        c_hat = nc.normalize_columns(nc.columns(c, anchors))
        q_hat = nc.normalize_columns(nc.columns(q, used))
    except DomainError as exc:
        raise SimilarityUndefinedError(str(exc)) from None
    logits = nc.scale(nc.matmul(nc.transpose(c_hat), q_hat), 1.0 / tau)  # A x |used|
    local = np.searchsorted(used, anchors)
    lse = nc.masked_logsumexp(logits, members[:, used])
    pos = nc.take(logits, np.arange(len(samples)), local)
    return nc.mean(nc.sub(lse, pos))
