"""Mask planning over encoder positions.

Phoneme masks cover whole alignment spans: every sampled start masks the span
that contains it plus the following ``P - 1`` spans. Fixed masks cover ``F``
consecutive positions from each start. Overlaps are unioned.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import AlignmentTrack
from .errors import ConfigError, ContractError

MASK_MODES = ("phoneme", "fixed", "none")


@dataclass(frozen=True)
class MaskConfig:
    mode: str = "phoneme"
    p_e: float = 0.065
    P: int = 2
    F: int = 4
    exclude_silence_anchors: bool = False
    replacement: str = "learned"

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ConfigError(f"mask.mode must be one of {MASK_MODES}, got {self.mode!r}")
        if not 0.0 <= self.p_e <= 1.0:
            raise ConfigError("mask.p_e must lie in [0, 1]")
        if self.P < 1 or self.F < 1:
            raise ConfigError("mask.P and mask.F must be >= 1")
        if self.replacement not in ("learned", "zero"):
            raise ConfigError("mask.replacement must be 'learned' or 'zero'")


@dataclass(frozen=True, eq=False)
class MaskPlan:
    S: int
    masked: np.ndarray
    spans: tuple[tuple[int, int], ...]
    starts: np.ndarray

    @classmethod
    def from_indices(cls, S: int, indices, starts=()) -> "MaskPlan":
        m = np.unique(np.asarray(indices, dtype=np.intp))
        if m.size and (m[0] < 0 or m[-1] >= S):
            raise ContractError("mask index out of range")
        return cls(S, m, _runs(m), np.unique(np.asarray(starts, dtype=np.intp)))

    @classmethod
    def empty(cls, S: int) -> "MaskPlan":
        return cls.from_indices(S, [])

    @property
    def size(self) -> int:
        return int(self.masked.size)

    def __len__(self) -> int:
        return self.size

    def union(self, other: "MaskPlan") -> "MaskPlan":
        if other.S != self.S:
            raise ContractError("cannot union plans over different lengths")
        return MaskPlan.from_indices(
            self.S, np.concatenate([self.masked, other.masked]),
            np.concatenate([self.starts, other.starts]),
        )


def _runs(sorted_idx: np.ndarray) -> tuple[tuple[int, int], ...]:
    if sorted_idx.size == 0:
        return ()
    breaks = np.flatnonzero(np.diff(sorted_idx) != 1) + 1
    return tuple((int(r[0]), int(r[-1]) + 1) for r in np.split(sorted_idx, breaks))


def sample_starts(S: int, p_e: float, rng) -> np.ndarray:
    """Each position becomes a start independently with probability ``p_e``."""
    return np.flatnonzero(rng.random(S) < p_e)


def phoneme_mask_from_starts(track: AlignmentTrack, starts: Sequence[int], P: int) -> MaskPlan:
    owner = track.span_of()
    n_spans = len(track.spans)
    idx = []
    for s in starts:
        j = int(owner[s])
        last = min(j + P, n_spans) - 1
        idx.append(np.arange(track.spans[j][1], track.spans[last][2]))
    return MaskPlan.from_indices(track.S, np.concatenate(idx) if idx else [], starts)


def fixed_mask_from_starts(S: int, starts: Sequence[int], F: int) -> MaskPlan:
    idx = [np.arange(s, min(s + F, S)) for s in starts]
    return MaskPlan.from_indices(S, np.concatenate(idx) if idx else [], starts)


def plan_phoneme_mask(track: AlignmentTrack, cfg: MaskConfig, rng, starts=None) -> MaskPlan:
    if starts is None:
        starts = sample_starts(track.S, cfg.p_e, rng)
    return phoneme_mask_from_starts(track, starts, cfg.P)


def plan_fixed_mask(S: int, cfg: MaskConfig, rng, starts=None) -> MaskPlan:
    if starts is None:
        starts = sample_starts(S, cfg.p_e, rng)
    return fixed_mask_from_starts(S, starts, cfg.F)


def plan_mask(track: AlignmentTrack, cfg: MaskConfig, rng) -> MaskPlan:
    if cfg.mode == "phoneme":
        return plan_phoneme_mask(track, cfg, rng)
    if cfg.mode == "fixed":
        return plan_fixed_mask(track.S, cfg, rng)
    return MaskPlan.empty(track.S)


def apply_mask(z: nc.Tensor, plan: MaskPlan, mask_vector: nc.Tensor) -> nc.Tensor:
    """Replace masked columns of ``z[d_f x S]`` with ``mask_vector``."""
    if plan.S != z.shape[1]:
        raise ContractError(f"plan over {plan.S} positions applied to {z.shape[1]} columns")
    if plan.size == 0:
        return z
    return nc.overwrite_columns(z, plan.masked, mask_vector)
