"""Utterances, transcripts and phoneme alignments: data model, file formats,
encoder-rate alignment downsampling and a synthetic corpus generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AlignmentCoverageError,
    DataError,
    GenerationError,
    InventoryError,
    MissingUtteranceError,
    ParseError,
)

FEATURE_MAGIC = b"SCLF"
BLANK = "<blk>"


@dataclass(frozen=True)
class PhonemeInventory:
    phonemes: tuple[str, ...]
    silence_label: str = "sil"

    def __post_init__(self):
        if len(set(self.phonemes)) != len(self.phonemes) or any(not p for p in self.phonemes):
            raise InventoryError("phoneme labels must be unique and non-empty")
        if self.silence_label not in self.phonemes:
            raise InventoryError(f"silence label {self.silence_label!r} not in inventory")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.phonemes)})

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise InventoryError(f"unknown phoneme {label!r}") from None

    @property
    def silence_index(self) -> int:
        return self._index[self.silence_label]

    def __len__(self) -> int:
        return len(self.phonemes)


@dataclass(frozen=True)
class Vocabulary:
    """Output tokens; index 0 is the implicit CTC blank."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise InventoryError("vocabulary tokens must be unique")
        if BLANK in self.tokens:
            raise InventoryError("blank marker must not be a regular token")
        object.__setattr__(self, "_index", {t: i + 1 for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens) + 1

    def encode(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InventoryError(f"unknown token {token!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i - 1] for i in ids]


@dataclass(frozen=True)
class PhonemeSegment:
    label: str
    start: int
    end: int


@dataclass(eq=False)
class Utterance:
    id: str
    features: np.ndarray  # d_s x T
    transcript: tuple[int, ...]
    segments: tuple[PhonemeSegment, ...]

    @property
    def T(self) -> int:
        return self.features.shape[1]

    def frame_labels(self) -> list[str]:
        out: list[str] = []
        for seg in self.segments:
            out.extend([seg.label] * (seg.end - seg.start))
        return out

    def validate(self, inventory: PhonemeInventory, vocab: Vocabulary) -> None:
        if self.features.ndim != 2 or self.T < 1:
            raise DataError(f"{self.id}: features must be d_s x T with T >= 1")
        if len(self.transcript) < 1:
            raise DataError(f"{self.id}: empty transcript")
        for tok in self.transcript:
            if not 1 <= tok < vocab.size:
                raise InventoryError(f"{self.id}: token index {tok} outside vocabulary")
        for seg in self.segments:
            inventory.index(seg.label)
        check_coverage(self.segments, self.T, self.id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.transcript == other.transcript
            and self.segments == other.segments
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class AlignmentTrack:
    labels: np.ndarray  # int phoneme indices, length S
    spans: tuple[tuple[int, int, int], ...]  # (label, start, end) at encoder rate

    @property
    def S(self) -> int:
        return len(self.labels)

    def span_of(self) -> np.ndarray:
        """Index of the span containing each encoder position."""
        owner = np.empty(self.S, dtype=np.intp)
        for j, (_, s, e) in enumerate(self.spans):
            owner[s:e] = j
        return owner

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "AlignmentTrack":
        labels = np.asarray(labels, dtype=np.intp)
        spans = []
        start = 0
        for i in range(1, len(labels) + 1):
            if i == len(labels) or labels[i] != labels[start]:
                spans.append((int(labels[start]), start, i))
                start = i
        return cls(labels=labels, spans=tuple(spans))


def check_coverage(segments: Sequence[PhonemeSegment], T: int, utt_id: str = "?") -> None:
    """Segments must be sorted, non-empty and tile ``[0, T)`` exactly."""
    pos = 0
    for seg in segments:
        if seg.start >= seg.end:
            raise AlignmentCoverageError(f"{utt_id}: empty segment {seg}")
        if seg.start != pos:
            kind = "gap" if seg.start > pos else "overlap"
            raise AlignmentCoverageError(f"{utt_id}: {kind} at frame {pos}")
        pos = seg.end
    if pos != T:
        raise AlignmentCoverageError(f"{utt_id}: segments cover [0, {pos}) but T = {T}")


# --------------------------------------------------------------------------- file formats


def write_features(path: Path, features: np.ndarray) -> None:
    d_s, T = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", d_s, T))
        fh.write(np.ascontiguousarray(features.T, dtype="<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise ParseError(f"{path}: not a feature file")
    d_s, T = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * d_s * T:
        raise ParseError(f"{path}: expected {d_s * T} values, found {len(body) // 4}")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, d_s)
    return frames.T.astype(np.float64)


def read_label_file(path: Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def load_inventory(path: Path, silence_label: str = "sil") -> PhonemeInventory:
    return PhonemeInventory(tuple(read_label_file(path)), silence_label)


def load_vocab(path: Path) -> Vocabulary:
    lines = read_label_file(path)
    if not lines or lines[0] != BLANK:
        raise InventoryError(f"{path}: first line must be the blank marker {BLANK}")
    return Vocabulary(tuple(lines[1:]))


def _tsv_rows(path: Path, min_fields: int):
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < min_fields:
            raise ParseError(f"{path}:{lineno}: expected {min_fields} tab-separated fields")
        yield lineno, parts


def read_alignments(path: Path) -> dict[str, list[PhonemeSegment]]:
    out: dict[str, list[PhonemeSegment]] = {}
    for lineno, parts in _tsv_rows(path, 4):
        try:
            start, end = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer frame index") from None
        out.setdefault(parts[0], []).append(PhonemeSegment(parts[3], start, end))
    for segs in out.values():
        segs.sort(key=lambda s: (s.start, s.end))
    return out


def read_transcripts(path: Path) -> dict[str, list[str]]:
    return {parts[0]: parts[1].split() for _, parts in _tsv_rows(path, 2)}


def load_manifest(
    manifest_path: Path,
    features_dir: Path,
    alignment_path: Path,
    transcript_path: Path,
    inventory: PhonemeInventory,
    vocab: Vocabulary,
) -> list[Utterance]:
    alignments = read_alignments(alignment_path)
    transcripts = read_transcripts(transcript_path)
    utts = []
    for _, parts in _tsv_rows(manifest_path, 2):
        utt_id, rel = parts[0], parts[1]
        if utt_id not in alignments:
            raise MissingUtteranceError(f"{utt_id}: no alignment entry")
        if utt_id not in transcripts:
            raise MissingUtteranceError(f"{utt_id}: no transcript entry")
        feats = read_features(Path(features_dir) / rel)
        try:
            ids = tuple(vocab.encode(t) for t in transcripts[utt_id])
        except InventoryError as exc:
            raise InventoryError(f"{utt_id}: {exc}") from None
        utt = Utterance(utt_id, feats, ids, tuple(alignments[utt_id]))
        utt.validate(inventory, vocab)
        utts.append(utt)
    return utts


def write_corpus_files(
    out_dir: Path,
    utts: Sequence[Utterance],
    vocab: Vocabulary,
    manifest_name: str = "manifest.tsv",
) -> None:
    """Write features, alignments, transcripts and a manifest for ``utts``."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    man, ali, tra = [], [], []
    for u in utts:
        rel = f"{u.id}.sclf"
        write_features(feat_dir / rel, u.features)
        man.append(f"{u.id}\t{rel}\n")
        ali.extend(f"{u.id}\t{s.start}\t{s.end}\t{s.label}\n" for s in u.segments)
        tra.append(f"{u.id}\t{' '.join(vocab.decode(u.transcript))}\n")
    (out_dir / manifest_name).write_text("".join(man), encoding="utf-8")
    _append(out_dir / "alignments.tsv", ali)
    _append(out_dir / "transcripts.tsv", tra)


def _append(path: Path, lines: list[str]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_corpus_dir(corpus_dir: Path, split: str | None = None, silence_label: str = "sil"):
    """Load a generated corpus directory: returns ``(utts, inventory, vocab)``."""
    corpus_dir = Path(corpus_dir)
    inventory = load_inventory(corpus_dir / "phonemes.txt", silence_label)
    vocab = load_vocab(corpus_dir / "vocab.txt")
    manifest = corpus_dir / (f"{split}.manifest.tsv" if split else "manifest.tsv")
    utts = load_manifest(
        manifest,
        corpus_dir / "features",
        corpus_dir / "alignments.tsv",
        corpus_dir / "transcripts.tsv",
        inventory,
        vocab,
    )
    return utts, inventory, vocab


# --------------------------------------------------------------------------- alignment downsampling


def downsample_alignment(
    utt: Utterance,
    strides: Sequence[int],
    inventory: PhonemeInventory,
    method: str = "majority",
) -> AlignmentTrack:
    """Map input-rate segments to one phoneme label per encoder position.

    ``majority``: most frequent label in the input window of each position,
    ties going to the label that appears first in the window.
    ``center``: label of the window's centre frame.
    """
    r = int(np.prod(strides)) if len(strides) else 1
    frame = np.array([inventory.index(lab) for lab in utt.frame_labels()], dtype=np.intp)
    T = len(frame)
    S = -(-T // r)
    labels = np.empty(S, dtype=np.intp)
    for i in range(S):
        window = frame[i * r:min((i + 1) * r, T)]
        if method == "center":
            labels[i] = window[(len(window) - 1) // 2]
            continue
        if method != "majority":
            raise ValueError(f"unknown downsampling method {method!r}")
        best, best_count = window[0], 0
        seen = []
        for lab in window:
            if lab not in seen:
                seen.append(lab)
        for lab in seen:
            c = int(np.count_nonzero(window == lab))
            if c > best_count:
                best, best_count = lab, c
        labels[i] = best
    return AlignmentTrack.from_labels(labels)


# --------------------------------------------------------------------------- synthetic corpus


@dataclass
class SynthSpec:
    n_utts: int = 250
    n_test: int = 50
    n_phonemes: int = 10  # including silence
    d_s: int = 12
    n_tokens: int = 20
    phonemes_per_token: tuple[int, ...] = (2,)
    tokens_per_utt: tuple[int, int] = (4, 8)
    dur_mean: float = 3.0
    dur_max: int = 8
    sigma: float = 0.5
    center_scale: float = 1.0
    min_separation: float = 1.0
    silence_edges: bool = True
    pause_prob: float = 0.0
    boundary_jitter: int = 0
    markov_successors: int = 0  # 0: tokens i.i.d. uniform; k: each token has k likely successors
    markov_strength: float = 0.9
    syllabic: bool = True  # tokens are initial+final (or a lone final)
    distinct_neighbours: bool = True  # next token never starts with the previous token's last phoneme
    max_retries: int = 100

    def validate(self) -> None:
        if self.n_utts < 1 or not 0 <= self.n_test < self.n_utts:
            raise GenerationError("need n_utts >= 1 and 0 <= n_test < n_utts")
        if self.n_phonemes < 3 or self.d_s < 2:
            raise GenerationError("need n_phonemes >= 3 and d_s >= 2")
        if not self.phonemes_per_token or any(k not in (1, 2) for k in self.phonemes_per_token):
            raise GenerationError("tokens expand to 1 or 2 phonemes")
        if self.dur_mean < 1 or self.dur_max < 1:
            raise GenerationError("phoneme durations must be at least one frame")
        lo, hi = self.tokens_per_utt
        if not 1 <= lo <= hi:
            raise GenerationError("tokens_per_utt must be an increasing pair >= 1")
        n_speech = self.n_phonemes - 1
        if self.syllabic:
            n_init = n_speech // 2
            n_fin = n_speech - n_init
            n_seqs = sum(n_init * n_fin if k == 2 else n_fin for k in set(self.phonemes_per_token))
        else:
            n_seqs = sum(n_speech**k for k in set(self.phonemes_per_token))
        if self.n_tokens > n_seqs:
            raise GenerationError("not enough distinct phoneme sequences for n_tokens")


@dataclass
class SyntheticCorpus:
    inventory: PhonemeInventory
    vocab: Vocabulary
    lexicon: dict[str, tuple[str, ...]]
    centers: np.ndarray
    utterances: list[Utterance]
    test_ids: set[str] = field(default_factory=set)

    @property
    def train(self) -> list[Utterance]:
        return [u for u in self.utterances if u.id not in self.test_ids]

    @property
    def test(self) -> list[Utterance]:
        return [u for u in self.utterances if u.id in self.test_ids]


def sample_centers(n: int, d: int, scale: float, min_sep: float, rng, retries: int) -> np.ndarray:
    for _ in range(retries):
        c = rng.normal(0.0, scale, size=(n, d))
        dist = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        dist[np.diag_indices(n)] = np.inf
        if dist.min() >= min_sep:
            return c
    raise GenerationError(f"no center layout with separation >= {min_sep} after {retries} tries")


def render_frames(
    phones: Sequence[int],
    durations: Sequence[int],
    centers: np.ndarray,
    sigma: float,
    rng,
) -> np.ndarray:
    """Emit ``durations[i]`` Gaussian frames around ``centers[phones[i]]``;
    returns ``d_s x T`` rounded to float32 precision."""
    cols = [centers[p][:, None] + sigma * rng.standard_normal((centers.shape[1], d))
            for p, d in zip(phones, durations)]
    return np.concatenate(cols, axis=1).astype(np.float32).astype(np.float64)


def segments_from_durations(labels: Sequence[str], durations: Sequence[int]) -> tuple[PhonemeSegment, ...]:
    segs, pos = [], 0
    for lab, d in zip(labels, durations):
        segs.append(PhonemeSegment(lab, pos, pos + int(d)))
        pos += int(d)
    return tuple(segs)


def _jitter(segs: tuple[PhonemeSegment, ...], j: int, rng) -> tuple[PhonemeSegment, ...]:
    bounds = [s.start for s in segs] + [segs[-1].end]
    for i in range(1, len(bounds) - 1):
        shift = int(rng.integers(-j, j + 1))
        bounds[i] = int(np.clip(bounds[i] + shift, bounds[i - 1] + 1, bounds[i + 1] - 1))
    return tuple(PhonemeSegment(s.label, bounds[i], bounds[i + 1]) for i, s in enumerate(segs))


def generate_synthetic_corpus(spec: SynthSpec, seed: int, out_dir: Path | None = None) -> SyntheticCorpus:
    """Generate a labelled corpus with exact (or jittered) phoneme alignments.

    When ``out_dir`` is given the corpus is also written there: ``features/``,
    ``alignments.tsv``, ``transcripts.tsv``, ``manifest.tsv`` (all ids),
    ``train.manifest.tsv`` / ``test.manifest.tsv``, ``phonemes.txt``,
    ``vocab.txt`` and ``lexicon.tsv``.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    phon = ("sil",) + tuple(f"p{i}" for i in range(1, spec.n_phonemes))
    inventory = PhonemeInventory(phon, "sil")
    centers = sample_centers(spec.n_phonemes, spec.d_s, spec.center_scale,
                             spec.min_separation, rng, spec.max_retries)

    n_speech = spec.n_phonemes - 1
    lexicon: dict[str, tuple[str, ...]] = {}
    used: set[tuple[int, ...]] = set()
    n_init = n_speech // 2
    while len(lexicon) < spec.n_tokens:
        k = int(rng.choice(spec.phonemes_per_token))
        if not spec.syllabic:
            seq = tuple(int(x) for x in rng.integers(1, n_speech + 1, size=k))
        elif k == 2:
            seq = (int(rng.integers(1, n_init + 1)), int(rng.integers(n_init + 1, n_speech + 1)))
        else:
            seq = (int(rng.integers(n_init + 1, n_speech + 1)),)
        if seq in used:
            continue
        used.add(seq)
        lexicon[f"t{len(lexicon):02d}"] = tuple(phon[i] for i in seq)
    vocab = Vocabulary(tuple(lexicon))
    tok_names = list(lexicon)

    trans = None
    if spec.markov_successors > 0:
        trans = np.full((spec.n_tokens, spec.n_tokens), (1 - spec.markov_strength) / spec.n_tokens)
        for i in range(spec.n_tokens):
            succ = rng.choice(spec.n_tokens, size=spec.markov_successors, replace=False)
            trans[i, succ] += spec.markov_strength / spec.markov_successors
        trans /= trans.sum(axis=1, keepdims=True)
    allowed = None
    if spec.distinct_neighbours:
        first = np.array([lexicon[t][0] for t in tok_names])
        last = np.array([lexicon[t][-1] for t in tok_names])
        allowed = first[None, :] != last[:, None]  # allowed[prev, next]
        if not allowed.any(axis=1).all():
            raise GenerationError("some token has no admissible successor")

    def next_token(prev: int | None) -> int:
        if allowed is None or prev is None:
            if trans is None or prev is None:
                return int(rng.integers(spec.n_tokens))
            return int(rng.choice(spec.n_tokens, p=trans[prev]))
        p = (np.ones(spec.n_tokens) if trans is None else trans[prev].copy()) * allowed[prev]
        return int(rng.choice(spec.n_tokens, p=p / p.sum()))

    def duration() -> int:
        return int(min(1 + rng.poisson(spec.dur_mean - 1), spec.dur_max))

    utts = []
    width = len(str(spec.n_utts - 1))
    for u in range(spec.n_utts):
        n_tok = int(rng.integers(spec.tokens_per_utt[0], spec.tokens_per_utt[1] + 1))
        toks = [next_token(None)]
        while len(toks) < n_tok:
            toks.append(next_token(toks[-1]))
        labels: list[str] = []
        if spec.silence_edges:
            labels.append("sil")
        for j, t in enumerate(toks):
            if j and spec.pause_prob > 0 and rng.random() < spec.pause_prob:
                labels.append("sil")
            labels.extend(lexicon[tok_names[t]])
        if spec.silence_edges:
            labels.append("sil")
        durs = [duration() for _ in labels]
        feats = render_frames([inventory.index(x) for x in labels], durs, centers, spec.sigma, rng)
        segs = segments_from_durations(labels, durs)
        if spec.boundary_jitter > 0:
            segs = _jitter(segs, spec.boundary_jitter, rng)
        # adjacent equal labels (e.g. p3 p3) are kept as separate segments
        utts.append(Utterance(f"utt{u:0{width}d}", feats, tuple(t + 1 for t in toks), segs))

    test_ids = {u.id for u in utts[spec.n_utts - spec.n_test:]}
    corpus = SyntheticCorpus(inventory, vocab, lexicon, centers, utts, test_ids)
    if out_dir is not None:
        write_synthetic_corpus(corpus, Path(out_dir))
    return corpus


def write_synthetic_corpus(corpus: SyntheticCorpus, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("alignments.tsv", "transcripts.tsv"):
        (out_dir / name).write_text("", encoding="utf-8")
    write_corpus_files(out_dir, corpus.utterances, corpus.vocab)
    for split, utts in (("train", corpus.train), ("test", corpus.test)):
        lines = "".join(f"{u.id}\t{u.id}.sclf\n" for u in utts)
        (out_dir / f"{split}.manifest.tsv").write_text(lines, encoding="utf-8")
    (out_dir / "phonemes.txt").write_text("\n".join(corpus.inventory.phonemes) + "\n", encoding="utf-8")
    (out_dir / "vocab.txt").write_text("\n".join((BLANK,) + corpus.vocab.tokens) + "\n", encoding="utf-8")
    (out_dir / "lexicon.tsv").write_text(
        "".join(f"{t}\t{' '.join(p)}\n" for t, p in corpus.lexicon.items()), encoding="utf-8"
    )
