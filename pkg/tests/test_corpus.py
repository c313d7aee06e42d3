import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scala_asr import numcore as nc
from scala_asr.corpus import (
    AlignmentTrack,
    PhonemeInventory,
    PhonemeSegment,
    SynthSpec,
    Utterance,
    Vocabulary,
    check_coverage,
    downsample_alignment,
    generate_synthetic_corpus,
    load_corpus_dir,
    load_manifest,
    load_vocab,
    read_features,
    render_frames,
    segments_from_durations,
    write_corpus_files,
    write_features,
)
from scala_asr.errors import (
    AlignmentCoverageError,
    DataError,
    GenerationError,
    InventoryError,
    MissingUtteranceError,
    ParseError,
)

INV = PhonemeInventory(("sil", "A", "B", "C"))
VOCAB = Vocabulary(("a", "b"))


def utt_from_labels(labels, uid="u", d_s=2):
    segs, start = [], 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            segs.append(PhonemeSegment(labels[start], start, i))
            start = i
    return Utterance(uid, np.zeros((d_s, len(labels))), (1,), tuple(segs))


def write_small_corpus(tmp_path, segments, transcript="a b", T=10):
    u = Utterance("u1", np.arange(2 * T, dtype=float).reshape(2, T), (1, 2), tuple(segments))
    write_corpus_files(tmp_path, [u], VOCAB)
    (tmp_path / "transcripts.tsv").write_text(f"u1\t{transcript}\n", encoding="utf-8")
    return tmp_path


def load_small(tmp_path):
    return load_manifest(tmp_path / "manifest.tsv", tmp_path / "features", tmp_path / "alignments.tsv",
                         tmp_path / "transcripts.tsv", INV, VOCAB)


# --------------------------------------------------------------------------- types


def test_inventory_and_vocab_invariants():
    assert INV.silence_index == 0 and INV.index("B") == 2
    with pytest.raises(InventoryError):
        INV.index("Z")
    with pytest.raises(InventoryError):
        PhonemeInventory(("A", "A", "sil"))
    with pytest.raises(InventoryError):
        PhonemeInventory(("A", "B"))  # silence label missing
    assert VOCAB.size == 3 and VOCAB.encode("a") == 1
    assert VOCAB.decode([2, 1]) == ["b", "a"]
    with pytest.raises(InventoryError):
        Vocabulary(("a", "<blk>"))
    with pytest.raises(InventoryError):
        Vocabulary(("a", "a"))


def test_track_from_labels():
    tr = AlignmentTrack.from_labels([1, 1, 2, 2, 2, 1])
    assert tr.spans == ((1, 0, 2), (2, 2, 5), (1, 5, 6))
    assert tr.span_of().tolist() == [0, 0, 1, 1, 1, 2]


def test_check_coverage_messages():
    check_coverage([PhonemeSegment("A", 0, 4), PhonemeSegment("B", 4, 10)], 10)
    with pytest.raises(AlignmentCoverageError, match="gap at frame 4"):
        check_coverage([PhonemeSegment("A", 0, 4), PhonemeSegment("B", 5, 10)], 10)
    with pytest.raises(AlignmentCoverageError, match="overlap"):
        check_coverage([PhonemeSegment("A", 0, 4), PhonemeSegment("B", 3, 10)], 10)
    with pytest.raises(AlignmentCoverageError):
        check_coverage([PhonemeSegment("A", 0, 4)], 10)


# --------------------------------------------------------------------------- loading


def test_load_valid_utterance(tmp_path):
    write_small_corpus(tmp_path, [PhonemeSegment("A", 0, 4), PhonemeSegment("B", 4, 10)])
    (u,) = load_small(tmp_path)
    assert u.id == "u1" and u.T == 10 and u.transcript == (1, 2)
    assert u.features.shape == (2, 10)


def test_load_gap_is_coverage_error(tmp_path):
    write_small_corpus(tmp_path, [PhonemeSegment("A", 0, 4), PhonemeSegment("B", 4, 10)])
    (tmp_path / "alignments.tsv").write_text("u1\t0\t4\tA\nu1\t5\t10\tB\n", encoding="utf-8")
    with pytest.raises(AlignmentCoverageError, match="u1: gap at frame 4"):
        load_small(tmp_path)


def test_load_unknown_token_or_phoneme(tmp_path):
    write_small_corpus(tmp_path, [PhonemeSegment("A", 0, 4), PhonemeSegment("B", 4, 10)], transcript="a zz")
    with pytest.raises(InventoryError, match="u1"):
        load_small(tmp_path)
    write_small_corpus(tmp_path, [PhonemeSegment("A", 0, 4), PhonemeSegment("B", 4, 10)])
    (tmp_path / "alignments.tsv").write_text("u1\t0\t4\tA\nu1\t4\t10\tQ\n", encoding="utf-8")
    with pytest.raises(InventoryError):
        load_small(tmp_path)


def test_load_missing_id(tmp_path):
    write_small_corpus(tmp_path, [PhonemeSegment("A", 0, 10)])
    (tmp_path / "transcripts.tsv").write_text("other\ta\n", encoding="utf-8")
    with pytest.raises(MissingUtteranceError) as exc:
        load_small(tmp_path)
    assert isinstance(exc.value, LookupError)


def test_malformed_files(tmp_path):
    (tmp_path / "bad.sclf").write_bytes(b"XXXX\x00\x00")
    with pytest.raises(ParseError):
        read_features(tmp_path / "bad.sclf")
    (tmp_path / "vocab.txt").write_text("a\nb\n", encoding="utf-8")
    with pytest.raises(InventoryError):
        load_vocab(tmp_path / "vocab.txt")
    write_small_corpus(tmp_path, [PhonemeSegment("A", 0, 10)])
    (tmp_path / "alignments.tsv").write_text("u1\t0\tx\tA\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_small(tmp_path)


def test_feature_file_layout(tmp_path):
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    write_features(tmp_path / "f.sclf", x)
    raw = (tmp_path / "f.sclf").read_bytes()
    assert raw[:4] == b"SCLF"
    assert np.frombuffer(raw[4:12], "<u4").tolist() == [2, 3]
    assert np.frombuffer(raw[12:], "<f4").tolist() == [1, 4, 2, 5, 3, 6]  # frame-major
    assert np.array_equal(read_features(tmp_path / "f.sclf"), x)


# --------------------------------------------------------------------------- downsampling


def test_downsample_examples():
    tr = downsample_alignment(utt_from_labels(["A", "A", "B", "B"]), [2], INV)
    assert tr.labels.tolist() == [1, 2]
    assert tr.spans == ((1, 0, 1), (2, 1, 2))
    tr = downsample_alignment(utt_from_labels(["A", "B"]), [2], INV)
    assert tr.labels.tolist() == [1]


def test_downsample_tie_goes_to_earliest_label():
    tr = downsample_alignment(utt_from_labels(["B", "A", "A", "B"]), [4], INV)
    assert tr.labels.tolist() == [2]  # B and A both twice; B appears first
    tr = downsample_alignment(utt_from_labels(["C", "B", "B", "A", "A"]), [5], INV)
    assert tr.labels.tolist() == [2]


def test_downsample_center_method():
    tr = downsample_alignment(utt_from_labels(["A", "B", "B", "B", "C", "C"]), [3], INV, "center")
    assert tr.labels.tolist() == [2, 3]
    with pytest.raises(ValueError):
        downsample_alignment(utt_from_labels(["A"]), [2], INV, "median")


labels_st = st.lists(st.sampled_from(["sil", "A", "B", "C"]), min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(labels_st, st.lists(st.integers(1, 3), min_size=0, max_size=3))
def test_downsample_properties(labels, strides):
    utt = utt_from_labels(labels)
    tr = downsample_alignment(utt, strides, INV)
    r = int(np.prod(strides)) if strides else 1
    assert tr.S == math.ceil(len(labels) / r)
    rebuilt = np.concatenate([np.full(e - s, lab) for lab, s, e in tr.spans])
    assert rebuilt.tolist() == tr.labels.tolist()
    assert sum(e - s for _, s, e in tr.spans) == tr.S
    for (l1, _, e1), (l2, s2, _) in zip(tr.spans, tr.spans[1:]):
        assert e1 == s2 and l1 != l2
    # majority oracle
    idx = [INV.index(x) for x in labels]
    for i, lab in enumerate(tr.labels):
        win = idx[i * r:(i + 1) * r]
        counts = {k: win.count(k) for k in win}
        best = max(counts.values())
        assert lab == next(k for k in win if counts[k] == best)


@pytest.mark.parametrize("seed", range(5))
def test_downsample_length_matches_conv_stack(seed):
    rng = np.random.default_rng(seed)
    strides = [int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
    for T in rng.integers(1, 501, size=40):
        T = int(T)
        h = nc.Tensor(np.ones((1, T)))
        for s in strides:
            h = nc.conv1d(h, nc.Tensor(np.ones((1, 1, 3))), s)
        labels = [str(x) for x in rng.choice(["A", "B", "sil"], size=T)]
        assert downsample_alignment(utt_from_labels(labels), strides, INV).S == h.shape[1]


# --------------------------------------------------------------------------- synthetic corpus


def test_segments_and_rendering_example():
    segs = segments_from_durations(["p1", "p2"], [3, 2])
    assert segs == (PhonemeSegment("p1", 0, 3), PhonemeSegment("p2", 3, 5))
    centers = np.array([[0.0, 0.0], [1.0, -1.0], [5.0, 5.0]])
    x = render_frames([1, 2], [3, 2], centers, 0.0, np.random.default_rng(0))
    assert x.shape == (2, 5)
    assert np.array_equal(x[:, :3], np.tile([[1.0], [-1.0]], 3))
    assert np.array_equal(x[:, 3:], np.full((2, 2), 5.0))


def test_single_token_corpus_layout():
    spec = SynthSpec(n_utts=1, n_test=0, n_tokens=1, tokens_per_utt=(1, 1), silence_edges=False)
    corpus = generate_synthetic_corpus(spec, seed=0)
    (u,) = corpus.utterances
    phones = corpus.lexicon["t00"]
    assert len(phones) == 2 and u.transcript == (1,)
    assert [s.label for s in u.segments] == list(phones)
    assert u.segments[0].start == 0 and u.segments[-1].end == u.T


def test_generation_deterministic_files(tmp_path):
    spec = SynthSpec(n_utts=12, n_test=4)
    generate_synthetic_corpus(spec, seed=7, out_dir=tmp_path / "a")
    generate_synthetic_corpus(spec, seed=7, out_dir=tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    feats = filecmp.cmpfiles(tmp_path / "a" / "features", tmp_path / "b" / "features",
                             [p.name for p in (tmp_path / "a" / "features").iterdir()], shallow=False)
    assert not feats[1] and not feats[2]
    other = generate_synthetic_corpus(spec, seed=8)
    assert other.utterances[0] != generate_synthetic_corpus(spec, seed=7).utterances[0]


@pytest.mark.parametrize("kw", [{}, {"syllabic": True, "distinct_neighbours": True, "n_tokens": 20},
                                {"pause_prob": 0.3, "boundary_jitter": 1, "markov_successors": 2}])
def test_round_trip(tmp_path, kw):
    spec = SynthSpec(n_utts=15, n_test=5, **kw)
    corpus = generate_synthetic_corpus(spec, seed=3, out_dir=tmp_path)
    loaded, inv, vocab = load_corpus_dir(tmp_path)
    assert loaded == corpus.utterances
    assert inv == corpus.inventory and vocab == corpus.vocab
    train, _, _ = load_corpus_dir(tmp_path, "train")
    test, _, _ = load_corpus_dir(tmp_path, "test")
    assert [u.id for u in train] == [u.id for u in corpus.train]
    assert [u.id for u in test] == [u.id for u in corpus.test]
    assert not {u.id for u in train} & {u.id for u in test}


def test_nearest_center_oracle_as_sigma_vanishes():
    spec = SynthSpec(n_utts=20, n_test=0, sigma=1e-6)
    corpus = generate_synthetic_corpus(spec, seed=1)
    for u in corpus.utterances:
        d = ((u.features.T[:, None, :] - corpus.centers[None]) ** 2).sum(-1)
        pred = [corpus.inventory.phonemes[k] for k in d.argmin(1)]
        assert pred == u.frame_labels()


def test_generator_structure_options():
    spec = SynthSpec(n_utts=40, n_test=0, syllabic=True, distinct_neighbours=True, n_tokens=20)
    corpus = generate_synthetic_corpus(spec, seed=2)
    initials = {f"p{i}" for i in range(1, 5)}
    for phones in corpus.lexicon.values():
        assert phones[0] in initials and phones[1] not in initials
    for u in corpus.utterances:
        labels = [s.label for s in u.segments]
        assert all(a != b for a, b in zip(labels, labels[1:]))
        check_coverage(u.segments, u.T, u.id)


def test_durations_and_silence_edges():
    spec = SynthSpec(n_utts=50, n_test=0, dur_max=5)
    corpus = generate_synthetic_corpus(spec, seed=4)
    durs = [s.end - s.start for u in corpus.utterances for s in u.segments]
    assert min(durs) >= 1 and max(durs) <= 5
    assert all(u.segments[0].label == "sil" and u.segments[-1].label == "sil" for u in corpus.utterances)
    wide = generate_synthetic_corpus(SynthSpec(n_utts=200, n_test=0, dur_max=50), 0)
    mean = np.mean([s.end - s.start for u in wide.utterances for s in u.segments])
    assert abs(mean - 3.0) < 0.1  # 1 + Poisson(2)


def test_boundary_jitter_keeps_coverage():
    spec = SynthSpec(n_utts=30, n_test=0, boundary_jitter=2)
    for u in generate_synthetic_corpus(spec, seed=5).utterances:
        check_coverage(u.segments, u.T, u.id)


def test_invalid_specs():
    with pytest.raises(GenerationError):
        SynthSpec(n_utts=0).validate()
    with pytest.raises(GenerationError):
        SynthSpec(n_phonemes=2).validate()
    with pytest.raises(GenerationError):
        SynthSpec(d_s=1).validate()
    with pytest.raises(GenerationError):
        SynthSpec(n_tokens=100, phonemes_per_token=(1,)).validate()
    with pytest.raises(GenerationError):
        generate_synthetic_corpus(SynthSpec(n_utts=2, n_test=0, min_separation=100.0, max_retries=3), 0)
    assert issubclass(GenerationError, DataError)
