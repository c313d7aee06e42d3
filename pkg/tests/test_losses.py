import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scala_asr import numcore as nc
from scala_asr.corpus import AlignmentTrack
from scala_asr.errors import (
    ConfigError,
    ContractError,
    InfeasibleTargetError,
    NoAnchorsError,
    SimilarityUndefinedError,
)
from scala_asr.losses import (
    ContrastiveConfig,
    ContrastiveSample,
    collapse_path,
    count_noisy,
    ctc_enumerate,
    ctc_loss,
    min_ctc_length,
    sample_contrastive,
    scl_loss,
)
from scala_asr.masking import MaskPlan


def lsm(x):
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def brute_ctc(lp, y):
    """-log of the summed probability of every path collapsing to ``y``."""
    S, V = lp.shape
    total = -np.inf
    for path in itertools.product(range(V), repeat=S):
        if collapse_path(path) == tuple(y):
            total = np.logaddexp(total, sum(lp[t, k] for t, k in enumerate(path)))
    return -total


# --------------------------------------------------------------------------- CTC


def test_ctc_single_path():
    lp = nc.Tensor(np.log([[0.5, 0.5]]))
    assert math.isclose(ctc_loss(lp, [1]).item(), math.log(2), abs_tol=1e-12)
    assert round(ctc_loss(lp, [1]).item(), 6) == 0.693147


def test_ctc_two_frames_uniform():
    lp = nc.Tensor(np.log(np.full((2, 2), 0.5)))
    assert math.isclose(ctc_loss(lp, [1]).item(), -math.log(0.75), abs_tol=1e-12)
    assert round(ctc_loss(lp, [1]).item(), 6) == 0.287682


def test_collapse_rule():
    assert collapse_path([0, 1, 1, 0, 2]) == (1, 2)
    assert collapse_path([1, 0, 1]) == (1, 1)
    assert collapse_path([0, 0]) == ()


@pytest.mark.parametrize("seed", range(30))
def test_ctc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    S, V = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    lp = lsm(rng.normal(scale=2, size=(S, V)))
    for n in range(1, 4):
        for y in itertools.product(range(1, V), repeat=n):
            if min_ctc_length(y) > S:
                with pytest.raises(InfeasibleTargetError):
                    ctc_loss(nc.Tensor(lp), y)
                continue
            assert abs(ctc_loss(nc.Tensor(lp), y).item() - brute_ctc(lp, y)) <= 1e-9


def test_enumerate_agrees_with_direct_brute_force():
    lp = lsm(np.random.default_rng(0).normal(size=(4, 3)))
    table = ctc_enumerate(lp)
    assert math.isclose(np.logaddexp.reduce(list(table.values())), 0.0, abs_tol=1e-12)
    for y, v in table.items():
        if y:
            assert abs(-v - brute_ctc(lp, y)) <= 1e-12


def test_ctc_repeated_tokens_need_blank():
    assert min_ctc_length([1, 1]) == 3 and min_ctc_length([1, 2]) == 2
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(nc.Tensor(lsm(np.zeros((2, 3)))), [1, 1])
    assert np.isfinite(ctc_loss(nc.Tensor(lsm(np.zeros((3, 3)))), [1, 1]).item())


def test_ctc_contract_errors():
    lp = nc.Tensor(lsm(np.zeros((3, 3))))
    for bad in ([], [0], [3]):
        with pytest.raises(ContractError):
            ctc_loss(lp, bad)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_ctc_nonnegative_probability(seed):
    rng = np.random.default_rng(seed)
    S, V = int(rng.integers(1, 12)), int(rng.integers(2, 6))
    y = [int(t) for t in rng.integers(1, V, size=int(rng.integers(1, max(2, S // 2 + 1))))]
    if min_ctc_length(y) > S:
        return
    loss = ctc_loss(nc.Tensor(lsm(rng.normal(scale=3, size=(S, V)))), y).item()
    assert loss >= 0 and 0 < math.exp(-loss) <= 1


@pytest.mark.parametrize("S", [50, 300, 1000])
def test_ctc_extreme_logits_finite(S):
    rng = np.random.default_rng(S)
    V = 6
    lp = lsm(rng.choice([-50.0, 50.0], size=(S, V)))
    y = [int(t) for t in rng.integers(1, V, size=S // 3)]
    out = ctc_loss(nc.Tensor(lp, requires_grad=True), y)
    assert np.isfinite(out.item())
    ps = nc.ParamStore({"lp": nc.Tensor(lp, True)})
    nc.backward(ctc_loss(ps["lp"], y), ps)
    assert np.all(np.isfinite(ps["lp"].grad))


@pytest.mark.parametrize("seed", range(20))
def test_ctc_gradient(seed):
    rng = np.random.default_rng(seed)
    S, V = int(rng.integers(3, 9)), int(rng.integers(2, 5))
    y = [int(t) for t in rng.integers(1, V, size=int(rng.integers(1, 3)))]
    ps = nc.ParamStore({"x": nc.Tensor(rng.normal(size=(S, V)), True)})
    rep = nc.finite_diff_check(lambda p: ctc_loss(nc.log_softmax(p["x"], 1), y), ps)
    assert rep.max_error <= 1e-6


def test_ctc_gradient_is_negative_occupancy():
    # with raw log-probs as inputs, grad = -(expected visits of each label per frame)
    rng = np.random.default_rng(0)
    lp = lsm(rng.normal(size=(4, 3)))
    y = (1, 2)
    ps = nc.ParamStore({"lp": nc.Tensor(lp, True)})
    nc.backward(ctc_loss(ps["lp"], y), ps)
    occ = np.zeros((4, 3))
    norm = 0.0
    for path in itertools.product(range(3), repeat=4):
        if collapse_path(path) == y:
            w = math.exp(sum(lp[t, k] for t, k in enumerate(path)))
            norm += w
            for t, k in enumerate(path):
                occ[t, k] += w
    assert np.allclose(ps["lp"].grad, -occ / norm, atol=1e-12)


# --------------------------------------------------------------------------- contrastive sampling


LABELS = AlignmentTrack.from_labels([0, 0, 1, 1, 2])


def test_sampler_supervised_example():
    plan = MaskPlan.from_indices(5, [0])
    (s,) = sample_contrastive(plan, LABELS, ContrastiveConfig(K=100), np.random.default_rng(0))
    assert s.anchor == 0 and s.negatives.tolist() == [2, 3, 4]


def test_sampler_unsupervised_noisy_probability():
    plan = MaskPlan.from_indices(5, [0])
    cfg = ContrastiveConfig(K=1, supervised=False)
    rng = np.random.default_rng(1)
    n = 20000
    noisy = sum(count_noisy(sample_contrastive(plan, LABELS, cfg, rng), LABELS)[0] for _ in range(n))
    assert abs(noisy / n - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)


def test_sampler_drops_anchors_without_candidates():
    tr = AlignmentTrack.from_labels([3, 3, 3])
    plan = MaskPlan.from_indices(3, [0, 1])
    assert sample_contrastive(plan, tr, ContrastiveConfig(), np.random.default_rng(0)) == []
    single = AlignmentTrack.from_labels([1])
    assert sample_contrastive(MaskPlan.from_indices(1, [0]), single,
                              ContrastiveConfig(supervised=False), np.random.default_rng(0)) == []


def test_sampler_excludes_label():
    plan = MaskPlan.from_indices(5, [0, 2, 4])
    out = sample_contrastive(plan, LABELS, ContrastiveConfig(), np.random.default_rng(0), exclude_label=0)
    assert [s.anchor for s in out] == [2, 4]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=80), st.integers(1, 30), st.booleans(),
       st.integers(0, 10**6))
def test_sampler_invariants(labels, K, supervised, seed):
    tr = AlignmentTrack.from_labels(labels)
    rng = np.random.default_rng(seed)
    plan = MaskPlan.from_indices(tr.S, rng.choice(tr.S, size=min(5, tr.S), replace=False))
    cfg = ContrastiveConfig(K=K, supervised=supervised)
    out = sample_contrastive(plan, tr, cfg, np.random.default_rng(seed))
    again = sample_contrastive(plan, tr, cfg, np.random.default_rng(seed))
    assert [(s.anchor, s.negatives.tolist()) for s in out] == [(s.anchor, s.negatives.tolist()) for s in again]
    for s in out:
        neg = s.negatives
        assert s.anchor in plan.masked and s.anchor not in neg
        assert len(set(neg.tolist())) == len(neg)
        if supervised:
            cand = int(np.count_nonzero(tr.labels != tr.labels[s.anchor]))
            assert np.all(tr.labels[neg] != tr.labels[s.anchor])
        else:
            cand = tr.S - 1
        assert len(neg) == min(K, cand)
    if supervised:
        assert count_noisy(out, tr)[0] == 0


def test_contrastive_config_validation():
    with pytest.raises(ConfigError):
        ContrastiveConfig(tau=0.0)
    with pytest.raises(ConfigError):
        ContrastiveConfig(K=0)


# --------------------------------------------------------------------------- contrastive loss


def naive_scl(c, q, samples, tau):
    total = 0.0
    for s in samples:
        m = s.anchor
        cm = c[:, m] / np.linalg.norm(c[:, m])

        def sim(n):
            return float(cm @ (q[:, n] / np.linalg.norm(q[:, n])))

        denom = sum(math.exp(sim(n) / tau) for n in [m] + list(s.negatives))
        total += -math.log(math.exp(sim(m) / tau) / denom)
    return total / len(samples)


def test_scl_closed_form_two_terms():
    c = np.array([[1.0, 0.0], [0.0, 0.0]])
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = scl_loss(nc.Tensor(c), nc.Tensor(q), [ContrastiveSample(0, np.array([1]))], 0.1).item()
    assert math.isclose(loss, math.log1p(math.exp(-10)), rel_tol=1e-9)
    assert f"{loss:.2e}" == "4.54e-05"


def test_scl_uniform_similarities():
    S = 101
    c = np.ones((3, S))
    q = np.ones((3, S))
    sample = ContrastiveSample(0, np.arange(1, S))
    loss = scl_loss(nc.Tensor(c), nc.Tensor(q), [sample], 0.1).item()
    assert math.isclose(loss, math.log(101), abs_tol=1e-12)
    assert round(loss, 5) == 4.61512


@pytest.mark.parametrize("seed", range(30))
def test_scl_matches_naive_and_gradient(seed):
    rng = np.random.default_rng(seed)
    S, d = int(rng.integers(2, 15)), int(rng.integers(2, 6))
    n_anchor = int(rng.integers(1, min(8, S) + 1))
    anchors = rng.choice(S, size=n_anchor, replace=False)
    samples = []
    for m in anchors:
        others = np.delete(np.arange(S), m)
        k = int(rng.integers(1, len(others) + 1))
        samples.append(ContrastiveSample(int(m), np.sort(rng.choice(others, size=k, replace=False))))
    c, q = rng.normal(size=(d, S)), rng.normal(size=(d, S))
    tau = float(rng.uniform(0.05, 1.0))
    assert abs(scl_loss(nc.Tensor(c), nc.Tensor(q), samples, tau).item() - naive_scl(c, q, samples, tau)) <= 1e-10
    ps = nc.ParamStore({"c": nc.Tensor(c, True), "q": nc.Tensor(q, True)})
    rep = nc.finite_diff_check(lambda p: scl_loss(p["c"], p["q"], samples, tau), ps)
    assert rep.max_error <= 1e-5


def test_scl_invariances_and_monotonicity():
    rng = np.random.default_rng(3)
    c, q = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    samples = [ContrastiveSample(1, np.array([0, 3, 5]))]
    base = scl_loss(nc.Tensor(c), nc.Tensor(q), samples, 0.1).item()
    assert base >= 0
    c2, q2 = c.copy(), q.copy()
    c2[:, 1] *= 7.5
    q2[:, 3] *= 0.01
    assert math.isclose(scl_loss(nc.Tensor(c2), nc.Tensor(q2), samples, 0.1).item(), base, rel_tol=1e-12)
    # moving q_m towards c_m raises sim(c_m, q_m) only
    q3 = q.copy()
    q3[:, 1] = q[:, 1] + 0.5 * c[:, 1] / np.linalg.norm(c[:, 1]) * np.linalg.norm(q[:, 1])
    assert scl_loss(nc.Tensor(c), nc.Tensor(q3), samples, 0.1).item() < base


def test_scl_errors():
    c = np.ones((2, 3))
    with pytest.raises(NoAnchorsError):
        scl_loss(nc.Tensor(c), nc.Tensor(c), [], 0.1)
    z = c.copy()
    z[:, 2] = 0.0
    with pytest.raises(SimilarityUndefinedError):
        scl_loss(nc.Tensor(c), nc.Tensor(z), [ContrastiveSample(0, np.array([2]))], 0.1)
    with pytest.raises(ContractError):
        scl_loss(nc.Tensor(c), nc.Tensor(c), [ContrastiveSample(0, np.array([0, 1]))], 0.1)
