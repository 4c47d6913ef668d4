import math

import numpy as np
import pytest

from simtlab import metrics as M
from simtlab.errors import ContractError, DataError


# ---------------------------------------------------------------------------
# smoothed sentence BLEU
# ---------------------------------------------------------------------------

def test_sentence_bleu_identity_is_exactly_100():
    assert M.smoothed_sentence_bleu("a b c d".split(), "a b c d".split()) == 100.0


def test_sentence_bleu_empty_hypothesis_is_zero():
    assert M.smoothed_sentence_bleu([], "a b".split()) == 0.0


def test_sentence_bleu_hand_computed_value():
    # p1=1, smoothed p2..p4 = 1, BP = exp(-1/3)
    score = M.smoothed_sentence_bleu("a b c".split(), "a b c d".split())
    assert abs(score - 100.0 * math.exp(-1.0 / 3.0)) <= 1e-9
    assert abs(score - 71.653) <= 1e-3


def test_sentence_bleu_empty_reference_raises():
    with pytest.raises(ContractError):
        M.smoothed_sentence_bleu("a".split(), [])


def test_sentence_bleu_100_iff_identical():
    rng = np.random.default_rng(0)
    vocab = [f"w{i}" for i in range(6)]
    for _ in range(300):
        ref = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 8))]
        hyp = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(0, 8))]
        score = M.smoothed_sentence_bleu(hyp, ref)
        if hyp == ref:
            assert score == 100.0
        else:
            assert score < 100.0


# ---------------------------------------------------------------------------
# quality reward
# ---------------------------------------------------------------------------

def test_quality_trace_single_write_equals_sentence_bleu():
    ref = "a b c".split()
    deltas = M.quality_reward_trace([["a"]], ref)
    assert deltas == [M.smoothed_sentence_bleu(["a"], ref)]


def test_quality_trace_two_step_hand_case():
    ref = "a b".split()
    deltas = M.quality_reward_trace([["a"], ["a", "b"]], ref)
    first = M.smoothed_sentence_bleu(["a"], ref)
    assert abs(first - 100.0 * math.exp(-1.0)) <= 1e-9
    assert abs(deltas[0] - first) <= 1e-12
    assert abs(deltas[1] - (100.0 - first)) <= 1e-9


def test_quality_trace_telescopes_over_random_episodes():
    rng = np.random.default_rng(1)
    vocab = [f"w{i}" for i in range(10)]
    for _ in range(500):
        ref = [vocab[i] for i in rng.integers(0, 10, size=rng.integers(1, 9))]
        hyp = [vocab[i] for i in rng.integers(0, 10, size=rng.integers(1, 12))]
        prefixes = [hyp[:i + 1] for i in range(len(hyp))]
        total = sum(M.quality_reward_trace(prefixes, ref))
        assert abs(total - M.smoothed_sentence_bleu(hyp, ref)) <= 1e-9


def test_quality_trace_rejects_non_growing_prefixes():
    with pytest.raises(ContractError):
        M.quality_reward_trace([["a"], ["a", "b", "c"]], ["a", "b"])


# ---------------------------------------------------------------------------
# latency reward and consecutive wait
# ---------------------------------------------------------------------------

def test_latency_reward_below_target_is_zero():
    cfg = M.RewardConfig()
    assert M.latency_reward(1, 0.0, cfg, is_terminal=False) == 0.0


def test_latency_reward_above_target_hand_value():
    cfg = M.RewardConfig()
    assert abs(M.latency_reward(3, 0.0, cfg, is_terminal=False) - 0.05) <= 1e-12


def test_latency_reward_terminal_proportion_hinge():
    cfg = M.RewardConfig()
    assert abs(M.latency_reward(0, 0.5, cfg, is_terminal=True) - (-0.2)) <= 1e-12


def test_latency_reward_at_target_counts_once():
    cfg = M.RewardConfig()
    # sgn(0) + 1 = 1
    assert abs(M.latency_reward(2, 0.0, cfg, is_terminal=False) - 0.025) <= 1e-12


def test_consecutive_wait_traces():
    assert M.consecutive_wait_trace("RRW") == [1, 2, 0]
    assert M.consecutive_wait_trace("RWRWRW") == [1, 0, 1, 0, 1, 0]
    assert max(M.consecutive_wait_trace("RRRRW")) == 4


# ---------------------------------------------------------------------------
# AVP / AVL
# ---------------------------------------------------------------------------

def test_average_proportion_consecutive_is_exactly_one():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        m = int(rng.integers(1, 30))
        assert M.average_proportion([n] * m, n, m) == 1.0


def test_average_proportion_hand_values():
    assert M.average_proportion([1, 2, 3], 3, 3) == 6 / 9
    assert M.average_proportion([2, 3, 4, 4], 4, 4) == 13 / 16


def test_average_proportion_empty_raises():
    with pytest.raises(ContractError):
        M.average_proportion([], 3, 0)


def test_average_lagging_wait2_equal_lengths():
    assert M.average_lagging([2, 3, 4, 4], 4, 4) == 2.0


def test_average_lagging_consecutive():
    assert M.average_lagging([3, 3, 3], 3, 3) == 3.0


def test_average_lagging_longer_target_near_zero():
    # direct evaluation of the formula; demonstrates sub-token lags
    assert M.average_lagging([1, 1, 1, 1, 2, 2, 3, 4], 4, 8) == 0.125


def test_average_lagging_can_be_negative():
    assert M.average_lagging([1, 1, 1, 1, 1, 1, 2, 4], 4, 8) < 0.0


def test_wait_k_lagging_is_k_for_equal_lengths():
    for n in range(2, 21):
        for k in range(1, min(n, 11)):
            g = [min(t + k - 1, n) for t in range(1, n + 1)]
            assert M.average_lagging(g, n, n) == float(k)


def test_delay_reconstruction_matches_recorded():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n_src = int(rng.integers(1, 12))
        actions = []
        reads = 0
        writes = 0
        g = []
        # random legal interleaving, first action READ
        while reads < n_src or writes == 0:
            if reads == 0 or (reads < n_src and rng.random() < 0.5):
                actions.append("R")
                reads += 1
            else:
                actions.append("W")
                g.append(reads)
                writes += 1
        ends_eos = bool(rng.integers(0, 2))
        if ends_eos:
            actions.append("W")
        assert M.delays_from_actions(actions, ends_eos) == g


# ---------------------------------------------------------------------------
# corpus BLEU with independent oracle
# ---------------------------------------------------------------------------

def _oracle_corpus_bleu(hyps, refs):
    """Naive recount of BLEU-4 used only as a cross-check."""
    total_m = [0, 0, 0, 0]
    total_c = [0, 0, 0, 0]
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    for hyp, ref in zip(hyps, refs):
        for n in (1, 2, 3, 4):
            hgrams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
            rgrams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            remaining = list(rgrams)
            m = 0
            for gram in hgrams:
                if gram in remaining:
                    remaining.remove(gram)
                    m += 1
            total_m[n - 1] += m
            total_c[n - 1] += len(hgrams)
    if hyp_len == 0 or 0 in total_m:
        return 0.0
    log_p = sum(math.log(m / c) for m, c in zip(total_m, total_c)) / 4
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def test_corpus_bleu_identity():
    refs = [s.split() for s in ("a b c d", "x y z w v")]
    assert M.corpus_bleu(refs, refs) == 100.0


def test_corpus_bleu_all_empty_hyps():
    refs = [s.split() for s in ("a b", "c d")]
    assert M.corpus_bleu([[], []], refs) == 0.0


def test_corpus_bleu_matches_brute_force_oracle():
    hyps = ["a b c".split(), "a b c d".split()]
    refs = ["a b c d".split(), "a b c d".split()]
    assert abs(M.corpus_bleu(hyps, refs) - _oracle_corpus_bleu(hyps, refs)) <= 1e-9
    rng = np.random.default_rng(4)
    vocab = [f"w{i}" for i in range(8)]
    for _ in range(50):
        refs = [[vocab[i] for i in rng.integers(0, 8, size=rng.integers(4, 10))]
                for _ in range(5)]
        hyps = [[vocab[i] for i in rng.integers(0, 8, size=rng.integers(4, 10))]
                for _ in range(5)]
        assert abs(M.corpus_bleu(hyps, refs) - _oracle_corpus_bleu(hyps, refs)) <= 1e-9


def test_corpus_bleu_count_mismatch():
    with pytest.raises(DataError):
        M.corpus_bleu([["a"]], [["a"], ["b"]])


# ---------------------------------------------------------------------------
# bootstrap significance
# ---------------------------------------------------------------------------

def _toy_systems(rng, n=40):
    vocab = [f"w{i}" for i in range(12)]
    refs = [[vocab[i] for i in rng.integers(0, 12, size=6)] for _ in range(n)]
    good = [r[:5] + [vocab[rng.integers(0, 12)]] for r in refs]
    bad = [r[:2] + [vocab[rng.integers(0, 12)] for _ in range(4)] for r in refs]
    return refs, good, bad


def test_bootstrap_identical_systems_not_significant():
    rng = np.random.default_rng(5)
    refs, good, _ = _toy_systems(rng)
    p = M.bootstrap_significance(good, good, refs, n_resamples=200,
                                 rng=np.random.default_rng(0))
    assert 0.5 <= p <= 1.0
    assert p > 0.05


def test_bootstrap_dominant_system_significant():
    rng = np.random.default_rng(6)
    refs, good, bad = _toy_systems(rng)
    p = M.bootstrap_significance(bad, good, refs, n_resamples=300,
                                 rng=np.random.default_rng(0))
    assert p <= 0.05


def test_bootstrap_fixed_seed_is_deterministic():
    rng = np.random.default_rng(7)
    refs, good, bad = _toy_systems(rng)
    p1 = M.bootstrap_significance(bad, good, refs, n_resamples=150,
                                  rng=np.random.default_rng(42))
    p2 = M.bootstrap_significance(bad, good, refs, n_resamples=150,
                                  rng=np.random.default_rng(42))
    assert p1 == p2


def test_bootstrap_misaligned_inputs():
    with pytest.raises(DataError):
        M.bootstrap_significance([["a"]], [["a"], ["b"]], [["a"], ["b"]])


# ---------------------------------------------------------------------------
# analysis statistics
# ---------------------------------------------------------------------------

def test_attention_norm_constant_is_zero():
    assert M.attention_norm_profile([[0.25, 0.75]] * 5) == 0.0


def test_attention_norm_alternating_one_hot():
    seq = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
    assert abs(M.attention_norm_profile(seq) - math.sqrt(2)) <= 1e-12


def test_attention_norm_uniform_to_one_hot():
    seq = [[0.25] * 4, [1.0, 0.0, 0.0, 0.0]]
    assert abs(M.attention_norm_profile(seq) - math.sqrt(0.75)) <= 1e-12
    assert abs(M.attention_norm_profile(seq) - 0.8660) <= 1e-4


def test_attention_norm_needs_two_steps():
    with pytest.raises(ContractError):
        M.attention_norm_profile([[1.0, 0.0]])


def test_lag_histogram_counts_and_means():
    bins = M.lag_histogram([1, 1, 1], [0, 2, 4])
    assert bins == [(0, 2, 3, 1.0), (2, 4, 0, None)]


def test_lag_histogram_bimodal_regions():
    values = [-1.25, -0.25, 3.0, 3.1]
    bins = M.lag_histogram(values, [-2, -1, 0, 1, 2, 3, 4])
    counts = [b[2] for b in bins]
    assert counts == [1, 1, 0, 0, 0, 2]
    occupied = [i for i, c in enumerate(counts) if c]
    assert len(occupied) >= 2 and occupied[0] <= 1 and occupied[-1] == 5


def test_lag_histogram_boundary_goes_right():
    bins = M.lag_histogram([2.0], [0, 2, 4])
    assert bins[0][2] == 0 and bins[1][2] == 1


def test_lag_histogram_validates_edges():
    with pytest.raises(ContractError):
        M.lag_histogram([1.0], [0])
    with pytest.raises(ContractError):
        M.lag_histogram([1.0], [0, 0, 1])


def test_reward_config_validation():
    with pytest.raises(ContractError):
        M.RewardConfig(c_star=0)
    with pytest.raises(ContractError):
        M.RewardConfig(d_star=0.0)


def test_bleu_avp_selection_ordering_scale_invariant():
    evals = [(50.0, 0.7), (52.0, 0.8), (40.0, 0.5)]
    ratios_100 = [b / a for b, a in evals]
    ratios_unit = [(b / 100.0) / a for b, a in evals]
    assert np.argmax(ratios_100) == np.argmax(ratios_unit)
