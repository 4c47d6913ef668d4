"""Quality and latency metrics, reward computation, and significance tests.

All functions here are pure; scores are on the conventional 0-100 BLEU
scale. Latency metrics operate on the delay profile g, where g[t] is the
number of source tokens read when content token t was committed.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError


@dataclass
class RewardConfig:
    """Reward hyperparameters: consecutive-wait and proportion targets.

    ``alpha`` weighs the consecutive-wait term, ``beta`` the hinge on the
    average proportion above ``d_star``. Positive alpha (the literal
    published setting) turns the wait term into a bonus; experiment presets
    flip it to a penalty. ``running_avp`` switches the proportion term from
    terminal-only to a per-step running value.
    """

    alpha: float = 0.025
    beta: float = -1.0
    c_star: int = 2
    d_star: float = 0.3
    running_avp: bool = False

    def __post_init__(self):
        if self.c_star < 1:
            raise ContractError("RewardConfig: c_star must be >= 1")
        if not 0.0 < self.d_star <= 1.0:
            raise ContractError("RewardConfig: d_star must be in (0, 1]")


@dataclass
class BleuBreakdown:
    """N-gram counts behind a smoothed sentence BLEU score."""

    matches: list
    totals: list
    brevity_penalty: float
    score: float


@dataclass
class LatencyStats:
    """Per-sentence latency numbers plus corpus means."""

    avl: list = field(default_factory=list)
    avp: list = field(default_factory=list)
    max_cw: list = field(default_factory=list)

    @property
    def avl_mean(self) -> float:
        return float(np.mean(self.avl)) if self.avl else float("nan")

    @property
    def avp_mean(self) -> float:
        return float(np.mean(self.avp)) if self.avp else float("nan")

    @property
    def max_cw_mean(self) -> float:
        return float(np.mean(self.max_cw)) if self.max_cw else float("nan")


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_matches(hyp, ref, n):
    hyp_counts = _ngram_counts(hyp, n)
    ref_counts = _ngram_counts(ref, n)
    matches = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    total = max(len(hyp) - n + 1, 0)
    return matches, total


def smoothed_sentence_bleu(hyp, ref, max_order: int = 4) -> float:
    """Sentence BLEU with add-one smoothing on orders above 1.

    The unigram precision is left unsmoothed so an empty or fully wrong
    hypothesis scores exactly 0 and an exact match scores exactly 100.
    """
    return smoothed_sentence_bleu_breakdown(hyp, ref, max_order).score


def smoothed_sentence_bleu_breakdown(hyp, ref, max_order: int = 4) -> BleuBreakdown:
    hyp = list(hyp)
    ref = list(ref)
    if not ref:
        raise ContractError("smoothed_sentence_bleu: empty reference")
    if not hyp:
        return BleuBreakdown([0] * max_order, [0] * max_order, 0.0, 0.0)
    matches, totals = [], []
    log_precisions = []
    for n in range(1, max_order + 1):
        m, c = _clipped_matches(hyp, ref, n)
        matches.append(m)
        totals.append(c)
        if n == 1:
            if m == 0:
                return BleuBreakdown(matches + [0] * (max_order - n),
                                     totals + [0] * (max_order - n), 0.0, 0.0)
            log_precisions.append(math.log(m / c))
        else:
            log_precisions.append(math.log((m + 1.0) / (c + 1.0)))
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    score = 100.0 * bp * math.exp(sum(log_precisions) / max_order)
    return BleuBreakdown(matches, totals, bp, score)


def corpus_bleu(hyps, refs, max_order: int = 4) -> float:
    """Standard unsmoothed corpus BLEU-4 with aggregated counts."""
    hyps = [list(h) for h in hyps]
    refs = [list(r) for r in refs]
    if len(hyps) != len(refs):
        raise DataError(f"corpus_bleu: {len(hyps)} hypotheses vs {len(refs)} references")
    if any(not r for r in refs):
        raise ContractError("corpus_bleu: empty reference sentence")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            m, c = _clipped_matches(hyp, ref, n)
            matches[n - 1] += m
            totals[n - 1] += c
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / c) for m, c in zip(matches, totals)) / max_order
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def quality_reward_trace(prefixes, ref):
    """Per-commit differences of smoothed BLEU over growing prefixes.

    ``prefixes`` holds the committed content prefix after each content
    WRITE; the deltas telescope to the final sentence score exactly.
    """
    deltas = []
    prev_score = 0.0
    prev_len = 0
    for prefix in prefixes:
        prefix = list(prefix)
        if len(prefix) != prev_len + 1:
            raise ContractError(
                f"quality_reward_trace: prefixes must grow by one token "
                f"({prev_len} -> {len(prefix)})")
        score = smoothed_sentence_bleu(prefix, ref)
        deltas.append(score - prev_score)
        prev_score = score
        prev_len = len(prefix)
    return deltas


def latency_reward(c_t: int, d_t: float, cfg: RewardConfig, is_terminal: bool) -> float:
    """Consecutive-wait term plus the hinge on the delay proportion."""
    if c_t < 0:
        raise ContractError("latency_reward: negative consecutive-wait count")
    sign = (c_t > cfg.c_star) - (c_t < cfg.c_star)
    reward = cfg.alpha * (sign + 1.0)
    if is_terminal or cfg.running_avp:
        reward += cfg.beta * max(d_t - cfg.d_star, 0.0)
    return reward


def consecutive_wait_trace(actions):
    """Running consecutive-READ counter: +1 on READ, reset on WRITE."""
    trace = []
    c = 0
    for a in actions:
        if a == "R":
            c += 1
        elif a == "W":
            c = 0
        else:
            raise ContractError(f"consecutive_wait_trace: unknown action {a!r}")
        trace.append(c)
    return trace


# ---------------------------------------------------------------------------
# Latency metrics
# ---------------------------------------------------------------------------

def average_proportion(g, src_len: int, tgt_len: int) -> float:
    """Mean fraction of source read at each commit: sum(g) / (|src| * |tgt|)."""
    g = list(g)
    if not g:
        raise ContractError("average_proportion: empty delay profile")
    if len(g) != tgt_len:
        raise ContractError(f"average_proportion: len(g)={len(g)} vs tgt_len={tgt_len}")
    if min(g) < 1 or max(g) > src_len:
        raise ContractError("average_proportion: g values outside [1, src_len]")
    return sum(g) / (src_len * tgt_len)


def average_lagging(g, src_len: int, tgt_len: int) -> float:
    """Tokens the writer lags behind an ideal proportional reader.

    Averages g[t] - (t - 1) / r over commits up to the first one made with
    the source fully read, where r is the target/source length ratio.
    """
    g = list(g)
    if not g:
        raise ContractError("average_lagging: empty delay profile")
    if tgt_len < 1:
        raise ContractError("average_lagging: tgt_len must be >= 1")
    r = tgt_len / src_len
    tau = len(g)
    for t, gt in enumerate(g, start=1):
        if gt >= src_len:
            tau = t
            break
    return sum(g[t - 1] - (t - 1) / r for t in range(1, tau + 1)) / tau


def delays_from_actions(actions, ends_with_eos: bool):
    """Rebuild the delay profile g from an action string.

    The terminal EOS commit, when present, is the final WRITE and carries
    no delay entry of its own.
    """
    g = []
    reads = 0
    for a in actions:
        if a == "R":
            reads += 1
        elif a == "W":
            g.append(reads)
        else:
            raise ContractError(f"delays_from_actions: unknown action {a!r}")
    if ends_with_eos:
        if not g:
            raise ContractError("delays_from_actions: EOS flagged but no WRITE present")
        g = g[:-1]
    return g


# ---------------------------------------------------------------------------
# Significance testing and analysis statistics
# ---------------------------------------------------------------------------

def bootstrap_significance(hyps_a, hyps_b, refs, n_resamples: int = 1000, rng=None) -> float:
    """Paired bootstrap p-value for "system B beats system A".

    Resamples sentence indices with replacement (resample size equals the
    corpus size) and reports the fraction of resamples in which A's corpus
    BLEU is at least B's. Identical systems therefore give p = 1.0.
    """
    hyps_a = [list(h) for h in hyps_a]
    hyps_b = [list(h) for h in hyps_b]
    refs = [list(r) for r in refs]
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise DataError("bootstrap_significance: misaligned system outputs")
    if n_resamples < 100:
        raise ContractError("bootstrap_significance: need at least 100 resamples")
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(refs)
    wins = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        score_a = corpus_bleu([hyps_a[i] for i in idx], [refs[i] for i in idx])
        score_b = corpus_bleu([hyps_b[i] for i in idx], [refs[i] for i in idx])
        if score_a >= score_b:
            wins += 1
    return wins / n_resamples


def attention_norm_profile(attention_sequence) -> float:
    """Mean L2 distance between consecutive attention weight vectors."""
    seq = [np.asarray(w, dtype=np.float64) for w in attention_sequence]
    if len(seq) < 2:
        raise ContractError("attention_norm_profile: need at least 2 time steps")
    dim = seq[0].shape
    if any(w.shape != dim for w in seq):
        raise ContractError("attention_norm_profile: inconsistent vector lengths")
    return float(np.mean([np.linalg.norm(b - a) for a, b in zip(seq, seq[1:])]))


def lag_histogram(values, bin_edges):
    """Bin values into half-open [lo, hi) bins with counts and means.

    Returns a list of (lo, hi, count, mean) tuples; mean is None for empty
    bins. Values outside the edges are ignored.
    """
    edges = list(bin_edges)
    if len(edges) < 2:
        raise ContractError("lag_histogram: need at least two bin edges")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ContractError("lag_histogram: edges must be strictly increasing")
    values = list(values)
    if not values:
        raise ContractError("lag_histogram: no values")
    bins = []
    for lo, hi in zip(edges, edges[1:]):
        members = [v for v in values if lo <= v < hi]
        mean = float(np.mean(members)) if members else None
        bins.append((lo, hi, len(members), mean))
    return bins
