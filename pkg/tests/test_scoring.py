import itertools
from functools import lru_cache

import numpy as np
import pytest

from avsr.errors import UndefinedCi
from avsr.scoring import (
    confidence_interval_95,
    edit_counts,
    normalize_text,
    score_corpus,
    word_error_rate,
)


def oracle_distance(ref, hyp):
    """Rolling-row minimal edit distance, written independently of edit_counts."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def enumerate_scripts_distance(ref, hyp):
    """Exponential oracle: minimum cost over every explicit edit script."""

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref) and j == len(hyp):
            return 0
        options = []
        if i < len(ref) and j < len(hyp):
            options.append(go(i + 1, j + 1) + (ref[i] != hyp[j]))
        if i < len(ref):
            options.append(go(i + 1, j) + 1)
        if j < len(hyp):
            options.append(go(i, j + 1) + 1)
        return min(options)

    return go(0, 0)


class TestWordErrorRate:
    def test_identical(self):
        rep = word_error_rate("the quick fox", "the quick fox")
        assert rep.wer == 0.0
        assert (rep.substitutions, rep.insertions, rep.deletions) == (0, 0, 0)

    def test_spec_worked_example(self):
        rep = word_error_rate("a b c", "a x c d", normalize=False)
        assert (rep.substitutions, rep.insertions, rep.deletions) == (1, 1, 0)
        assert abs(rep.wer - 200.0 / 3.0) < 1e-9

    def test_all_deletions(self):
        rep = word_error_rate("a b", "")
        assert rep.deletions == 2
        assert rep.wer == 100.0

    def test_empty_reference_flagged(self):
        rep = word_error_rate("", "a b c")
        assert rep.degenerate
        assert rep.num_ref_words == 0
        assert rep.wer == 300.0

    def test_normalization(self):
        rep = word_error_rate("Hello, World!", "hello world")
        assert rep.wer == 0.0
        assert normalize_text("Hello,  World!") == "hello world"
        rep_raw = word_error_rate("Hello, World!", "hello world", normalize=False)
        assert rep_raw.wer > 0.0

    def test_matches_rolling_oracle_exhaustively(self):
        alphabet = "abc"
        seqs = [
            list(s)
            for n in range(0, 5)
            for s in itertools.product(alphabet, repeat=n)
        ]
        for ref in seqs:
            for hyp in seqs:
                s, i, d = edit_counts(ref, hyp)
                assert s + i + d == oracle_distance(ref, hyp), (ref, hyp)

    def test_matches_script_enumeration_on_short_pairs(self):
        alphabet = "abc"
        seqs = [
            tuple(s)
            for n in range(0, 4)
            for s in itertools.product(alphabet, repeat=n)
        ]
        rng = np.random.default_rng(5)
        for _ in range(300):
            ref = list(seqs[rng.integers(len(seqs))])
            hyp = list(seqs[rng.integers(len(seqs))])
            s, i, d = edit_counts(ref, hyp)
            assert s + i + d == enumerate_scripts_distance(tuple(ref), tuple(hyp))

    def test_swap_symmetry(self):
        # Total edit count is symmetric; the S/I/D split can differ when
        # several alignments are minimal, so the exchange is on I+D.
        rng = np.random.default_rng(9)
        alphabet = ["a", "b", "c"]
        exact_exchange = 0
        trials = 500
        for _ in range(trials):
            ref = [alphabet[k] for k in rng.integers(0, 3, size=rng.integers(0, 7))]
            hyp = [alphabet[k] for k in rng.integers(0, 3, size=rng.integers(0, 7))]
            s1, i1, d1 = edit_counts(ref, hyp)
            s2, i2, d2 = edit_counts(hyp, ref)
            assert s1 + i1 + d1 == s2 + i2 + d2
            exact_exchange += (i1, d1) == (d2, i2) and s1 == s2
        assert exact_exchange > 0.95 * trials


class TestConfidenceInterval:
    def test_single_utterance_undefined(self):
        with pytest.raises(UndefinedCi):
            confidence_interval_95([1.0], [10.0])

    def test_zero_variance_corpus(self):
        errors = [2.0] * 50
        words = [10.0] * 50
        ci = confidence_interval_95(errors, words, resamples=4000, seed=1)
        assert ci == 0.0

    def test_bootstrap_matches_binomial_closed_form(self):
        rng = np.random.default_rng(1234)
        words = np.full(1000, 10.0)
        errors = rng.binomial(10, 0.2, size=1000).astype(float)
        ci = confidence_interval_95(errors, words, resamples=10_000, seed=7)
        p_hat = errors.sum() / words.sum()
        closed = 1.96 * np.sqrt(p_hat * (1 - p_hat) / words.sum()) * 100.0
        assert abs(ci - closed) / closed < 0.20
        assert abs(closed - 0.78) < 0.1

    def test_normal_mode_agrees_with_bootstrap(self):
        rng = np.random.default_rng(8)
        words = rng.integers(5, 20, size=400).astype(float)
        errors = rng.binomial(words.astype(int), 0.15).astype(float)
        boot = confidence_interval_95(errors, words, seed=3)
        norm = confidence_interval_95(errors, words, method="normal")
        assert abs(boot - norm) / norm < 0.25

    def test_bootstrap_deterministic_under_seed(self):
        errors = [1.0, 3.0, 0.0, 2.0, 1.0]
        words = [8.0, 9.0, 7.0, 10.0, 6.0]
        a = confidence_interval_95(errors, words, seed=42)
        b = confidence_interval_95(errors, words, seed=42)
        assert a == b


class TestScoreCorpus:
    def test_pooled_counts(self):
        refs = ["a b c", "d e"]
        hyps = ["a b c", "d x"]
        rep = score_corpus(refs, hyps)
        assert rep.num_ref_words == 5
        assert rep.substitutions == 1
        assert abs(rep.wer - 20.0) < 1e-12
        assert rep.ci_halfwidth_95 is not None and rep.ci_halfwidth_95 > 0

    def test_perfect_corpus(self):
        refs = ["x y", "z w q"]
        rep = score_corpus(refs, refs)
        assert rep.wer == 0.0
        assert rep.ci_halfwidth_95 == 0.0
