"""Word error rate with a deterministic alignment and bootstrap confidence."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import UndefinedCi

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_text(text: str, lowercase: bool = True, strip_punctuation: bool = True) -> str:
    if lowercase:
        text = text.lower()
    if strip_punctuation:
        text = text.translate(_PUNCT_TABLE)
    return " ".join(text.split())


def tokenize(text: Union[str, Sequence[str]], normalize: bool = True) -> List[str]:
    if not isinstance(text, str):
        return list(text)
    if normalize:
        text = normalize_text(text)
    return text.split()


@dataclass
class WerReport:
    wer: float                      # percent, can exceed 100
    substitutions: int
    insertions: int
    deletions: int
    num_ref_words: int
    ci_halfwidth_95: Optional[float] = None
    degenerate: bool = False

    @property
    def num_errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_counts(ref: Sequence[str], hyp: Sequence[str]) -> Tuple[int, int, int]:
    """Levenshtein alignment with unit costs; ties broken sub > del > ins."""
    r, h = len(ref), len(hyp)
    cost = np.zeros((r + 1, h + 1), dtype=np.int64)
    cost[:, 0] = np.arange(r + 1)
    cost[0, :] = np.arange(h + 1)
    for i in range(1, r + 1):
        for j in range(1, h + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = cost[i - 1, j] + 1
            ins = cost[i, j - 1] + 1
            cost[i, j] = min(sub, dele, ins)

    subs = dels = inss = 0
    i, j = r, h
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return subs, inss, dels


def word_error_rate(
    ref: Union[str, Sequence[str]],
    hyp: Union[str, Sequence[str]],
    normalize: bool = True,
) -> WerReport:
    ref_tokens = tokenize(ref, normalize)
    hyp_tokens = tokenize(hyp, normalize)
    subs, inss, dels = edit_counts(ref_tokens, hyp_tokens)
    n = len(ref_tokens)
    degenerate = n == 0 and len(hyp_tokens) > 0
    denom = n if n > 0 else 1
    wer = 100.0 * (subs + inss + dels) / denom
    return WerReport(wer, subs, inss, dels, n, degenerate=degenerate)


def confidence_interval_95(
    per_utterance_errors: Sequence[float],
    per_utterance_ref_words: Sequence[float],
    method: str = "bootstrap",
    resamples: int = 10_000,
    seed: int = 0,
) -> float:
    """Half width (percent WER) of the 95% interval under utterance resampling."""
    errors = np.asarray(per_utterance_errors, dtype=np.float64)
    words = np.asarray(per_utterance_ref_words, dtype=np.float64)
    if errors.shape != words.shape or errors.ndim != 1:
        raise ValueError("errors and ref word counts must be equal-length vectors")
    n = errors.size
    if n < 2:
        raise UndefinedCi("confidence interval needs at least two utterances")
    total_words = words.sum()
    if total_words <= 0:
        raise UndefinedCi("confidence interval needs reference words")

    if method == "bootstrap":
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, n, size=(resamples, n))
        err_sums = errors[idx].sum(axis=1)
        word_sums = np.maximum(words[idx].sum(axis=1), 1.0)
        wers = 100.0 * err_sums / word_sums
        lo, hi = np.percentile(wers, [2.5, 97.5])
        return float((hi - lo) / 2.0)
    if method == "normal":
        # Delta method for the ratio estimator sum(e) / sum(n).
        w = errors.sum() / total_words
        residuals = errors - w * words
        var = residuals @ residuals * n / (n - 1)
        return float(1.96 * np.sqrt(var) / total_words * 100.0)
    raise ValueError(f"unknown CI method {method!r}")


def score_corpus(
    refs: Sequence[Union[str, Sequence[str]]],
    hyps: Sequence[Union[str, Sequence[str]]],
    normalize: bool = True,
    ci_method: str = "bootstrap",
    ci_seed: int = 0,
) -> WerReport:
    """Pooled WER over utterance pairs, CI from utterance-level resampling."""
    if len(refs) != len(hyps):
        raise ValueError("need one hypothesis per reference")
    reports = [word_error_rate(r, h, normalize) for r, h in zip(refs, hyps)]
    subs = sum(r.substitutions for r in reports)
    inss = sum(r.insertions for r in reports)
    dels = sum(r.deletions for r in reports)
    n = sum(r.num_ref_words for r in reports)
    denom = n if n > 0 else 1
    wer = 100.0 * (subs + inss + dels) / denom
    ci = None
    if len(reports) >= 2 and n > 0:
        ci = confidence_interval_95(
            [r.num_errors for r in reports],
            [r.num_ref_words for r in reports],
            method=ci_method,
            seed=ci_seed,
        )
    return WerReport(wer, subs, inss, dels, n, ci_halfwidth_95=ci,
                     degenerate=any(r.degenerate for r in reports))
