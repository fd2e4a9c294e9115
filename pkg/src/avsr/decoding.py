"""Frame-synchronous beam search and greedy decoding for the transducer.

Per frame a hypothesis either takes the blank (advancing to the next frame)
or emits a symbol and re-queries the prediction network, up to a per-frame
symbol cap. Hypotheses with identical label sequences are merged by
log-sum; pruning keeps the best `beam_width`, breaking score ties in favor
of the lexicographically smaller label sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import EmptyInput
from .transducer import transducer_loss

DEFAULT_BEAM_WIDTH = 4
DEFAULT_MAX_SYMBOLS_PER_FRAME = 10


@dataclass
class BeamHypothesis:
    labels: Tuple[int, ...]
    log_score: float
    decoder_state: object = field(repr=False, default=None)
    decoder_out: object = field(repr=False, default=None)


@dataclass(frozen=True)
class DecodeResult:
    labels: Tuple[int, ...]
    log_score: float


def _merge(pool: Dict[Tuple[int, ...], BeamHypothesis], hyp: BeamHypothesis) -> None:
    existing = pool.get(hyp.labels)
    if existing is None:
        pool[hyp.labels] = hyp
    else:
        existing.log_score = float(np.logaddexp(existing.log_score, hyp.log_score))


def _prune(pool: Dict[Tuple[int, ...], BeamHypothesis], width: int) -> Dict[Tuple[int, ...], BeamHypothesis]:
    ranked = sorted(pool.values(), key=lambda h: (-h.log_score, h.labels))
    return {h.labels: h for h in ranked[:width]}


def beam_decode(
    enc: torch.Tensor,
    model,
    beam_width: int = DEFAULT_BEAM_WIDTH,
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS_PER_FRAME,
    nbest: Optional[int] = None,
) -> List[DecodeResult]:
    """Decode one encoded utterance (T, enc_dim) into ranked label sequences."""
    if beam_width < 1:
        raise ValueError("beam width must be at least 1")
    if enc.shape[0] == 0:
        raise EmptyInput("encoder output is empty")
    blank = model.blank_index
    vocab = model.config.vocab_size

    with torch.no_grad():
        state, out = model.decoder_start()
        beam = {(): BeamHypothesis((), 0.0, state, out)}
        for t in range(enc.shape[0]):
            enc_t = enc[t]
            level = beam
            next_frame: Dict[Tuple[int, ...], BeamHypothesis] = {}
            for depth in range(max_symbols_per_frame + 1):
                new_level: Dict[Tuple[int, ...], BeamHypothesis] = {}
                for hyp in level.values():
                    log_probs = model.joint_log_probs_single(enc_t, hyp.decoder_out)
                    _merge(
                        next_frame,
                        BeamHypothesis(
                            hyp.labels,
                            hyp.log_score + float(log_probs[blank]),
                            hyp.decoder_state,
                            hyp.decoder_out,
                        ),
                    )
                    if depth == max_symbols_per_frame:
                        continue
                    for k in range(vocab):
                        if k == blank:
                            continue
                        _merge(
                            new_level,
                            BeamHypothesis(
                                hyp.labels + (k,),
                                hyp.log_score + float(log_probs[k]),
                            ),
                        )
                if not new_level:
                    break
                new_level = _prune(new_level, beam_width)
                for hyp in new_level.values():
                    # decoder state is a function of the label sequence alone
                    hyp.decoder_state, hyp.decoder_out = _advance_via_prefix(
                        model, level, hyp.labels
                    )
                level = new_level
            beam = _prune(next_frame, beam_width)

    ranked = sorted(beam.values(), key=lambda h: (-h.log_score, h.labels))
    limit = beam_width if nbest is None else min(nbest, len(ranked))
    return [DecodeResult(h.labels, h.log_score) for h in ranked[:limit]]


def _advance_via_prefix(model, level, labels):
    parent = level.get(labels[:-1])
    if parent is not None:
        return model.decoder_advance(parent.decoder_state, labels[-1])
    # prefix was pruned from the level; rebuild the decoder state from scratch
    state, out = model.decoder_start()
    for lab in labels:
        state, out = model.decoder_advance(state, lab)
    return state, out


def greedy_decode(
    enc: torch.Tensor,
    model,
    max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS_PER_FRAME,
) -> DecodeResult:
    """Commit the argmax symbol at every step; blank advances the frame."""
    if enc.shape[0] == 0:
        raise EmptyInput("encoder output is empty")
    blank = model.blank_index
    with torch.no_grad():
        state, out = model.decoder_start()
        labels: List[int] = []
        score = 0.0
        for t in range(enc.shape[0]):
            emitted = 0
            while True:
                log_probs = model.joint_log_probs_single(enc[t], out)
                k = int(np.argmax(log_probs))
                if k == blank or emitted >= max_symbols_per_frame:
                    score += float(log_probs[blank])
                    break
                labels.append(k)
                score += float(log_probs[k])
                state, out = model.decoder_advance(state, k)
                emitted += 1
    return DecodeResult(tuple(labels), score)


def sequence_log_likelihood(enc: torch.Tensor, model, labels: Sequence[int]) -> float:
    """Exact log P(labels | enc): full forward over the alignment lattice."""
    labels = list(labels)
    with torch.no_grad():
        dec_outs = []
        state, out = model.decoder_start()
        dec_outs.append(out)
        for lab in labels:
            state, out = model.decoder_advance(state, lab)
            dec_outs.append(out)
        t_len = enc.shape[0]
        lattice = np.stack(
            [
                np.stack([model.joint_log_probs_single(enc[t], d) for d in dec_outs])
                for t in range(t_len)
            ]
        )
    loss, _ = transducer_loss(lattice, labels, model.blank_index)
    return -loss


def exhaustive_decode(
    enc: torch.Tensor,
    model,
    max_length: int,
) -> DecodeResult:
    """Oracle: score every label sequence up to max_length with the full
    forward algorithm and return the argmax. Exponential; tiny models only."""
    vocab = model.config.vocab_size
    blank = model.blank_index
    best: Optional[DecodeResult] = None
    stack: List[Tuple[int, ...]] = [()]
    while stack:
        seq = stack.pop()
        score = sequence_log_likelihood(enc, model, seq)
        cand = DecodeResult(seq, score)
        if (
            best is None
            or cand.log_score > best.log_score
            or (cand.log_score == best.log_score and cand.labels < best.labels)
        ):
            best = cand
        if len(seq) < max_length:
            for k in range(vocab):
                if k != blank:
                    stack.append(seq + (k,))
    return best


def format_nbest(utt_id: str, results: Sequence[DecodeResult], inventory) -> List[str]:
    """Line-delimited n-best records: id, rank, score, hypothesis text."""
    lines = []
    for rank, res in enumerate(results, start=1):
        text = inventory.decode(res.labels)
        lines.append(f"{utt_id}\t{rank}\t{res.log_score:.6f}\t{text}")
    return lines
