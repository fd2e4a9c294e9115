"""Single-process training: Adam with warmup/hold/decay schedules,
sentence-level modality dropout, optional multistyle overlap augmentation,
and checkpoint selection on a held-out shard."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .audio_frontend import Waveform
from .corruption import multistyle_augment
from .decoding import beam_decode, greedy_decode
from .errors import NonFiniteGradient, NonFiniteLoss
from .model import AvsrModel, GraphemeInventory, ModalitySwitch
from .scoring import WerReport, score_corpus


@dataclass(frozen=True)
class LrSchedule:
    """Linear ramp to peak, hold, then exponential decay."""

    peak: float = 2e-3
    warmup_steps: int = 20_000
    hold_steps: int = 50_000
    decay_half_life_steps: int = 50_000

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        if step <= self.warmup_steps:
            return self.peak * step / max(1, self.warmup_steps)
        knee = self.warmup_steps + self.hold_steps
        if step <= knee:
            return self.peak
        return self.peak * 0.5 ** ((step - knee) / self.decay_half_life_steps)

    @classmethod
    def paper_default(cls) -> "LrSchedule":
        return cls(peak=2e-3, warmup_steps=20_000, hold_steps=50_000)

    @classmethod
    def paper_av_dropout(cls) -> "LrSchedule":
        # higher peak, constant until step 100k
        return cls(peak=4e-3, warmup_steps=20_000, hold_steps=80_000)


def lr_at(step: int, schedule: LrSchedule) -> float:
    return schedule.lr_at(step)


@dataclass(frozen=True)
class DropoutPolicy:
    """Per-utterance modality dropout; never drops both in one utterance."""

    p_drop_audio: float = 0.0
    p_drop_video: float = 0.0

    def __post_init__(self):
        for p in (self.p_drop_audio, self.p_drop_video):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")

    def draw(self, rng: np.random.Generator) -> ModalitySwitch:
        if rng.random() < self.p_drop_audio:
            return ModalitySwitch.VIDEO_ONLY
        if rng.random() < self.p_drop_video:
            return ModalitySwitch.AUDIO_ONLY
        return ModalitySwitch.BOTH


def apply_modality_dropout(
    batch_size: int, policy: DropoutPolicy, rng: np.random.Generator
) -> List[ModalitySwitch]:
    return [policy.draw(rng) for _ in range(batch_size)]


@dataclass
class AdamMoments:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    count: int = 0

    @classmethod
    def for_params(cls, params: Dict[str, torch.Tensor]) -> "AdamMoments":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamMoments:
    """One Adam update in place: m-hat/(sqrt(v-hat) + eps) with bias correction."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    moments.count += 1
    t = moments.count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = moments.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = moments.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
    return moments


@dataclass
class TrainingExample:
    """One utterance prepared for training/evaluation."""

    utt_id: str
    transcript: str
    label_ids: np.ndarray
    audio_features: Optional[np.ndarray]      # (T, audio_dim)
    thumbnails: Optional[np.ndarray]          # (T, H, W, 3) floats in [0, 1]
    waveform: Optional[Waveform] = None       # kept for augmentation
    num_video_frames: Optional[int] = None


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch_size: int = 16
    seed: int = 0
    schedule: LrSchedule = field(default_factory=LrSchedule)
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)
    train_switch: ModalitySwitch = ModalitySwitch.BOTH
    eval_every: int = 200
    multistyle_p: float = 0.0
    multistyle_range_db: Tuple[float, float] = (0.0, 20.0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class MetricsRow:
    step: int
    loss: float
    lr: float
    heldout_wer: Optional[float] = None


@dataclass
class TrainResult:
    metrics: List[MetricsRow]
    best_state: Dict[str, torch.Tensor]
    best_wer: float
    best_step: int

    @property
    def loss_history(self) -> List[float]:
        return [row.loss for row in self.metrics]


def _group_key(ex: TrainingExample, switch: ModalitySwitch):
    t_a = ex.audio_features.shape[0] if ex.audio_features is not None else -1
    t_v = ex.thumbnails.shape[0] if ex.thumbnails is not None else -1
    return (t_a, t_v, len(ex.label_ids), switch.audio_on, switch.video_on)


def _stack_group(model, group, switch):
    dtype = model.config.torch_dtype()
    audio = thumbs = None
    if group[0].audio_features is not None:
        audio = torch.tensor(
            np.stack([ex.audio_features for ex in group]), dtype=dtype
        )
    if group[0].thumbnails is not None and switch.video_on:
        thumbs = torch.tensor(np.stack([ex.thumbnails for ex in group]), dtype=dtype)
    labels = torch.tensor(np.stack([ex.label_ids for ex in group]), dtype=torch.int64)
    return audio, thumbs, labels


def batch_gradient(
    model: AvsrModel,
    batch: Sequence[TrainingExample],
    switches: Sequence[ModalitySwitch],
    zero_grad: bool = True,
) -> float:
    """Accumulate gradients of the mean utterance loss over the batch.

    Utterances are grouped by (shapes, switch); each homogeneous group runs
    batched, contributing group_size / batch_size of the mean loss, so the
    result is identical to a single large-batch gradient.
    """
    if zero_grad:
        model.zero_grad(set_to_none=False)
    groups: Dict[tuple, List[int]] = {}
    for i, (ex, sw) in enumerate(zip(batch, switches)):
        groups.setdefault(_group_key(ex, sw), []).append(i)
    total = 0.0
    n = len(batch)
    for idxs in groups.values():
        group = [batch[i] for i in idxs]
        switch = switches[idxs[0]]
        audio, thumbs, labels = _stack_group(model, group, switch)
        loss = model.full_loss(audio, thumbs, labels, switch) * (len(group) / n)
        loss.backward()
        total += loss.item()
    return total


def evaluate_wer(
    model: AvsrModel,
    examples: Sequence[TrainingExample],
    inventory: GraphemeInventory,
    switch: ModalitySwitch = ModalitySwitch.BOTH,
    beam_width: Optional[int] = None,
    max_symbols_per_frame: int = 4,
    ci_seed: int = 0,
) -> WerReport:
    """Decode every example (greedy unless beam_width given) and score."""
    refs, hyps = [], []
    dtype = model.config.torch_dtype()
    model.eval()
    with torch.no_grad():
        for ex in examples:
            audio = (
                torch.tensor(ex.audio_features[None], dtype=dtype)
                if ex.audio_features is not None
                else None
            )
            thumbs = (
                torch.tensor(ex.thumbnails[None], dtype=dtype)
                if ex.thumbnails is not None and switch.video_on
                else None
            )
            features = model.forward_features(audio, thumbs, switch)
            enc = model.encode(features, switch)[0]
            if beam_width:
                result = beam_decode(
                    enc, model, beam_width=beam_width,
                    max_symbols_per_frame=max_symbols_per_frame,
                )[0]
            else:
                result = greedy_decode(
                    enc, model, max_symbols_per_frame=max_symbols_per_frame
                )
            refs.append(ex.transcript)
            hyps.append(inventory.decode(result.labels))
    model.train()
    return score_corpus(refs, hyps, ci_seed=ci_seed)


def train(
    model: AvsrModel,
    train_examples: Sequence[TrainingExample],
    heldout_examples: Sequence[TrainingExample],
    config: TrainConfig,
    inventory: GraphemeInventory,
    featurize_fn: Optional[Callable[[Waveform, Optional[int]], np.ndarray]] = None,
) -> TrainResult:
    """Run the loop; returns the metrics log and the argmin-heldout-WER state."""
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    params = dict(model.named_parameters())
    moments = AdamMoments.for_params(params)
    pool = [ex.waveform for ex in train_examples if ex.waveform is not None]

    both_modalities = config.train_switch.audio_on and config.train_switch.video_on
    metrics: List[MetricsRow] = []
    best_wer, best_state, best_step = math.inf, None, -1
    order: List[int] = []

    for step in range(config.steps):
        batch: List[TrainingExample] = []
        while len(batch) < min(config.batch_size, len(train_examples)):
            if not order:
                order = rng.permutation(len(train_examples)).tolist()
            batch.append(train_examples[order.pop()])

        if both_modalities:
            switches = apply_modality_dropout(len(batch), config.dropout, rng)
        else:
            switches = [config.train_switch] * len(batch)

        if config.multistyle_p > 0.0 and pool and featurize_fn is not None:
            batch = [
                _maybe_augment(ex, pool, rng, config, featurize_fn) for ex in batch
            ]

        loss = batch_gradient(model, batch, switches)
        if not math.isfinite(loss):
            raise NonFiniteLoss(
                f"training diverged at step {step}: loss {loss!r}"
            )
        lr = config.schedule.lr_at(step)
        grads = {
            name: p.grad if p.grad is not None else torch.zeros_like(p)
            for name, p in params.items()
        }
        adam_step(
            params, grads, moments, lr,
            beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
        )

        row = MetricsRow(step=step, loss=loss, lr=lr)
        last = step == config.steps - 1
        if heldout_examples and ((step + 1) % config.eval_every == 0 or last):
            report = evaluate_wer(
                model, heldout_examples, inventory, switch=config.train_switch
            )
            row.heldout_wer = report.wer
            if report.wer < best_wer:
                best_wer = report.wer
                best_step = step
                best_state = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }
        metrics.append(row)

    if best_state is None:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_step = config.steps - 1
        best_wer = math.nan
    return TrainResult(metrics, best_state, best_wer, best_step)


def _maybe_augment(ex, pool, rng, config, featurize_fn):
    if ex.waveform is None:
        return ex
    result = multistyle_augment(
        ex.waveform, pool, rng,
        p=config.multistyle_p, level_range_db=config.multistyle_range_db,
    )
    if not result.applied:
        return ex
    return replace_features(ex, featurize_fn(result.waveform, ex.num_video_frames))


def replace_features(ex: TrainingExample, audio_features: np.ndarray) -> TrainingExample:
    return TrainingExample(
        utt_id=ex.utt_id,
        transcript=ex.transcript,
        label_ids=ex.label_ids,
        audio_features=audio_features,
        thumbnails=ex.thumbnails,
        waveform=ex.waveform,
        num_video_frames=ex.num_video_frames,
    )
