"""Synthetic audio-visual task for desk-scale verification.

Each symbol is a letter spoken as a pure tone (audio) while a bright bar at
a letter-specific position is shown (video). Ambiguity knobs map letter
pairs to the same tone or the same visual pattern, so one modality alone
cannot separate them and the other carries measurable information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio_frontend import (
    FrameRateMode,
    MelFilterbank,
    Waveform,
    build_mel_filterbank,
    extract_features,
)
from .corruption import mix_at_snr, splice_overlap, OverlapSpec
from .model import GraphemeInventory, ModelConfig
from .training import TrainingExample
from .video_frontend import VideoClip, VideoFrontendConfig

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class ToyTaskSpec:
    letters: str = "abcde"
    num_train: int = 240
    num_heldout: int = 48
    symbols_per_utterance: int = 3
    video_frames_per_symbol: int = 6
    fps: Fraction = Fraction(25)
    thumbnail_size: int = 16
    num_mel_filters: int = 16
    tone_base_hz: float = 500.0
    tone_step_hz: float = 450.0
    amplitude: float = 0.30
    audio_noise_rms: float = 0.01
    video_noise: float = 0.04
    tail_margin_s: float = 0.05
    audio_ambiguous_pairs: Tuple[Tuple[str, str], ...] = ()
    video_ambiguous_pairs: Tuple[Tuple[str, str], ...] = ()
    seed: int = 0

    def inventory(self) -> GraphemeInventory:
        return GraphemeInventory.toy(self.letters)

    def tone_hz(self, letter: str) -> float:
        idx = self.letters.index(self._canonical(letter, self.audio_ambiguous_pairs))
        return self.tone_base_hz + self.tone_step_hz * idx

    def pattern_id(self, letter: str) -> int:
        return self.letters.index(self._canonical(letter, self.video_ambiguous_pairs))

    @staticmethod
    def _canonical(letter: str, pairs: Tuple[Tuple[str, str], ...]) -> str:
        for a, b in pairs:
            if letter == b:
                return a
        return letter


@dataclass
class ToyUtterance:
    utt_id: str
    waveform: Waveform
    video: VideoClip
    transcript: str


def _segment_envelope(length: int, fade_fraction: float = 0.3, floor: float = 0.1) -> np.ndarray:
    """Raised-cosine fade at both ends so segment boundaries are visible
    even between repeated symbols."""
    pos = (np.arange(length) + 0.5) / length
    fade = np.minimum(1.0, np.minimum(pos, 1.0 - pos) / fade_fraction)
    return floor + (1.0 - floor) * np.sin(0.5 * np.pi * fade) ** 2


def _render_video(spec: ToyTaskSpec, letters: Sequence[str], rng) -> np.ndarray:
    """A bright bar whose column encodes the symbol; its vertical extent
    opens and closes over the segment (a geometric cue that survives the
    per-frame normalization in the frontend, unlike brightness)."""
    size = spec.thumbnail_size
    frames_per = spec.video_frames_per_symbol
    t_total = frames_per * len(letters)
    frames = 0.1 + spec.video_noise * rng.random((t_total, size, size, 3))
    n_positions = len(spec.letters)
    span = max(1, (size - 2) // n_positions)
    env = _segment_envelope(frames_per)
    mid = size // 2
    max_half = mid - 2
    for i, letter in enumerate(letters):
        pid = spec.pattern_id(letter)
        col = 1 + pid * span
        for j in range(frames_per):
            half = max(1, int(round(env[j] * max_half)))
            t = i * frames_per + j
            frames[t, mid - half : mid + half, col : col + 2, :] = 0.9
    return np.clip(frames, 0.0, 1.0)


def _render_audio(spec: ToyTaskSpec, letters: Sequence[str], rng) -> Waveform:
    frames_per = spec.video_frames_per_symbol
    t_video = frames_per * len(letters)
    fps = float(spec.fps)
    num_samples = int(round(t_video / fps * SAMPLE_RATE)) + int(
        spec.tail_margin_s * SAMPLE_RATE
    )
    samples = spec.audio_noise_rms * rng.standard_normal(num_samples)
    t_axis = np.arange(num_samples) / SAMPLE_RATE
    for i, letter in enumerate(letters):
        start = int(round(i * frames_per / fps * SAMPLE_RATE))
        stop = int(round((i + 1) * frames_per / fps * SAMPLE_RATE))
        amp = spec.amplitude * rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        tone = amp * np.sin(2 * np.pi * spec.tone_hz(letter) * t_axis[start:stop] + phase)
        samples[start:stop] += tone * _segment_envelope(stop - start)
    return Waveform(np.clip(samples, -1.0, 1.0), SAMPLE_RATE)


def generate_utterance(spec: ToyTaskSpec, utt_id: str, rng) -> ToyUtterance:
    letters = [spec.letters[k] for k in rng.integers(0, len(spec.letters),
                                                     size=spec.symbols_per_utterance)]
    video = VideoClip(_render_video(spec, letters, rng), spec.fps)
    audio = _render_audio(spec, letters, rng)
    return ToyUtterance(utt_id, audio, video, " ".join(letters))


def generate_corpus(spec: ToyTaskSpec) -> Tuple[List[ToyUtterance], List[ToyUtterance]]:
    rng = np.random.default_rng(spec.seed)
    train = [generate_utterance(spec, f"train{i:04d}", rng) for i in range(spec.num_train)]
    heldout = [
        generate_utterance(spec, f"heldout{i:04d}", rng) for i in range(spec.num_heldout)
    ]
    return train, heldout


def toy_filterbank(spec: ToyTaskSpec) -> MelFilterbank:
    return build_mel_filterbank(num_filters=spec.num_mel_filters)


def toy_model_config(spec: ToyTaskSpec, dtype: str = "float32") -> ModelConfig:
    return ModelConfig(
        audio_dim=5 * spec.num_mel_filters,
        video_dim=32,
        encoder_layers=2,
        encoder_units=32,
        decoder_layers=1,
        decoder_hidden=64,
        decoder_proj=32,
        joint_dim=32,
        vocab_size=spec.inventory().size,
        video=VideoFrontendConfig(
            block_channels=(8, 16, 32),
            gn_groups=4,
            input_size=spec.thumbnail_size,
        ),
        dtype=dtype,
    )


def make_featurizer(
    spec: ToyTaskSpec, mode: FrameRateMode
) -> Callable[[Waveform, Optional[int]], np.ndarray]:
    fb = toy_filterbank(spec)

    def featurize(waveform: Waveform, num_video_frames: Optional[int]) -> np.ndarray:
        fs = extract_features(
            waveform, mode, fb=fb, num_video_frames=num_video_frames
        )
        return fs.frames.astype(np.float32)

    return featurize


def featurize_utterances(
    utterances: Sequence[ToyUtterance],
    spec: ToyTaskSpec,
    mode: Optional[FrameRateMode] = None,
    corrupt_fn: Optional[Callable[[Waveform, np.random.Generator], Waveform]] = None,
    corrupt_seed: int = 0,
) -> List[TrainingExample]:
    """Turn raw toy utterances into training examples.

    In variable mode the features align one-to-one with video frames. In
    fixed mode the thumbnails are duplicated to the nearest audio timestamp
    so both streams share a length.
    """
    if mode is None:
        mode = FrameRateMode.variable(spec.fps)
    inventory = spec.inventory()
    featurize = make_featurizer(spec, mode)
    rng = np.random.default_rng(corrupt_seed)
    out = []
    for utt in utterances:
        wave = utt.waveform if corrupt_fn is None else corrupt_fn(utt.waveform, rng)
        nvf = utt.video.num_frames
        feats = featurize(wave, nvf)
        thumbs = utt.video.frames
        if mode.kind == FrameRateMode.FIXED:
            fs_times = np.arange(feats.shape[0]) * 0.03 + 0.0125
            idx = np.clip(
                np.floor(fs_times * float(spec.fps)).astype(int), 0, nvf - 1
            )
            thumbs = thumbs[idx]
        else:
            t_min = min(feats.shape[0], thumbs.shape[0])
            feats, thumbs = feats[:t_min], thumbs[:t_min]
        out.append(
            TrainingExample(
                utt_id=utt.utt_id,
                transcript=utt.transcript,
                label_ids=np.asarray(inventory.encode(utt.transcript), dtype=np.int64),
                audio_features=feats,
                thumbnails=thumbs.astype(np.float32),
                waveform=wave,
                num_video_frames=nvf,
            )
        )
    return out


def toy_babble(
    pool: Sequence[ToyUtterance], rng: np.random.Generator, num_sources: int = 6
) -> Waveform:
    """Many-talker babble in the toy language: overlapped toy utterances."""
    lengths = [u.waveform.samples.size for u in pool]
    n = max(lengths)
    total = np.zeros(n)
    for _ in range(num_sources):
        src = pool[rng.integers(0, len(pool))].waveform.samples
        reps = -(-n // src.size)
        offset = rng.integers(0, src.size)
        total += np.roll(np.tile(src, reps)[:n], offset)
    rms = np.sqrt(np.mean(total**2))
    return Waveform(np.clip(0.15 * total / rms, -1.0, 1.0), SAMPLE_RATE)


def babble_corruptor(
    pool: Sequence[ToyUtterance], snr_db: float
) -> Callable[[Waveform, np.random.Generator], Waveform]:
    def corrupt(wave: Waveform, rng: np.random.Generator) -> Waveform:
        noise = toy_babble(pool, rng)
        return mix_at_snr(wave, noise, snr_db).waveform

    return corrupt


def overlap_corruptor(
    pool: Sequence[ToyUtterance], duration_s: float = 0.35
) -> Callable[[Waveform, np.random.Generator], Waveform]:
    def corrupt(wave: Waveform, rng: np.random.Generator) -> Waveform:
        competitor = pool[rng.integers(0, len(pool))].waveform
        position = "begin" if rng.random() < 0.5 else "end"
        spec = OverlapSpec(position=position, duration_s=duration_s)
        return splice_overlap(wave, competitor, spec).waveform

    return corrupt
