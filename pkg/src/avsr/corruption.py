"""Evaluation-set corruption: SNR-controlled noise, overlapping speech,
multistyle training mixes, synthetic babble, and the face-quality predicate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .audio_frontend import Waveform
from .errors import DegenerateSnr, MissingMetadata


@dataclass(frozen=True)
class SnrMixSpec:
    snr_db: float
    noise_source: str = "babble"


@dataclass(frozen=True)
class OverlapSpec:
    position: str = "begin"        # "begin" | "end"
    duration_s: float = 2.0
    gain_rule: str = "equal_energy"

    def __post_init__(self):
        if self.position not in ("begin", "end"):
            raise ValueError(f"overlap position must be begin or end, got {self.position!r}")


@dataclass(frozen=True)
class MixResult:
    waveform: Waveform
    noise_gain: float
    rescale: float = 1.0           # whole-mixture scale applied by the clip guard
    snr_db: Optional[float] = None


@dataclass(frozen=True)
class OverlapResult:
    waveform: Waveform
    gain: float
    overlap_samples: int
    position: str


def tile_or_crop(noise: np.ndarray, length: int) -> np.ndarray:
    if noise.size == 0:
        raise DegenerateSnr("empty noise source")
    if noise.size < length:
        reps = -(-length // noise.size)
        noise = np.tile(noise, reps)
    return noise[:length]


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float) -> MixResult:
    """Add noise scaled so speech RMS^2 / noise RMS^2 hits the target SNR.

    If the mixture leaves [-1, 1] the whole thing is rescaled (which
    preserves the SNR) and the scale recorded.
    """
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("speech and noise sample rates differ")
    speech_rms = speech.rms()
    if speech_rms == 0.0:
        raise DegenerateSnr("silent speech has no defined SNR")
    tiled = tile_or_crop(noise.samples, speech.samples.size)
    noise_rms = float(np.sqrt(np.mean(tiled**2)))
    if noise_rms == 0.0:
        raise DegenerateSnr("silent noise cannot be scaled to a target SNR")
    gain = speech_rms / (noise_rms * 10.0 ** (snr_db / 20.0))
    out = speech.samples + gain * tiled
    rescale = 1.0
    peak = float(np.max(np.abs(out))) if out.size else 0.0
    if peak > 1.0:
        rescale = 1.0 / peak
        out = out * rescale
    return MixResult(Waveform(out, speech.sample_rate), gain, rescale, snr_db)


def measured_snr_db(mix: MixResult, speech: Waveform) -> float:
    """SNR recovered from the mixture by subtracting the scaled speech."""
    clean = mix.rescale * speech.samples
    added = mix.waveform.samples - clean
    p_speech = np.mean(clean**2)
    p_noise = np.mean(added**2)
    return float(10.0 * np.log10(p_speech / p_noise))


def splice_overlap(utt: Waveform, competing: Waveform, spec: OverlapSpec) -> OverlapResult:
    """Add competing speech over one end at equal energy; the rest untouched."""
    if utt.sample_rate != competing.sample_rate:
        raise ValueError("utterance and competing sample rates differ")
    n = int(round(spec.duration_s * utt.sample_rate))
    n = min(n, utt.samples.size)          # truncate to the utterance
    if n == 0:
        return OverlapResult(Waveform(utt.samples.copy(), utt.sample_rate), 0.0, 0, spec.position)
    if competing.samples.size < n:
        raise ValueError("competing clip shorter than the overlap duration")
    segment = competing.samples[:n]
    window = utt.samples[:n] if spec.position == "begin" else utt.samples[-n:]
    utt_rms = float(np.sqrt(np.mean(window**2)))
    seg_rms = float(np.sqrt(np.mean(segment**2)))
    if utt_rms == 0.0 or seg_rms == 0.0:
        raise DegenerateSnr("equal-energy gain undefined on silent span")
    gain = utt_rms / seg_rms
    out = utt.samples.copy()
    if spec.position == "begin":
        out[:n] += gain * segment
    else:
        out[-n:] += gain * segment
    return OverlapResult(Waveform(out, utt.sample_rate), gain, n, spec.position)


@dataclass(frozen=True)
class AugmentResult:
    waveform: Waveform
    applied: bool
    snr_db: Optional[float] = None
    pool_index: Optional[int] = None


def multistyle_augment(
    utt: Waveform,
    training_pool: Sequence[Waveform],
    rng: np.random.Generator,
    p: float = 0.10,
    level_range_db: Tuple[float, float] = (0.0, 20.0),
) -> AugmentResult:
    """With probability p, mix in a random pool utterance at a uniform SNR."""
    if not training_pool:
        raise ValueError("augmentation pool is empty")
    if rng.random() >= p:
        return AugmentResult(utt, applied=False)
    idx = int(rng.integers(0, len(training_pool)))
    snr = float(rng.uniform(*level_range_db))
    mixed = mix_at_snr(utt, training_pool[idx], snr)
    return AugmentResult(mixed.waveform, applied=True, snr_db=snr, pool_index=idx)


def synth_babble(
    duration_s: float,
    rng: np.random.Generator,
    num_sources: int = 6,
    sample_rate: int = 16000,
) -> Waveform:
    """Self-contained babble stand-in: several speech-shaped noise sources.

    Each source is white noise smoothed toward low frequencies and slowly
    amplitude modulated, summed and normalized to 0.15 RMS.
    """
    n = int(round(duration_s * sample_rate))
    total = np.zeros(n)
    kernel = np.ones(16) / 16.0
    for _ in range(max(6, num_sources)):
        source = np.convolve(rng.standard_normal(n), kernel, mode="same")
        env_points = rng.uniform(0.2, 1.0, size=max(2, n // (sample_rate // 4) + 1))
        envelope = np.interp(np.arange(n), np.linspace(0, n - 1, env_points.size), env_points)
        total += source * envelope
    rms = np.sqrt(np.mean(total**2))
    return Waveform(0.15 * total / rms, sample_rate)


EYE_DISTANCE_MIN_PX = 80.0
BBOX_DIAGONAL_MIN_PX = 300.0
PAN_MAX_DEG = 30.0
TILT_MAX_DEG = 10.0


@dataclass(frozen=True)
class FaceMeta:
    eye_distance_px: Optional[float] = None
    bbox_diagonal_px: Optional[float] = None
    pan_deg: Optional[float] = None
    tilt_deg: Optional[float] = None


def quality_bucket(meta: FaceMeta) -> str:
    """"high" iff the face passes every geometric threshold, else "low"."""
    for name in ("eye_distance_px", "bbox_diagonal_px", "pan_deg", "tilt_deg"):
        if getattr(meta, name) is None:
            raise MissingMetadata(f"face metadata field {name} missing")
    high = (
        meta.eye_distance_px >= EYE_DISTANCE_MIN_PX
        and meta.bbox_diagonal_px >= BBOX_DIAGONAL_MIN_PX
        and abs(meta.pan_deg) <= PAN_MAX_DEG
        and abs(meta.tilt_deg) < TILT_MAX_DEG
    )
    return "high" if high else "low"
