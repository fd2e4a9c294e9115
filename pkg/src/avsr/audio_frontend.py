"""Log-mel feature extraction with fixed or video-locked variable hop.

Audio is framed with a 25 ms Hann window. In fixed mode the window
advances 10 ms and the stacked output keeps one frame in three
(33 1/3 fps). In variable mode the window advances by one third of the
video frame period, so after the same 1-in-3 decimation the features
line up one-to-one with video frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    EmptyInput,
    InvalidFilterSpec,
    ShapeError,
    UnsupportedFrameRate,
    UnsupportedSampleRate,
)

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 400          # 25 ms at 16 kHz
FIXED_HOP_SAMPLES = 160       # 10 ms
FFT_SIZE = 512                # smallest power of two >= window
DECIMATION = 3
STACK_LEFT = 2
STACK_RIGHT = 2
NUM_FILTERS = 80
MEL_LOW_HZ = 125.0
MEL_HIGH_HZ = 7500.0
LOG_FLOOR = 1e-12
MIN_VIDEO_FPS = Fraction(23)
MAX_VIDEO_FPS = Fraction(30)

FIXED_OUTPUT_FPS = Fraction(SAMPLE_RATE, FIXED_HOP_SAMPLES * DECIMATION)  # 100/3


def as_fraction(fps: Union[Fraction, int, float, str]) -> Fraction:
    """Coerce an fps value to an exact rational (floats go through str)."""
    if isinstance(fps, Fraction):
        return fps
    if isinstance(fps, int):
        return Fraction(fps)
    if isinstance(fps, float):
        return Fraction(str(fps))
    return Fraction(fps)


@dataclass(frozen=True)
class FrameRateMode:
    """Hop-rate mode: fixed 10 ms with 3x decimation, or video-locked."""

    kind: str                      # "fixed" | "variable"
    fps: Optional[Fraction] = None  # video rate, variable mode only

    FIXED = "fixed"
    VARIABLE = "variable"

    def __post_init__(self):
        if self.kind not in (self.FIXED, self.VARIABLE):
            raise ValueError(f"unknown frame-rate mode {self.kind!r}")
        if self.kind == self.VARIABLE and self.fps is None:
            raise ValueError("variable mode requires a video fps")

    @classmethod
    def fixed(cls) -> "FrameRateMode":
        return cls(cls.FIXED)

    @classmethod
    def variable(cls, fps) -> "FrameRateMode":
        return cls(cls.VARIABLE, as_fraction(fps))

    @property
    def output_fps(self) -> Fraction:
        return FIXED_OUTPUT_FPS if self.kind == self.FIXED else self.fps


@dataclass(frozen=True)
class Waveform:
    """Mono PCM samples in [-1, 1] plus their sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if samples.ndim != 1:
            raise ValueError("waveform must be single channel")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class FramingPlan:
    """Window length plus the exact sample offset of every analysis frame."""

    offsets: np.ndarray
    mode: FrameRateMode
    window_samples: int = WINDOW_SAMPLES

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.int64)
        object.__setattr__(self, "offsets", offsets)
        if offsets.size and np.any(np.diff(offsets) <= 0):
            raise ValueError("frame offsets must be strictly increasing")

    def fitting_offsets(self, num_samples: int) -> np.ndarray:
        """Offsets whose full window fits in the signal (tail frames drop)."""
        return self.offsets[self.offsets + self.window_samples <= num_samples]


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular filters with vertices equally spaced on the mel scale."""

    weights: np.ndarray            # (num_filters, fft_size // 2 + 1)
    fft_size: int
    sample_rate: int
    low_hz: float
    high_hz: float
    center_hz: np.ndarray = field(repr=False, default=None)

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class FeatureSequence:
    """Stacked log-mel frames with per-frame center timestamps."""

    frames: np.ndarray             # (N, stack * num_filters)
    timestamps: np.ndarray         # (N,) seconds, strictly increasing
    mode: FrameRateMode

    def __post_init__(self):
        if self.frames.shape[0] != self.timestamps.shape[0]:
            raise ShapeError("frames and timestamps disagree in length")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.frames.size and not np.all(np.isfinite(self.frames)):
            raise ValueError("feature values must be finite")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def make_fixed_hop_schedule(num_samples: int) -> FramingPlan:
    """Every 10 ms offset whose 25 ms window fits in the signal."""
    if num_samples < WINDOW_SAMPLES:
        raise EmptyInput("waveform shorter than one analysis window")
    count = (num_samples - WINDOW_SAMPLES) // FIXED_HOP_SAMPLES + 1
    offsets = np.arange(count, dtype=np.int64) * FIXED_HOP_SAMPLES
    return FramingPlan(offsets, FrameRateMode.fixed())


def make_variable_hop_schedule(
    video_fps, num_video_frames: int, sample_rate: int = SAMPLE_RATE
) -> FramingPlan:
    """Three audio frames per video frame, hops from exact rational rounding.

    offset_k = round(k * sample_rate / (3 * fps)), so cumulative drift never
    exceeds half a sample regardless of clip length.
    """
    fps = as_fraction(video_fps)
    if not (MIN_VIDEO_FPS <= fps <= MAX_VIDEO_FPS):
        raise UnsupportedFrameRate(f"video fps {fps} outside [23, 30]")
    if num_video_frames < 1:
        raise ValueError("need at least one video frame")
    hop = Fraction(sample_rate) / (3 * fps)
    offsets = np.array(
        [round(k * hop) for k in range(3 * num_video_frames)], dtype=np.int64
    )
    return FramingPlan(offsets, FrameRateMode.variable(fps))


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def compute_stft(w: Waveform, plan: FramingPlan) -> np.ndarray:
    """Windowed DFT of each scheduled frame; rows are frames, columns bins.

    Frames whose window would overrun the signal are dropped.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise UnsupportedSampleRate(
            f"feature extraction requires {SAMPLE_RATE} Hz, got {w.sample_rate}"
        )
    offsets = plan.fitting_offsets(w.samples.size)
    if offsets.size == 0:
        raise EmptyInput("waveform shorter than one analysis window")
    window = hann_window(plan.window_samples)
    idx = offsets[:, None] + np.arange(plan.window_samples)[None, :]
    frames = w.samples[idx] * window[None, :]
    return np.fft.rfft(frames, n=FFT_SIZE, axis=1)


def build_mel_filterbank(
    num_filters: int = NUM_FILTERS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    low_hz: float = MEL_LOW_HZ,
    high_hz: float = MEL_HIGH_HZ,
) -> MelFilterbank:
    if num_filters < 1:
        raise InvalidFilterSpec("need at least one filter")
    if not (0.0 <= low_hz < high_hz <= sample_rate / 2):
        raise InvalidFilterSpec(
            f"bad band [{low_hz}, {high_hz}] for sample rate {sample_rate}"
        )
    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 2)
    hz_points = mel_to_hz(mel_points)
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size

    weights = np.zeros((num_filters, fft_size // 2 + 1))
    for m in range(num_filters):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return MelFilterbank(
        weights=weights,
        fft_size=fft_size,
        sample_rate=sample_rate,
        low_hz=low_hz,
        high_hz=high_hz,
        center_hz=hz_points[1:-1].copy(),
    )


def log_mel(spectrogram: np.ndarray, fb: MelFilterbank, floor: float = LOG_FLOOR) -> np.ndarray:
    """ln(max(floor, filter power)) per frame and filter."""
    if spectrogram.ndim != 2 or spectrogram.shape[1] != fb.weights.shape[1]:
        raise ShapeError(
            f"spectrogram has {spectrogram.shape[1] if spectrogram.ndim == 2 else '?'}"
            f" bins, filterbank expects {fb.weights.shape[1]}"
        )
    power = np.abs(spectrogram) ** 2
    return np.log(np.maximum(floor, power @ fb.weights.T))


def stack_and_decimate(
    features: np.ndarray,
    mode: FrameRateMode,
    timestamps: Optional[np.ndarray] = None,
) -> FeatureSequence:
    """Stack 2 frames each side (edges replicated) and keep one in three.

    Output frames are those with input index 0 mod 3; in variable mode this
    leaves exactly one feature per video frame. When timestamps are not
    supplied they are reconstructed from the mode's nominal schedule.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if timestamps is None:
        timestamps = _nominal_timestamps(n, mode)
    if n == 0:
        width = features.shape[1] if features.ndim == 2 else 0
        empty = np.zeros((0, width * (STACK_LEFT + 1 + STACK_RIGHT)))
        return FeatureSequence(empty, np.zeros(0), mode)
    taps = np.arange(-STACK_LEFT, STACK_RIGHT + 1)
    idx = np.clip(np.arange(n)[:, None] + taps[None, :], 0, n - 1)
    stacked = features[idx].reshape(n, -1)
    keep = np.arange(0, n, DECIMATION)
    return FeatureSequence(stacked[keep], np.asarray(timestamps)[keep], mode)


def _nominal_timestamps(n: int, mode: FrameRateMode) -> np.ndarray:
    center = WINDOW_SAMPLES / 2
    if mode.kind == FrameRateMode.FIXED:
        offsets = np.arange(n) * FIXED_HOP_SAMPLES
    else:
        hop = Fraction(SAMPLE_RATE) / (3 * mode.fps)
        offsets = np.array([round(k * hop) for k in range(n)])
    return (offsets + center) / SAMPLE_RATE


def extract_features(
    w: Waveform,
    mode: FrameRateMode,
    fb: Optional[MelFilterbank] = None,
    num_video_frames: Optional[int] = None,
    log_floor: float = LOG_FLOOR,
) -> FeatureSequence:
    """Full pipeline: schedule, STFT, log-mel, stack, decimate."""
    if fb is None:
        fb = build_mel_filterbank()
    if mode.kind == FrameRateMode.FIXED:
        plan = make_fixed_hop_schedule(w.samples.size)
    else:
        if num_video_frames is None:
            raise ValueError("variable mode needs the video frame count")
        plan = make_variable_hop_schedule(mode.fps, num_video_frames, w.sample_rate)
    spec = compute_stft(w, plan)
    mels = log_mel(spec, fb, floor=log_floor)
    kept = plan.fitting_offsets(w.samples.size)
    timestamps = (kept + plan.window_samples / 2) / w.sample_rate
    return stack_and_decimate(mels, mode, timestamps=timestamps)


def fixed_mode_output_frames(num_samples: int) -> int:
    """Closed-form output frame count for fixed mode."""
    pre = (num_samples - WINDOW_SAMPLES) // FIXED_HOP_SAMPLES + 1
    return -(-pre // DECIMATION)


def timestamp_drift(fs: FeatureSequence) -> float:
    """Worst-case |(t_k - t_0) - k / output_rate| over the sequence."""
    if fs.num_frames < 2:
        return 0.0
    rate = float(fs.mode.output_fps)
    k = np.arange(fs.num_frames)
    return float(np.max(np.abs((fs.timestamps - fs.timestamps[0]) - k / rate)))
