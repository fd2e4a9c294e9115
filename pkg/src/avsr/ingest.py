"""Turn manifest entries into training examples: read media, featurize,
align the video stream to the audio features."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio_frontend import FrameRateMode, MelFilterbank, extract_features
from .container import read_container
from .errors import AvsrError, DataError
from .manifest import UtteranceManifest, resolve_path
from .model import GraphemeInventory
from .training import TrainingExample
from .wavio import read_wav


@dataclass(frozen=True)
class FeaturizeSettings:
    mode_kind: str = FrameRateMode.VARIABLE     # "fixed" | "variable"
    num_mel_filters: int = 80
    low_hz: float = 125.0
    high_hz: float = 7500.0

    def mode_for(self, fps: Optional[Fraction]) -> FrameRateMode:
        if self.mode_kind == FrameRateMode.FIXED:
            return FrameRateMode.fixed()
        if fps is None:
            raise DataError("variable mode needs a video fps")
        return FrameRateMode.variable(fps)


def read_video_container(path: str) -> Tuple[np.ndarray, Fraction]:
    tensors = read_container(path)
    if "frames" not in tensors or "fps" not in tensors:
        raise DataError(f"{path}: video container needs 'frames' and 'fps' entries")
    frames = tensors["frames"]
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise DataError(f"{path}: video frames must be (T, H, W, 3)")
    num, den = tensors["fps"].reshape(-1)[:2]
    return frames, Fraction(int(num), int(den))


def example_from_entry(
    entry: UtteranceManifest,
    manifest_path: str,
    settings: FeaturizeSettings,
    fb: MelFilterbank,
    inventory: Optional[GraphemeInventory] = None,
) -> TrainingExample:
    wave = read_wav(resolve_path(manifest_path, entry.audio_path))
    thumbs = None
    nvf = None
    if entry.video_path is not None:
        frames_u8, fps = read_video_container(
            resolve_path(manifest_path, entry.video_path)
        )
        thumbs = frames_u8.astype(np.float32) / 255.0
        nvf = thumbs.shape[0]
    mode = settings.mode_for(entry.video_fps)
    fs = extract_features(wave, mode, fb=fb, num_video_frames=nvf)
    feats = fs.frames.astype(np.float32)
    if thumbs is not None:
        if mode.kind == FrameRateMode.FIXED:
            idx = np.clip(
                np.floor(fs.timestamps * float(entry.video_fps)).astype(int),
                0,
                nvf - 1,
            )
            thumbs = thumbs[idx]
        else:
            t_min = min(feats.shape[0], thumbs.shape[0])
            feats, thumbs = feats[:t_min], thumbs[:t_min]
    label_ids = (
        np.asarray(inventory.encode(entry.transcript), dtype=np.int64)
        if inventory is not None
        else np.zeros(0, dtype=np.int64)
    )
    return TrainingExample(
        utt_id=entry.utt_id,
        transcript=entry.transcript,
        label_ids=label_ids,
        audio_features=feats,
        thumbnails=thumbs,
        waveform=wave,
        num_video_frames=nvf,
    )


def examples_from_manifest(
    entries: Sequence[UtteranceManifest],
    manifest_path: str,
    settings: FeaturizeSettings,
    fb: MelFilterbank,
    inventory: Optional[GraphemeInventory] = None,
) -> Tuple[List[TrainingExample], List[Tuple[str, str]]]:
    """Returns (examples, per-utterance error records)."""
    examples, errors = [], []
    for entry in entries:
        try:
            examples.append(
                example_from_entry(entry, manifest_path, settings, fb, inventory)
            )
        except AvsrError as exc:
            errors.append((entry.utt_id, str(exc)))
    return examples, errors
