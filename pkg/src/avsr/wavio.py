"""16-bit PCM mono WAV reading and writing via the stdlib wave module."""

from __future__ import annotations

import os
import tempfile
import wave

import numpy as np

from .audio_frontend import Waveform
from .errors import DataError

PCM_SCALE = 32768.0


def read_wav(path: str) -> Waveform:
    try:
        with wave.open(path, "rb") as f:
            if f.getnchannels() != 1:
                raise DataError(f"{path}: expected mono audio")
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return Waveform(samples, rate)


def write_wav(path: str, w: Waveform) -> None:
    """Atomic write; samples outside [-1, 1] are clipped at the PCM boundary."""
    clipped = np.clip(w.samples, -1.0, 32767.0 / PCM_SCALE)
    pcm = np.round(clipped * PCM_SCALE).astype("<i2")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as raw:
            with wave.open(raw, "wb") as f:
                f.setnchannels(1)
                f.setsampwidth(2)
                f.setframerate(w.sample_rate)
                f.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
