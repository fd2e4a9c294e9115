"""JSONL utterance manifests and their validation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

from .corruption import FaceMeta
from .errors import DataError

SPLITS = ("train", "heldout", "test")


@dataclass(frozen=True)
class UtteranceManifest:
    utt_id: str
    audio_path: str
    transcript: str
    split: str = "train"
    video_path: Optional[str] = None
    video_fps: Optional[Fraction] = None
    face_meta: Optional[FaceMeta] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"{self.utt_id}: unknown split {self.split!r}")
        if (self.video_path is None) != (self.video_fps is None):
            raise DataError(
                f"{self.utt_id}: video_fps must be present exactly when video_path is"
            )
        if self.split in ("train", "heldout") and not self.transcript.strip():
            raise DataError(f"{self.utt_id}: empty transcript in split {self.split}")


def _entry_to_dict(entry: UtteranceManifest) -> Dict:
    out = {
        "utt_id": entry.utt_id,
        "audio_path": entry.audio_path,
        "transcript": entry.transcript,
        "split": entry.split,
    }
    if entry.video_path is not None:
        out["video_path"] = entry.video_path
        out["video_fps"] = str(entry.video_fps)
    if entry.face_meta is not None:
        out["face_meta"] = {
            "eye_distance_px": entry.face_meta.eye_distance_px,
            "bbox_diagonal_px": entry.face_meta.bbox_diagonal_px,
            "pan_deg": entry.face_meta.pan_deg,
            "tilt_deg": entry.face_meta.tilt_deg,
        }
    return out


def _entry_from_dict(record: Dict, lineno: int) -> UtteranceManifest:
    try:
        face = record.get("face_meta")
        return UtteranceManifest(
            utt_id=record["utt_id"],
            audio_path=record["audio_path"],
            transcript=record.get("transcript", ""),
            split=record.get("split", "train"),
            video_path=record.get("video_path"),
            video_fps=Fraction(record["video_fps"]) if "video_fps" in record else None,
            face_meta=FaceMeta(**face) if face else None,
        )
    except KeyError as exc:
        raise DataError(f"manifest line {lineno}: missing field {exc}") from exc


def write_manifest(path: str, entries: List[UtteranceManifest]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(_entry_to_dict(entry), ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str, check_paths: bool = True) -> List[UtteranceManifest]:
    """Parse and validate; duplicate ids and dangling paths are rejected
    before any compute starts."""
    entries: List[UtteranceManifest] = []
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc
    with f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"manifest line {lineno}: invalid JSON ({exc})") from exc
            entries.append(_entry_from_dict(record, lineno))

    seen = set()
    base = os.path.dirname(os.path.abspath(path))
    for entry in entries:
        if entry.utt_id in seen:
            raise DataError(f"duplicate utt_id {entry.utt_id!r}")
        seen.add(entry.utt_id)
        if check_paths:
            for p in (entry.audio_path, entry.video_path):
                if p is None:
                    continue
                resolved = p if os.path.isabs(p) else os.path.join(base, p)
                if not os.path.exists(resolved):
                    raise DataError(f"{entry.utt_id}: missing file {p}")
    return entries


def resolve_path(manifest_path: str, p: str) -> str:
    if os.path.isabs(p):
        return p
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), p)
