"""Dataset manifests: JSON Lines, one utterance record per line."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

REQUIRED_FIELDS = ("audio_path", "speaker_id", "language_tag")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    audio_path: Path
    speaker_id: str
    language_tag: str
    frame_labels_path: Path | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for rec in self.records:
            seen.setdefault(rec.speaker_id, None)
        return list(seen)

    def for_speaker(self, speaker_id: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.speaker_id == speaker_id]

    def labeled(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.frame_labels_path is not None]


def load_manifest(path) -> DatasetManifest:
    """Load and validate a JSON Lines manifest.

    Relative paths resolve against the manifest's directory. Parse or
    validation failures name the offending line; duplicate audio paths
    and dangling files are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    base = path.parent
    records: list[ManifestRecord] = []
    seen_audio: set[Path] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record must be a JSON object")
            for field_name in REQUIRED_FIELDS:
                if not obj.get(field_name):
                    raise ManifestError(f"{path}:{lineno}: missing or empty {field_name!r}")
            audio = (base / obj["audio_path"]).resolve()
            if not audio.exists():
                raise ManifestError(f"{path}:{lineno}: audio file not found: {audio}")
            if audio in seen_audio:
                raise ManifestError(f"{path}:{lineno}: duplicate audio path: {audio}")
            seen_audio.add(audio)
            labels = obj.get("frame_labels_path")
            labels_path = None
            if labels:
                labels_path = (base / labels).resolve()
                if not labels_path.exists():
                    raise ManifestError(f"{path}:{lineno}: frame label file not found: {labels_path}")
            records.append(
                ManifestRecord(
                    audio_path=audio,
                    speaker_id=str(obj["speaker_id"]),
                    language_tag=str(obj["language_tag"]),
                    frame_labels_path=labels_path,
                )
            )
    if not records:
        log.warning("manifest %s contains no records", path)
    return DatasetManifest(records=records, path=path)


def save_manifest(records: list[dict], path) -> None:
    """Write records as JSON Lines; paths are stored as given (usually relative)."""
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_frame_labels(path, num_phonemes: int) -> list[int]:
    """One integer phoneme id per line; ids must lie in [0, num_phonemes)."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                value = int(line)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: bad phoneme id {line.strip()!r}") from exc
            if not 0 <= value < num_phonemes:
                raise ManifestError(
                    f"{path}:{lineno}: phoneme id {value} outside [0, {num_phonemes})"
                )
            labels.append(value)
    return labels
