"""Manifest loading: JSONL validation with line-numbered errors."""

import json

import numpy as np
import pytest

from clvc.features import AudioClip, save_audio
from clvc.manifest import (
    DatasetManifest,
    ManifestError,
    load_frame_labels,
    load_manifest,
    save_manifest,
)


def make_wav(path, seconds=0.1, sr=16000):
    t = np.arange(int(sr * seconds)) / sr
    save_audio(AudioClip(0.3 * np.sin(2 * np.pi * 220 * t), sr), path)


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


class TestLoadManifest:
    def test_basic_load(self, tmp_path):
        make_wav(tmp_path / "a.wav")
        make_wav(tmp_path / "b.wav")
        path = tmp_path / "data.jsonl"
        write_manifest(path, [
            {"audio_path": "a.wav", "speaker_id": "spk0", "language_tag": "en"},
            {"audio_path": "b.wav", "speaker_id": "spk1", "language_tag": "zh"},
        ])
        man = load_manifest(path)
        assert len(man) == 2
        assert man.speakers() == ["spk0", "spk1"]
        assert man.records[0].audio_path == tmp_path / "a.wav"
        assert man.for_speaker("spk1")[0].language_tag == "zh"

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with caplog.at_level("WARNING"):
            man = load_manifest(path)
        assert len(man) == 0
        assert any("empty" in r.message for r in caplog.records)

    def test_missing_field_names_line(self, tmp_path):
        make_wav(tmp_path / "a.wav")
        make_wav(tmp_path / "b.wav")
        path = tmp_path / "bad.jsonl"
        write_manifest(path, [
            {"audio_path": "a.wav", "speaker_id": "s", "language_tag": "en"},
            {"audio_path": "b.wav", "language_tag": "en"},
        ])
        with pytest.raises(ManifestError, match=r":2:.*speaker_id"):
            load_manifest(path)

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"audio_path": "a.wav"\n')
        with pytest.raises(ManifestError, match=r":1:"):
            load_manifest(path)

    def test_dangling_audio_path(self, tmp_path):
        path = tmp_path / "dangling.jsonl"
        write_manifest(path, [
            {"audio_path": "nope.wav", "speaker_id": "s", "language_tag": "en"},
        ])
        with pytest.raises(ManifestError, match=r":1:.*nope\.wav"):
            load_manifest(path)

    def test_duplicate_audio_path(self, tmp_path):
        make_wav(tmp_path / "a.wav")
        path = tmp_path / "dup.jsonl"
        write_manifest(path, [
            {"audio_path": "a.wav", "speaker_id": "s", "language_tag": "en"},
            {"audio_path": "a.wav", "speaker_id": "t", "language_tag": "en"},
        ])
        with pytest.raises(ManifestError, match=r":2:.*duplicate"):
            load_manifest(path)

    def test_large_manifest_idempotent(self, tmp_path):
        wav_dir = tmp_path / "wavs"
        wav_dir.mkdir()
        records = []
        for i in range(1000):
            name = f"clip{i:04d}.wav"
            make_wav(wav_dir / name, seconds=0.02)
            records.append({
                "audio_path": f"wavs/{name}",
                "speaker_id": f"spk{i % 10}",
                "language_tag": "en" if i % 2 == 0 else "zh",
            })
        p1 = tmp_path / "big.jsonl"
        write_manifest(p1, records)
        man1 = load_manifest(p1)
        assert len(man1) == 1000

        # Re-serialize and reload: same records, no validation drift.
        p2 = tmp_path / "big2.jsonl"
        save_manifest(
            [
                {
                    "audio_path": str(r.audio_path),
                    "speaker_id": r.speaker_id,
                    "language_tag": r.language_tag,
                }
                for r in man1
            ],
            p2,
        )
        man2 = load_manifest(p2)
        assert [r.audio_path for r in man2] == [r.audio_path for r in man1]
        assert [r.speaker_id for r in man2] == [r.speaker_id for r in man1]

    def test_labeled_subset(self, tmp_path):
        make_wav(tmp_path / "a.wav")
        make_wav(tmp_path / "b.wav")
        (tmp_path / "a.lab").write_text("0\n1\n2\n")
        path = tmp_path / "mix.jsonl"
        write_manifest(path, [
            {"audio_path": "a.wav", "speaker_id": "s", "language_tag": "en",
             "frame_labels_path": "a.lab"},
            {"audio_path": "b.wav", "speaker_id": "s", "language_tag": "en"},
        ])
        man = load_manifest(path)
        labeled = man.labeled()
        assert len(labeled) == 1
        assert labeled[0].frame_labels_path == tmp_path / "a.lab"


class TestFrameLabels:
    def test_load(self, tmp_path):
        path = tmp_path / "x.lab"
        path.write_text("0\n5\n69\n")
        labels = load_frame_labels(path, num_phonemes=70)
        np.testing.assert_array_equal(labels, [0, 5, 69])

    def test_out_of_range(self, tmp_path):
        path = tmp_path / "x.lab"
        path.write_text("0\n70\n")
        with pytest.raises(ManifestError, match=r":2:"):
            load_frame_labels(path, num_phonemes=70)

    def test_non_integer(self, tmp_path):
        path = tmp_path / "x.lab"
        path.write_text("0\nabc\n")
        with pytest.raises(ManifestError, match=r":2:"):
            load_frame_labels(path, num_phonemes=70)
