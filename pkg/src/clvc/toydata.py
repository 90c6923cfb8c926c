"""Synthetic desk-scale corpus.

Speakers are harmonic sources with distinct F0 and smooth random spectral
envelopes; phonemes are formant patterns that shape harmonic amplitudes.
Every clip carries frame-aligned labels computed from the same framing
arithmetic the feature extractor uses, so acoustic-model training needs
no external alignments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features
from .config import FeatureConfig

# (F1, F2) resonances in Hz, one row per toy phoneme
TOY_FORMANTS = np.array([
    [310.0, 2300.0],
    [620.0, 1050.0],
    [760.0, 1750.0],
    [400.0, 820.0],
    [270.0, 1550.0],
])
FORMANT_BANDWIDTH = 140.0
NUM_TOY_PHONEMES = TOY_FORMANTS.shape[0]


@dataclass
class ToySpeaker:
    speaker_id: str
    language_tag: str
    f0: float
    envelope_nodes: np.ndarray  # log-gain spline nodes over frequency


def _speaker_envelope(speaker: ToySpeaker, freqs: np.ndarray) -> np.ndarray:
    """Smooth per-speaker spectral gain, interpolated from random nodes."""
    nodes = speaker.envelope_nodes
    grid = np.linspace(0.0, 1.0, nodes.shape[0])
    log_gain = np.interp(freqs / freqs.max(), grid, nodes)
    return np.exp(log_gain)


def _formant_gain(phoneme: int, freqs: np.ndarray) -> np.ndarray:
    gains = np.zeros_like(freqs)
    for formant in TOY_FORMANTS[phoneme]:
        gains += np.exp(-((freqs - formant) / FORMANT_BANDWIDTH) ** 2)
    return 0.08 + gains


def make_toy_speakers(n_speakers: int, rng) -> list[ToySpeaker]:
    """Distinct F0s and spectral envelopes; languages alternate en/zh."""
    f0s = np.linspace(110.0, 250.0, n_speakers)
    speakers = []
    for i in range(n_speakers):
        speakers.append(ToySpeaker(
            speaker_id=f"spk{i}",
            language_tag="en" if i % 2 == 0 else "zh",
            f0=float(f0s[i]),
            envelope_nodes=rng.normal(scale=0.8, size=8),
        ))
    return speakers


def synth_utterance(speaker: ToySpeaker, feat_cfg: FeatureConfig,
                    num_frames: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """One clip plus its per-frame phoneme labels.

    The clip length is hop*(num_frames-1) + win so the framing formula
    yields exactly num_frames frames. Labels follow the phoneme active
    at each frame's center sample.
    """
    sr = feat_cfg.sample_rate
    hop = feat_cfg.hop_samples
    win = feat_cfg.win_samples
    length = hop * (num_frames - 1) + win

    # random phoneme runs of 8..16 frames
    frame_labels = np.empty(num_frames, dtype=np.int64)
    t = 0
    prev = -1
    while t < num_frames:
        run = int(rng.integers(8, 17))
        choices = [p for p in range(NUM_TOY_PHONEMES) if p != prev]
        ph = int(rng.choice(choices))
        frame_labels[t : t + run] = ph
        prev = ph
        t += run

    # per-sample phoneme id from the frame grid
    sample_frames = np.clip(np.arange(length) // hop, 0, num_frames - 1)
    sample_ph = frame_labels[sample_frames]

    n_harmonics = int(0.45 * sr / speaker.f0)
    harmonic_freqs = speaker.f0 * np.arange(1, n_harmonics + 1)
    env = _speaker_envelope(speaker, harmonic_freqs)
    amp_table = np.stack([
        _formant_gain(p, harmonic_freqs) * env / np.sqrt(np.arange(1, n_harmonics + 1))
        for p in range(NUM_TOY_PHONEMES)
    ])  # (phonemes, harmonics)

    time = np.arange(length) / sr
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harmonics)
    amps = amp_table[sample_ph]  # (length, harmonics)
    sig = np.zeros(length)
    for h in range(n_harmonics):
        sig += amps[:, h] * np.sin(2.0 * np.pi * harmonic_freqs[h] * time + phases[h])
    sig += 0.003 * rng.normal(size=length)
    sig *= 0.6 / max(np.abs(sig).max(), 1e-9)

    # recheck the alignment contract against the extractor's arithmetic
    assert features.frame_count(length, win, hop) == num_frames
    return sig, frame_labels


def generate_toy_corpus(out_dir, feat_cfg: FeatureConfig, n_speakers: int = 4,
                        clips_per_speaker: int = 8, num_frames: int = 120,
                        seed: int = 0) -> Path:
    """Write WAVs, label files, and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = make_toy_speakers(n_speakers, rng)
    records = []
    for speaker in speakers:
        for j in range(clips_per_speaker):
            samples, labels = synth_utterance(speaker, feat_cfg, num_frames, rng)
            wav_rel = f"wav/{speaker.speaker_id}_utt{j}.wav"
            lab_rel = f"labels/{speaker.speaker_id}_utt{j}.lab"
            features.save_audio(
                features.AudioClip(samples, feat_cfg.sample_rate), out_dir / wav_rel
            )
            with open(out_dir / lab_rel, "w", encoding="utf-8") as fh:
                fh.writelines(f"{int(l)}\n" for l in labels)
            records.append({
                "audio_path": wav_rel,
                "speaker_id": speaker.speaker_id,
                "language_tag": speaker.language_tag,
                "frame_labels_path": lab_rel,
            })
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path
