"""Deterministic DSP front-end.

Audio loading, silence trimming, framing, mel-spectrogram, MFCC with
context stacking, and prosody features. All feature streams share the
same 10 ms hop so their frame counts line up exactly; everything here
is a pure function of the input samples.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

# Log floor for energies and mel channels: prevents -inf while staying
# below any real signal energy.
FLOOR_EPS = 1e-10

# int16 full scale used for WAV I/O.
INT16_SCALE = 32768.0

DEFAULT_WIN_MS = 32.0
DEFAULT_HOP_MS = 10.0
N_MELS = 80
N_MFCC = 40
CONTEXT_LEFT = 7
CONTEXT_RIGHT = 7


@dataclass
class AudioClip:
    """Mono PCM audio: float samples in [-1, 1] plus the sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("empty audio clip")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite sample values")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FrameMatrix:
    """Frames of a signal: T x W matrix with the framing geometry attached."""

    frames: np.ndarray
    hop_samples: int
    win_samples: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MelSpectrogram:
    """T x 80 log-mel energies at a 10 ms hop."""

    values: np.ndarray
    sample_rate: int
    hop_ms: float = DEFAULT_HOP_MS
    win_ms: float = DEFAULT_WIN_MS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise ValueError(f"expected T x {N_MELS} mel matrix, got {self.values.shape}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def hop_samples(self) -> int:
        return ms_to_samples(self.hop_ms, self.sample_rate)

    @property
    def win_samples(self) -> int:
        return ms_to_samples(self.win_ms, self.sample_rate)


def ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * 1e-3 * sample_rate))


def load_audio(path, channel: str = "error") -> AudioClip:
    """Load a 16-bit PCM WAV file.

    Samples are scaled to [-1, 1] by 1/32768. Multi-channel files raise
    unless ``channel="left"``, which keeps the first channel.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError(
                f"{path}: only 16-bit PCM WAV is supported, got sample width {wf.getsampwidth()}"
            )
        if wf.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV ({wf.getcomptype()}) not supported")
        n_channels = wf.getnchannels()
        n_frames = wf.getnframes()
        if n_frames == 0:
            raise ValueError(f"{path}: zero-length audio")
        raw = wf.readframes(n_frames)
        sample_rate = wf.getframerate()
    data = np.frombuffer(raw, dtype="<i2")
    if n_channels > 1:
        if channel != "left":
            raise ValueError(
                f"{path}: {n_channels}-channel audio; pass channel='left' to keep the first channel"
            )
        data = data.reshape(-1, n_channels)[:, 0]
    return AudioClip(data.astype(np.float64) / INT16_SCALE, sample_rate)


def save_audio(clip: AudioClip, path) -> None:
    """Write a clip as mono 16-bit PCM WAV (round-trips int16 input bit-exactly)."""
    data = np.clip(np.rint(clip.samples * INT16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(data.tobytes())


def _frame_rms(samples: np.ndarray, frame_len: int) -> np.ndarray:
    # Non-overlapping scan frames; a short tail frame still counts.
    n_full = len(samples) // frame_len
    rms = []
    for i in range(n_full):
        seg = samples[i * frame_len : (i + 1) * frame_len]
        rms.append(np.sqrt(np.mean(seg**2)))
    tail = samples[n_full * frame_len :]
    if tail.size:
        rms.append(np.sqrt(np.mean(tail**2)))
    return np.asarray(rms)


def trim_silence(clip: AudioClip, threshold_db: float = -40.0, frame_ms: float = 25.0) -> AudioClip:
    """Remove leading/trailing frames whose RMS falls below the threshold.

    The threshold is relative to the loudest scan frame:
    ``peak_rms * 10**(threshold_db / 20)``. Interior audio is untouched.
    """
    if threshold_db >= 0:
        raise ValueError(f"threshold_db must be negative (relative to peak), got {threshold_db}")
    frame_len = max(1, ms_to_samples(frame_ms, clip.sample_rate))
    rms = _frame_rms(clip.samples, frame_len)
    peak = rms.max()
    if peak <= 0.0:
        raise ValueError("all-silent input: no frame carries any energy")
    threshold = peak * 10.0 ** (threshold_db / 20.0)
    voiced = np.flatnonzero(rms >= threshold)
    if voiced.size == 0:
        raise ValueError("all-silent input: every frame is below the trim threshold")
    start = voiced[0] * frame_len
    end = min(len(clip.samples), (voiced[-1] + 1) * frame_len)
    return AudioClip(clip.samples[start:end].copy(), clip.sample_rate)


def hann_window(length: int) -> np.ndarray:
    # Periodic Hann, matching the FFT analysis convention.
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def frame_count(num_samples: int, win: int, hop: int) -> int:
    if num_samples < win:
        raise ValueError(f"clip of {num_samples} samples is shorter than one {win}-sample window")
    return 1 + (num_samples - win) // hop


def frame_signal(
    clip: AudioClip,
    win_ms: float = DEFAULT_WIN_MS,
    hop_ms: float = DEFAULT_HOP_MS,
    window: str | None = "hann",
) -> FrameMatrix:
    """Slice the clip into frames of win_ms every hop_ms.

    Frame t starts at t*hop; T = 1 + floor((len - win) / hop). With
    ``window="hann"`` each row is multiplied by a periodic Hann window;
    ``window=None`` returns the raw slices (used for prosody).
    """
    win = ms_to_samples(win_ms, clip.sample_rate)
    hop = ms_to_samples(hop_ms, clip.sample_rate)
    t = frame_count(len(clip.samples), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = clip.samples[idx]
    if window == "hann":
        frames = frames * hann_window(win)[None, :]
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    return FrameMatrix(frames=frames, hop_samples=hop, win_samples=win)


def fft_size_for(win_samples: int) -> int:
    n = 1
    while n < win_samples:
        n *= 2
    return n


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular mel filterbank (HTK scale) from 0 Hz to Nyquist.

    Returns an (n_mels, n_fft//2 + 1) weight matrix; triangle ramps are
    evaluated at the exact FFT bin frequencies.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def filterbank_center_freqs(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    return mel_to_hz(mel_points)[1:-1]


def power_spectrogram(clip: AudioClip, win_ms: float = DEFAULT_WIN_MS, hop_ms: float = DEFAULT_HOP_MS):
    """|STFT|^2 of Hann-windowed frames. Returns (power: T x (n_fft//2+1), n_fft)."""
    framed = frame_signal(clip, win_ms=win_ms, hop_ms=hop_ms, window="hann")
    n_fft = fft_size_for(framed.win_samples)
    spec = np.fft.rfft(framed.frames, n=n_fft, axis=1)
    return np.abs(spec) ** 2, n_fft


def mel_spectrogram(
    clip: AudioClip,
    n_mels: int = N_MELS,
    win_ms: float = DEFAULT_WIN_MS,
    hop_ms: float = DEFAULT_HOP_MS,
) -> MelSpectrogram:
    """80-channel log-mel spectrogram: |STFT|^2 -> mel filterbank -> ln with floor."""
    power, n_fft = power_spectrogram(clip, win_ms=win_ms, hop_ms=hop_ms)
    fb = mel_filterbank(clip.sample_rate, n_fft, n_mels)
    mel = power @ fb.T
    values = np.log(np.maximum(mel, FLOOR_EPS))
    return MelSpectrogram(values=values, sample_rate=clip.sample_rate, hop_ms=hop_ms, win_ms=win_ms)


def mel_to_mfcc(logmel: np.ndarray, n_coeffs: int = N_MFCC) -> np.ndarray:
    """Orthonormal DCT-II over mel channels, truncated to the first n_coeffs."""
    return dct(np.asarray(logmel, dtype=np.float64), type=2, axis=1, norm="ortho")[:, :n_coeffs]


def mfcc(
    clip: AudioClip,
    n_coeffs: int = N_MFCC,
    n_mels: int = N_MELS,
    win_ms: float = DEFAULT_WIN_MS,
    hop_ms: float = DEFAULT_HOP_MS,
) -> np.ndarray:
    """First n_coeffs cepstral coefficients of the log-mel spectrogram."""
    logmel = mel_spectrogram(clip, n_mels=n_mels, win_ms=win_ms, hop_ms=hop_ms).values
    return mel_to_mfcc(logmel, n_coeffs)


def stack_context(features: np.ndarray, left: int = CONTEXT_LEFT, right: int = CONTEXT_RIGHT) -> np.ndarray:
    """Stack each frame with its left/right neighbors, edge-replicated.

    Row t of the output is the concatenation of frames t-left .. t+right
    in order (indices clamped to [0, T-1]), so 40-dim MFCCs with 7+7
    context become 600-dim rows.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"expected non-empty T x D matrix, got shape {features.shape}")
    t = features.shape[0]
    cols = []
    for offset in range(-left, right + 1):
        idx = np.clip(np.arange(t) + offset, 0, t - 1)
        cols.append(features[idx])
    return np.concatenate(cols, axis=1)


def log_energy(frame: np.ndarray) -> float:
    """ln of the frame's sum of squares, floored at FLOOR_EPS."""
    return float(np.log(max(np.sum(np.square(frame, dtype=np.float64)), FLOOR_EPS)))


def zero_crossing_rate(frame: np.ndarray) -> float:
    """Fraction of adjacent-sample sign changes; zeros count as positive."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size < 2:
        return 0.0
    signs = np.where(frame >= 0.0, 1.0, -1.0)
    return float(np.count_nonzero(signs[1:] != signs[:-1]) / (frame.size - 1))


def prosody(raw_frames: FrameMatrix) -> np.ndarray:
    """Per-frame log energy and zero-crossing rate (T x 2).

    Expects frames cut from the unwindowed signal: energy and ZCR are
    defined on the raw samples, not on Hann-tapered ones.
    """
    t = raw_frames.num_frames
    out = np.empty((t, 2))
    for i in range(t):
        out[i, 0] = log_energy(raw_frames.frames[i])
        out[i, 1] = zero_crossing_rate(raw_frames.frames[i])
    return out


def prosody_features(
    clip: AudioClip, win_ms: float = DEFAULT_WIN_MS, hop_ms: float = DEFAULT_HOP_MS
) -> np.ndarray:
    """Prosody stream on the standard framing grid."""
    return prosody(frame_signal(clip, win_ms=win_ms, hop_ms=hop_ms, window=None))
