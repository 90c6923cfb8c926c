"""Mel-to-waveform synthesis.

Two routes: a deterministic Griffin-Lim baseline (mel pseudo-inversion
plus iterative phase reconstruction) and a small normalizing flow in the
affine-coupling family. The flow squeezes samples into channel vectors,
alternates LU-parameterized invertible channel mixes with mel-conditioned
couplings, and trains by exact maximum likelihood.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import features
from .config import VocoderConfig

COND_THRESHOLD = 1e6


def _stft(x: np.ndarray, win: int, hop: int, n_fft: int, window: np.ndarray) -> np.ndarray:
    t = features.frame_count(x.shape[0], win, hop)
    frames = np.stack([x[i * hop : i * hop + win] * window for i in range(t)])
    return np.fft.rfft(frames, n=n_fft, axis=1)


def _istft(spec: np.ndarray, win: int, hop: int, n_fft: int,
           window: np.ndarray, length: int) -> np.ndarray:
    frames = np.fft.irfft(spec, n=n_fft, axis=1)[:, :win]
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(frames.shape[0]):
        lo = i * hop
        out[lo : lo + win] += frames[i] * window
        norm[lo : lo + win] += window ** 2
    return out / np.maximum(norm, 1e-8)


def mel_to_magnitude(mel: features.MelSpectrogram) -> np.ndarray:
    """Invert the log-mel transform to a (T, bins) linear magnitude guess."""
    n_fft = features.fft_size_for(mel.win_samples)
    fb = features.mel_filterbank(mel.sample_rate, n_fft, mel.values.shape[1])
    mel_power = np.exp(mel.values.astype(np.float64))
    power = np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None)
    return np.sqrt(power)


def griffin_lim(mel: features.MelSpectrogram, n_iters: int = 60,
                return_trace: bool = False):
    """Phase reconstruction from a log-mel spectrogram.

    Output sample count is exactly T*hop + (win - hop). Deterministic:
    iteration starts from the zero-phase signal.
    """
    win = mel.win_samples
    hop = mel.hop_samples
    n_fft = features.fft_size_for(win)
    window = features.hann_window(win)
    mag = mel_to_magnitude(mel)
    length = mel.num_frames * hop + (win - hop)

    x = _istft(mag.astype(complex), win, hop, n_fft, window, length)
    trace = []
    for _ in range(n_iters):
        spec = _stft(x, win, hop, n_fft, window)
        err = np.linalg.norm(np.abs(spec) - mag) / max(np.linalg.norm(mag), 1e-12)
        trace.append(float(err))
        phase = np.exp(1j * np.angle(spec))
        x = _istft(mag * phase, win, hop, n_fft, window, length)
    clip = features.AudioClip(np.clip(x, -1.0, 1.0), mel.sample_rate)
    return (clip, trace) if return_trace else clip


def squeeze_audio(audio: torch.Tensor, group: int) -> torch.Tensor:
    """(B, L) samples to (B, group, L/group) channel vectors."""
    b, length = audio.shape
    if length % group != 0:
        raise ValueError(f"segment length {length} not divisible by group {group}")
    return audio.reshape(b, length // group, group).transpose(1, 2)


def unsqueeze_audio(x: torch.Tensor) -> torch.Tensor:
    b, group, t = x.shape
    return x.transpose(1, 2).reshape(b, group * t)


class InvertibleMix(nn.Module):
    """LU-parameterized channel mix: W = L U with unit lower diagonal.

    log|det W| is the sum of the log-diagonal parameters, so the
    likelihood term is exact by construction. Zero parameters give the
    identity matrix.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.lower = nn.Parameter(torch.zeros(channels, channels))
        self.upper = nn.Parameter(torch.zeros(channels, channels))
        self.log_diag = nn.Parameter(torch.zeros(channels))
        eye = torch.eye(channels)
        self.register_buffer("eye", eye)
        tri = torch.tril(torch.ones(channels, channels), diagonal=-1)
        self.register_buffer("lower_mask", tri)
        self.register_buffer("upper_mask", tri.t())

    def weight(self) -> torch.Tensor:
        low = self.lower * self.lower_mask + self.eye
        up = self.upper * self.upper_mask + torch.diag(torch.exp(self.log_diag))
        return low @ up

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # x (B, C, T); log_det scales with the number of columns
        w = self.weight()
        y = torch.einsum("ij,bjt->bit", w, x)
        log_det = self.log_diag.sum() * x.shape[-1]
        return y, log_det

    def inverse(self, y: torch.Tensor) -> torch.Tensor:
        w = self.weight()
        cond = torch.linalg.cond(w.detach())
        if not torch.isfinite(cond) or cond.item() > COND_THRESHOLD:
            raise ValueError(
                f"channel mix is ill-conditioned (cond {cond.item():.3e}); "
                "cannot invert reliably"
            )
        inv = torch.linalg.inv(w)
        return torch.einsum("ij,bjt->bit", inv, y)


class CouplingNet(nn.Module):
    """Conv stack predicting per-channel scale and shift for a coupling."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.convs = nn.ModuleList([
            nn.Conv1d(in_channels, hidden, kernel, padding=pad),
            nn.Conv1d(hidden, hidden, kernel, padding=pad),
        ])
        self.out = nn.Conv1d(hidden, out_channels, kernel, padding=pad)
        # identity start: couplings begin as no-ops regardless of the rest
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        for conv in self.convs:
            x = torch.relu(conv(x))
        return self.out(x)


class AffineCoupling(nn.Module):
    """Transforms the second half of channels conditioned on the first + mel."""

    def __init__(self, channels: int, mel_dim: int, hidden: int, kernel: int):
        super().__init__()
        self.half = channels // 2
        self.rest = channels - self.half
        self.net = CouplingNet(self.half + mel_dim, 2 * self.rest, hidden, kernel)

    def _scale_shift(self, xa, cond):
        params = self.net(torch.cat([xa, cond], dim=1))
        return params[:, : self.rest], params[:, self.rest :]

    def forward(self, x, cond):
        xa, xb = x[:, : self.half], x[:, self.half :]
        s, t = self._scale_shift(xa, cond)
        yb = xb * torch.exp(s) + t
        log_det = s.sum(dim=(1, 2))
        return torch.cat([xa, yb], dim=1), log_det

    def inverse(self, y, cond):
        ya, yb = y[:, : self.half], y[:, self.half :]
        s, t = self._scale_shift(ya, cond)
        xb = (yb - t) * torch.exp(-s)
        return torch.cat([ya, xb], dim=1)


class FlowVocoder(nn.Module):
    """Squeeze, then n_flows of (channel mix, mel-conditioned coupling)."""

    def __init__(self, cfg: VocoderConfig, identity_init: bool = False):
        super().__init__()
        if cfg.n_flows < 1:
            raise ValueError("n_flows must be at least 1")
        if cfg.squeeze_group < 2:
            raise ValueError("squeeze_group must be at least 2")
        self.cfg = cfg
        self.group = cfg.squeeze_group
        self.mixes = nn.ModuleList(
            [InvertibleMix(self.group) for _ in range(cfg.n_flows)]
        )
        self.couplings = nn.ModuleList([
            AffineCoupling(self.group, cfg.mel_dim, cfg.coupling_hidden, cfg.coupling_kernel)
            for _ in range(cfg.n_flows)
        ])
        if not identity_init:
            self._jitter_init()

    def _jitter_init(self):
        # small, well-conditioned starting point for the mixes; couplings
        # stay identity via their zero-initialized output layers
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for mix in self.mixes:
                mix.lower.copy_(0.05 * torch.randn(mix.lower.shape, generator=g))
                mix.upper.copy_(0.05 * torch.randn(mix.upper.shape, generator=g))
                mix.log_diag.copy_(0.02 * torch.randn(mix.log_diag.shape, generator=g))

    def condition(self, mel: torch.Tensor, t_sq: int) -> torch.Tensor:
        """(B, T, M) mel to (B, M, t_sq) per-column conditioning.

        Column j covers samples [j*group, (j+1)*group); it reads the mel
        frame under the column's first sample, nearest-frame upsampling.
        """
        b, t_mel, _ = mel.shape
        hop = self.cfg.hop_samples
        idx = torch.div(
            torch.arange(t_sq) * self.group, hop, rounding_mode="floor"
        ).clamp(max=t_mel - 1)
        return mel[:, idx].transpose(1, 2)

    def _check_cover(self, length: int, mel: torch.Tensor):
        need = (length + self.cfg.hop_samples - 1) // self.cfg.hop_samples
        if mel.shape[1] < need:
            raise ValueError(
                f"mel has {mel.shape[1]} frames; segment of {length} samples "
                f"needs at least {need}"
            )

    def forward(self, audio: torch.Tensor, mel: torch.Tensor):
        """(B, L) audio + (B, T, M) mel to (z (B, C, L/C), log_det (B,))."""
        if audio.dim() == 1:
            audio = audio.unsqueeze(0)
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        self._check_cover(audio.shape[1], mel)
        x = squeeze_audio(audio, self.group)
        cond = self.condition(mel, x.shape[-1])
        log_det = torch.zeros(audio.shape[0], dtype=audio.dtype, device=audio.device)
        for mix, coupling in zip(self.mixes, self.couplings):
            x, ld_mix = mix(x)
            x, ld_cpl = coupling(x, cond)
            log_det = log_det + ld_mix + ld_cpl
        return x, log_det

    def inverse(self, z: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
        """Exact layer-by-layer inversion back to (B, L) audio."""
        if z.dim() == 2:
            z = z.unsqueeze(0)
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        cond = self.condition(mel, z.shape[-1])
        x = z
        for mix, coupling in zip(reversed(self.mixes), reversed(self.couplings)):
            x = coupling.inverse(x, cond)
            x = mix.inverse(x)
        return unsqueeze_audio(x)


def flow_nll(flow: FlowVocoder, audio: torch.Tensor, mel: torch.Tensor,
             sigma: float) -> torch.Tensor:
    """Negative log-likelihood per element under the N(0, sigma^2) prior."""
    z, log_det = flow.forward(audio, mel)
    n = z.numel()
    log_prob = -0.5 * (z ** 2).sum() / sigma ** 2 \
        - 0.5 * n * math.log(2.0 * math.pi * sigma ** 2)
    return -(log_prob + log_det.sum()) / n


def vocoder_train_step(flow, optimizer, batch, sigma, grad_clip) -> float:
    """batch: list of (segment (L,), mel (T, M)) numpy pairs, equal L."""
    flow.train()
    optimizer.zero_grad()
    dtype = next(flow.parameters()).dtype
    audio = torch.stack([torch.as_tensor(np.asarray(a)).to(dtype) for a, _ in batch])
    mel = torch.stack([torch.as_tensor(np.asarray(m)).to(dtype) for _, m in batch])
    nll = flow_nll(flow, audio, mel, sigma)
    nll.backward()
    torch.nn.utils.clip_grad_norm_(flow.parameters(), grad_clip)
    optimizer.step()
    return float(nll.item())


def train_flow(flow, items, cfg: VocoderConfig, seed: int, log_hook=None):
    """Adam loop over (segment, mel) pairs; aborts on non-finite NLL."""
    if not items:
        raise ValueError("no vocoder training items")
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(flow.parameters(), lr=cfg.lr)
    n = len(items)
    size = min(cfg.batch_size, n)
    history = []
    for step in range(cfg.steps):
        idx = rng.choice(n, size=size, replace=False)
        nll = vocoder_train_step(
            flow, optimizer, [items[i] for i in idx], cfg.sigma_train, cfg.grad_clip
        )
        if not np.isfinite(nll):
            raise RuntimeError(f"flow vocoder diverged: non-finite NLL at step {step}")
        history.append({"step": step, "nll": nll})
        if log_hook is not None:
            log_hook(step, nll)
    return history


def segment_pairs(samples: np.ndarray, mel_values: np.ndarray, hop: int,
                  segment_samples: int, rng, count: int):
    """Aligned (audio segment, mel slice) training pairs.

    Segments start on hop boundaries so their mel slice is exact.
    """
    if segment_samples % hop != 0:
        raise ValueError("segment_samples must be a multiple of the hop")
    frames_per_segment = segment_samples // hop
    max_start_frame = min(
        (samples.shape[0] - segment_samples) // hop,
        mel_values.shape[0] - frames_per_segment,
    )
    if max_start_frame < 0:
        raise ValueError("clip too short for one vocoder segment")
    pairs = []
    for _ in range(count):
        f = int(rng.integers(0, max_start_frame + 1))
        lo = f * hop
        pairs.append((
            samples[lo : lo + segment_samples].astype(np.float32),
            mel_values[f : f + frames_per_segment].astype(np.float32),
        ))
    return pairs


def synthesize_flow(flow: FlowVocoder, mel_values: np.ndarray, sigma: float,
                    seed: int = 0) -> np.ndarray:
    """Sample z ~ N(0, sigma^2) and invert; sigma = 0 is deterministic."""
    flow.eval()
    dtype = next(flow.parameters()).dtype
    mel = torch.as_tensor(np.asarray(mel_values)).to(dtype)
    t_mel = mel.shape[0]
    length = (t_mel * flow.cfg.hop_samples) // flow.group * flow.group
    t_sq = length // flow.group
    generator = torch.Generator().manual_seed(seed)
    z = sigma * torch.randn(1, flow.group, t_sq, generator=generator).to(dtype)
    with torch.no_grad():
        audio = flow.inverse(z, mel.unsqueeze(0))
    return np.clip(audio[0].numpy(), -1.0, 1.0).astype(np.float32)
