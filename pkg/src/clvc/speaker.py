"""d-vector speaker encoder with the generalized end-to-end loss.

An LSTM stack reads a window of log-mel frames; the final hidden state
projects to a unit-norm 256-dim embedding. Training pulls same-speaker
embeddings toward their centroid and pushes other speakers away.
Enrollment averages embeddings of seeded random ~10 s audio segments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import features
from .config import FeatureConfig, SpeakerConfig

W_FLOOR = 1e-6


class SpeakerEncoder(nn.Module):
    """LSTM stack, final-state projection, L2 normalization."""

    def __init__(self, input_dim: int, cfg: SpeakerConfig):
        super().__init__()
        self.input_dim = input_dim
        self.embedding_dim = cfg.embedding_dim
        self.min_window_frames = cfg.min_window_frames
        self.lstm = nn.LSTM(
            input_dim, cfg.hidden_size, num_layers=cfg.num_layers, batch_first=True
        )
        self.proj = nn.Linear(cfg.hidden_size, cfg.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, D) mel windows to (B, E) unit-norm embeddings."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[1] < self.min_window_frames:
            raise ValueError(
                f"window of {x.shape[1]} frames is shorter than the "
                f"{self.min_window_frames}-frame minimum"
            )
        _, (h, _) = self.lstm(x)
        e = self.proj(h[-1])
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-8)


def embed_window(encoder: SpeakerEncoder, window: np.ndarray) -> np.ndarray:
    """Embed one (T, D) mel window. Pure: no grad, eval mode."""
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[1] != encoder.input_dim:
        raise ValueError(f"expected (T, {encoder.input_dim}) window, got {window.shape}")
    encoder.eval()
    with torch.no_grad():
        dtype = next(encoder.parameters()).dtype
        e = encoder(torch.as_tensor(window).to(dtype))
    return e[0].numpy().astype(np.float32)


def ge2e_loss(embeddings: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Softmax-variant GE2E over an (N, M, E) block of unit-norm rows.

    s[j,i,k] = w * cos(e_ji, c_k) + b, where the own-speaker centroid
    excludes e_ji. Returns the mean over all (j, i) of the negative log
    softmax at k = j.
    """
    if embeddings.dim() != 3:
        raise ValueError(f"expected (N, M, E) embeddings, got {tuple(embeddings.shape)}")
    n, m, dim = embeddings.shape
    if n < 2 or m < 2:
        raise ValueError(f"GE2E needs N >= 2 speakers and M >= 2 utterances, got {n}x{m}")
    norms = embeddings.norm(dim=-1)
    if not torch.all((norms - 1.0).abs() < 1e-3):
        raise ValueError("GE2E rows must be unit-norm")
    w = torch.clamp(w, min=W_FLOOR)

    sums = embeddings.sum(dim=1)                       # (N, E)
    centroids = sums / m                               # (N, E)
    excl = (sums.unsqueeze(1) - embeddings) / (m - 1)  # (N, M, E) own centroid sans self

    flat = embeddings.reshape(n * m, dim)
    cos_all = _cosine(flat.unsqueeze(1), centroids.unsqueeze(0))   # (N*M, N)
    cos_all = cos_all.reshape(n, m, n)
    cos_own = _cosine(embeddings, excl)                             # (N, M)
    own_mask = torch.eye(n, dtype=torch.bool).unsqueeze(1).expand(n, m, n)
    cos = torch.where(own_mask, cos_own.unsqueeze(-1), cos_all)

    sim = w * cos + b
    target = sim.diagonal(dim1=0, dim2=2).transpose(0, 1)           # (N, M)
    return (torch.logsumexp(sim, dim=-1) - target).mean()


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    num = (a * b).sum(dim=-1)
    return num / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(1e-8)


class GE2ECriterion(nn.Module):
    """Learnable (w, b) wrapper around ge2e_loss."""

    def __init__(self, w_init: float = 10.0, b_init: float = -5.0):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(w_init)))
        self.b = nn.Parameter(torch.tensor(float(b_init)))

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return ge2e_loss(embeddings, self.w, self.b)


@dataclass
class EnrollmentSet:
    """Per-speaker enrollment: segment embeddings plus their aggregate."""

    speaker_id: str
    segment_embeddings: np.ndarray  # (K, E)
    embedding: np.ndarray           # (E,), renormalized mean

    def __post_init__(self):
        self.segment_embeddings = np.asarray(self.segment_embeddings, dtype=np.float32)
        self.embedding = np.asarray(self.embedding, dtype=np.float32)


def enroll_speaker(
    encoder: SpeakerEncoder,
    clips,
    speaker_id: str,
    feat_cfg: FeatureConfig,
    spk_cfg: SpeakerConfig,
    seed: int,
) -> EnrollmentSet:
    """Embed seeded random fixed-length segments and average them.

    Draws spk_cfg.enroll_segments random (clip, offset) pairs from clips
    long enough to hold one segment; exact duplicate draws collapse, so a
    clip exactly one segment long yields a single segment. Clips shorter
    than a segment contribute nothing.
    """
    seg_len = int(round(spk_cfg.segment_seconds * feat_cfg.sample_rate))
    eligible = [c for c in clips if c.samples.shape[0] >= seg_len]
    if not eligible:
        raise ValueError(
            f"insufficient audio for enrollment: no clip holds a "
            f"{spk_cfg.segment_seconds:g} s segment"
        )
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(spk_cfg.enroll_segments):
        idx = int(rng.integers(0, len(eligible)))
        offset = int(rng.integers(0, eligible[idx].samples.shape[0] - seg_len + 1))
        if (idx, offset) not in draws:
            draws.append((idx, offset))

    segment_embeddings = []
    for idx, offset in draws:
        clip = eligible[idx]
        segment = features.AudioClip(
            clip.samples[offset : offset + seg_len], clip.sample_rate
        )
        mel = features.mel_spectrogram(
            segment, n_mels=feat_cfg.n_mels,
            win_ms=feat_cfg.win_ms, hop_ms=feat_cfg.hop_ms,
        )
        segment_embeddings.append(embed_window(encoder, mel.values))
    segment_embeddings = np.stack(segment_embeddings)
    mean = segment_embeddings.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-8:
        raise ValueError("enrollment segments cancelled out; cannot renormalize")
    return EnrollmentSet(speaker_id, segment_embeddings, mean / norm)


def equal_error_rate(scores, labels) -> float:
    """EER from verification scores and {same, diff} labels.

    Sweeps every threshold; at the FAR/FRR sign change, linearly
    interpolates both curves and returns their common value.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_same = np.array([_label_is_same(l) for l in labels], dtype=bool)
    if scores.shape[0] != is_same.shape[0]:
        raise ValueError("scores and labels differ in length")
    n_same = int(is_same.sum())
    n_diff = int((~is_same).sum())
    if n_same == 0 or n_diff == 0:
        raise ValueError("EER needs both same and diff trials")

    # Operating points: accept when score >= threshold. Thresholds run
    # from min(scores) (accept all) to above max(scores) (reject all).
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    far = np.empty(thresholds.shape[0])
    frr = np.empty(thresholds.shape[0])
    for i, th in enumerate(thresholds):
        accept = scores >= th
        far[i] = (accept & ~is_same).sum() / n_diff
        frr[i] = (~accept & is_same).sum() / n_same

    diff = far - frr  # starts >= 0, ends <= 0
    for i in range(diff.shape[0]):
        if diff[i] == 0.0:
            return float(far[i])
        if diff[i] < 0.0:
            a, b = i - 1, i
            alpha = diff[a] / (diff[a] - diff[b])
            return float(far[a] + alpha * (far[b] - far[a]))
    raise RuntimeError("FAR/FRR curves never crossed")


def _label_is_same(label) -> bool:
    if isinstance(label, str):
        if label not in ("same", "diff"):
            raise ValueError(f"label must be 'same' or 'diff', got {label!r}")
        return label == "same"
    return bool(label)


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
    return float(a @ b / denom)


def random_mel_window(mel_values: np.ndarray, frames: int, rng) -> np.ndarray:
    """Random fixed-length frame window from a (T, D) mel matrix."""
    t = mel_values.shape[0]
    if t < frames:
        raise ValueError(f"mel of {t} frames cannot yield a {frames}-frame window")
    start = int(rng.integers(0, t - frames + 1))
    return mel_values[start : start + frames]


def train_speaker_encoder(
    encoder: SpeakerEncoder,
    criterion: GE2ECriterion,
    mels_by_speaker: dict,
    cfg: SpeakerConfig,
    seed: int,
    log_hook=None,
):
    """GE2E training over per-speaker pools of (T, D) mel matrices."""
    speakers = sorted(mels_by_speaker)
    if len(speakers) < 2:
        raise ValueError("GE2E training needs at least two speakers")
    rng = np.random.default_rng(seed)
    params = list(encoder.parameters()) + list(criterion.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    n = min(cfg.speakers_per_batch, len(speakers))
    m = cfg.utterances_per_speaker
    history = []
    for step in range(cfg.steps):
        chosen = rng.choice(len(speakers), size=n, replace=False)
        block = np.empty((n, m, cfg.window_frames, encoder.input_dim), dtype=np.float32)
        for j, si in enumerate(chosen):
            pool = mels_by_speaker[speakers[si]]
            for i in range(m):
                mel = pool[int(rng.integers(0, len(pool)))]
                block[j, i] = random_mel_window(mel, cfg.window_frames, rng)
        encoder.train()
        optimizer.zero_grad()
        emb = encoder(torch.as_tensor(block.reshape(n * m, cfg.window_frames, -1)))
        loss = criterion(emb.reshape(n, m, -1))
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()
        value = float(loss.item())
        if not np.isfinite(value):
            raise RuntimeError(f"speaker encoder diverged: non-finite loss at step {step}")
        history.append({"step": step, "loss": value})
        if log_hook is not None:
            log_hook(step, value)
    return history
