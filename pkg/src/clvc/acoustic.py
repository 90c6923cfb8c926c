"""Phonetic feature extraction from stacked MFCC frames.

A bidirectional LSTM predicts a phoneme class for every frame. Two views
of the trained network serve as speaker-independent content features:
the softmax posterior matrix (mppg) and the last recurrent layer's
concatenated hidden states before the softmax (dpf).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import MODE_DPF, MODE_MPPG, AcousticConfig


class AcousticModel(nn.Module):
    """BLSTM frame classifier over phoneme targets."""

    def __init__(self, input_dim: int, cfg: AcousticConfig):
        super().__init__()
        self.input_dim = input_dim
        self.num_phonemes = cfg.num_phonemes
        self.hidden_per_direction = cfg.hidden_per_direction
        self.blstm = nn.LSTM(
            input_dim,
            cfg.hidden_per_direction,
            num_layers=cfg.num_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.head = nn.Linear(2 * cfg.hidden_per_direction, cfg.num_phonemes)

    @property
    def dpf_dim(self) -> int:
        return 2 * self.hidden_per_direction

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (logits, dpf), each (B, T, *), for a (B, T, D) batch.

        A 2-d input is treated as a single unbatched sequence and the
        outputs keep the batch axis.
        """
        if x.dim() == 2:
            x = x.unsqueeze(0)
        dpf, _ = self.blstm(x)
        return self.head(dpf), dpf

    def posteriors(self, x: torch.Tensor) -> torch.Tensor:
        logits, _ = self.forward(x)
        return torch.softmax(logits, dim=-1)


def am_loss(model: AcousticModel, batch: list) -> torch.Tensor:
    """Frame-level cross entropy averaged over every frame in the batch.

    batch: list of (features (T, D), labels (T,)) pairs. Sequences of
    unequal length are scored independently and pooled by frame count.
    """
    lengths = {feats.shape[0] for feats, _ in batch}
    if len(lengths) == 1:
        feats = torch.stack([_as_float_tensor(f, model) for f, _ in batch])
        labels = torch.stack([torch.as_tensor(np.asarray(l), dtype=torch.long) for _, l in batch])
        logits, _ = model(feats)
        return F.cross_entropy(logits.reshape(-1, model.num_phonemes), labels.reshape(-1))
    total = None
    frames = 0
    for f, l in batch:
        logits, _ = model(_as_float_tensor(f, model))
        labels = torch.as_tensor(np.asarray(l), dtype=torch.long)
        seq_loss = F.cross_entropy(logits[0], labels, reduction="sum")
        total = seq_loss if total is None else total + seq_loss
        frames += labels.shape[0]
    return total / frames


def _as_float_tensor(arr, model: AcousticModel) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(arr)).to(dtype)


def am_train_step(model, optimizer, batch, grad_clip: float) -> float:
    model.train()
    optimizer.zero_grad()
    loss = am_loss(model, batch)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.item())


def train_acoustic_model(model, sequences, cfg: AcousticConfig, seed: int, log_hook=None):
    """Adam training loop over (features, labels) sequences.

    Returns a per-step history of {"step", "loss"} dicts. Raises on a
    non-finite loss rather than letting a diverged run write checkpoints.
    """
    if not sequences:
        raise ValueError("no labeled sequences to train on")
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    n = len(sequences)
    size = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=size, replace=False)
        loss = am_train_step(model, optimizer, [sequences[i] for i in idx], cfg.grad_clip)
        if not np.isfinite(loss):
            raise RuntimeError(f"acoustic model diverged: non-finite loss at step {step}")
        history.append({"step": step, "loss": loss})
        if log_hook is not None:
            log_hook(step, loss)
    return history


def frame_accuracy(model, sequences) -> float:
    """Fraction of frames whose argmax posterior matches the label."""
    model.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for feats, labels in sequences:
            logits, _ = model(_as_float_tensor(feats, model))
            pred = logits[0].argmax(dim=-1).numpy()
            labels = np.asarray(labels)
            correct += int((pred == labels).sum())
            total += labels.shape[0]
    return correct / total


def predict_phonemes(model, stacked: np.ndarray) -> np.ndarray:
    """Per-frame argmax phoneme ids for one stacked feature matrix."""
    model.eval()
    with torch.no_grad():
        logits, _ = model(_as_float_tensor(stacked, model))
    return logits[0].argmax(dim=-1).numpy().astype(np.int64)


def extract_phonetic_features(model, stacked: np.ndarray, mode: str) -> np.ndarray:
    """Run the trained model over one utterance and pick the content view.

    mppg returns the (T, num_phonemes) posterior matrix, dpf the
    (T, 2 * hidden) concatenated last-layer states.
    """
    stacked = np.asarray(stacked)
    if stacked.ndim != 2 or stacked.shape[1] != model.input_dim:
        raise ValueError(
            f"expected (T, {model.input_dim}) features, got {stacked.shape}"
        )
    model.eval()
    with torch.no_grad():
        logits, dpf = model(_as_float_tensor(stacked, model))
    if mode == MODE_MPPG:
        out = torch.softmax(logits[0], dim=-1)
    elif mode == MODE_DPF:
        out = dpf[0]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out.numpy().astype(np.float32)


def collapse_repeats(seq) -> list:
    """Merge identical consecutive symbols into one."""
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out


def levenshtein(a, b) -> int:
    """Edit distance with unit insert, delete, and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, sa in enumerate(a, start=1):
        cur = [i]
        for j, sb in enumerate(b, start=1):
            cur.append(min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (sa != sb),
            ))
        prev = cur
    return prev[-1]


def phoneme_error_rate(ref, hyp) -> float:
    """Edit distance between repeat-collapsed sequences over ref length."""
    ref_c = collapse_repeats(list(ref))
    hyp_c = collapse_repeats(list(hyp))
    if not ref_c:
        raise ValueError("empty reference sequence")
    return levenshtein(ref_c, hyp_c) / len(ref_c)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
