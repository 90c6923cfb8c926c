"""Seq2Seq mel converter with windowed attention and length-matched decoding.

The encoder reads content features (phonetic + prosody) and appends the
target speaker embedding to every output row. The autoregressive decoder
attends only inside a clipped window around the current step and runs
exactly as many steps as the input has frames, so no stop token exists
anywhere in the graph. Prenet dropout stays active at conversion time
behind a config flag, driven by an explicit generator for repeatability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConversionConfig

WINDOW_CENTER_STEP = "step"
WINDOW_CENTER_ARGMAX = "argmax"


def _dropout(x, p, generator, active):
    if not active or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class Prenet(nn.Module):
    """Bottleneck MLP over the previous mel frame; dropout always applied."""

    def __init__(self, in_dim: int, dims, p: float):
        super().__init__()
        self.p = p
        layers = []
        prev = in_dim
        for d in dims:
            layers.append(nn.Linear(prev, d))
            prev = d
        self.layers = nn.ModuleList(layers)
        self.out_dim = prev

    def forward(self, x, generator, active):
        for layer in self.layers:
            x = _dropout(torch.relu(layer(x)), self.p, generator, active)
        return x


class LocalAttention(nn.Module):
    """Location-sensitive attention evaluated on a clipped index window."""

    def __init__(self, cfg: ConversionConfig, memory_dim: int):
        super().__init__()
        self.window_left = cfg.window_left
        self.window_right = cfg.window_right
        self.center_mode = cfg.window_center
        self.query_layer = nn.Linear(cfg.decoder_dim, cfg.attention_dim, bias=False)
        self.memory_layer = nn.Linear(memory_dim, cfg.attention_dim, bias=False)
        self.location_conv = nn.Conv1d(
            2, cfg.attention_location_filters, cfg.attention_location_kernel,
            padding=cfg.attention_location_kernel // 2, bias=False,
        )
        self.location_proj = nn.Linear(
            cfg.attention_location_filters, cfg.attention_dim, bias=False
        )
        self.v = nn.Linear(cfg.attention_dim, 1, bias=False)

    def window_bounds(self, center: int, t_enc: int) -> tuple[int, int]:
        lo = max(0, center - self.window_left)
        hi = min(t_enc, center + self.window_right + 1)
        return lo, hi

    def centers(self, t: int, prev_align: torch.Tensor) -> torch.Tensor:
        b, t_enc = prev_align.shape
        if self.center_mode == WINDOW_CENTER_STEP:
            return torch.full((b,), min(t, t_enc - 1), dtype=torch.long)
        if self.center_mode == WINDOW_CENTER_ARGMAX:
            if t == 0:
                return torch.zeros(b, dtype=torch.long)
            return prev_align.argmax(dim=-1)
        raise ValueError(f"unknown window_center mode {self.center_mode!r}")

    def forward(self, query, memory, processed, prev_align, cum_align, t):
        """One attention step.

        query (B, D); memory (B, T, M); processed (B, T, A);
        prev_align/cum_align (B, T). Returns context (B, M) and a full
        (B, T) alignment that is zero outside the window.
        """
        b, t_enc, _ = memory.shape
        loc = self.location_conv(torch.stack([prev_align, cum_align], dim=1))
        loc = self.location_proj(loc.transpose(1, 2))  # (B, T, A)
        q = self.query_layer(query).unsqueeze(1)       # (B, 1, A)

        centers = self.centers(t, prev_align)
        alignment = torch.zeros_like(prev_align)
        contexts = []
        same = bool((centers == centers[0]).all())
        groups = [(0, b)] if same else [(i, i + 1) for i in range(b)]
        for s, e in groups:
            lo, hi = self.window_bounds(int(centers[s]), t_enc)
            energies = self.v(torch.tanh(
                q[s:e] + processed[s:e, lo:hi] + loc[s:e, lo:hi]
            )).squeeze(-1)                             # (g, win)
            weights = torch.softmax(energies, dim=-1)
            alignment[s:e, lo:hi] = weights
            contexts.append(torch.bmm(weights.unsqueeze(1), memory[s:e, lo:hi]).squeeze(1))
        return torch.cat(contexts, dim=0), alignment


class Postnet(nn.Module):
    """Residual conv stack refining the decoder's mel output."""

    def __init__(self, cfg: ConversionConfig):
        super().__init__()
        k, pad = cfg.postnet_kernel, cfg.postnet_kernel // 2
        m, c, n = cfg.mel_dim, cfg.postnet_channels, cfg.postnet_layers
        if n < 1:
            raise ValueError("postnet needs at least one layer")
        convs = []
        if n == 1:
            convs.append(nn.Conv1d(m, m, k, padding=pad))
        else:
            convs.append(nn.Conv1d(m, c, k, padding=pad))
            for _ in range(n - 2):
                convs.append(nn.Conv1d(c, c, k, padding=pad))
            convs.append(nn.Conv1d(c, m, k, padding=pad))
        self.convs = nn.ModuleList(convs)

    def forward(self, mel):
        # mel (B, T, M) -> residual of the same shape
        x = mel.transpose(1, 2)
        for conv in self.convs[:-1]:
            x = torch.tanh(conv(x))
        x = self.convs[-1](x)
        return x.transpose(1, 2)


@dataclass
class DecoderState:
    attn_h: torch.Tensor
    attn_c: torch.Tensor
    dec_h: torch.Tensor
    dec_c: torch.Tensor
    context: torch.Tensor
    prev_align: torch.Tensor
    cum_align: torch.Tensor
    t: int


class ConversionModel(nn.Module):
    """Content + speaker embedding to mel, one output frame per input frame."""

    def __init__(self, cfg: ConversionConfig, content_dim: int):
        super().__init__()
        if cfg.encoder_dim % 2 != 0:
            raise ValueError("encoder_dim must be even for the bidirectional stage")
        if cfg.encoder_conv_kernel % 2 == 0 or cfg.postnet_kernel % 2 == 0:
            raise ValueError("conv kernels must be odd to preserve length")
        self.cfg = cfg
        self.content_dim = content_dim
        self.memory_dim = cfg.encoder_dim + cfg.speaker_dim

        convs = []
        in_ch = content_dim
        for _ in range(cfg.encoder_conv_layers):
            convs.append(nn.Conv1d(in_ch, cfg.encoder_dim, cfg.encoder_conv_kernel,
                                   padding=cfg.encoder_conv_kernel // 2))
            in_ch = cfg.encoder_dim
        self.encoder_convs = nn.ModuleList(convs)
        self.encoder_blstm = nn.LSTM(
            cfg.encoder_dim, cfg.encoder_dim // 2, batch_first=True, bidirectional=True
        )

        self.prenet = Prenet(cfg.mel_dim, cfg.prenet_dims, cfg.prenet_dropout)
        self.attention = LocalAttention(cfg, self.memory_dim)
        self.attn_rnn = nn.LSTMCell(self.prenet.out_dim + self.memory_dim, cfg.decoder_dim)
        self.dec_rnn = nn.LSTMCell(cfg.decoder_dim + self.memory_dim, cfg.decoder_dim)
        self.proj = nn.Linear(cfg.decoder_dim + self.memory_dim, cfg.mel_dim)
        self.postnet = Postnet(cfg)

        self.register_buffer("content_mean", torch.zeros(content_dim))
        self.register_buffer("content_std", torch.ones(content_dim))

    def set_content_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        mean = torch.as_tensor(np.asarray(mean)).to(self.content_mean.dtype)
        std = torch.as_tensor(np.asarray(std)).to(self.content_std.dtype)
        if mean.shape != self.content_mean.shape or std.shape != self.content_std.shape:
            raise ValueError("content stats must be one value per content dimension")
        self.content_mean.copy_(mean)
        self.content_std.copy_(std.clamp_min(1e-6))

    def encode(self, content: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        """(B, T, C) content + (B, S) speaker to (B, T, enc+spk) memory."""
        if content.dim() == 2:
            content = content.unsqueeze(0)
        if spk.dim() == 1:
            spk = spk.unsqueeze(0)
        if content.shape[-1] != self.content_dim:
            raise ValueError(
                f"content has {content.shape[-1]} dims, model expects {self.content_dim}"
            )
        if spk.shape[-1] != self.cfg.speaker_dim:
            raise ValueError(
                f"speaker embedding has {spk.shape[-1]} dims, "
                f"model expects {self.cfg.speaker_dim}"
            )
        norms = spk.norm(dim=-1)
        if not torch.all((norms - 1.0).abs() < 1e-3):
            raise ValueError("speaker embedding must be unit-norm")
        x = (content - self.content_mean) / self.content_std
        x = x.transpose(1, 2)
        for conv in self.encoder_convs:
            x = torch.relu(conv(x))
        x, _ = self.encoder_blstm(x.transpose(1, 2))
        spk_rows = spk.unsqueeze(1).expand(-1, x.shape[1], -1)
        return torch.cat([x, spk_rows], dim=-1)

    def init_state(self, batch: int, t_enc: int, dtype, device=None) -> DecoderState:
        zeros = lambda *shape: torch.zeros(*shape, dtype=dtype, device=device)
        d = self.cfg.decoder_dim
        return DecoderState(
            attn_h=zeros(batch, d), attn_c=zeros(batch, d),
            dec_h=zeros(batch, d), dec_c=zeros(batch, d),
            context=zeros(batch, self.memory_dim),
            prev_align=zeros(batch, t_enc), cum_align=zeros(batch, t_enc),
            t=0,
        )

    def decode_step(self, prev_mel, state: DecoderState, memory, processed,
                    generator, dropout_active):
        """One frame: prenet, attention RNN, windowed attention, decoder RNN."""
        t_enc = memory.shape[1]
        if state.t >= t_enc:
            raise ValueError(f"decoder step {state.t} beyond source length {t_enc}")
        pre = self.prenet(prev_mel, generator, dropout_active)
        attn_h, attn_c = self.attn_rnn(
            torch.cat([pre, state.context], dim=-1), (state.attn_h, state.attn_c)
        )
        context, alignment = self.attention(
            attn_h, memory, processed, state.prev_align, state.cum_align, state.t
        )
        dec_h, dec_c = self.dec_rnn(
            torch.cat([attn_h, context], dim=-1), (state.dec_h, state.dec_c)
        )
        frame = self.proj(torch.cat([dec_h, context], dim=-1))
        new_state = DecoderState(
            attn_h=attn_h, attn_c=attn_c, dec_h=dec_h, dec_c=dec_c,
            context=context, prev_align=alignment,
            cum_align=state.cum_align + alignment, t=state.t + 1,
        )
        return frame, alignment, new_state

    def decode(self, memory, targets=None, generator=None, dropout_active=True):
        """Run exactly T decoder steps over (B, T, M) memory.

        targets (B, T, mel) switches on teacher forcing. Returns
        (mel_pre, mel_post, alignments), alignments (B, T_dec, T_enc).
        """
        b, t_enc, _ = memory.shape
        processed = self.attention.memory_layer(memory)
        state = self.init_state(b, t_enc, memory.dtype, memory.device)
        prev = torch.zeros(b, self.cfg.mel_dim, dtype=memory.dtype, device=memory.device)
        frames, aligns = [], []
        for t in range(t_enc):
            frame, alignment, state = self.decode_step(
                prev, state, memory, processed, generator, dropout_active
            )
            frames.append(frame)
            aligns.append(alignment)
            prev = targets[:, t] if targets is not None else frame
        mel_pre = torch.stack(frames, dim=1)
        mel_post = mel_pre + self.postnet(mel_pre)
        return mel_pre, mel_post, torch.stack(aligns, dim=1)

    def teacher_forced(self, content, spk, targets, generator):
        memory = self.encode(content, spk)
        if targets.dim() == 2:
            targets = targets.unsqueeze(0)
        if targets.shape[1] != memory.shape[1]:
            raise ValueError(
                f"content has {memory.shape[1]} frames but target mel has "
                f"{targets.shape[1]}"
            )
        return self.decode(memory, targets=targets, generator=generator,
                           dropout_active=True)


def convert(model: ConversionModel, content: np.ndarray, spk: np.ndarray,
            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Free-running conversion of one utterance.

    Returns (mel (T, mel_dim), alignments (T, T)) as float32 arrays.
    Deterministic for a fixed seed, prenet dropout stream included.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    generator = torch.Generator().manual_seed(seed)
    active = model.cfg.prenet_dropout_at_inference
    with torch.no_grad():
        memory = model.encode(
            torch.as_tensor(np.asarray(content)).to(dtype),
            torch.as_tensor(np.asarray(spk)).to(dtype),
        )
        _, mel_post, aligns = model.decode(
            memory, targets=None, generator=generator, dropout_active=active
        )
    return (
        mel_post[0].numpy().astype(np.float32),
        aligns[0].numpy().astype(np.float32),
    )


def dual_mse(mel_pre, mel_post, target):
    loss_pre = F.mse_loss(mel_pre, target)
    loss_post = F.mse_loss(mel_post, target)
    return loss_pre, loss_post


def cm_loss(model: ConversionModel, batch, generator):
    """Teacher-forced dual MSE over a batch of (content, spk, mel) items."""
    total_pre = None
    total_post = None
    frames = 0
    for content, spk, mel in _grouped(batch, model):
        mel_pre, mel_post, _ = model.teacher_forced(content, spk, mel, generator)
        loss_pre, loss_post = dual_mse(mel_pre, mel_post, mel)
        n = mel.shape[0] * mel.shape[1]
        total_pre = loss_pre * n if total_pre is None else total_pre + loss_pre * n
        total_post = loss_post * n if total_post is None else total_post + loss_post * n
        frames += n
    return total_pre / frames, total_post / frames


def _grouped(batch, model):
    """Stack equal-length items into one tensor group, else yield singly."""
    dtype = next(model.parameters()).dtype
    as_t = lambda a: torch.as_tensor(np.asarray(a)).to(dtype)
    lengths = {item[0].shape[0] for item in batch}
    if len(lengths) == 1:
        yield (
            torch.stack([as_t(c) for c, _, _ in batch]),
            torch.stack([as_t(s) for _, s, _ in batch]),
            torch.stack([as_t(m) for _, _, m in batch]),
        )
    else:
        for c, s, m in batch:
            yield as_t(c).unsqueeze(0), as_t(s).unsqueeze(0), as_t(m).unsqueeze(0)


def cm_train_step(model, optimizer, batch, grad_clip, generator):
    model.train()
    optimizer.zero_grad()
    loss_pre, loss_post = cm_loss(model, batch, generator)
    (loss_pre + loss_post).backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss_pre.item()), float(loss_post.item())


def train_conversion_model(model, items, cfg: ConversionConfig, seed: int, log_hook=None):
    """Adam loop over (content, spk, mel) triples with seeded sampling."""
    if not items:
        raise ValueError("no training items")
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(items)
    size = min(cfg.batch_size, n)
    history = []
    for step in range(cfg.steps):
        idx = rng.choice(n, size=size, replace=False)
        loss_pre, loss_post = cm_train_step(
            model, optimizer, [items[i] for i in idx], cfg.grad_clip, generator
        )
        if not (np.isfinite(loss_pre) and np.isfinite(loss_post)):
            raise RuntimeError(f"conversion model diverged at step {step}")
        history.append({"step": step, "loss_pre": loss_pre, "loss_post": loss_post})
        if log_hook is not None:
            log_hook(step, loss_pre + loss_post)
    return history


def expected_parameter_count(cfg: ConversionConfig, content_dim: int) -> int:
    """Analytic parameter total for the architecture; no stop-token head.

    Any extra head would make the live module diverge from this figure,
    so equality doubles as a structural audit.
    """
    e, s = cfg.encoder_dim, cfg.speaker_dim
    et = e + s
    a, f, lk = cfg.attention_dim, cfg.attention_location_filters, cfg.attention_location_kernel
    d, m, k = cfg.decoder_dim, cfg.mel_dim, cfg.encoder_conv_kernel
    h = e // 2

    total = 0
    in_ch = content_dim
    for _ in range(cfg.encoder_conv_layers):
        total += e * in_ch * k + e
        in_ch = e
    total += 2 * (4 * h * e + 4 * h * h + 8 * h)  # bidirectional single layer

    prev = m
    for p in cfg.prenet_dims:
        total += p * prev + p
        prev = p

    total += a * d + a * et + f * 2 * lk + a * f + a  # attention, all bias-free

    total += 4 * d * (prev + et) + 4 * d * d + 8 * d  # attention rnn cell
    total += 4 * d * (d + et) + 4 * d * d + 8 * d     # decoder rnn cell
    total += m * (d + et) + m                          # frame projection

    pc, pk, n = cfg.postnet_channels, cfg.postnet_kernel, cfg.postnet_layers
    if n == 1:
        total += m * m * pk + m
    else:
        total += pc * m * pk + pc
        total += (n - 2) * (pc * pc * pk + pc)
        total += m * pc * pk + m
    return total


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
