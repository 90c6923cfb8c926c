"""Speaker encoder: GE2E closed forms, EER oracles, enrollment, toy training."""

import math

import numpy as np
import pytest
import torch

from clvc.config import FeatureConfig, SpeakerConfig
from clvc.features import AudioClip
from clvc.nnio import load_module_into, save_module
from clvc.speaker import (
    EnrollmentSet,
    GE2ECriterion,
    SpeakerEncoder,
    cosine_score,
    embed_window,
    enroll_speaker,
    equal_error_rate,
    ge2e_loss,
    random_mel_window,
    train_speaker_encoder,
)

from fdcheck import max_relative_grad_error


def micro_spk_cfg(**kw):
    base = dict(num_layers=1, hidden_size=8, embedding_dim=6,
                min_window_frames=4, window_frames=4,
                speakers_per_batch=2, utterances_per_speaker=2, steps=5)
    base.update(kw)
    return SpeakerConfig(**base)


def make_encoder(input_dim=5, seed=0, **kw):
    torch.manual_seed(seed)
    return SpeakerEncoder(input_dim, micro_spk_cfg(**kw))


class TestForward:
    def test_unit_norm(self):
        enc = make_encoder()
        with torch.no_grad():
            out = enc(torch.randn(3, 10, 5))
        np.testing.assert_allclose(out.norm(dim=-1).numpy(), 1.0, atol=1e-6)

    def test_determinism(self):
        enc = make_encoder(seed=2)
        win = np.random.default_rng(0).normal(size=(12, 5)).astype(np.float32)
        np.testing.assert_array_equal(embed_window(enc, win), embed_window(enc, win))

    def test_window_too_short(self):
        enc = make_encoder(min_window_frames=8)
        with pytest.raises(ValueError, match="shorter"):
            embed_window(enc, np.zeros((5, 5), np.float32))

    def test_checkpoint_round_trip_bit_exact(self, tmp_path):
        enc = make_encoder(seed=3)
        win = np.random.default_rng(1).normal(size=(9, 5)).astype(np.float32)
        before = embed_window(enc, win)
        path = tmp_path / "se.ckpt"
        save_module(enc, "se", {"note": "test"}, path)
        fresh = make_encoder(seed=99)
        load_module_into(fresh, path, stage="se")
        np.testing.assert_array_equal(embed_window(fresh, win), before)


class TestGE2ELoss:
    def test_orthogonal_identical_closed_form(self):
        u = torch.zeros(4, dtype=torch.float64)
        v = torch.zeros(4, dtype=torch.float64)
        u[0] = 1.0
        v[1] = 1.0
        emb = torch.stack([torch.stack([u, u]), torch.stack([v, v])])
        loss = ge2e_loss(emb, torch.tensor(10.0, dtype=torch.float64),
                         torch.tensor(0.0, dtype=torch.float64))
        expected = math.log(1.0 + math.exp(-10.0))
        assert loss.item() == pytest.approx(expected, rel=1e-9)

    def test_total_confusion_is_log_n(self):
        e = torch.zeros(5, dtype=torch.float64)
        e[2] = 1.0
        for n in (2, 3, 4):
            emb = e.expand(n, 3, 5).clone()
            loss = ge2e_loss(emb, torch.tensor(7.0, dtype=torch.float64),
                             torch.tensor(-1.0, dtype=torch.float64))
            assert loss.item() == pytest.approx(math.log(n), rel=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(8)
        emb = rng.normal(size=(4, 3, 8))
        emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        w = torch.tensor(5.0, dtype=torch.float64)
        b = torch.tensor(-2.0, dtype=torch.float64)
        base = ge2e_loss(torch.as_tensor(emb), w, b).item()
        rotated = ge2e_loss(torch.as_tensor(emb @ q), w, b).item()
        assert rotated == pytest.approx(base, abs=1e-6)

    def test_preconditions(self):
        w = torch.tensor(1.0)
        b = torch.tensor(0.0)
        good = torch.eye(3).unsqueeze(1).expand(3, 2, 3).clone()
        with pytest.raises(ValueError, match="N >= 2"):
            ge2e_loss(good[:1], w, b)
        with pytest.raises(ValueError, match="M >= 2"):
            ge2e_loss(good[:, :1], w, b)
        with pytest.raises(ValueError, match="unit-norm"):
            ge2e_loss(good * 3.0, w, b)

    def test_finite_difference_gradients(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(size=(3, 3, 6))
        raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
        emb = torch.nn.Parameter(torch.as_tensor(raw))
        w = torch.nn.Parameter(torch.tensor(2.0, dtype=torch.float64))
        b = torch.nn.Parameter(torch.tensor(-0.5, dtype=torch.float64))
        err = max_relative_grad_error(lambda: ge2e_loss(emb, w, b), [emb, w, b])
        assert err < 1e-4


class TestEqualErrorRate:
    def test_separable(self):
        scores = [0.9, 0.8, 0.7, 0.2, 0.1]
        labels = ["same", "same", "same", "diff", "diff"]
        assert equal_error_rate(scores, labels) == 0.0

    def test_all_equal_scores(self):
        assert equal_error_rate([0.5] * 6, ["same"] * 3 + ["diff"] * 3) == 0.5

    def test_exact_operating_point(self):
        # threshold 0.7 accepts 3/4 same and 1/4 diff: FAR = FRR = 0.25
        scores = [0.9, 0.8, 0.7, 0.2, 0.75, 0.3, 0.25, 0.1]
        labels = ["same"] * 4 + ["diff"] * 4
        assert equal_error_rate(scores, labels) == pytest.approx(0.25)

    def test_interpolated_crossing(self):
        # adjacent points (FAR, FRR) = (0.5, 1/3) and (0, 1/3): EER = 1/3
        scores = [0.9, 0.8, 0.7, 0.75, 0.2]
        labels = ["same", "same", "same", "diff", "diff"]
        assert equal_error_rate(scores, labels) == pytest.approx(1.0 / 3.0)

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(17)
        scores = np.concatenate([
            rng.normal(1.0, 0.6, size=40),   # same
            rng.normal(-0.2, 0.6, size=50),  # diff
        ])
        labels = ["same"] * 40 + ["diff"] * 50
        got = equal_error_rate(scores, labels)

        # oracle: dense midpoint sweep, minimize |FAR - FRR|
        is_same = np.array([l == "same" for l in labels])
        cands = np.sort(np.unique(scores))
        mids = np.concatenate([[cands[0] - 1.0],
                               (cands[:-1] + cands[1:]) / 2,
                               [cands[-1] + 1.0], cands])
        best = None
        for th in mids:
            accept = scores >= th
            far = (accept & ~is_same).sum() / (~is_same).sum()
            frr = (~accept & is_same).sum() / is_same.sum()
            gap = abs(far - frr)
            if best is None or gap < best[0]:
                best = (gap, (far + frr) / 2)
        # interpolation can land between achievable operating points
        assert got == pytest.approx(best[1], abs=0.5 / 50 + 1e-12)

    def test_single_class_errors(self):
        with pytest.raises(ValueError, match="both"):
            equal_error_rate([0.1, 0.2], ["same", "same"])


class TestEnrollment:
    def setup_method(self):
        self.feat_cfg = FeatureConfig(sample_rate=16000)
        self.spk_cfg = micro_spk_cfg(
            embedding_dim=8, min_window_frames=4, segment_seconds=1.0,
            enroll_segments=5,
        )
        torch.manual_seed(5)
        self.encoder = SpeakerEncoder(self.feat_cfg.n_mels, self.spk_cfg)

    def make_clip(self, seconds, seed=0):
        rng = np.random.default_rng(seed)
        t = np.arange(int(16000 * seconds)) / 16000
        sig = 0.4 * np.sin(2 * np.pi * 180 * t) + 0.05 * rng.normal(size=t.shape[0])
        return AudioClip(np.clip(sig, -1, 1), 16000)

    def test_single_exact_segment(self):
        clip = self.make_clip(1.0)
        enr = enroll_speaker(self.encoder, [clip], "spk", self.feat_cfg,
                             self.spk_cfg, seed=11)
        assert enr.segment_embeddings.shape[0] == 1
        np.testing.assert_allclose(enr.embedding, enr.segment_embeddings[0], atol=1e-6)
        assert np.linalg.norm(enr.embedding) == pytest.approx(1.0, abs=1e-6)

    def test_seeded_reproducibility(self):
        clips = [self.make_clip(3.0, seed=1), self.make_clip(2.5, seed=2)]
        a = enroll_speaker(self.encoder, clips, "s", self.feat_cfg, self.spk_cfg, seed=7)
        b = enroll_speaker(self.encoder, clips, "s", self.feat_cfg, self.spk_cfg, seed=7)
        np.testing.assert_array_equal(a.embedding, b.embedding)
        np.testing.assert_array_equal(a.segment_embeddings, b.segment_embeddings)

    def test_insufficient_audio(self):
        with pytest.raises(ValueError, match="insufficient"):
            enroll_speaker(self.encoder, [self.make_clip(0.5)], "s",
                           self.feat_cfg, self.spk_cfg, seed=0)

    def test_aggregate_norm(self):
        clips = [self.make_clip(4.0, seed=3)]
        enr = enroll_speaker(self.encoder, clips, "s", self.feat_cfg, self.spk_cfg, seed=1)
        assert np.linalg.norm(enr.embedding) == pytest.approx(1.0, abs=1e-6)


class TestToyTraining:
    def test_speakers_separate(self):
        rng = np.random.default_rng(31)
        n_speakers, dim, pool_t = 4, 20, 60
        envelopes = rng.normal(scale=1.5, size=(n_speakers, dim))
        mels_by_speaker = {}
        for s in range(n_speakers):
            pool = []
            for _ in range(8):
                frames = envelopes[s] + 0.3 * rng.normal(size=(pool_t, dim))
                pool.append(frames.astype(np.float32))
            mels_by_speaker[f"spk{s}"] = pool

        cfg = micro_spk_cfg(
            num_layers=2, hidden_size=32, embedding_dim=16,
            min_window_frames=20, window_frames=20,
            speakers_per_batch=4, utterances_per_speaker=4,
            steps=150, lr=1e-3, grad_clip=3.0,
        )
        torch.manual_seed(31)
        encoder = SpeakerEncoder(dim, cfg)
        criterion = GE2ECriterion(cfg.ge2e_w_init, cfg.ge2e_b_init)
        history = train_speaker_encoder(encoder, criterion, mels_by_speaker, cfg, seed=31)
        assert history[-1]["loss"] < history[0]["loss"]

        # fresh windows, embeddings per speaker
        emb = {}
        for s in range(n_speakers):
            rows = []
            for _ in range(6):
                frames = envelopes[s] + 0.3 * rng.normal(size=(cfg.window_frames, dim))
                rows.append(embed_window(encoder, frames.astype(np.float32)))
            emb[s] = np.stack(rows)

        intra, inter = [], []
        for a in range(n_speakers):
            rows = emb[a]
            for i in range(rows.shape[0]):
                for j in range(i + 1, rows.shape[0]):
                    intra.append(cosine_score(rows[i], rows[j]))
            for b in range(a + 1, n_speakers):
                for i in range(rows.shape[0]):
                    for j in range(emb[b].shape[0]):
                        inter.append(cosine_score(rows[i], emb[b][j]))
        gap = np.mean(intra) - np.mean(inter)
        assert gap >= 0.3

        # verification trials: centroid of first 3 windows vs the rest
        scores, labels = [], []
        for a in range(n_speakers):
            enroll = emb[a][:3].mean(axis=0)
            enroll /= np.linalg.norm(enroll)
            for b in range(n_speakers):
                for row in emb[b][3:]:
                    scores.append(cosine_score(enroll, row))
                    labels.append("same" if a == b else "diff")
        assert equal_error_rate(scores, labels) < 0.05


class TestWindowSampling:
    def test_exact_length_window(self):
        rng = np.random.default_rng(0)
        mel = rng.normal(size=(10, 4)).astype(np.float32)
        win = random_mel_window(mel, 10, rng)
        np.testing.assert_array_equal(win, mel)

    def test_too_short_raises(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="window"):
            random_mel_window(np.zeros((5, 4), np.float32), 6, rng)
