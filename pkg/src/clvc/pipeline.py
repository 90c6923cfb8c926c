"""End-to-end orchestration: staged training, enrollment, conversion, evaluation.

Each stage trains in isolation and persists one checkpoint plus a
delimited metrics log. Checkpoints echo the full config, so downstream
stages rebuild models from the echo rather than trusting the caller to
pass matching settings. All entry points pin torch to one thread and
seed every RNG, making reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import features
from .acoustic import (
    AcousticModel,
    extract_phonetic_features,
    phoneme_error_rate,
    predict_phonemes,
    train_acoustic_model,
)
from .checkpoint import (
    Checkpoint,
    checkpoint_hash,
    dump_tensor_text,
    load_checkpoint,
    save_checkpoint,
)
from .config import FeatureConfig, PipelineConfig, config_diff, config_from_dict
from .conversion import ConversionModel, convert, dual_mse
from .conversion import train_conversion_model
from .manifest import DatasetManifest, load_manifest, load_frame_labels
from .nnio import load_module_tensors, module_tensors
from .speaker import (
    GE2ECriterion,
    SpeakerEncoder,
    cosine_score,
    embed_window,
    enroll_speaker,
    equal_error_rate,
    train_speaker_encoder,
)
from .vocoder import FlowVocoder, griffin_lim, segment_pairs, synthesize_flow, train_flow

STAGES = ("am", "se", "cm", "voc")
ENROLL_STAGE = "enroll"


class StageError(RuntimeError):
    """A stage cannot run: missing prerequisites or incompatible inputs."""


def checkpoint_path(ckpt_dir, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}.ckpt"


def metrics_log_path(ckpt_dir, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}_metrics.tsv"


class _CheckpointLock:
    """One writer per checkpoint path, via an O_EXCL sibling lockfile."""

    def __init__(self, path: Path):
        self.lock_path = Path(str(path) + ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(
                f"checkpoint is locked by another writer: {self.lock_path} exists"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lock_path.unlink(missing_ok=True)
        return False


def _locked_save(ckpt: Checkpoint, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with _CheckpointLock(path):
        save_checkpoint(ckpt, path)
    return path


def _write_metrics_log(history: list[dict], path: Path, key: str = "loss") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")
        for row in history:
            loss = row[key] if key in row else row["loss_pre"] + row["loss_post"]
            fh.write(f"{row['step']}\t{loss:.10g}\n")


def _as_manifest(manifest) -> DatasetManifest:
    if isinstance(manifest, DatasetManifest):
        return manifest
    return load_manifest(manifest)


def _pin_determinism(seed: int) -> None:
    torch.set_num_threads(1)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# feature plumbing


def load_clip(path, feat_cfg: FeatureConfig, trim: bool) -> features.AudioClip:
    clip = features.load_audio(path)
    if clip.sample_rate != feat_cfg.sample_rate:
        raise StageError(
            f"{path}: sample rate {clip.sample_rate}, config expects {feat_cfg.sample_rate}"
        )
    if trim:
        clip = features.trim_silence(
            clip, feat_cfg.trim_threshold_db, feat_cfg.trim_frame_ms
        )
    return clip


def clip_mel(clip: features.AudioClip, feat_cfg: FeatureConfig) -> np.ndarray:
    mel = features.mel_spectrogram(
        clip, n_mels=feat_cfg.n_mels, win_ms=feat_cfg.win_ms, hop_ms=feat_cfg.hop_ms
    )
    return mel.values.astype(np.float32)


def clip_stacked(clip: features.AudioClip, feat_cfg: FeatureConfig) -> np.ndarray:
    coeffs = features.mfcc(
        clip, n_coeffs=feat_cfg.n_mfcc, n_mels=feat_cfg.n_mels,
        win_ms=feat_cfg.win_ms, hop_ms=feat_cfg.hop_ms,
    )
    return features.stack_context(
        coeffs, left=feat_cfg.context_left, right=feat_cfg.context_right
    ).astype(np.float32)


def content_features(am_model: AcousticModel, clip: features.AudioClip,
                     cfg: PipelineConfig) -> np.ndarray:
    """Phonetic features plus prosody, the converter's content input."""
    stacked = clip_stacked(clip, cfg.features)
    phonetic = extract_phonetic_features(am_model, stacked, cfg.mode)
    pros = features.prosody_features(
        clip, win_ms=cfg.features.win_ms, hop_ms=cfg.features.hop_ms
    ).astype(np.float32)
    return np.concatenate([phonetic, pros], axis=1)


def utterance_embedding(encoder: SpeakerEncoder, mel_values: np.ndarray) -> np.ndarray:
    """d-vector of a whole utterance, treated as one window."""
    return embed_window(encoder, mel_values)


# ---------------------------------------------------------------------------
# checkpoint loading


def _echoed_config(ckpt: Checkpoint, path) -> PipelineConfig:
    try:
        return config_from_dict(ckpt.metadata["config"])
    except KeyError:
        raise StageError(f"{path}: checkpoint has no config echo") from None


def load_acoustic(path) -> tuple[AcousticModel, Checkpoint, PipelineConfig]:
    ckpt = load_checkpoint(path)
    cfg = _echoed_config(ckpt, path)
    model = AcousticModel(cfg.features.stacked_dim, cfg.acoustic)
    load_module_tensors(model, ckpt.tensors)
    model.eval()
    return model, ckpt, cfg


def load_speaker_encoder(path) -> tuple[SpeakerEncoder, Checkpoint, PipelineConfig]:
    ckpt = load_checkpoint(path)
    cfg = _echoed_config(ckpt, path)
    encoder = SpeakerEncoder(cfg.features.n_mels, cfg.speaker)
    load_module_tensors(encoder, ckpt.tensors)
    encoder.eval()
    return encoder, ckpt, cfg


def load_conversion(path) -> tuple[ConversionModel, Checkpoint, PipelineConfig]:
    ckpt = load_checkpoint(path)
    cfg = _echoed_config(ckpt, path)
    model = ConversionModel(cfg.conversion, content_dim=cfg.content_dim)
    load_module_tensors(model, ckpt.tensors)
    model.eval()
    return model, ckpt, cfg


def load_vocoder(path) -> tuple[FlowVocoder, Checkpoint, PipelineConfig]:
    ckpt = load_checkpoint(path)
    cfg = _echoed_config(ckpt, path)
    flow = FlowVocoder(cfg.vocoder)
    load_module_tensors(flow, ckpt.tensors)
    flow.eval()
    return flow, ckpt, cfg


def _require(paths: dict[str, Path], purpose: str) -> None:
    missing = [f"{stage} ({path})" for stage, path in paths.items() if not path.exists()]
    if missing:
        raise StageError(f"{purpose} requires checkpoints: missing {', '.join(missing)}")


def _check_feature_match(a_cfg: PipelineConfig, b_cfg: PipelineConfig,
                         a_name: str, b_name: str) -> None:
    diffs = config_diff(a_cfg.to_dict()["features"], b_cfg.to_dict()["features"])
    if diffs:
        raise StageError(
            f"{a_name} and {b_name} checkpoints disagree on feature settings: {diffs}"
        )


# ---------------------------------------------------------------------------
# training stages


def _train_am(cfg: PipelineConfig, manifest: DatasetManifest, seed: int):
    labeled = manifest.labeled()
    if not labeled:
        raise StageError("acoustic-model training needs records with frame_labels_path")
    sequences = []
    for rec in labeled:
        clip = load_clip(rec.audio_path, cfg.features, trim=False)
        stacked = clip_stacked(clip, cfg.features)
        labels = np.asarray(
            load_frame_labels(rec.frame_labels_path, num_phonemes=cfg.acoustic.num_phonemes),
            dtype=np.int64,
        )
        if labels.shape[0] != stacked.shape[0]:
            raise StageError(
                f"{rec.audio_path}: {stacked.shape[0]} frames but {labels.shape[0]} labels"
            )
        sequences.append((stacked, labels))
    model = AcousticModel(cfg.features.stacked_dim, cfg.acoustic)
    history = train_acoustic_model(model, sequences, cfg.acoustic, seed)
    return model, history, {}


def _train_se(cfg: PipelineConfig, manifest: DatasetManifest, seed: int):
    mels_by_speaker = {}
    for spk in manifest.speakers():
        pool = []
        for rec in manifest.for_speaker(spk):
            mel = clip_mel(load_clip(rec.audio_path, cfg.features, trim=False), cfg.features)
            if mel.shape[0] >= cfg.speaker.window_frames:
                pool.append(mel)
        if pool:
            mels_by_speaker[spk] = pool
    if len(mels_by_speaker) < 2:
        raise StageError(
            "speaker-encoder training needs at least two speakers with clips of "
            f"{cfg.speaker.window_frames}+ frames"
        )
    encoder = SpeakerEncoder(cfg.features.n_mels, cfg.speaker)
    criterion = GE2ECriterion(cfg.speaker.ge2e_w_init, cfg.speaker.ge2e_b_init)
    history = train_speaker_encoder(encoder, criterion, mels_by_speaker, cfg.speaker, seed)
    extra = {
        "ge2e_w": float(criterion.w.item()),
        "ge2e_b": float(criterion.b.item()),
    }
    return encoder, history, extra


def _train_cm(cfg: PipelineConfig, manifest: DatasetManifest, seed: int, ckpt_dir):
    am_path = checkpoint_path(ckpt_dir, "am")
    se_path = checkpoint_path(ckpt_dir, "se")
    _require({"am": am_path, "se": se_path}, "conversion-model training")
    am_model, _, am_cfg = load_acoustic(am_path)
    encoder, _, se_cfg = load_speaker_encoder(se_path)
    _check_feature_match(am_cfg, cfg, "am", "cm-config")
    _check_feature_match(se_cfg, cfg, "se", "cm-config")

    items = []
    for rec in manifest:
        clip = load_clip(rec.audio_path, cfg.features, trim=False)
        content = content_features(am_model, clip, cfg)
        mel = clip_mel(clip, cfg.features)
        spk = utterance_embedding(encoder, mel)
        items.append((content, spk, mel))
    if not items:
        raise StageError("conversion-model training needs at least one record")

    stacked_content = np.concatenate([c for c, _, _ in items], axis=0)
    mean = stacked_content.mean(axis=0)
    std = stacked_content.std(axis=0)

    model = ConversionModel(cfg.conversion, content_dim=cfg.content_dim)
    model.set_content_stats(mean, std)
    history = train_conversion_model(model, items, cfg.conversion, seed)
    extra = {
        "mode": cfg.mode,
        "content_dim": cfg.content_dim,
        "am_checkpoint_sha256": checkpoint_hash(am_path),
        "se_checkpoint_sha256": checkpoint_hash(se_path),
    }
    return model, history, extra


def _train_voc(cfg: PipelineConfig, manifest: DatasetManifest, seed: int):
    if cfg.vocoder.hop_samples != cfg.features.hop_samples:
        raise StageError(
            f"vocoder hop {cfg.vocoder.hop_samples} != feature hop {cfg.features.hop_samples}"
        )
    rng = np.random.default_rng(seed)
    items = []
    for rec in manifest:
        clip = load_clip(rec.audio_path, cfg.features, trim=False)
        mel = clip_mel(clip, cfg.features)
        items.extend(segment_pairs(
            clip.samples, mel, cfg.features.hop_samples,
            cfg.vocoder.segment_samples, rng, count=4,
        ))
    if not items:
        raise StageError("vocoder training needs at least one record")
    flow = FlowVocoder(cfg.vocoder)
    history = train_flow(flow, items, cfg.vocoder, seed)
    return flow, history, {}


def train_stage(stage: str, cfg: PipelineConfig, manifest, seed: int, ckpt_dir) -> Path:
    """Train one stage and write ``<ckpt_dir>/<stage>.ckpt`` plus a metrics log.

    The conversion stage requires am.ckpt and se.ckpt in the same
    directory. Training aborts on non-finite losses. Reruns with the
    same stage, config, manifest, and seed are byte-identical.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    manifest = _as_manifest(manifest)
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_from_dict(cfg.to_dict())  # private copy
    cfg.seed = seed  # the echo records the seed actually used
    _pin_determinism(seed)

    if stage == "am":
        model, history, extra = _train_am(cfg, manifest, seed)
    elif stage == "se":
        model, history, extra = _train_se(cfg, manifest, seed)
    elif stage == "cm":
        model, history, extra = _train_cm(cfg, manifest, seed, ckpt_dir)
    else:
        model, history, extra = _train_voc(cfg, manifest, seed)

    last = history[-1]
    final_loss = last["loss"] if "loss" in last else last.get(
        "nll", last.get("loss_pre", 0.0) + last.get("loss_post", 0.0)
    )
    metadata = {"stage": stage, "seed": seed, "config": cfg.to_dict(),
                "final_loss": final_loss}
    metadata.update(extra)

    path = checkpoint_path(ckpt_dir, stage)
    _locked_save(Checkpoint(stage=stage, metadata=metadata, tensors=module_tensors(model)), path)
    _write_metrics_log(history, metrics_log_path(ckpt_dir, stage),
                       key="nll" if stage == "voc" else "loss")
    return path


# ---------------------------------------------------------------------------
# enrollment


def enroll_speakers(manifest, seed: int, ckpt_dir) -> Path:
    """Embed every manifest speaker and persist aggregates in enroll.ckpt."""
    manifest = _as_manifest(manifest)
    ckpt_dir = Path(ckpt_dir)
    se_path = checkpoint_path(ckpt_dir, "se")
    _require({"se": se_path}, "enrollment")
    _pin_determinism(seed)
    encoder, _, cfg = load_speaker_encoder(se_path)

    tensors = {}
    segment_counts = {}
    for spk in manifest.speakers():
        clips = [
            load_clip(rec.audio_path, cfg.features, trim=True)
            for rec in manifest.for_speaker(spk)
        ]
        enrollment = enroll_speaker(encoder, clips, spk, cfg.features, cfg.speaker, seed)
        tensors[f"speaker/{spk}"] = enrollment.embedding
        tensors[f"segments/{spk}"] = enrollment.segment_embeddings
        segment_counts[spk] = int(enrollment.segment_embeddings.shape[0])

    metadata = {
        "stage": ENROLL_STAGE,
        "seed": seed,
        "config": cfg.to_dict(),
        "speakers": sorted(segment_counts),
        "segment_counts": segment_counts,
        "se_checkpoint_sha256": checkpoint_hash(se_path),
    }
    path = checkpoint_path(ckpt_dir, ENROLL_STAGE)
    return _locked_save(Checkpoint(stage=ENROLL_STAGE, metadata=metadata, tensors=tensors), path)


def enrolled_embedding(enroll_ckpt: Checkpoint, speaker_id: str) -> np.ndarray:
    key = f"speaker/{speaker_id}"
    if key not in enroll_ckpt.tensors:
        known = sorted(
            name.split("/", 1)[1]
            for name in enroll_ckpt.tensors
            if name.startswith("speaker/")
        )
        raise StageError(f"unknown speaker {speaker_id!r}; enrolled speakers: {known}")
    return enroll_ckpt.tensors[key]


# ---------------------------------------------------------------------------
# conversion


@dataclass
class ConversionResult:
    wav_path: Path
    sidecar_path: Path
    mel: np.ndarray
    alignments: np.ndarray
    samples: np.ndarray
    sidecar: dict


def convert_command(source_wav, target_speaker: str, ckpt_dir, out_path,
                    mode: str | None = None, vocoder: str = "gl",
                    seed: int = 0) -> ConversionResult:
    """Convert one utterance to the target speaker's voice.

    Runs trim -> features -> phonetic+prosody -> conversion -> vocoder and
    writes the WAV plus a JSON sidecar (mode, seed, checkpoint hashes, mel
    hash). Output mel frame count equals the trimmed source frame count.
    """
    if vocoder not in ("gl", "flow"):
        raise ValueError(f"unknown vocoder {vocoder!r}, expected 'gl' or 'flow'")
    ckpt_dir = Path(ckpt_dir)
    paths = {
        "am": checkpoint_path(ckpt_dir, "am"),
        "se": checkpoint_path(ckpt_dir, "se"),
        "cm": checkpoint_path(ckpt_dir, "cm"),
        ENROLL_STAGE: checkpoint_path(ckpt_dir, ENROLL_STAGE),
    }
    if vocoder == "flow":
        paths["voc"] = checkpoint_path(ckpt_dir, "voc")
    _require(paths, "conversion")

    _pin_determinism(seed)
    cm_model, cm_ckpt, cm_cfg = load_conversion(paths["cm"])
    trained_mode = cm_ckpt.metadata.get("mode", cm_cfg.mode)
    mode = mode or trained_mode
    if mode != trained_mode:
        want = cm_cfg.content_dim
        other = config_from_dict({**cm_ckpt.metadata["config"], "mode": mode})
        raise StageError(
            f"conversion checkpoint was trained in {trained_mode!r} mode "
            f"(content_dim {want}); a {mode!r} front end produces "
            f"content_dim {other.content_dim} and cannot feed it"
        )

    am_model, _, am_cfg = load_acoustic(paths["am"])
    _check_feature_match(am_cfg, cm_cfg, "am", "cm")
    enroll_ckpt = load_checkpoint(paths[ENROLL_STAGE])
    spk = enrolled_embedding(enroll_ckpt, target_speaker)
    if spk.shape[0] != cm_cfg.conversion.speaker_dim:
        raise StageError(
            f"enrolled embedding dim {spk.shape[0]} != converter speaker_dim "
            f"{cm_cfg.conversion.speaker_dim}"
        )

    clip = load_clip(source_wav, cm_cfg.features, trim=True)
    content = content_features(am_model, clip, cm_cfg)
    if content.shape[1] != cm_model.content_dim:
        raise StageError(
            f"content features have {content.shape[1]} dims, converter expects "
            f"{cm_model.content_dim} ({trained_mode!r} mode)"
        )
    mel, aligns = convert(cm_model, content, spk, seed=seed)

    sr = cm_cfg.features.sample_rate
    if vocoder == "gl":
        out_clip = griffin_lim(
            features.MelSpectrogram(
                mel.astype(np.float64), sr,
                hop_ms=cm_cfg.features.hop_ms, win_ms=cm_cfg.features.win_ms,
            ),
            n_iters=cm_cfg.vocoder.griffin_lim_iters,
        )
        samples = out_clip.samples.astype(np.float32)
    else:
        flow, _, voc_cfg = load_vocoder(paths["voc"])
        if voc_cfg.vocoder.hop_samples != cm_cfg.features.hop_samples:
            raise StageError(
                f"vocoder hop {voc_cfg.vocoder.hop_samples} != feature hop "
                f"{cm_cfg.features.hop_samples}"
            )
        samples = synthesize_flow(flow, mel, voc_cfg.vocoder.sigma_infer, seed=seed)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    features.save_audio(features.AudioClip(samples.astype(np.float64), sr), out_path)

    sidecar = {
        "source": str(source_wav),
        "target_speaker": target_speaker,
        "mode": mode,
        "vocoder": vocoder,
        "seed": seed,
        "frames": int(mel.shape[0]),
        "samples": int(samples.shape[0]),
        "sample_rate": sr,
        "mel_sha256": hashlib.sha256(mel.astype("<f4").tobytes()).hexdigest(),
        "checkpoints": {stage: checkpoint_hash(p) for stage, p in sorted(paths.items())},
    }
    sidecar_path = Path(str(out_path) + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return ConversionResult(out_path, sidecar_path, mel, aligns, samples, sidecar)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """Aggregate metrics; a metric is None when its inputs are unavailable."""

    per: float | None = None
    eer: float | None = None
    tf_mel_mse: float | None = None
    fr_mel_mse: float | None = None
    attention_violations: int | None = None
    num_records: int = 0
    pairs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per": self.per,
            "eer": self.eer,
            "tf_mel_mse": self.tf_mel_mse,
            "fr_mel_mse": self.fr_mel_mse,
            "attention_violations": self.attention_violations,
            "num_records": self.num_records,
            "pairs": self.pairs,
        }


def _window_violations(aligns: np.ndarray, wl: int, wr: int,
                       window_center: str = "step", tol: float = 1e-8) -> int:
    """Decoder steps whose attention mass leaks outside the local window."""
    t_steps, t_enc = aligns.shape
    count = 0
    for t in range(t_steps):
        if window_center == "argmax":
            center = 0 if t == 0 else int(np.argmax(aligns[t - 1]))
        else:
            center = min(t, t_enc - 1)
        lo = max(0, center - wl)
        hi = min(t_enc, center + wr + 1)
        outside = float(aligns[t, :lo].sum()) + float(aligns[t, hi:].sum())
        if outside > tol:
            count += 1
    return count


def _eer_from_manifest(encoder, cfg: PipelineConfig, manifest: DatasetManifest,
                       dump_path: Path | None = None) -> float | None:
    """Speaker verification EER over held-out halves of each speaker's clips."""
    per_speaker = {}
    for spk in manifest.speakers():
        embs = []
        for rec in manifest.for_speaker(spk):
            mel = clip_mel(load_clip(rec.audio_path, cfg.features, trim=False), cfg.features)
            if mel.shape[0] >= cfg.speaker.min_window_frames:
                embs.append(embed_window(encoder, mel))
        if len(embs) >= 2:
            per_speaker[spk] = embs
    if len(per_speaker) < 2:
        return None
    enrollments = {}
    trials = {}
    for spk, embs in per_speaker.items():
        k = (len(embs) + 1) // 2
        mean = np.mean(embs[:k], axis=0)
        enrollments[spk] = mean / max(np.linalg.norm(mean), 1e-8)
        trials[spk] = embs[k:]
    scores, labels = [], []
    for trial_spk, embs in sorted(trials.items()):
        for emb in embs:
            for enroll_spk, enrollment in sorted(enrollments.items()):
                scores.append(cosine_score(emb, enrollment))
                labels.append(trial_spk == enroll_spk)
    if dump_path is not None:
        with open(dump_path, "w", encoding="utf-8") as fh:
            fh.write("score\tsame_speaker\n")
            for score, label in zip(scores, labels):
                fh.write(f"{score:.17g}\t{int(label)}\n")
    return equal_error_rate(scores, labels)


def evaluate(manifest, ckpt_dir, out_dir, seed: int = 0) -> EvalReport:
    """Compute the evaluation report and dump recomputable intermediates.

    Writes report.json, report.tsv, and per-record intermediates under
    out_dir. Metrics whose checkpoints or data are missing stay absent
    (null in JSON) rather than zero.
    """
    manifest = _as_manifest(manifest)
    ckpt_dir = Path(ckpt_dir)
    out_dir = Path(out_dir)
    inter_dir = out_dir / "intermediates"
    inter_dir.mkdir(parents=True, exist_ok=True)
    _pin_determinism(seed)

    report = EvalReport(num_records=len(manifest))
    am_path = checkpoint_path(ckpt_dir, "am")
    se_path = checkpoint_path(ckpt_dir, "se")
    cm_path = checkpoint_path(ckpt_dir, "cm")

    am_model = am_cfg = None
    if am_path.exists():
        am_model, _, am_cfg = load_acoustic(am_path)

    # PER over labeled records
    if am_model is not None and manifest.labeled():
        rates = []
        for i, rec in enumerate(manifest.labeled()):
            clip = load_clip(rec.audio_path, am_cfg.features, trim=False)
            stacked = clip_stacked(clip, am_cfg.features)
            labels = load_frame_labels(
                rec.frame_labels_path, num_phonemes=am_cfg.acoustic.num_phonemes
            )
            pred = predict_phonemes(am_model, stacked)
            rates.append(phoneme_error_rate(labels, pred))
            np.savetxt(inter_dir / f"phonemes_ref_{i}.txt", np.asarray(labels), fmt="%d")
            np.savetxt(inter_dir / f"phonemes_hyp_{i}.txt", np.asarray(pred), fmt="%d")
        report.per = float(np.mean(rates))

    # EER over speakers with enough clips
    if se_path.exists():
        encoder, _, se_cfg = load_speaker_encoder(se_path)
        report.eer = _eer_from_manifest(
            encoder, se_cfg, manifest, dump_path=inter_dir / "eer_trials.tsv"
        )

    # mel-level reconstruction metrics
    if cm_path.exists() and am_model is not None and se_path.exists():
        cm_model, cm_ckpt, cm_cfg = load_conversion(cm_path)
        encoder, _, _ = load_speaker_encoder(se_path)
        tf_all, fr_all, violations = [], [], 0
        by_pair: dict[tuple[str, str], list[float]] = {}
        for i, rec in enumerate(manifest):
            clip = load_clip(rec.audio_path, cm_cfg.features, trim=False)
            content = content_features(am_model, clip, cm_cfg)
            mel = clip_mel(clip, cm_cfg.features)
            spk = utterance_embedding(encoder, mel)

            with torch.no_grad():
                memory = cm_model.encode(
                    torch.as_tensor(content), torch.as_tensor(spk)
                )
                _, tf_post, _ = cm_model.decode(
                    memory, targets=torch.as_tensor(mel).unsqueeze(0),
                    generator=None, dropout_active=False,
                )
            tf_mel = tf_post[0].numpy().astype(np.float32)
            # float64 math over float32 values: the text dumps reproduce it exactly
            tf_mse = float(np.mean((tf_mel.astype(np.float64) - mel.astype(np.float64)) ** 2))

            fr_mel, aligns = convert(cm_model, content, spk, seed=seed)
            fr_mse = float(np.mean((fr_mel.astype(np.float64) - mel.astype(np.float64)) ** 2))
            violations += _window_violations(
                aligns, cm_cfg.conversion.window_left, cm_cfg.conversion.window_right,
                cm_cfg.conversion.window_center,
            )

            tf_all.append(tf_mse)
            fr_all.append(fr_mse)
            by_pair.setdefault((rec.language_tag, rec.speaker_id), []).append(fr_mse)

            dump_tensor_text(mel, inter_dir / f"mel_target_{i}.txt")
            dump_tensor_text(tf_mel, inter_dir / f"mel_tf_{i}.txt")
            dump_tensor_text(fr_mel, inter_dir / f"mel_fr_{i}.txt")
            dump_tensor_text(aligns, inter_dir / f"alignments_{i}.txt")

        if tf_all:
            report.tf_mel_mse = float(np.mean(tf_all))
            report.fr_mel_mse = float(np.mean(fr_all))
            report.attention_violations = int(violations)
            report.pairs = [
                {
                    "source_language": lang,
                    "target_speaker": spk_id,
                    "count": len(vals),
                    "fr_mel_mse": float(np.mean(vals)),
                }
                for (lang, spk_id), vals in sorted(by_pair.items())
            ]

    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    from . import reporting

    reporting.write_report_tsv(report, out_dir / "report.tsv")
    reporting.render_report_figures(report, ckpt_dir, inter_dir, out_dir)
    return report
