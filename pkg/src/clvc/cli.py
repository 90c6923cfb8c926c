"""Command-line interface for the voice conversion pipeline."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import features, pipeline, reporting, toydata
from .checkpoint import Checkpoint, save_checkpoint
from .config import load_config, toy_config
from .manifest import load_manifest

_config_opt = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
    default=None, help="YAML or JSON config file (defaults: full-scale).",
)
_manifest_opt = click.option(
    "--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
    required=True, help="JSON Lines dataset manifest.",
)
_seed_opt = click.option("--seed", type=int, default=0, show_default=True)
_mode_opt = click.option(
    "--mode", type=click.Choice(["mppg", "dpf"]), default=None,
    help="Phonetic feature mode; overrides the config.",
)


def _load_cfg(config_path, mode=None):
    cfg = load_config(config_path)
    if mode is not None:
        cfg.mode = mode
        cfg.__post_init__()
    return cfg


@click.group()
def main():
    """Cross-lingual voice conversion: features, training, enrollment, conversion."""


@main.command("features")
@_config_opt
@_manifest_opt
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def features_cmd(config_path, manifest_path, out_dir):
    """Extract stacked MFCCs, prosody, and mel per clip into checkpoints."""
    cfg = _load_cfg(config_path)
    manifest = load_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_rows = []
    for i, rec in enumerate(manifest):
        clip = pipeline.load_clip(rec.audio_path, cfg.features, trim=False)
        tensors = {
            "mfcc_stack": pipeline.clip_stacked(clip, cfg.features),
            "prosody": features.prosody_features(
                clip, win_ms=cfg.features.win_ms, hop_ms=cfg.features.hop_ms
            ).astype(np.float32),
            "mel": pipeline.clip_mel(clip, cfg.features),
        }
        name = f"features_{i:05d}.ckpt"
        metadata = {
            "stage": "features",
            "audio_path": str(rec.audio_path),
            "speaker_id": rec.speaker_id,
            "language_tag": rec.language_tag,
            "config": cfg.to_dict(),
        }
        save_checkpoint(Checkpoint("features", metadata, tensors), out_dir / name)
        index_rows.append((name, rec.speaker_id, tensors["mel"].shape[0]))
    with open(out_dir / "index.tsv", "w", encoding="utf-8") as fh:
        fh.write("file\tspeaker_id\tframes\n")
        for name, spk, frames in index_rows:
            fh.write(f"{name}\t{spk}\t{frames}\n")
    click.echo(f"wrote {len(index_rows)} feature checkpoints to {out_dir}")


def _train(stage, config_path, manifest_path, seed, mode, out_dir):
    cfg = _load_cfg(config_path, mode=mode)
    path = pipeline.train_stage(stage, cfg, manifest_path, seed, out_dir)
    click.echo(f"wrote {path}")


def _train_command(stage, help_text):
    @main.command(f"train-{stage}", help=help_text)
    @_config_opt
    @_manifest_opt
    @_seed_opt
    @_mode_opt
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
                  help="Checkpoint directory.")
    def cmd(config_path, manifest_path, seed, mode, out_dir):
        _train(stage, config_path, manifest_path, seed, mode, out_dir)

    cmd.name = f"train-{stage}"
    return cmd


_train_command("am", "Train the phonetic-feature acoustic model.")
_train_command("se", "Train the speaker encoder with the GE2E objective.")
_train_command("cm", "Train the mel conversion model (needs am and se checkpoints).")
_train_command("voc", "Train the flow vocoder.")


@main.command("enroll")
@_manifest_opt
@_seed_opt
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
              help="Checkpoint directory holding se.ckpt; receives enroll.ckpt.")
@click.option("--export-text", "export_text", type=click.Path(dir_okay=False),
              default=None, help="Also export embeddings as delimited text.")
def enroll_cmd(manifest_path, seed, out_dir, export_text):
    """Enroll every manifest speaker from seeded random segments."""
    path = pipeline.enroll_speakers(manifest_path, seed, out_dir)
    click.echo(f"wrote {path}")
    if export_text:
        click.echo(f"wrote {reporting.export_embeddings_text(path, export_text)}")


@main.command("convert")
@click.option("--source", "source_wav", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Source WAV to convert.")
@click.option("--target-speaker", required=True, help="Enrolled target speaker id.")
@click.option("--ckpt-dir", type=click.Path(file_okay=False, exists=True), required=True)
@_seed_opt
@_mode_opt
@click.option("--vocoder", type=click.Choice(["gl", "flow"]), default="gl",
              show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def convert_cmd(source_wav, target_speaker, ckpt_dir, seed, mode, vocoder, out_path):
    """Convert one utterance to the target speaker's voice."""
    result = pipeline.convert_command(
        source_wav, target_speaker, ckpt_dir, out_path,
        mode=mode, vocoder=vocoder, seed=seed,
    )
    click.echo(f"wrote {result.wav_path} ({result.sidecar['samples']} samples)")
    click.echo(f"wrote {result.sidecar_path}")


@main.command("evaluate")
@_manifest_opt
@_seed_opt
@click.option("--ckpt-dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def evaluate_cmd(manifest_path, seed, ckpt_dir, out_dir):
    """Evaluate available checkpoints; metrics without inputs stay absent."""
    report = pipeline.evaluate(manifest_path, ckpt_dir, out_dir, seed=seed)
    click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))


@main.command("toy-corpus")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_seed_opt
@click.option("--speakers", type=int, default=4, show_default=True)
@click.option("--clips-per-speaker", type=int, default=8, show_default=True)
@click.option("--frames", type=int, default=120, show_default=True,
              help="Frames per clip on the 10 ms grid.")
def toy_corpus_cmd(out_dir, seed, speakers, clips_per_speaker, frames):
    """Generate the synthetic desk-scale corpus plus a matching config file."""
    cfg = toy_config()
    manifest_path = toydata.generate_toy_corpus(
        out_dir, cfg.features, n_speakers=speakers,
        clips_per_speaker=clips_per_speaker, num_frames=frames, seed=seed,
    )
    config_path = Path(out_dir) / "toy-config.json"
    config_path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {manifest_path}")
    click.echo(f"wrote {config_path}")


if __name__ == "__main__":
    main()
