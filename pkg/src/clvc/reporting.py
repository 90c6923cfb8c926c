"""Delimited reports and diagnostic figures.

Figures render with the Agg backend to PNG files next to the delimited
output: training loss curves, an attention alignment heatmap, and a
target-vs-converted mel comparison.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .checkpoint import load_checkpoint, read_tensor_text


def read_metrics_log(path) -> list[tuple[int, float]]:
    """Parse a step/loss TSV written during training."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("step"):
            raise ValueError(f"{path}: expected a 'step' header line")
        for line in fh:
            step_s, loss_s = line.strip().split("\t")
            rows.append((int(step_s), float(loss_s)))
    return rows


def write_report_tsv(report, path) -> None:
    """Flatten an EvalReport to key/value rows; absent metrics say 'absent'."""
    tree = report.to_dict()
    pairs = tree.pop("pairs")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric\tvalue\n")
        for key in sorted(tree):
            value = tree[key]
            fh.write(f"{key}\t{'absent' if value is None else value}\n")
        for row in pairs:
            fh.write(
                f"pair:{row['source_language']}->{row['target_speaker']}"
                f"\t{row['fr_mel_mse']:.10g} (n={row['count']})\n"
            )


def loss_curves_figure(logs: dict[str, list[tuple[int, float]]], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in sorted(logs):
        rows = logs[stage]
        if rows:
            steps, losses = zip(*rows)
            ax.plot(steps, losses, label=stage)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def attention_figure(alignments: np.ndarray, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(alignments.T, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xlabel("decoder step")
    ax.set_ylabel("encoder frame")
    ax.set_title("attention alignment")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def mel_comparison_figure(target: np.ndarray, converted: np.ndarray, path) -> Path:
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for ax, mel, title in zip(axes, (target, converted), ("target", "converted")):
        im = ax.imshow(mel.T, origin="lower", aspect="auto", cmap="magma")
        ax.set_ylabel("mel bin")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def render_report_figures(report, ckpt_dir, inter_dir, out_dir) -> list[Path]:
    """Render whatever figures the available logs and intermediates allow."""
    ckpt_dir = Path(ckpt_dir)
    inter_dir = Path(inter_dir)
    out_dir = Path(out_dir)
    written = []

    logs = {}
    for log_path in sorted(ckpt_dir.glob("*_metrics.tsv")):
        stage = log_path.name.replace("_metrics.tsv", "")
        logs[stage] = read_metrics_log(log_path)
    if logs:
        written.append(loss_curves_figure(logs, out_dir / "loss_curves.png"))

    align_path = inter_dir / "alignments_0.txt"
    if align_path.exists():
        written.append(attention_figure(read_tensor_text(align_path), out_dir / "attention.png"))

    target_path = inter_dir / "mel_target_0.txt"
    fr_path = inter_dir / "mel_fr_0.txt"
    if target_path.exists() and fr_path.exists():
        written.append(mel_comparison_figure(
            read_tensor_text(target_path), read_tensor_text(fr_path),
            out_dir / "mel_comparison.png",
        ))
    return written


def export_embeddings_text(enroll_ckpt_path, path) -> Path:
    """Write enrolled speaker embeddings as speaker_id<TAB>v0 v1 ... rows."""
    ckpt = load_checkpoint(enroll_ckpt_path)
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(ckpt.tensors):
            if not name.startswith("speaker/"):
                continue
            vec = ckpt.tensors[name]
            values = " ".join(f"{v:.9g}" for v in vec.tolist())
            fh.write(f"{name.split('/', 1)[1]}\t{values}\n")
    return Path(path)
