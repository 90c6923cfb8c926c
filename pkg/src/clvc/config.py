"""Pipeline configuration: one structured tree, echoed into every checkpoint.

Defaults are full-scale values; ``toy_config`` scales everything down to
sizes that train in seconds on a CPU for tests and smoke runs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

MODE_MPPG = "mppg"
MODE_DPF = "dpf"


@dataclass
class FeatureConfig:
    sample_rate: int = 24000
    win_ms: float = 32.0
    hop_ms: float = 10.0
    n_mels: int = 80
    n_mfcc: int = 40
    context_left: int = 7
    context_right: int = 7
    trim_threshold_db: float = -40.0
    trim_frame_ms: float = 25.0

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * 1e-3 * self.sample_rate))

    @property
    def win_samples(self) -> int:
        return int(round(self.win_ms * 1e-3 * self.sample_rate))

    @property
    def stacked_dim(self) -> int:
        return self.n_mfcc * (self.context_left + self.context_right + 1)


@dataclass
class AcousticConfig:
    num_layers: int = 3
    hidden_size: int = 512
    # The recurrent width above is per direction by default; set False to
    # read it as the total across both directions.
    hidden_is_per_direction: bool = True
    num_phonemes: int = 70
    lr: float = 1e-3
    grad_clip: float = 5.0
    steps: int = 200
    batch_size: int = 4

    @property
    def hidden_per_direction(self) -> int:
        return self.hidden_size if self.hidden_is_per_direction else self.hidden_size // 2

    @property
    def dpf_dim(self) -> int:
        return 2 * self.hidden_per_direction


@dataclass
class SpeakerConfig:
    num_layers: int = 3
    hidden_size: int = 256
    embedding_dim: int = 256
    min_window_frames: int = 160
    window_frames: int = 160
    segment_seconds: float = 10.0
    enroll_segments: int = 5
    ge2e_w_init: float = 10.0
    ge2e_b_init: float = -5.0
    speakers_per_batch: int = 4
    utterances_per_speaker: int = 4
    lr: float = 1e-3
    grad_clip: float = 3.0
    steps: int = 300


@dataclass
class ConversionConfig:
    encoder_conv_layers: int = 3
    encoder_conv_kernel: int = 5
    encoder_dim: int = 512
    attention_dim: int = 128
    attention_location_filters: int = 32
    attention_location_kernel: int = 31
    decoder_dim: int = 1024
    prenet_dims: tuple[int, ...] = (256, 256)
    prenet_dropout: float = 0.5
    prenet_dropout_at_inference: bool = True
    postnet_layers: int = 5
    postnet_channels: int = 512
    postnet_kernel: int = 5
    window_left: int = 30
    window_right: int = 30
    # "step": attention window centered at the decoder step index (lengths
    # are matched); "argmax": centered at the previous alignment peak.
    window_center: str = "step"
    speaker_dim: int = 256
    mel_dim: int = 80
    lr: float = 1e-3
    grad_clip: float = 1.0
    steps: int = 2000
    batch_size: int = 4
    teacher_forcing: bool = True


@dataclass
class VocoderConfig:
    n_flows: int = 4
    squeeze_group: int = 8
    coupling_hidden: int = 64
    coupling_kernel: int = 3
    mel_dim: int = 80
    hop_samples: int = 240
    sigma_train: float = 1.0
    sigma_infer: float = 0.6
    segment_samples: int = 4800
    griffin_lim_iters: int = 60
    lr: float = 1e-4
    grad_clip: float = 5.0
    steps: int = 500
    batch_size: int = 2


@dataclass
class PipelineConfig:
    mode: str = MODE_MPPG
    seed: int = 1234
    features: FeatureConfig = field(default_factory=FeatureConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)

    def __post_init__(self):
        if self.mode not in (MODE_MPPG, MODE_DPF):
            raise ValueError(f"mode must be {MODE_MPPG!r} or {MODE_DPF!r}, got {self.mode!r}")

    @property
    def content_dim(self) -> int:
        """Width of the conversion model's content input: phonetic features + 2 prosody dims."""
        if self.mode == MODE_MPPG:
            return self.acoustic.num_phonemes + 2
        return self.acoustic.dpf_dim + 2

    def to_dict(self) -> dict:
        tree = dataclasses.asdict(self)
        tree["conversion"]["prenet_dims"] = list(self.conversion.prenet_dims)
        tree["conversion"]["content_dim"] = self.content_dim
        return tree


def _apply_overrides(obj, overrides: dict, trail: str):
    for key, value in overrides.items():
        where = f"{trail}.{key}" if trail else key
        if not hasattr(obj, key):
            raise ValueError(f"unknown config key: {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ValueError(f"config key {where} expects a mapping")
            _apply_overrides(current, value, where)
        else:
            if key == "prenet_dims":
                value = tuple(value)
            setattr(obj, key, value)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Build a config from defaults, a YAML/JSON file, and optional overrides."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        if data:
            data.pop("content_dim", None)
            if isinstance(data.get("conversion"), dict):
                data["conversion"].pop("content_dim", None)
            _apply_overrides(cfg, data, "")
    if overrides:
        _apply_overrides(cfg, overrides, "")
    cfg.__post_init__()
    return cfg


def config_from_dict(tree: dict) -> PipelineConfig:
    """Rebuild a config from a ``to_dict`` tree (checkpoint echo)."""
    data = json.loads(json.dumps(tree))  # deep copy, drops tuples
    data.pop("content_dim", None)
    if isinstance(data.get("conversion"), dict):
        data["conversion"].pop("content_dim", None)
    cfg = PipelineConfig()
    _apply_overrides(cfg, data, "")
    cfg.__post_init__()
    return cfg


def config_diff(a, b, trail: str = "") -> list[str]:
    """Dotted paths at which two config trees differ.

    Accepts PipelineConfig objects or plain dict trees.
    """
    if isinstance(a, PipelineConfig):
        a = a.to_dict()
    if isinstance(b, PipelineConfig):
        b = b.to_dict()
    diffs = []
    keys = sorted(set(a) | set(b))
    for key in keys:
        where = f"{trail}.{key}" if trail else str(key)
        if key not in a or key not in b:
            diffs.append(where)
        elif isinstance(a[key], dict) and isinstance(b[key], dict):
            diffs.extend(config_diff(a[key], b[key], where))
        elif a[key] != b[key]:
            diffs.append(where)
    return diffs


def toy_config(mode: str = MODE_MPPG, sample_rate: int = 16000) -> PipelineConfig:
    """Desk-scale config: every stage trains in seconds on a laptop CPU."""
    cfg = PipelineConfig(mode=mode)
    cfg.features.sample_rate = sample_rate
    cfg.acoustic.num_layers = 2
    cfg.acoustic.hidden_size = 48
    cfg.acoustic.num_phonemes = 70
    cfg.acoustic.batch_size = 4
    cfg.acoustic.steps = 200
    cfg.speaker.num_layers = 2
    cfg.speaker.hidden_size = 64
    cfg.speaker.embedding_dim = 64
    cfg.speaker.min_window_frames = 40
    cfg.speaker.window_frames = 40
    cfg.speaker.segment_seconds = 1.0
    cfg.speaker.steps = 300
    cfg.conversion.encoder_conv_layers = 1
    cfg.conversion.encoder_dim = 64
    cfg.conversion.attention_dim = 32
    cfg.conversion.attention_location_filters = 8
    cfg.conversion.attention_location_kernel = 15
    cfg.conversion.decoder_dim = 96
    cfg.conversion.prenet_dims = (48, 48)
    cfg.conversion.postnet_layers = 3
    cfg.conversion.postnet_channels = 48
    cfg.conversion.speaker_dim = 64
    cfg.conversion.batch_size = 4
    cfg.conversion.steps = 2000
    cfg.vocoder.n_flows = 4
    cfg.vocoder.coupling_hidden = 32
    cfg.vocoder.segment_samples = 3200
    cfg.vocoder.hop_samples = cfg.features.hop_samples
    cfg.vocoder.steps = 500
    cfg.vocoder.lr = 5e-4
    return cfg
