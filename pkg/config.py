import os
import json
from dataclasses import dataclass, field, fields, asdict, replace, is_dataclass
from typing import Any, Dict, Tuple
from dotenv import load_dotenv

# Load environment variables from .env file if present.
load_dotenv()


@dataclass(frozen=True)
class LoggingConfig:
    log_file: str = os.getenv('LOG_FILE', 'crcnn.log')
    log_level: str = os.getenv('LOG_LEVEL', 'DEBUG')


@dataclass(frozen=True)
class RuntimeConfig:
    num_workers: int = int(os.getenv('NUM_WORKERS', '1'))
    default_seed: int = int(os.getenv('CRCNN_SEED', '0'))
    frame_cache_videos: int = int(os.getenv('FRAME_CACHE_VIDEOS', '4'))


@dataclass(frozen=True)
class SamplingSpec:
    """Clip sampling around a key frame: T frames at stride tau inside a 64-frame neighborhood."""
    num_frames: int = 32
    stride: int = 2
    neighborhood: int = 64

    def __post_init__(self):
        if self.num_frames < 1 or self.stride < 1:
            raise ValueError(f"num_frames and stride must be >= 1, got {self.num_frames}x{self.stride}")
        if self.num_frames * self.stride > self.neighborhood:
            raise ValueError(
                f"T*tau = {self.num_frames * self.stride} exceeds the {self.neighborhood}-frame neighborhood"
            )


# Supported T x tau presets.
SAMPLING_PRESETS = {
    "8x8": SamplingSpec(8, 8),
    "16x4": SamplingSpec(16, 4),
    "32x2": SamplingSpec(32, 2),
}


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: Tuple[int, ...] = (8, 16, 32, 64)
    spatial_strides: Tuple[int, ...] = (4, 2, 2, 1)
    temporal_strides: Tuple[int, ...] = (1, 2, 1, 1)
    # res5-style modification: last stage keeps stride 1 and dilates by 2
    dilations: Tuple[int, ...] = (1, 1, 1, 2)
    kernel_size: Tuple[int, int, int] = (3, 3, 3)
    nonlocal_stage: int = 2
    seed: int = 0

    @property
    def final_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class LfbConfig:
    dim: int = 512
    num_blocks: int = 3
    dropout_rate: float = 0.2
    window_seconds: int = 61
    seed: int = 1


@dataclass(frozen=True)
class HeadConfig:
    mode: str = "multilabel"
    lr: float = 0.1
    iters: int = 500
    batch_size: int = 16
    weight_decay: float = 1e-6
    dropout: float = 0.3
    # schedule knobs, off by default at desk scale
    warmup_iters: int = 0
    warmup_factor: float = 0.1
    lr_steps: Tuple[int, ...] = ()
    lr_decay: float = 0.1
    seed: int = 0


# AVA-style (multi-label, sigmoid) and JHMDB-style (single-label, softmax) defaults.
HEAD_PRESETS = {
    "ava": HeadConfig(mode="multilabel", dropout=0.3, weight_decay=1e-6),
    "jhmdb": HeadConfig(mode="singlelabel", dropout=0.5, weight_decay=1e-7),
}


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 20
    video_seconds: int = 8
    fps: int = 4
    frame_h: int = 64
    frame_w: int = 64
    glyph_size: int = 6
    num_classes: int = 8
    actors_per_frame_range: Tuple[int, int] = (1, 3)
    # weights over XS, S, M, L, XL
    box_size_distribution: Tuple[float, ...] = (0.6, 0.1, 0.1, 0.1, 0.1)
    # >1 couples the label to the background texture of the video
    num_scene_textures: int = 1
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    sampling: SamplingSpec = field(default_factory=lambda: SAMPLING_PRESETS["32x2"])
    crop_train: Tuple[int, int] = (224, 224)
    crop_test: Tuple[int, int] = (256, 256)
    expand_scale: float = 1.5
    feature_path: str = "cropresize"
    use_scene: bool = False
    use_lfb: bool = False
    scene_size: int = 256
    roi_output: Tuple[int, int] = (7, 7)
    roi_sampling_ratio: int = 2
    train_fraction: float = 0.7
    label_iou: float = 0.5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lfb: LfbConfig = field(default_factory=LfbConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    seed: int = RuntimeConfig().default_seed

    def __post_init__(self):
        if self.feature_path not in ("roipool", "cropresize"):
            raise ValueError(f"feature_path must be 'roipool' or 'cropresize', got {self.feature_path!r}")
        if self.expand_scale < 1.0:
            raise ValueError(f"expand_scale must be >= 1, got {self.expand_scale}")
        if self.scene_size % 16:
            raise ValueError(f"scene_size must be divisible by 16, got {self.scene_size}")
        if self.lfb.window_seconds % 2 == 0:
            raise ValueError(f"window_seconds must be odd, got {self.lfb.window_seconds}")
        if self.head.mode not in ("multilabel", "singlelabel"):
            raise ValueError(f"head mode must be 'multilabel' or 'singlelabel', got {self.head.mode!r}")


_NESTED = {
    "sampling": SamplingSpec,
    "backbone": BackboneConfig,
    "lfb": LfbConfig,
    "head": HeadConfig,
}


def _coerce(cls, values: Dict[str, Any]):
    """Build a dataclass from a plain dict, turning lists back into tuples."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for name, value in values.items():
        if cls is PipelineConfig and name in _NESTED:
            value = _coerce(_NESTED[name], value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def pipeline_config_from_dict(values: Dict[str, Any], base: PipelineConfig = None) -> PipelineConfig:
    """Merge a (possibly partial) config document over ``base``."""
    base = base or PipelineConfig()
    merged = pipeline_config_to_dict(base)
    for key, value in values.items():
        if key in _NESTED and isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return _coerce(PipelineConfig, merged)


def pipeline_config_to_dict(cfg: PipelineConfig) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(cfg)))


def load_pipeline_config(path: str) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if not isinstance(document, dict):
        raise ValueError(f"Config document {path} must be a JSON object")
    return pipeline_config_from_dict(document)


def override(cfg, **changes):
    """dataclasses.replace that ignores None values (unset CLI flags)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    assert is_dataclass(cfg)
    return replace(cfg, **changes)


# Global aliases.
LOG_FILE = LoggingConfig().log_file
LOG_LEVEL = LoggingConfig().log_level
NUM_WORKERS = RuntimeConfig().num_workers
DEFAULT_SEED = RuntimeConfig().default_seed
FRAME_CACHE_VIDEOS = RuntimeConfig().frame_cache_videos
