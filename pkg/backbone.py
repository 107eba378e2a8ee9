"""
Toy inflated-3D backbone with one embedded-Gaussian non-local block.

Contract: (T, H, W, 3) -> (T/2, H/16, W/16, C). The last stage keeps spatial
stride 1 and uses dilation 2, the res5 modification used for detection.
Weights are random but fully determined by the config seed; only inference
runs through this module.
"""
import logging
import math
from dataclasses import dataclass, asdict
from typing import Dict, List
import numpy as np

from config import BackboneConfig
from geometry import Box, crop_resize_clip
from tensor_core import Tensor, as_tensor, conv3d, frozen_batchnorm, global_avg_pool, relu, softmax
from utils import array_fingerprint

logger = logging.getLogger(__name__)

# Query rows processed per attention chunk; bounds the N x N logits in memory.
ATTENTION_CHUNK = 1024


@dataclass(frozen=True)
class StageWeights:
    kernel: Tensor
    bn_scale: Tensor
    bn_shift: Tensor


@dataclass(frozen=True)
class NonLocalWeights:
    theta: Tensor
    phi: Tensor
    g: Tensor
    out: Tensor

    @property
    def inner_dim(self) -> int:
        return self.theta.shape[1]


@dataclass(frozen=True)
class BackboneWeights:
    config: BackboneConfig
    stages: List[StageWeights]
    nonlocal_weights: NonLocalWeights

    @property
    def fingerprint(self) -> str:
        arrays = []
        for stage in self.stages:
            arrays += [stage.kernel, stage.bn_scale, stage.bn_shift]
        nl = self.nonlocal_weights
        arrays += [nl.theta, nl.phi, nl.g, nl.out]
        return array_fingerprint(arrays)

    def to_named_tensors(self) -> Dict[str, Tensor]:
        named = {}
        for key, value in asdict(self.config).items():
            named[f"config.{key}"] = np.atleast_1d(np.asarray(value, dtype=np.float64))
        for i, stage in enumerate(self.stages):
            named[f"stage{i}.kernel"] = stage.kernel
            named[f"stage{i}.bn_scale"] = stage.bn_scale
            named[f"stage{i}.bn_shift"] = stage.bn_shift
        for name in ("theta", "phi", "g", "out"):
            named[f"nonlocal.{name}"] = getattr(self.nonlocal_weights, name)
        return named

    @classmethod
    def from_named_tensors(cls, named: Dict[str, Tensor]) -> "BackboneWeights":
        try:
            values = {}
            for key, default in asdict(BackboneConfig()).items():
                raw = [int(v) for v in named[f"config.{key}"]]
                values[key] = tuple(raw) if isinstance(default, tuple) else raw[0]
            config = BackboneConfig(**values)
            stages = [
                StageWeights(named[f"stage{i}.kernel"], named[f"stage{i}.bn_scale"], named[f"stage{i}.bn_shift"])
                for i in range(len(config.stage_channels))
            ]
            nl = NonLocalWeights(*(named[f"nonlocal.{name}"] for name in ("theta", "phi", "g", "out")))
        except KeyError as e:
            raise ValueError(f"Backbone container is missing tensor {e}") from e
        return cls(config, stages, nl)


def validate_backbone_config(config: BackboneConfig) -> None:
    n = len(config.stage_channels)
    if not (len(config.spatial_strides) == len(config.temporal_strides) == len(config.dilations) == n):
        raise ValueError(f"BackboneConfig per-stage lists must all have {n} entries: {config}")
    if math.prod(config.spatial_strides) != 16:
        raise ValueError(f"spatial strides must multiply to 16, got {config.spatial_strides}")
    if math.prod(config.temporal_strides) != 2:
        raise ValueError(f"temporal strides must multiply to 2, got {config.temporal_strides}")
    if config.spatial_strides[-1] != 1:
        raise ValueError(f"final stage must use spatial stride 1, got {config.spatial_strides[-1]}")
    if not 0 <= config.nonlocal_stage < n:
        raise ValueError(f"nonlocal_stage {config.nonlocal_stage} outside 0..{n - 1}")


def init_backbone(config: BackboneConfig) -> BackboneWeights:
    """Scaled-uniform weights drawn from one generator seeded by config.seed."""
    validate_backbone_config(config)
    rng = np.random.default_rng(config.seed)
    kt, kh, kw = config.kernel_size
    stages = []
    c_in = 3
    for c_out in config.stage_channels:
        bound = math.sqrt(6.0 / (kt * kh * kw * c_in))
        kernel = rng.uniform(-bound, bound, size=(kt, kh, kw, c_in, c_out))
        scale = rng.uniform(0.5, 1.5, size=c_out)
        shift = rng.uniform(-0.1, 0.1, size=c_out)
        stages.append(StageWeights(kernel, scale, shift))
        c_in = c_out

    channels = config.stage_channels[config.nonlocal_stage]
    inner = max(channels // 2, 1)
    bound_in = math.sqrt(6.0 / channels)
    bound_out = math.sqrt(6.0 / inner)
    nl = NonLocalWeights(
        theta=rng.uniform(-bound_in, bound_in, size=(channels, inner)),
        phi=rng.uniform(-bound_in, bound_in, size=(channels, inner)),
        g=rng.uniform(-bound_in, bound_in, size=(channels, inner)),
        out=rng.uniform(-bound_out, bound_out, size=(inner, channels)),
    )
    weights = BackboneWeights(config, stages, nl)
    logger.debug("Initialized backbone seed=%s fingerprint=%s", config.seed, weights.fingerprint[:12])
    return weights


def nonlocal_block(weights: NonLocalWeights, featmap: Tensor) -> Tensor:
    """
    Embedded-Gaussian non-local block with residual connection:
    out = x + W_out (softmax(theta(x) phi(x)^T / sqrt(d)) g(x)) over all positions.
    """
    featmap = as_tensor(featmap, "non-local input")
    if featmap.ndim != 4:
        raise ValueError(f"nonlocal_block expects a (T, H, W, C) map, got shape {featmap.shape}")
    x = featmap.reshape(-1, featmap.shape[3])
    theta = x @ weights.theta
    phi = x @ weights.phi
    g = x @ weights.g
    scale = 1.0 / math.sqrt(weights.inner_dim)
    attended = np.empty_like(g)
    for start in range(0, x.shape[0], ATTENTION_CHUNK):
        stop = start + ATTENTION_CHUNK
        attn = softmax(theta[start:stop] @ phi.T * scale, axis=1)
        attended[start:stop] = attn @ g
    return (x + attended @ weights.out).reshape(featmap.shape)


def forward(weights: BackboneWeights, clip: Tensor) -> Tensor:
    clip = as_tensor(clip, "clip")
    config = weights.config
    t_div = math.prod(config.temporal_strides)
    s_div = math.prod(config.spatial_strides)
    if clip.ndim != 4 or clip.shape[3] != 3:
        raise ValueError(f"backbone expects a (T, H, W, 3) clip, got shape {clip.shape}")
    t, h, w, _ = clip.shape
    if t % t_div or h % s_div or w % s_div:
        raise ValueError(
            f"backbone requires T divisible by {t_div} and H, W divisible by {s_div}; got clip shape {clip.shape}"
        )
    x = clip
    for i, stage in enumerate(weights.stages):
        stride = (config.temporal_strides[i], config.spatial_strides[i], config.spatial_strides[i])
        dilation = (1, config.dilations[i], config.dilations[i])
        x = conv3d(x, stage.kernel, stride=stride, dilation=dilation, padding="same")
        x = relu(frozen_batchnorm(x, stage.bn_scale, stage.bn_shift))
        if i == config.nonlocal_stage:
            x = nonlocal_block(weights.nonlocal_weights, x)
    return x


def actor_feature(weights: BackboneWeights, clip: Tensor, box: Box, crop_size) -> Tensor:
    """Crop the actor tube, run the backbone, pool to a C-vector."""
    crop = crop_resize_clip(clip, box, int(crop_size[0]), int(crop_size[1]))
    return global_avg_pool(forward(weights, crop))


def scene_feature(weights: BackboneWeights, clip: Tensor) -> Tensor:
    """Whole-clip feature through the same weights object as actor_feature."""
    return global_avg_pool(forward(weights, clip))
