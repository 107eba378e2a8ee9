"""
Long-term feature bank and the simplified LFB operation.

The bank stores raw C-dim actor features keyed by (video_id, second). The LFB
operation reduces actor and bank features to 512 dims, then chains simplified
blocks: each adds one shared summary, ReLU(LayerNorm(mean_j g(bank_j))), to
every query.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple
import numpy as np

from config import LfbConfig
from tensor_core import Tensor, layer_norm, linear, relu

logger = logging.getLogger(__name__)


class FeatureBank:
    """
    Time-indexed store of per-actor features. Single writer until ``seal()``;
    afterwards read-only.
    """
    def __init__(self) -> None:
        self._entries: Dict[Tuple[str, int], Dict[int, Tensor]] = defaultdict(dict)
        self.dim: Optional[int] = None
        self.sealed = False

    def add(self, video_id: str, timestamp: int, person_id: int, feature: Tensor) -> None:
        if self.sealed:
            raise ValueError("FeatureBank is sealed; no further entries may be added")
        feature = np.asarray(feature, dtype=np.float64)
        if feature.ndim != 1:
            raise ValueError(f"bank features must be vectors, got shape {feature.shape}")
        if self.dim is None:
            self.dim = feature.shape[0]
        elif feature.shape[0] != self.dim:
            raise ValueError(f"bank feature dimension {feature.shape[0]} differs from bank dimension {self.dim}")
        self._entries[(video_id, int(timestamp))][int(person_id)] = feature

    def seal(self) -> "FeatureBank":
        self.sealed = True
        return self

    def __len__(self) -> int:
        return sum(len(people) for people in self._entries.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBank) or len(self) != len(other):
            return False
        return all(
            a[:3] == b[:3] and np.array_equal(a[3], b[3])
            for a, b in zip(self.entries(), other.entries())
        )

    def entries(self) -> Iterator[Tuple[str, int, int, Tensor]]:
        """All entries ordered by (video_id, timestamp, person_id)."""
        for key in sorted(self._entries):
            for person_id in sorted(self._entries[key]):
                yield key[0], key[1], person_id, self._entries[key][person_id]

    def timestamps(self, video_id: str) -> List[int]:
        return sorted(ts for vid, ts in self._entries if vid == video_id)

    def at(self, video_id: str, timestamp: int) -> List[Tuple[int, Tensor]]:
        people = self._entries.get((video_id, int(timestamp)), {})
        return [(pid, people[pid]) for pid in sorted(people)]


def window_features(bank: FeatureBank, video_id: str, t: int, window_seconds: int = 61) -> List[Tensor]:
    """Features with timestamps in [t - w//2, t + w//2], ordered by (timestamp, person_id)."""
    if window_seconds < 1 or window_seconds % 2 == 0:
        raise ValueError(f"window_seconds must be a positive odd integer, got {window_seconds}")
    half = window_seconds // 2
    found = []
    for ts in bank.timestamps(video_id):
        if t - half <= ts <= t + half:
            found.extend(feature for _, feature in bank.at(video_id, ts))
    return found


@dataclass(frozen=True)
class Linear:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class LfbParams:
    reduce_actor: Linear
    reduce_bank: Linear
    block_maps: Tuple[Linear, ...]
    dropout_rate: float = 0.2
    window_seconds: int = 61

    def __post_init__(self):
        if len(self.block_maps) != 3:
            raise ValueError(f"the LFB operation uses exactly 3 blocks, got {len(self.block_maps)}")
        if self.window_seconds % 2 == 0:
            raise ValueError(f"window_seconds must be odd, got {self.window_seconds}")

    @property
    def dim(self) -> int:
        return self.reduce_actor.weight.shape[1]


def _random_linear(rng: np.random.Generator, dim_in: int, dim_out: int) -> Linear:
    bound = math.sqrt(6.0 / dim_in)
    return Linear(rng.uniform(-bound, bound, size=(dim_in, dim_out)), np.zeros(dim_out))


def init_lfb_params(dim_in: int, config: LfbConfig = LfbConfig()) -> LfbParams:
    rng = np.random.default_rng(config.seed)
    return LfbParams(
        reduce_actor=_random_linear(rng, dim_in, config.dim),
        reduce_bank=_random_linear(rng, dim_in, config.dim),
        block_maps=tuple(_random_linear(rng, config.dim, config.dim) for _ in range(config.num_blocks)),
        dropout_rate=config.dropout_rate,
        window_seconds=config.window_seconds,
    )


def simplified_lfb_block(short: Tensor, bank_reduced: Tensor, g: Linear) -> Tensor:
    """
    Average pooling instead of softmax attention, and no trailing linear layer.
    An empty bank leaves the short-term features unchanged.
    """
    short = np.asarray(short, dtype=np.float64)
    bank_reduced = np.asarray(bank_reduced, dtype=np.float64).reshape(-1, short.shape[-1])
    if bank_reduced.shape[0] == 0:
        return short.copy()
    summary = g(bank_reduced).mean(axis=0)
    return short + relu(layer_norm(summary))


def _dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0)


def long_term_feature(params: LfbParams, actor_feats: Tensor, bank: FeatureBank, video_id: str, t: int,
                      training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """One 512-dim long-term feature per actor; dropout only when training."""
    actor_feats = np.atleast_2d(np.asarray(actor_feats, dtype=np.float64))
    if actor_feats.shape[0] == 0:
        raise ValueError("long_term_feature requires at least one actor feature")
    window = window_features(bank, video_id, t, params.window_seconds)
    short = params.reduce_actor(actor_feats)
    if window:
        long = params.reduce_bank(np.stack(window))
    else:
        long = np.zeros((0, params.dim))
    if training:
        if rng is None:
            raise ValueError("long_term_feature needs an explicit rng when training")
        short = _dropout(short, params.dropout_rate, rng)
        long = _dropout(long, params.dropout_rate, rng)
    for g in params.block_maps:
        short = simplified_lfb_block(short, long, g)
    return short
