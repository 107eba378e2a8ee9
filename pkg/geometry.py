"""
Box algebra and the two region-feature extractors.

Both resamplers share one sample-point convention: cell (i, j) of an n x m grid
over a box samples at the cell center, in pixel units where pixel k covers
[k, k+1) and has its center at k + 0.5. Bilinear neighbors more than one pixel
outside the map contribute nothing; points inside that fringe clamp to the
edge pixel.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple
import cv2
import numpy as np

from tensor_core import Tensor, as_tensor

logger = logging.getLogger(__name__)

# (name, upper bound of the area fraction, label) for left-open, right-closed bins.
SIZE_BINS = (
    ("XS", 0.0811, "XS (0, 8.11%]"),
    ("S", 0.1711, "S (8.11%, 17.11%]"),
    ("M", 0.2924, "M (17.11%, 29.24%]"),
    ("L", 0.472, "L (29.24%, 47.2%]"),
    ("XL", 1.0, "XL (47.2%, 100.0%]"),
)
SIZE_BIN_NAMES = tuple(name for name, _, _ in SIZE_BINS)
SIZE_BIN_LABELS = {name: label for name, _, label in SIZE_BINS}


@dataclass(frozen=True)
class Box:
    """Normalized box; x grows rightward, y grows downward."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"Box requires x1 < x2 and y1 < y2, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def is_normalized(self) -> bool:
        return 0.0 <= self.x1 and 0.0 <= self.y1 and self.x2 <= 1.0 and self.y2 <= 1.0


def clip_box(box: Box) -> Box:
    """Crop the box to the image; raises if nothing of it lies inside."""
    return Box(
        min(max(box.x1, 0.0), 1.0),
        min(max(box.y1, 0.0), 1.0),
        min(max(box.x2, 0.0), 1.0),
        min(max(box.y2, 0.0), 1.0),
    )


def expand_box(box: Box, scale: float) -> Box:
    """Scale width and height about the center by one shared factor, then clip."""
    if scale < 1.0:
        raise ValueError(f"expand_box scale must be >= 1, got {scale}")
    if scale == 1.0:
        return clip_box(box)
    cx = (box.x1 + box.x2) / 2.0
    cy = (box.y1 + box.y2) / 2.0
    half_w = box.width * scale / 2.0
    half_h = box.height * scale / 2.0
    return clip_box(Box(cx - half_w, cy - half_h, cx + half_w, cy + half_h))


def flip_box(box: Box) -> Box:
    """Horizontal mirror in normalized coordinates."""
    return Box(1.0 - box.x2, box.y1, 1.0 - box.x1, box.y2)


def flip_clip(clip: Tensor) -> Tensor:
    return np.ascontiguousarray(np.asarray(clip)[:, :, ::-1, :])


def augment_box(box: Box, max_scale: float, rng: np.random.Generator) -> Tuple[Box, bool]:
    """
    Training-time box augmentation: a scale drawn uniformly from [1, max_scale]
    and a horizontal flip with probability 0.5. The caller flips the clip when
    the returned flag is set.
    """
    if max_scale < 1.0:
        raise ValueError(f"max_scale must be >= 1, got {max_scale}")
    scale = rng.uniform(1.0, max_scale) if max_scale > 1.0 else 1.0
    flipped = bool(rng.random() < 0.5)
    out = expand_box(box, scale)
    return (flip_box(out) if flipped else out), flipped


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def size_bin(box: Box) -> str:
    area = box.area
    if area <= 0.0:
        raise ValueError(f"size_bin requires a positive area, got box {box.as_tuple()}")
    for name, upper, _ in SIZE_BINS:
        if area <= upper:
            return name
    # area fractions above 1 only come from unclipped boxes
    return SIZE_BINS[-1][0]


def _sample_coords(lo: float, hi: float, size: int, cells: int, sub: int) -> np.ndarray:
    """Index-space sample coordinates, cell-major, `sub` points per cell."""
    steps = (np.arange(cells)[:, None] + (np.arange(sub)[None, :] + 0.5) / sub) / cells
    continuous = (lo + steps.reshape(-1) * (hi - lo)) * size
    return continuous - 0.5


def _interp_matrix(coords: np.ndarray, size: int) -> np.ndarray:
    """Rows of 1D bilinear weights over `size` source pixels."""
    valid = (coords >= -1.0) & (coords <= size)
    q = np.clip(coords, 0.0, size - 1)
    low = np.minimum(np.floor(q).astype(np.int64), size - 1)
    high = np.minimum(low + 1, size - 1)
    frac = q - low
    weights = np.zeros((coords.shape[0], size), dtype=np.float64)
    rows = np.arange(coords.shape[0])
    np.add.at(weights, (rows, low), np.where(valid, 1.0 - frac, 0.0))
    np.add.at(weights, (rows, high), np.where(valid, frac, 0.0))
    return weights


def crop_resize_clip(clip: Tensor, box: Box, out_h: int, out_w: int) -> Tensor:
    """
    Crop the replicated box from every frame and resample it bilinearly onto an
    out_h x out_w grid. Returns (T, out_h, out_w, C).
    """
    clip = as_tensor(clip, "clip")
    if clip.ndim != 4:
        raise ValueError(f"crop_resize_clip expects a (T, H, W, C) clip, got shape {clip.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {out_h}x{out_w}")
    box = clip_box(box)
    _, height, width, _ = clip.shape
    if box.width * width < 1.0 or box.height * height < 1.0:
        raise ValueError(
            f"box {box.as_tuple()} covers less than one source pixel on a {height}x{width} frame"
        )
    wy = _interp_matrix(_sample_coords(box.y1, box.y2, height, out_h, 1), height)
    wx = _interp_matrix(_sample_coords(box.x1, box.x2, width, out_w, 1), width)
    return np.einsum("yh,thwc,xw->tyxc", wy, clip, wx, optimize=True)


def roi_align(featmap: Tensor, box: Box, out_h: int, out_w: int, sampling_ratio: int = 2) -> Tensor:
    """
    RoIAlign over a (Hf, Wf, C) map: each output cell averages
    sampling_ratio^2 bilinear samples, with no coordinate rounding.
    """
    featmap = as_tensor(featmap, "featmap")
    if featmap.ndim != 3:
        raise ValueError(f"roi_align expects a (H, W, C) feature map, got shape {featmap.shape}")
    if out_h < 1 or out_w < 1 or sampling_ratio < 1:
        raise ValueError(f"invalid roi_align grid {out_h}x{out_w} with sampling ratio {sampling_ratio}")
    height, width, channels = featmap.shape
    wy = _interp_matrix(_sample_coords(box.y1, box.y2, height, out_h, sampling_ratio), height)
    wx = _interp_matrix(_sample_coords(box.x1, box.x2, width, out_w, sampling_ratio), width)
    samples = np.einsum("yh,hwc,xw->yxc", wy, featmap, wx, optimize=True)
    return samples.reshape(out_h, sampling_ratio, out_w, sampling_ratio, channels).mean(axis=(1, 3))


def roi_pool_3d(featmap: Tensor, box: Box, roi_out: Tuple[int, int] = (7, 7), sampling_ratio: int = 2) -> Tensor:
    """Temporal mean, then RoIAlign, then per-channel spatial max."""
    featmap = as_tensor(featmap, "featmap")
    if featmap.ndim != 4:
        raise ValueError(f"roi_pool_3d expects a (T, H, W, C) feature map, got shape {featmap.shape}")
    pooled = roi_align(featmap.mean(axis=0), box, roi_out[0], roi_out[1], sampling_ratio)
    return pooled.max(axis=(0, 1))


def resize_scene_clip(clip: Tensor, size: int, interpolation: Optional[int] = None,
                      center_crop: bool = False, multiple: int = 16) -> Tensor:
    """
    Rescale the short side to `size`, keeping the whole frame.

    Without `center_crop` the long side is rounded to a multiple of `multiple` so
    the backbone tiles it exactly; normalized boxes then map onto the result
    unchanged. With `center_crop` the centered size x size window is returned.
    """
    clip = as_tensor(clip, "clip")
    if size < 1 or multiple < 1:
        raise ValueError(f"size and multiple must be positive, got {size} and {multiple}")
    _, height, width, _ = clip.shape
    factor = size / min(height, width)
    if center_crop:
        new_h = max(size, int(round(height * factor)))
        new_w = max(size, int(round(width * factor)))
    else:
        new_h = max(multiple, int(round(height * factor / multiple)) * multiple)
        new_w = max(multiple, int(round(width * factor / multiple)) * multiple)
    if (new_h, new_w) == (height, width):
        resized = clip
    else:
        interpolation = cv2.INTER_LINEAR if interpolation is None else interpolation
        frames = [cv2.resize(frame, (new_w, new_h), interpolation=interpolation) for frame in clip]
        resized = np.stack(frames).reshape(clip.shape[0], new_h, new_w, clip.shape[3])
    if not center_crop:
        return resized
    top = (new_h - size) // 2
    left = (new_w - size) // 2
    return np.ascontiguousarray(resized[:, top:top + size, left:left + size, :])
