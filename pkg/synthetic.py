"""
Deterministic synthetic action-detection benchmark.

Each video shows static actors (textured rectangles) over a textured
background with distractor patches. A class glyph, smaller than one backbone
stride cell, sits at the center of every actor box and decides the label.
With num_scene_textures > 1 the label also depends on the video's background
texture, so actor crops alone cannot recover it.
"""
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Tuple
import cv2
import numpy as np

import config
from config import SyntheticSpec
from dataio import MANIFEST_NAME, Proposal, write_annotations, write_proposals, write_tensors
from evaluator import GroundTruth
from geometry import Box, SIZE_BINS, clip_box, iou
from utils import canonical_float, file_sha256

logger = logging.getLogger(__name__)

PROPOSAL_MIN_IOU = 0.7
# keeps sampled areas away from bin edges so rounding never changes the bin
BIN_MARGIN = 0.02
TEMPLATE_STREAM = 0x7E3A


@dataclass(frozen=True)
class Actor:
    person_id: int
    box: Box
    class_id: int
    glyph_id: int
    color: Tuple[float, float, float]


@dataclass
class SyntheticDataset:
    root: str
    manifest: Dict
    annotations: List[GroundTruth]
    proposals: List[Proposal]


def validate_spec(spec: SyntheticSpec) -> None:
    if spec.num_videos < 1 or spec.video_seconds < 1 or spec.fps < 1:
        raise ValueError(f"num_videos, video_seconds and fps must be >= 1: {spec}")
    if spec.num_scene_textures < 1 or spec.num_classes % spec.num_scene_textures:
        raise ValueError(
            f"num_classes ({spec.num_classes}) must be a multiple of num_scene_textures ({spec.num_scene_textures})"
        )
    if len(spec.box_size_distribution) != len(SIZE_BINS) or sum(spec.box_size_distribution) <= 0:
        raise ValueError(f"box_size_distribution needs {len(SIZE_BINS)} nonnegative weights")
    lo, hi = spec.actors_per_frame_range
    if not 1 <= lo <= hi:
        raise ValueError(f"actors_per_frame_range must satisfy 1 <= lo <= hi, got {spec.actors_per_frame_range}")
    if spec.glyph_size < 1:
        raise ValueError(f"glyph_size must be >= 1, got {spec.glyph_size}")
    # the glyph must fit strictly inside the smallest box the mix can produce
    for weight, (lower, upper) in zip(spec.box_size_distribution, _bin_ranges()):
        if weight > 0 and _min_area(spec) * (1 + BIN_MARGIN) >= upper * (1 - BIN_MARGIN):
            raise ValueError(
                f"glyph_size {spec.glyph_size} does not fit inside the boxes of the size bin ending at {upper}"
            )


def _bin_ranges() -> List[Tuple[float, float]]:
    ranges, lower = [], 0.0
    for _, upper, _ in SIZE_BINS:
        ranges.append((lower, upper))
        lower = upper
    return ranges


def _min_side(spec: SyntheticSpec) -> Tuple[float, float]:
    """Smallest normalized box width/height: glyph plus a one-pixel border."""
    side = spec.glyph_size + 2
    return side / spec.frame_w, side / spec.frame_h


def _min_area(spec: SyntheticSpec) -> float:
    w, h = _min_side(spec)
    return w * h


def glyph_templates(spec: SyntheticSpec) -> np.ndarray:
    """(num_glyphs, g, g, 3) pairwise-distinct two-color patterns."""
    rng = np.random.default_rng([spec.seed, TEMPLATE_STREAM])
    num_glyphs = spec.num_classes // spec.num_scene_textures
    g = spec.glyph_size
    templates, seen = [], set()
    while len(templates) < num_glyphs:
        mask = rng.random((g, g)) < 0.5
        if mask.tobytes() in seen or mask.all() or not mask.any():
            continue
        seen.add(mask.tobytes())
        ink = rng.uniform(0.0, 0.2, size=3)
        blank = rng.uniform(0.8, 1.0, size=3)
        templates.append(np.where(mask[:, :, None], ink, blank))
    return np.stack(templates)


def _scene_texture(spec: SyntheticSpec, scene_type: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.frame_h, spec.frame_w
    coarse = rng.uniform(0.25, 0.75, size=(max(h // 8, 2), max(w // 8, 2), 3))
    base = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    if spec.num_scene_textures > 1:
        angle = math.pi * scene_type / spec.num_scene_textures
        yy, xx = np.mgrid[0:h, 0:w]
        stripes = np.sin(2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / 8.0)
        base = base + 0.25 * stripes[:, :, None]
    return np.clip(base, 0.0, 1.0)


def _sample_box(spec: SyntheticSpec, bin_index: int, rng: np.random.Generator) -> Box:
    lower, upper = _bin_ranges()[bin_index]
    area = rng.uniform(max(lower, _min_area(spec)) * (1 + BIN_MARGIN), upper * (1 - BIN_MARGIN))
    min_w, min_h = _min_side(spec)
    # people are taller than wide
    ratio = rng.uniform(1.0, 2.0) * spec.frame_w / spec.frame_h
    w = math.sqrt(area / ratio)
    h = area / w
    if h > 1.0:
        h, w = 1.0, area
    if w > 1.0:
        w, h = 1.0, area
    if w < min_w:
        w, h = min_w, area / min_w
    if h < min_h:
        h, w = min_h, area / min_h
    x1 = canonical_float(rng.uniform(0.0, 1.0 - w))
    y1 = canonical_float(rng.uniform(0.0, 1.0 - h))
    return Box(x1, y1, min(canonical_float(x1 + w), 1.0), min(canonical_float(y1 + h), 1.0))


def _glyph_origin(spec: SyntheticSpec, box: Box) -> Tuple[int, int]:
    """Top-left pixel of the glyph, centered in the box."""
    cy = (box.y1 + box.y2) / 2.0 * spec.frame_h
    cx = (box.x1 + box.x2) / 2.0 * spec.frame_w
    return int(math.floor(cy - spec.glyph_size / 2.0)), int(math.floor(cx - spec.glyph_size / 2.0))


def _pixel_rect(spec: SyntheticSpec, box: Box) -> Tuple[int, int, int, int]:
    return (
        int(math.floor(box.y1 * spec.frame_h)), int(math.ceil(box.y2 * spec.frame_h)),
        int(math.floor(box.x1 * spec.frame_w)), int(math.ceil(box.x2 * spec.frame_w)),
    )


def _place_actors(spec: SyntheticSpec, scene_type: int, rng: np.random.Generator) -> List[Actor]:
    lo, hi = spec.actors_per_frame_range
    count = int(rng.integers(lo, hi + 1))
    weights = np.asarray(spec.box_size_distribution, dtype=np.float64)
    weights = weights / weights.sum()
    num_glyphs = spec.num_classes // spec.num_scene_textures
    g = spec.glyph_size
    actors, glyph_rects = [], []
    for person_id in range(count):
        for _ in range(100):
            box = _sample_box(spec, int(rng.choice(len(weights), p=weights)), rng)
            top, left = _glyph_origin(spec, box)
            rect = (top, left, top + g, left + g)
            if all(rect[2] <= r[0] or r[2] <= rect[0] or rect[3] <= r[1] or r[3] <= rect[1] for r in glyph_rects):
                break
        else:
            raise ValueError(f"could not place {count} actors without overlapping glyphs; lower actors_per_frame_range")
        glyph_rects.append(rect)
        glyph_id = int(rng.integers(num_glyphs))
        actors.append(Actor(
            person_id=person_id,
            box=box,
            class_id=glyph_id * spec.num_scene_textures + scene_type,
            glyph_id=glyph_id,
            color=tuple(float(c) for c in rng.uniform(0.2, 0.8, size=3)),
        ))
    return actors


def render_video(spec: SyntheticSpec, actors: List[Actor], scene_type: int, templates: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    num_frames = spec.video_seconds * spec.fps
    background = _scene_texture(spec, scene_type, rng)
    for _ in range(int(rng.integers(2, 5))):
        # distractor patches: plain colored blocks roughly glyph-sized
        size = int(rng.integers(spec.glyph_size, 2 * spec.glyph_size + 1))
        top = int(rng.integers(0, max(spec.frame_h - size, 1)))
        left = int(rng.integers(0, max(spec.frame_w - size, 1)))
        background[top:top + size, left:left + size] = rng.uniform(0.0, 1.0, size=3)

    frames = np.empty((num_frames, spec.frame_h, spec.frame_w, 3), dtype=np.float64)
    by_area = sorted(actors, key=lambda a: -a.box.area)
    g = spec.glyph_size
    for i in range(num_frames):
        frame = background + rng.normal(0.0, 0.02, size=background.shape)
        for actor in by_area:
            y0, y1, x0, x1 = _pixel_rect(spec, actor.box)
            patch = frame[y0:y1, x0:x1]
            frame[y0:y1, x0:x1] = np.asarray(actor.color) + rng.normal(0.0, 0.05, size=patch.shape)
        frame = np.clip(frame, 0.0, 1.0)
        for actor in actors:
            top, left = _glyph_origin(spec, actor.box)
            frame[top:top + g, left:left + g] = templates[actor.glyph_id]
        frames[i] = frame
    return frames


def jitter_proposal(gt_box: Box, rng: np.random.Generator, min_iou: float = PROPOSAL_MIN_IOU) -> Box:
    for _ in range(20):
        dx1, dx2 = rng.normal(0.0, 0.04, size=2) * gt_box.width
        dy1, dy2 = rng.normal(0.0, 0.04, size=2) * gt_box.height
        try:
            box = clip_box(Box(gt_box.x1 + dx1, gt_box.y1 + dy1, gt_box.x2 + dx2, gt_box.y2 + dy2))
            box = Box(*(canonical_float(c) for c in box.as_tuple()))
        except ValueError:
            continue
        if iou(box, gt_box) >= min_iou:
            return box
    return gt_box


def _generate_video(spec: SyntheticSpec, index: int, templates: np.ndarray):
    rng = np.random.default_rng([spec.seed, index])
    video_id = f"vid{index:04d}"
    scene_type = int(rng.integers(spec.num_scene_textures))
    actors = _place_actors(spec, scene_type, rng)
    frames = render_video(spec, actors, scene_type, templates, rng)
    annotations, proposals = [], []
    for t in range(spec.video_seconds):
        for actor in actors:
            annotations.append(GroundTruth(video_id, t, actor.box, frozenset({actor.class_id}), actor.person_id))
            score = canonical_float(rng.uniform(0.7, 1.0))
            proposals.append(Proposal(video_id, t, jitter_proposal(actor.box, rng), score))
    return video_id, frames, actors, annotations, proposals


def generate_synthetic(spec: SyntheticSpec, out_dir: str, num_workers: int = None) -> SyntheticDataset:
    """Render the benchmark under out_dir; identical output for identical spec."""
    validate_spec(spec)
    num_workers = num_workers or config.NUM_WORKERS
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)
    templates = glyph_templates(spec)
    logger.info("Generating %d synthetic videos into %s", spec.num_videos, out_dir)

    def build(index):
        video_id, frames, actors, annotations, proposals = _generate_video(spec, index, templates)
        rel_path = os.path.join("videos", f"{video_id}.crcn")
        path = os.path.join(out_dir, rel_path)
        write_tensors(path, {"frames": frames})
        entry = {"video_id": video_id, "path": rel_path, "num_frames": int(frames.shape[0]),
                 "sha256": file_sha256(path)}
        logger.debug("Rendered %s with %d actors", video_id, len(actors))
        return entry, annotations, proposals

    with ThreadPoolExecutor(max_workers=max(num_workers, 1)) as pool:
        results = list(pool.map(build, range(spec.num_videos)))

    entries = [entry for entry, _, _ in results]
    annotations = [gt for _, gts, _ in results for gt in gts]
    proposals = [p for _, _, props in results for p in props]
    write_annotations(os.path.join(out_dir, "annotations.csv"), annotations)
    write_proposals(os.path.join(out_dir, "proposals.csv"), proposals)

    manifest = {
        "version": 1,
        "spec": json.loads(json.dumps(asdict(spec))),
        "fps": spec.fps,
        "frame_h": spec.frame_h,
        "frame_w": spec.frame_w,
        "num_classes": spec.num_classes,
        "videos": entries,
        "annotations": "annotations.csv",
        "proposals": "proposals.csv",
        "annotations_sha256": file_sha256(os.path.join(out_dir, "annotations.csv")),
        "proposals_sha256": file_sha256(os.path.join(out_dir, "proposals.csv")),
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    logger.info("Synthetic dataset ready: %d videos, %d annotations, %d proposals",
                len(entries), len(annotations), len(proposals))
    return SyntheticDataset(out_dir, manifest, annotations, proposals)


def load_synthetic_spec(path: str) -> SyntheticSpec:
    with open(path, "r", encoding="utf-8") as f:
        values = json.load(f)
    if not isinstance(values, dict):
        raise ValueError(f"Synthetic spec {path} must be a JSON object")
    unknown = sorted(set(values) - {f.name for f in fields(SyntheticSpec)})
    if unknown:
        raise ValueError(f"Unknown SyntheticSpec keys: {unknown}")
    return config.override(SyntheticSpec(), **{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
