"""
Frame-level detection evaluation: per-class AP at an IoU threshold, mAP over
classes with ground truth, and size/actor-count binned breakdowns.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple
import numpy as np

from geometry import Box, SIZE_BIN_NAMES, iou, size_bin

logger = logging.getLogger(__name__)

# Inclusive ground-truth actor-count bins per key frame.
COUNT_BINS = ((1, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 37))
COUNT_BIN_NAMES = tuple(f"[{lo},{hi}]" for lo, hi in COUNT_BINS)

Frame = Tuple[str, int]


@dataclass(frozen=True)
class Detection:
    video_id: str
    timestamp: int
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")

    @property
    def frame(self) -> Frame:
        return (self.video_id, self.timestamp)


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    timestamp: int
    box: Box
    class_ids: FrozenSet[int]
    person_id: int

    def __post_init__(self):
        if not self.class_ids:
            raise ValueError(f"ground truth for person {self.person_id} has no labels")

    @property
    def frame(self) -> Frame:
        return (self.video_id, self.timestamp)


def _score_order(det: Detection):
    return (-det.score, det.box.as_tuple())


def match_frame(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
                iou_thr: float = 0.5) -> List[Tuple[Detection, bool]]:
    """
    Greedy matching for one frame and class in descending score order. Each
    detection takes its best-IoU ground truth among those still unmatched;
    it is a true positive when that IoU reaches iou_thr.
    """
    candidates = [gt for gt in gts if class_id in gt.class_ids]
    matched = [False] * len(candidates)
    results = []
    for det in sorted((d for d in dets if d.class_id == class_id), key=_score_order):
        best, best_iou = -1, -1.0
        for j, gt in enumerate(candidates):
            if matched[j]:
                continue
            overlap = iou(det.box, gt.box)
            if overlap > best_iou:
                best, best_iou = j, overlap
        is_tp = best >= 0 and best_iou >= iou_thr
        if is_tp:
            matched[best] = True
        results.append((det, is_tp))
    return results


def average_precision(tp_fp_scored: Sequence[Tuple[float, bool]], num_gt: int) -> float:
    """All-points interpolated AP: area under the monotone precision envelope."""
    if num_gt <= 0:
        raise ValueError("average_precision requires at least one ground truth; exclude the class upstream")
    if not tp_fp_scored:
        return 0.0
    order = sorted(range(len(tp_fp_scored)), key=lambda i: -tp_fp_scored[i][0])
    hits = np.array([1.0 if tp_fp_scored[i][1] else 0.0 for i in order])
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _by_frame(items) -> Dict[Frame, list]:
    grouped = defaultdict(list)
    for item in items:
        grouped[item.frame].append(item)
    return grouped


def class_ap_inputs(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
                    iou_thr: float = 0.5) -> Tuple[List[Tuple[float, bool]], int]:
    det_frames = _by_frame(d for d in dets if d.class_id == class_id)
    gt_frames = _by_frame(g for g in gts if class_id in g.class_ids)
    scored = []
    for frame in sorted(set(det_frames) | set(gt_frames)):
        for det, is_tp in match_frame(det_frames.get(frame, []), gt_frames.get(frame, []), class_id, iou_thr):
            scored.append((det.score, is_tp))
    num_gt = sum(len(v) for v in gt_frames.values())
    return scored, num_gt


def frame_map(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_ids: Optional[Iterable[int]] = None,
              iou_thr: float = 0.5) -> Tuple[float, Dict[int, float]]:
    """mAP over the classes (optionally restricted to class_ids) that have ground truth."""
    with_gt = sorted({c for g in gts for c in g.class_ids})
    if class_ids is not None:
        allowed = set(class_ids)
        with_gt = [c for c in with_gt if c in allowed]
    if not with_gt:
        raise ValueError("no class has ground truth to evaluate")
    per_class = {}
    for c in with_gt:
        scored, num_gt = class_ap_inputs(dets, gts, c, iou_thr)
        per_class[c] = average_precision(scored, num_gt)
    return float(np.mean([per_class[c] for c in with_gt])), per_class


def _count_bin(count: int, frame: Frame) -> Optional[str]:
    if count < 1:
        return None
    for name, (lo, hi) in zip(COUNT_BIN_NAMES, COUNT_BINS):
        if lo <= count <= hi:
            return name
    logger.warning("Frame %s has %d ground-truth actors; assigning it to bin %s", frame, count, COUNT_BIN_NAMES[-1])
    return COUNT_BIN_NAMES[-1]


def binned_map(dets: Sequence[Detection], gts: Sequence[GroundTruth], binning: str = "size",
               class_ids: Optional[Iterable[int]] = None, iou_thr: float = 0.5) -> Dict[str, float]:
    """
    Split detections and ground truth into bins and run frame_map per bin.
    Size binning uses each box's own area; count binning uses the frame's
    ground-truth actor count. Bins without ground truth are left out.
    """
    det_bins, gt_bins = defaultdict(list), defaultdict(list)
    if binning == "size":
        names = SIZE_BIN_NAMES
        for det in dets:
            det_bins[size_bin(det.box)].append(det)
        for gt in gts:
            gt_bins[size_bin(gt.box)].append(gt)
    elif binning == "count":
        names = COUNT_BIN_NAMES
        gt_frames = _by_frame(gts)
        frame_bin = {frame: _count_bin(len(items), frame) for frame, items in gt_frames.items()}
        for gt in gts:
            gt_bins[frame_bin[gt.frame]].append(gt)
        skipped = 0
        for det in dets:
            name = frame_bin.get(det.frame)
            if name is None:
                skipped += 1
                continue
            det_bins[name].append(det)
        if skipped:
            logger.info("Count binning left out %d detections on frames without ground truth", skipped)
    else:
        raise ValueError(f"binning must be 'size' or 'count', got {binning!r}")

    results = {}
    for name in names:
        if not gt_bins.get(name):
            logger.debug("Bin %s has no ground truth; skipped", name)
            continue
        try:
            results[name], _ = frame_map(det_bins.get(name, []), gt_bins[name], class_ids, iou_thr)
        except ValueError:
            logger.warning("Bin %s has no ground truth in the evaluated classes; skipped", name)
    return results


def compare_per_class(ap_base: Dict[int, float], ap_new: Dict[int, float], gt_counts: Dict[int, int],
                      top_k: int = 5) -> Dict[str, list]:
    """
    Per-class comparison of two methods: classes ordered by ground-truth count,
    the top_k largest absolute and relative AP increases, and the classes that
    got worse.
    """
    shared = [c for c in ap_base if c in ap_new]
    ordered = sorted(shared, key=lambda c: (-gt_counts.get(c, 0), c))
    delta = {c: ap_new[c] - ap_base[c] for c in shared}
    relative = {c: delta[c] / ap_base[c] if ap_base[c] > 0 else float("inf") if delta[c] > 0 else 0.0
                for c in shared}
    gains = [c for c in shared if delta[c] > 0]
    return {
        "classes": ordered,
        "largest_absolute": sorted(gains, key=lambda c: (-delta[c], c))[:top_k],
        "largest_relative": sorted(gains, key=lambda c: (-relative[c], c))[:top_k],
        "decreased": sorted((c for c in shared if delta[c] < 0), key=lambda c: (delta[c], c)),
    }
